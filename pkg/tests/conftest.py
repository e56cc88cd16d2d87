import numpy as np
import pytest

from legs4.scene import Camera, DynamicScene, GaussianFrame, look_at_camera


def random_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return (q / np.linalg.norm(q, axis=1, keepdims=True)).astype(np.float32)


def random_frame(rng: np.random.Generator, m: int, d: int | None = None,
                 spread: float = 1.0, z_range=(2.0, 6.0)) -> GaussianFrame:
    """Gaussians scattered in front of a camera that looks down +z from the origin."""
    means = np.stack([
        rng.uniform(-spread, spread, m),
        rng.uniform(-spread, spread, m),
        rng.uniform(*z_range, m),
    ], axis=1)
    latents = rng.normal(size=(m, d)).astype(np.float32) if d else None
    return GaussianFrame(
        means=means,
        rotations=random_quats(rng, m),
        scales=rng.uniform(0.05, 0.3, (m, 3)),
        opacities=rng.uniform(0.1, 1.0, m),
        colors=rng.uniform(0, 1, (m, 3)),
        latent_features=latents,
    )


def frontal_camera(cam_id: int = 0, size: int = 32, fx: float = 32.0) -> Camera:
    return Camera(cam_id=cam_id, width=size, height=size, fx=fx, fy=fx,
                  cx=size / 2, cy=size / 2, world_to_cam=np.eye(4))


def random_scene(rng: np.random.Generator, m: int = 20, t: int = 3,
                 n_cams: int = 2, d: int = 8, size: int = 32,
                 with_latents: bool = False) -> DynamicScene:
    frames = [random_frame(rng, m, d if with_latents else None) for _ in range(t)]
    cams = [frontal_camera(0, size)]
    for i in range(1, n_cams):
        pos = np.array([0.4 * i, 0.2 * i, -0.5])
        cams.append(look_at_camera(i, pos, [0, 0, 4.0], up=[0, -1, 0],
                                   width=size, height=size, fx=float(size), fy=float(size)))
    return DynamicScene(name=f"rand-{m}", frames=frames, cameras=cams, latent_dim=d)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
