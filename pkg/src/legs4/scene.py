"""Dynamic Gaussian scene model: per-timestep splat sets plus pinhole cameras.

Scene objects are immutable once constructed (arrays are frozen); every
operation that changes a scene returns a new one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .blobs import read_blob, write_blob


class SceneValidationError(ValueError):
    """Invariant violation; the message names the offending field."""


def _freeze(arr: np.ndarray, dtype=np.float32) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. Pixel (i, j) covers [j, j+1) x [i, i+1); principal
    point lives in [0, W) x [0, H)."""

    cam_id: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_cam: np.ndarray  # 4x4 rigid, row-major

    def __post_init__(self):
        object.__setattr__(self, "world_to_cam", _freeze(self.world_to_cam, np.float64))
        validate_camera(self)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def cam_to_world(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation.T
        out[:3, 3] = self.position
        return out

    def project(self, points_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points (N, 3) -> pixel coords (N, 2) and camera depth (N,)."""
        pts = np.atleast_2d(points_world)
        cam = pts @ self.rotation.T + self.translation
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / z + self.cx
            v = self.fy * cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z


def validate_camera(cam: Camera) -> None:
    if cam.width < 1 or cam.height < 1:
        raise SceneValidationError(f"camera {cam.cam_id}: width/height must be >= 1")
    if not (cam.fx > 0 and cam.fy > 0):
        raise SceneValidationError(f"camera {cam.cam_id}: fx/fy must be positive")
    if not (0 <= cam.cx < cam.width):
        raise SceneValidationError(f"camera {cam.cam_id}: cx out of [0, width)")
    if not (0 <= cam.cy < cam.height):
        raise SceneValidationError(f"camera {cam.cam_id}: cy out of [0, height)")
    m = np.asarray(cam.world_to_cam, dtype=np.float64)
    if m.shape != (4, 4):
        raise SceneValidationError(f"camera {cam.cam_id}: world_to_cam must be 4x4")
    if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-7):
        raise SceneValidationError(f"camera {cam.cam_id}: world_to_cam last row must be [0,0,0,1]")
    r = m[:3, :3]
    if not np.allclose(r @ r.T, np.eye(3), atol=1e-5):
        raise SceneValidationError(f"camera {cam.cam_id}: rotation block not orthonormal")
    if np.linalg.det(r) < 0:
        raise SceneValidationError(f"camera {cam.cam_id}: rotation block not a proper rotation")


def look_at_camera(cam_id: int, position, target, up, width: int, height: int,
                   fx: float, fy: float, cx: Optional[float] = None,
                   cy: Optional[float] = None) -> Camera:
    """Build a camera at `position` whose optical axis passes through `target`.

    `up` is the world direction that should map to the camera's -y (image up).
    """
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("camera position coincides with target")
    fwd = fwd / n
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        # up parallel to the view axis; pick any perpendicular
        alt = np.array([1.0, 0.0, 0.0]) if abs(fwd[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, alt)
        rn = np.linalg.norm(right)
    right /= rn
    down = np.cross(fwd, right)  # camera y points down in image space
    rot = np.stack([right, down, fwd], axis=0)
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = -rot @ position
    return Camera(cam_id=cam_id, width=width, height=height, fx=fx, fy=fy,
                  cx=width / 2.0 if cx is None else cx,
                  cy=height / 2.0 if cy is None else cy,
                  world_to_cam=m)


@dataclass(frozen=True)
class GaussianFrame:
    """One timestep of the scene: M Gaussians with optional latent features."""

    means: np.ndarray        # (M, 3)
    rotations: np.ndarray    # (M, 4) unit quaternions, (w, x, y, z)
    scales: np.ndarray       # (M, 3) positive
    opacities: np.ndarray    # (M,) in [0, 1]
    colors: np.ndarray       # (M, 3) in [0, 1]
    latent_features: Optional[np.ndarray] = None  # (M, d)

    def __post_init__(self):
        for name in ("means", "rotations", "scales", "opacities", "colors"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        if self.latent_features is not None:
            object.__setattr__(self, "latent_features", _freeze(self.latent_features))
        validate_frame(self)

    @property
    def count(self) -> int:
        return self.means.shape[0]

    def with_latents(self, latents: np.ndarray) -> "GaussianFrame":
        return replace(self, latent_features=np.asarray(latents, dtype=np.float32))


def validate_frame(frame: GaussianFrame, label: str = "frame") -> None:
    m = frame.means
    if m.ndim != 2 or m.shape[1] != 3 or m.shape[0] < 1:
        raise SceneValidationError(f"{label}.means must be (M, 3) with M >= 1")
    n = m.shape[0]
    if not np.all(np.isfinite(m)):
        raise SceneValidationError(f"{label}.means contains non-finite values")
    if frame.rotations.shape != (n, 4):
        raise SceneValidationError(f"{label}.rotations must be (M, 4)")
    norms = np.linalg.norm(frame.rotations.astype(np.float64), axis=1)
    bad = np.abs(norms - 1.0) > 1e-4
    if np.any(bad):
        raise SceneValidationError(
            f"{label}.rotations: rotation not unit (row {int(np.argmax(bad))})")
    if frame.scales.shape != (n, 3):
        raise SceneValidationError(f"{label}.scales must be (M, 3)")
    if not np.all(frame.scales > 0):
        raise SceneValidationError(f"{label}.scales must be strictly positive")
    if frame.opacities.shape != (n,):
        raise SceneValidationError(f"{label}.opacities must be (M,)")
    if np.any(frame.opacities < 0) or np.any(frame.opacities > 1):
        raise SceneValidationError(f"{label}.opacities must lie in [0, 1]")
    if frame.colors.shape != (n, 3):
        raise SceneValidationError(f"{label}.colors must be (M, 3)")
    if np.any(frame.colors < 0) or np.any(frame.colors > 1):
        raise SceneValidationError(f"{label}.colors must lie in [0, 1]")
    if frame.latent_features is not None:
        lf = frame.latent_features
        if lf.ndim != 2 or lf.shape[0] != n:
            raise SceneValidationError(f"{label}.latent_features must be (M, d)")
        if not np.all(np.isfinite(lf)):
            raise SceneValidationError(f"{label}.latent_features contains non-finite values")


@dataclass(frozen=True)
class DynamicScene:
    name: str
    frames: Sequence[GaussianFrame]
    cameras: Sequence[Camera]
    latent_dim: int
    fps: float = 10.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "cameras", tuple(self.cameras))
        validate_scene(self)

    @property
    def num_timesteps(self) -> int:
        return len(self.frames)

    @property
    def num_gaussians(self) -> int:
        return self.frames[0].count

    def camera_by_id(self, cam_id: int) -> Camera:
        for cam in self.cameras:
            if cam.cam_id == cam_id:
                return cam
        raise KeyError(f"no camera with id {cam_id}")

    def with_frames(self, frames: Sequence[GaussianFrame]) -> "DynamicScene":
        return replace(self, frames=tuple(frames))


def validate_scene(scene: DynamicScene) -> None:
    if len(scene.frames) < 1:
        raise SceneValidationError("frames: scene must have at least one timestep")
    if len(scene.cameras) < 1:
        raise SceneValidationError("cameras: scene must have at least one camera")
    if scene.latent_dim < 1:
        raise SceneValidationError("latent_dim must be >= 1")
    n = scene.frames[0].count
    for t, frame in enumerate(scene.frames):
        validate_frame(frame, label=f"frames[{t}]")
        if frame.count != n:
            raise SceneValidationError(
                f"frames[{t}]: mismatched frame count ({frame.count} vs {n})")
        if frame.latent_features is not None and frame.latent_features.shape[1] != scene.latent_dim:
            raise SceneValidationError(
                f"frames[{t}].latent_features: dim {frame.latent_features.shape[1]} "
                f"does not match scene latent_dim {scene.latent_dim}")
    ids = [c.cam_id for c in scene.cameras]
    if len(set(ids)) != len(ids):
        raise SceneValidationError("cameras: duplicate camera ids")


_FRAME_FIELDS = ("means", "rotations", "scales", "opacities", "colors")


def camera_to_json(cam: Camera) -> dict:
    return {
        "id": cam.cam_id,
        "width": cam.width,
        "height": cam.height,
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "world_to_cam": [float(x) for x in cam.world_to_cam.reshape(-1)],
    }


def save_scene(scene: DynamicScene, path: str | Path) -> None:
    """Write scene.json plus one blob per frame field. Re-saving the same
    scene produces byte-identical files."""
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    frames_manifest = []
    for t, frame in enumerate(scene.frames):
        entry = {}
        for name in _FRAME_FIELDS:
            rel = f"frames/{name}_{t:04d}.4leg"
            write_blob(root / rel, getattr(frame, name))
            entry[name] = rel
        if frame.latent_features is not None:
            rel = f"frames/latents_{t:04d}.4leg"
            write_blob(root / rel, frame.latent_features)
            entry["latents"] = rel
        frames_manifest.append(entry)
    manifest = {
        "name": scene.name,
        "T": scene.num_timesteps,
        "M": scene.num_gaussians,
        "d": scene.latent_dim,
        "fps": scene.fps,
        "meta": scene.meta,
        "cameras": [camera_to_json(cam) for cam in scene.cameras],
        "frames": frames_manifest,
    }
    (root / "scene.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_scene(path: str | Path) -> DynamicScene:
    root = Path(path)
    manifest_path = root / "scene.json"
    if not manifest_path.exists():
        raise SceneValidationError(f"no scene.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    for key in ("name", "T", "M", "d", "cameras", "frames"):
        if key not in manifest:
            raise SceneValidationError(f"scene.json: missing field '{key}'")
    cameras = []
    for spec in manifest["cameras"]:
        cameras.append(Camera(
            cam_id=int(spec["id"]), width=int(spec["width"]), height=int(spec["height"]),
            fx=float(spec["fx"]), fy=float(spec["fy"]),
            cx=float(spec["cx"]), cy=float(spec["cy"]),
            world_to_cam=np.asarray(spec["world_to_cam"], dtype=np.float64).reshape(4, 4)))
    if len(manifest["frames"]) != manifest["T"]:
        raise SceneValidationError("scene.json: frames list length does not match T")
    frames = []
    for t, entry in enumerate(manifest["frames"]):
        arrays = {}
        for name in _FRAME_FIELDS:
            if name not in entry:
                raise SceneValidationError(f"frames[{t}]: missing blob path for '{name}'")
            arrays[name] = read_blob(root / entry[name])
        latents = read_blob(root / entry["latents"]) if entry.get("latents") else None
        frames.append(GaussianFrame(latent_features=latents, **arrays))
    scene = DynamicScene(
        name=manifest["name"], frames=frames, cameras=cameras,
        latent_dim=int(manifest["d"]), fps=float(manifest.get("fps", 10.0)),
        meta=manifest.get("meta", {}))
    if scene.num_gaussians != manifest["M"]:
        raise SceneValidationError("scene.json: M does not match frame blobs")
    return scene
