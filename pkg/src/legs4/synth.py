"""Deterministic synthetic dynamic scene with known ground truth.

The world is a gray backdrop sheet plus a compact cluster of Gaussians that
glides across it. The cluster is always present but switches color: it shows
one concept color inside its active interval and the other concept color
outside, so every queried concept has exact ground-truth frames. Per-pixel
ground-truth masks come from rasterizing an indicator channel, text queries
resolve through concept embeddings, and rendered videos get seeded
palette-breaking pixel noise so that multi-scale aggregation and attention
smoothing have measurable work to do.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .blobs import read_blob, write_blob
from .embedders import SyntheticEmbedder
from .raster import TileConfig, render
from .scene import Camera, DynamicScene, GaussianFrame, look_at_camera, save_scene

BACKGROUND = 0
CONCEPT_A = 1  # colored outside the active interval
CONCEPT_B = 2  # colored inside the active interval

PALETTE = np.array([[128, 128, 128],   # backdrop gray
                    [40, 60, 230],     # concept A blue
                    [230, 40, 40]],    # concept B red
                   dtype=np.uint8)

CONCEPT_PHRASES = ("gray backdrop", "a blue cluster gliding", "a red cluster flaring")

# colors at max-channel distance > 40 from every palette entry
NOISE_COLORS = np.array([[40, 230, 40], [230, 230, 40], [230, 40, 230],
                         [40, 230, 230], [250, 250, 250]], dtype=np.uint8)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_gaussians: int = 300
    n_timesteps: int = 30
    n_views: int = 4
    image_size: int = 64
    feature_dim: int = 32
    latent_dim: int = 16
    active_interval: tuple[int, int] = (10, 19)  # inclusive frames of concept B
    seed: int = 0
    noise_fraction: float = 0.12
    camera_distance: float = 7.5
    cluster_radius: float = 2.0
    n_distractors: int = 8
    fps: float = 10.0

    def __post_init__(self):
        if self.n_gaussians < 60:
            raise SynthError("n_gaussians must be at least 60")
        if self.n_timesteps < 1:
            raise SynthError("n_timesteps must be positive")
        if self.n_views < 1 or self.image_size < 16 or self.feature_dim < 4:
            raise SynthError("invalid synthetic dimensions")
        a, b = self.active_interval
        if not 0 <= a <= b < self.n_timesteps:
            raise SynthError("active_interval must fit inside the sequence")
        if not 0.0 <= self.noise_fraction < 0.9:
            raise SynthError("noise_fraction must be in [0, 0.9)")


@dataclass
class SyntheticWorld:
    cfg: SynthConfig
    scene: DynamicScene
    videos: list[np.ndarray]                # per view, (T, H, W, 3) uint8
    concept_embeddings: np.ndarray          # (3, D) orthonormal rows
    palette: np.ndarray                     # (3, 3) uint8
    queries: dict[str, int]                 # phrase -> concept index
    intervals: dict[str, list[tuple[int, int]]]
    masks: dict[str, np.ndarray]            # phrase -> (V, T, H, W) bool
    canonicals: dict[str, list[str]] = field(default_factory=dict)

    def embedding_for(self, phrase: str) -> np.ndarray:
        return self.concept_embeddings[self.queries[phrase]].astype(np.float32)

    def canonical_vectors(self, phrase: str) -> np.ndarray:
        idx = [CONCEPT_PHRASES.index(p) for p in self.canonicals[phrase]]
        return self.concept_embeddings[idx].astype(np.float32)

    def make_embedder(self, input_side: int = 32, tol: int = 40) -> SyntheticEmbedder:
        return _tuned_embedder(self.concept_embeddings, self.palette,
                               seed=self.cfg.seed, input_side=input_side, tol=tol)


def _tuned_embedder(concept_embeddings: np.ndarray, palette: np.ndarray,
                    seed: int, input_side: int = 32, tol: int = 40
                    ) -> SyntheticEmbedder:
    """Concept-salient, scale-selective embedder shared by the in-memory world
    and its on-disk form: objects read only when framed with context."""
    return SyntheticEmbedder(concept_embeddings, palette,
                             seed=seed, input_side=input_side, tol=tol,
                             salience=np.array([1.0, 3.0, 3.0]),
                             edge_penalty=np.array([0.0, 0.65, 0.65]),
                             surface_concept=0)


def embedder_from_world_dir(path: str | Path, input_side: int = 32,
                            tol: int = 40) -> SyntheticEmbedder:
    """Rebuilds the world's embedder from gt.json and the concept blobs."""
    root = Path(path)
    gt_path = root / "gt.json"
    if not gt_path.exists():
        raise SynthError(f"no gt.json under {root}")
    gt = json.loads(gt_path.read_text())
    concepts = [read_blob(root / "embeddings" / f"concept_{i}.4leg")
                for i in range(len(gt["concepts"]))]
    return _tuned_embedder(np.stack(concepts),
                           np.asarray(gt["palette"], dtype=np.uint8),
                           seed=int(gt["seed"]),
                           input_side=input_side, tol=tol)


def concept_basis(dim: int, seed: int) -> np.ndarray:
    """Orthonormal (3, dim) rows, deterministic in the seed."""
    rng = np.random.default_rng(seed + 7919)
    q, r = np.linalg.qr(rng.normal(size=(dim, 3)))
    q = q * np.sign(np.diag(r))[None, :]  # fix QR sign ambiguity
    return q.T


def _cluster_center(t: int, n_timesteps: int) -> np.ndarray:
    u = t / max(n_timesteps - 1, 1)
    return np.array([1.5 * np.cos(np.pi * u), 0.5 * np.sin(2.0 * np.pi * u), 0.0])


def _active(t: int, interval: tuple[int, int]) -> bool:
    return interval[0] <= t <= interval[1]


def _tumble(t: int, n_timesteps: int) -> np.ndarray:
    """Two-axis spin of the cluster; no Gaussian stays on the silhouette rim."""
    u = t / max(n_timesteps - 1, 1)
    a, b = 2.0 * np.pi * u, 4.0 * np.pi * u
    ca, sa, cb, sb = np.cos(a), np.sin(a), np.cos(b), np.sin(b)
    ry = np.array([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cb, -sb], [0.0, sb, cb]])
    return rx @ ry


def _build_cameras(cfg: SynthConfig) -> list[Camera]:
    cams = []
    angles = np.linspace(-24.0, 24.0, cfg.n_views) if cfg.n_views > 1 else np.array([0.0])
    for i, deg in enumerate(angles):
        th = np.deg2rad(deg)
        eye = np.array([cfg.camera_distance * np.sin(th), -0.6,
                        -cfg.camera_distance * np.cos(th)])
        cams.append(look_at_camera(i, eye, (0.0, 0.0, 0.0), (0.0, 1.0, 0.0),
                                   cfg.image_size, cfg.image_size,
                                   fx=float(cfg.image_size), fy=float(cfg.image_size)))
    return cams


def synth_world(cfg: SynthConfig = SynthConfig()) -> SyntheticWorld:
    rng = np.random.default_rng(cfg.seed)
    # backdrop sheet at z=2.5 sized to fill the widest camera frustum corner
    half_x, half_y = 9.2, 7.6
    target = int(round(0.65 * cfg.n_gaussians))
    nx = int(round(np.sqrt(target * half_x / half_y)))
    ny = max(target // max(nx, 1), 2)
    n_back = nx * ny
    n_cluster = cfg.n_gaussians - n_back
    if n_cluster < 20:
        raise SynthError("n_gaussians leaves too few cluster Gaussians")

    gx, gy = np.meshgrid(np.linspace(-half_x, half_x, nx),
                         np.linspace(-half_y, half_y, ny))
    spacing = max(2 * half_x / (nx - 1), 2 * half_y / (ny - 1))
    back_means = np.stack([gx.ravel(), gy.ravel(),
                           2.5 + rng.uniform(-0.05, 0.05, n_back)], axis=1)
    back_scales = np.full((n_back, 3), 0.72 * spacing)

    # small static dots in the cluster colors: color presence alone never
    # localizes anything, the temporal signal has to come from the cluster
    n_distract = min(cfg.n_distractors, n_cluster - 40)
    n_cluster -= n_distract
    corners = np.array([[4.2, 3.6], [-4.2, 3.6], [4.2, -3.6], [-4.2, -3.6],
                        [3.0, 4.4], [-3.0, 4.4], [3.0, -4.4], [-3.0, -4.4]])
    reps = int(np.ceil(n_distract / len(corners)))
    distract_xy = np.tile(corners, (reps, 1))[:n_distract]
    distract_xy = distract_xy + rng.uniform(-0.25, 0.25, size=distract_xy.shape)
    distract_means = np.concatenate(
        [distract_xy, 2.3 + rng.uniform(-0.05, 0.05, (n_distract, 1))], axis=1)
    # small enough that a fine-scale crop contains a dot with margin to spare
    distract_scales = np.full((n_distract, 3), 0.42)

    offs = rng.normal(0.0, 0.38 * cfg.cluster_radius, size=(n_cluster, 3))
    norms = np.linalg.norm(offs, axis=1)
    too_far = norms > 0.95 * cfg.cluster_radius
    offs[too_far] *= (0.95 * cfg.cluster_radius / norms[too_far])[:, None]
    cluster_scales = rng.uniform(0.085, 0.12, size=(n_cluster, 1)) \
        * cfg.cluster_radius * np.ones((1, 3))

    quats = np.zeros((cfg.n_gaussians, 4))
    quats[:, 0] = 1.0
    opacities = np.full(cfg.n_gaussians, 0.95)
    scales = np.concatenate([back_scales, distract_scales, cluster_scales])

    gray = PALETTE[BACKGROUND].astype(np.float64) / 255.0
    blue = PALETTE[CONCEPT_A].astype(np.float64) / 255.0
    red = PALETTE[CONCEPT_B].astype(np.float64) / 255.0
    distract_colors = np.where((np.arange(n_distract) % 2 == 0)[:, None], red, blue)

    frames = []
    for t in range(cfg.n_timesteps):
        spun = offs @ _tumble(t, cfg.n_timesteps).T
        means = np.concatenate([back_means, distract_means,
                                _cluster_center(t, cfg.n_timesteps) + spun])
        cluster_colors = np.tile(
            red if _active(t, cfg.active_interval) else blue, (n_cluster, 1))
        colors = np.concatenate([np.tile(gray, (n_back, 1)), distract_colors,
                                 cluster_colors])
        frames.append(GaussianFrame(means=means, rotations=quats.copy(), scales=scales,
                                    opacities=opacities, colors=colors))

    cameras = _build_cameras(cfg)
    scene = DynamicScene(name=f"synth{cfg.seed}", frames=frames, cameras=cameras,
                         latent_dim=cfg.latent_dim, fps=cfg.fps,
                         meta={"kind": "synthetic", "seed": cfg.seed})

    basis = concept_basis(cfg.feature_dim, cfg.seed)
    cluster_mask = np.zeros(cfg.n_gaussians, dtype=bool)
    cluster_mask[n_back + n_distract:] = True

    a, b = cfg.active_interval
    intervals = {
        CONCEPT_PHRASES[CONCEPT_A]: _complement_intervals(a, b, cfg.n_timesteps),
        CONCEPT_PHRASES[CONCEPT_B]: [(a, b)],
    }
    queries = {CONCEPT_PHRASES[CONCEPT_A]: CONCEPT_A, CONCEPT_PHRASES[CONCEPT_B]: CONCEPT_B}
    canonicals = {
        CONCEPT_PHRASES[CONCEPT_A]: [CONCEPT_PHRASES[BACKGROUND], CONCEPT_PHRASES[CONCEPT_B]],
        CONCEPT_PHRASES[CONCEPT_B]: [CONCEPT_PHRASES[BACKGROUND], CONCEPT_PHRASES[CONCEPT_A]],
    }

    tile = TileConfig()
    videos = [np.empty((cfg.n_timesteps, cfg.image_size, cfg.image_size, 3), np.uint8)
              for _ in cameras]
    masks = {p: np.zeros((len(cameras), cfg.n_timesteps, cfg.image_size, cfg.image_size),
                         dtype=bool) for p in queries}
    noise_rng = np.random.default_rng(cfg.seed + 1)
    for v, cam in enumerate(cameras):
        for t, frame in enumerate(scene.frames):
            out = render(frame, cam, channels=("rgb",), cfg=tile)
            img = np.clip(np.rint(out["rgb"] * 255.0), 0, 255).astype(np.uint8)
            _splat_noise_blobs(img, cfg.noise_fraction, noise_rng)
            videos[v][t] = img

            active_concept = CONCEPT_B if _active(t, cfg.active_interval) else CONCEPT_A
            indicator = cluster_mask.astype(np.float64)[:, None]
            ind = render(frame, cam, channels=("features",), cfg=tile,
                         features_override=indicator)["features"][..., 0]
            masks[CONCEPT_PHRASES[active_concept]][v, t] = ind >= 0.5

    return SyntheticWorld(cfg=cfg, scene=scene, videos=videos,
                          concept_embeddings=basis, palette=PALETTE.copy(),
                          queries=queries, intervals=intervals, masks=masks,
                          canonicals=canonicals)


def _splat_noise_blobs(img: np.ndarray, coverage: float, rng: np.random.Generator) -> None:
    """Paints round palette-breaking blobs over ~`coverage` of the image.

    Blob noise poisons whole small crops while staying a negligible fraction
    of large ones, so multi-scale aggregation has something real to average
    away. Mutates img in place; consumes a deterministic rng stream.
    """
    h, w = img.shape[:2]
    mean_area = np.pi * 3.5 ** 2
    n_blobs = int(round(coverage * h * w / mean_area))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        r = rng.uniform(2.5, 4.5)
        color = NOISE_COLORS[rng.integers(0, len(NOISE_COLORS))]
        img[(xx - cx) ** 2 + (yy - cy) ** 2 < r * r] = color


def _complement_intervals(a: int, b: int, n: int) -> list[tuple[int, int]]:
    out = []
    if a > 0:
        out.append((0, a - 1))
    if b < n - 1:
        out.append((b + 1, n - 1))
    return out


def query_slug(phrase: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", phrase.lower()).strip("-")


def _write_pgm(path: Path, mask: np.ndarray) -> None:
    h, w = mask.shape
    data = (mask.astype(np.uint8) * 255).tobytes()
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + data)


def read_pgm(path: Path) -> np.ndarray:
    """Binary P5 reader for the annotation layout (255 = foreground)."""
    raw = path.read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(m.group(i)) for i in (1, 2, 3))
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255")
    data = np.frombuffer(raw[m.end():m.end() + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w) >= 128


def write_world(world: SyntheticWorld, out_dir: str | Path) -> Path:
    """Persists scene, videos, queries, and annotations; byte-stable per seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_scene(world.scene, out / "scene")
    (out / "videos").mkdir(exist_ok=True)
    for v, video in enumerate(world.videos):
        write_blob(out / "videos" / f"video_{v:02d}.4leg", video)

    emb_dir = out / "embeddings"
    emb_dir.mkdir(exist_ok=True)
    query_table = {}
    for phrase, idx in sorted(world.queries.items()):
        rel = f"embeddings/q_{query_slug(phrase)}.4leg"
        write_blob(out / rel, world.concept_embeddings[idx].astype(np.float32))
        query_table[phrase] = rel
    for i, phrase in enumerate(CONCEPT_PHRASES):
        write_blob(emb_dir / f"concept_{i}.4leg",
                   world.concept_embeddings[i].astype(np.float32))
    (out / "queries.json").write_text(
        json.dumps(query_table, indent=2, sort_keys=True) + "\n")

    gt = {
        "scene": world.scene.name,
        "seed": world.cfg.seed,
        "noise_fraction": world.cfg.noise_fraction,
        "concepts": list(CONCEPT_PHRASES),
        "palette": world.palette.tolist(),
        "intervals": {p: [list(iv) for iv in ivs] for p, ivs in world.intervals.items()},
        "canonicals": world.canonicals,
    }
    (out / "gt.json").write_text(json.dumps(gt, indent=2, sort_keys=True) + "\n")

    ann_root = out / "annotations" / world.scene.name
    for phrase in sorted(world.queries):
        qdir = ann_root / query_slug(phrase)
        qdir.mkdir(parents=True, exist_ok=True)
        (qdir / "meta.json").write_text(json.dumps({
            "query": phrase,
            "intervals": [list(iv) for iv in world.intervals[phrase]],
            "canonicals": world.canonicals[phrase],
        }, indent=2, sort_keys=True) + "\n")
        for v in range(len(world.scene.cameras)):
            vdir = qdir / f"view_{v}"
            vdir.mkdir(exist_ok=True)
            for t in range(world.cfg.n_timesteps):
                mask = world.masks[phrase][v, t]
                if mask.any():
                    _write_pgm(vdir / f"t_{t:04d}.pgm", mask)
    return out
