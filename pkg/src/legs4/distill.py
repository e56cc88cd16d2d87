"""Optimize per-Gaussian latent features so that attention-smoothed,
alpha-composited renders reproduce encoded 2D feature maps in every view.

Geometry and opacities never move, so the compositing weights for each
(timestep, view) are computed once; each Adam iteration is then attention
forward/backward plus two sparse matmuls against the stacked view matrix.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .attention import attend, attend_backward, knn
from .optim import Adam
from .raster import TileConfig, build_plan
from .scene import Camera, DynamicScene, GaussianFrame


class DistillError(ValueError):
    pass


@dataclass
class DistillConfig:
    iterations: int = 2000
    lr: float = 7e-4
    k_neighbors: int = 20
    init_sigma: float = 0.01
    use_attention: bool = True
    pixel_budget: int = 4096         # per view per iteration on large frames
    full_frame_max: int = 128        # frames up to this side use every pixel
    seed: int = 0
    workers: int = 1
    tile: TileConfig = field(default_factory=TileConfig)


@dataclass
class DistillReport:
    traces: dict = field(default_factory=dict)    # t -> list of per-iteration losses
    failures: dict = field(default_factory=dict)  # t -> error message


def _check_targets(frame_like, cameras: Sequence[Camera], targets, latent_dim, codec):
    if len(targets) != len(cameras):
        raise DistillError(f"expected {len(cameras)} target maps, got {len(targets)}")
    encoded = []
    for cam, tgt in zip(cameras, targets):
        tgt = np.asarray(tgt, dtype=np.float64)
        if tgt.shape[:2] != (cam.height, cam.width):
            raise DistillError(
                f"target for camera {cam.cam_id} has shape {tgt.shape[:2]}, "
                f"expected {(cam.height, cam.width)}")
        if tgt.shape[2] == latent_dim:
            encoded.append(tgt)
        elif codec is not None and tgt.shape[2] == codec.feature_dim:
            encoded.append(codec.encode(tgt))
        else:
            raise DistillError(
                f"target channel dim {tgt.shape[2]} matches neither the latent "
                f"dim {latent_dim} nor the codec input")
    return encoded


def distill_timestep(frame: GaussianFrame, cameras: Sequence[Camera],
                     targets: Sequence[np.ndarray], cfg: DistillConfig,
                     latent_dim: int, codec=None,
                     seed_key=None) -> tuple[np.ndarray, list[float]]:
    """Fit one timestep's latent features. Returns (M, d) float32 plus the
    loss trace. Deterministic for a fixed seed."""
    encoded = _check_targets(frame, cameras, targets, latent_dim, codec)
    m = frame.count
    rng = np.random.default_rng(cfg.seed if seed_key is None else seed_key)
    feats = rng.normal(0.0, cfg.init_sigma, size=(m, latent_dim))
    trace: list[float] = []
    if cfg.iterations == 0:
        return feats.astype(np.float32), trace

    plans = [build_plan(frame, cam, cfg.tile) for cam in cameras]
    stacked = sp.vstack([p.csr for p in plans], format="csr")
    target_flat = np.concatenate([e.reshape(-1, latent_dim) for e in encoded], axis=0)

    subsample = any(cam.width > cfg.full_frame_max or cam.height > cfg.full_frame_max
                    for cam in cameras)
    row_offsets = np.cumsum([0] + [cam.width * cam.height for cam in cameras])

    graph = knn(frame.means, cfg.k_neighbors) if cfg.use_attention else None
    opt = Adam([feats], lr=cfg.lr)

    for _ in range(cfg.iterations):
        if cfg.use_attention:
            smoothed, cache = attend(feats, graph)
        else:
            smoothed = feats

        if subsample:
            rows = np.concatenate([
                rng.integers(row_offsets[i], row_offsets[i + 1],
                             size=min(cfg.pixel_budget, row_offsets[i + 1] - row_offsets[i]))
                for i in range(len(cameras))])
            mat = stacked[rows]
            tgt = target_flat[rows]
        else:
            mat, tgt = stacked, target_flat

        rendered = mat @ smoothed
        residual = rendered - tgt
        n_px = residual.shape[0]
        trace.append(float(np.sum(np.abs(residual)) / n_px))
        grad_render = np.sign(residual) / n_px     # L1 subgradient, 0 at 0
        grad_smoothed = np.asarray(mat.T @ grad_render)
        grad_feats = attend_backward(cache, grad_smoothed) if cfg.use_attention else grad_smoothed
        opt.step([feats], [grad_feats])

    return feats.astype(np.float32), trace


def distill_scene(scene: DynamicScene, targets_by_t: dict, cfg: DistillConfig,
                  codec=None, out_dir: Optional[str | Path] = None
                  ) -> tuple[DynamicScene, DistillReport]:
    """Distill every timestep (independently; optionally in a thread pool).

    `targets_by_t` maps t -> list of per-view maps, encoded (d channels) or
    raw (codec input channels). Timesteps that fail are recorded in the
    report and keep their frame unchanged.
    """
    report = DistillReport()
    results: dict[int, np.ndarray] = {}

    def run(t: int):
        if t not in targets_by_t:
            raise DistillError(f"missing targets for timestep {t}")
        return distill_timestep(scene.frames[t], scene.cameras, targets_by_t[t],
                                cfg, scene.latent_dim, codec=codec,
                                seed_key=(cfg.seed, t))

    timesteps = list(range(scene.num_timesteps))
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            futures = {t: pool.submit(run, t) for t in timesteps}
            outcomes = {t: _capture(futures[t].result) for t in timesteps}
    else:
        outcomes = {t: _capture(lambda t=t: run(t)) for t in timesteps}

    for t, (value, err) in outcomes.items():
        if err is not None:
            report.failures[t] = err
        else:
            feats, trace = value
            results[t] = feats
            report.traces[t] = trace

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for t, trace in report.traces.items():
            with open(out / f"distill_{t}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["iteration", "loss"])
                writer.writerows((i, f"{v:.8e}") for i, v in enumerate(trace))

    frames = [scene.frames[t].with_latents(results[t]) if t in results else scene.frames[t]
              for t in timesteps]
    return scene.with_frames(frames), report


def _capture(fn):
    try:
        return fn(), None
    except Exception as exc:  # noqa: BLE001 - per-timestep isolation is the contract
        return None, str(exc)
