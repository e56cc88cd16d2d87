"""Multi-scale video-tube feature extraction.

Per view and timestep, a pyramid of square crops slides over the frame; each
crop is extended into a short temporal tube, resized, and embedded. Crop
embeddings live on the grid of crop centers and are lifted to per-pixel maps
by bilinear interpolation (clamped at the borders), then the per-scale maps
are aggregated into one map per (view, t).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .blobs import read_blob, write_blob
from .embedders import EmbedderError

DEFAULT_SCALES = (0.15, 0.2625, 0.375, 0.4875, 0.6)
MIN_CROP_PX = 8


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class ScalePyramidConfig:
    scales: tuple[float, ...] = DEFAULT_SCALES
    stride_fraction: float = 0.5
    tube_length: int = 8
    aggregation: str = "average"  # average | concat | single
    single_index: int = 0
    normalize_per_scale: bool = True

    def __post_init__(self):
        if not self.scales:
            raise FeatureError("at least one scale is required")
        if any(s <= 0 for s in self.scales):
            raise FeatureError("scales must be positive")
        if not 0.0 < self.stride_fraction <= 1.0:
            raise FeatureError("stride_fraction must be in (0, 1]")
        if self.tube_length < 1:
            raise FeatureError("tube_length must be >= 1")
        if self.aggregation not in ("average", "concat", "single"):
            raise FeatureError(f"unknown aggregation '{self.aggregation}'")


@dataclass(frozen=True)
class CropGrid:
    scale: float
    crop_px: int
    xs: np.ndarray  # crop-center x coordinates, ascending
    ys: np.ndarray


def _center_axis(extent: int, crop_px: int, step: float) -> np.ndarray:
    lo = crop_px / 2.0
    hi = extent - crop_px / 2.0
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    xs = lo + np.arange(n) * step
    if xs[-1] < hi - 1e-9:
        xs = np.append(xs, hi)  # keep the far border covered
    return xs


def plan_crops(width: int, height: int, scale: float,
               stride_fraction: float = 0.5) -> CropGrid:
    crop_px = int(round(scale * min(width, height)))
    if crop_px < MIN_CROP_PX:
        raise FeatureError(
            f"scale {scale} yields a {crop_px} px crop on {width}x{height}; "
            f"minimum is {MIN_CROP_PX} px")
    if crop_px > min(width, height):
        raise FeatureError(f"scale {scale} exceeds the image")
    step = stride_fraction * crop_px
    return CropGrid(scale=scale, crop_px=crop_px,
                    xs=_center_axis(width, crop_px, step),
                    ys=_center_axis(height, crop_px, step))


def tube_frame_indices(t: int, n_frames: int, tube_length: int) -> np.ndarray:
    """Frames in the half-open window [t - L/2, t + L/2), clamped in bounds."""
    start = t - tube_length // 2
    ks = np.arange(start, start + tube_length)
    return np.clip(ks, 0, n_frames - 1)


def _resize_frame(frame: np.ndarray, side: int) -> np.ndarray:
    if frame.shape[0] == side and frame.shape[1] == side:
        return frame
    img = Image.fromarray(frame, mode="RGB").resize((side, side), Image.BILINEAR)
    return np.asarray(img, dtype=np.uint8)


def cut_tube(video: np.ndarray, t: int, center: tuple[float, float],
             crop_px: int, tube_length: int, input_side: int) -> np.ndarray:
    """Extracts the resized uint8 tube (L, side, side, 3) around `center`."""
    n_frames, height, width = video.shape[:3]
    if not 0 <= t < n_frames:
        raise FeatureError(f"timestep {t} outside video of {n_frames} frames")
    cx, cy = center
    x0 = int(np.clip(round(cx - crop_px / 2.0), 0, width - crop_px))
    y0 = int(np.clip(round(cy - crop_px / 2.0), 0, height - crop_px))
    ks = tube_frame_indices(t, n_frames, tube_length)
    out = np.empty((tube_length, input_side, input_side, 3), dtype=np.uint8)
    for i, k in enumerate(ks):
        crop = video[k, y0:y0 + crop_px, x0:x0 + crop_px]
        out[i] = _resize_frame(np.ascontiguousarray(crop), input_side)
    return out


def embed_tube(video: np.ndarray, embedder, t: int, center: tuple[float, float],
               scale: float, cfg: ScalePyramidConfig,
               crop_px: Optional[int] = None) -> np.ndarray:
    if crop_px is None:
        crop_px = plan_crops(video.shape[2], video.shape[1], scale,
                             cfg.stride_fraction).crop_px
    tube = cut_tube(video, t, center, crop_px, cfg.tube_length, embedder.input_side)
    try:
        feat = np.asarray(embedder.embed(tube), dtype=np.float64)
    except EmbedderError as exc:
        raise EmbedderError(
            f"t={t} center=({center[0]:.1f},{center[1]:.1f}) scale={scale}: {exc}"
        ) from exc
    if cfg.normalize_per_scale:
        norm = np.linalg.norm(feat)
        if norm > 1e-12:
            feat = feat / norm
    return feat


def _axis_interp(coords: np.ndarray, knots: np.ndarray):
    """Per-coordinate (lower knot index, blend weight), clamped to the grid."""
    if len(knots) == 1:
        idx = np.zeros(len(coords), dtype=np.int64)
        return idx, np.zeros(len(coords))
    i = np.clip(np.searchsorted(knots, coords, side="right") - 1, 0, len(knots) - 2)
    w = (coords - knots[i]) / (knots[i + 1] - knots[i])
    return i, np.clip(w, 0.0, 1.0)


def grid_to_map(grid_features: np.ndarray, grid: CropGrid,
                width: int, height: int) -> np.ndarray:
    """Bilinearly lifts (ny, nx, D) crop features to an (H, W, D) pixel map.

    Pixels are sampled at their centers; positions outside the crop-center
    lattice clamp to the boundary value.
    """
    ny, nx = grid_features.shape[:2]
    if ny != len(grid.ys) or nx != len(grid.xs):
        raise FeatureError("grid feature shape does not match the crop grid")
    px = np.arange(width) + 0.5
    py = np.arange(height) + 0.5
    ix, wx = _axis_interp(px, grid.xs)
    iy, wy = _axis_interp(py, grid.ys)
    f00 = grid_features[np.ix_(iy, ix)]
    f01 = grid_features[np.ix_(iy, np.minimum(ix + 1, nx - 1))]
    f10 = grid_features[np.ix_(np.minimum(iy + 1, ny - 1), ix)]
    f11 = grid_features[np.ix_(np.minimum(iy + 1, ny - 1), np.minimum(ix + 1, nx - 1))]
    wxg = wx[None, :, None]
    wyg = wy[:, None, None]
    top = f00 * (1 - wxg) + f01 * wxg
    bot = f10 * (1 - wxg) + f11 * wxg
    return top * (1 - wyg) + bot * wyg


def pixel_feature_at_scale(grid_features: np.ndarray, grid: CropGrid,
                           point: tuple[float, float]) -> np.ndarray:
    """Feature at a continuous image point for one scale."""
    x, y = point
    ix, wx = _axis_interp(np.array([x], dtype=np.float64), grid.xs)
    iy, wy = _axis_interp(np.array([y], dtype=np.float64), grid.ys)
    nx, ny = len(grid.xs), len(grid.ys)
    ix1 = min(ix[0] + 1, nx - 1)
    iy1 = min(iy[0] + 1, ny - 1)
    f00 = grid_features[iy[0], ix[0]]
    f01 = grid_features[iy[0], ix1]
    f10 = grid_features[iy1, ix[0]]
    f11 = grid_features[iy1, ix1]
    top = f00 * (1 - wx[0]) + f01 * wx[0]
    bot = f10 * (1 - wx[0]) + f11 * wx[0]
    return top * (1 - wy[0]) + bot * wy[0]


def aggregate(per_scale: Sequence[np.ndarray], cfg: ScalePyramidConfig) -> np.ndarray:
    if len(per_scale) == 0:
        raise FeatureError("nothing to aggregate")
    if cfg.aggregation == "average":
        return np.mean(per_scale, axis=0)
    if cfg.aggregation == "concat":
        return np.concatenate(per_scale, axis=-1)
    if not 0 <= cfg.single_index < len(per_scale):
        raise FeatureError(
            f"single_index {cfg.single_index} out of range for {len(per_scale)} scales")
    return np.asarray(per_scale[cfg.single_index])


def scale_maps_for_frame(video: np.ndarray, embedder, t: int,
                         cfg: ScalePyramidConfig) -> list[np.ndarray]:
    """One (H, W, D) map per scale, before aggregation."""
    height, width = video.shape[1:3]
    maps = []
    for scale in cfg.scales:
        grid = plan_crops(width, height, scale, cfg.stride_fraction)
        feats = np.empty((len(grid.ys), len(grid.xs), embedder.feature_dim))
        for yi, cy in enumerate(grid.ys):
            for xi, cx in enumerate(grid.xs):
                feats[yi, xi] = embed_tube(video, embedder, t, (cx, cy), scale,
                                           cfg, crop_px=grid.crop_px)
        maps.append(grid_to_map(feats, grid, width, height))
    return maps


def feature_map(video: np.ndarray, embedder, t: int,
                cfg: ScalePyramidConfig) -> np.ndarray:
    return aggregate(scale_maps_for_frame(video, embedder, t, cfg), cfg)


@dataclass
class FeatureMapSet:
    maps: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return next(iter(self.maps.values())).shape[-1]

    def targets_by_timestep(self) -> dict[int, dict[int, np.ndarray]]:
        """Regroups (view, t) -> map into t -> {view: map}."""
        out: dict[int, dict[int, np.ndarray]] = {}
        for (view, t), m in self.maps.items():
            out.setdefault(t, {})[view] = m
        return out


def _map_path(out_dir: Path, view: int, t: int) -> Path:
    return out_dir / f"feat_{view}_{t:04d}.4leg"


def extract_maps(videos: Sequence[np.ndarray], embedder, cfg: ScalePyramidConfig,
                 out_dir: Optional[str | Path] = None,
                 resume: bool = True) -> FeatureMapSet:
    """Aggregated per-pixel feature maps for every (view, timestep).

    With `out_dir` set, each map is persisted as feat_{view}_{t:04d}.4leg and
    existing files are reused on rerun, so an interrupted extraction resumes
    where it failed instead of recomputing finished work.
    """
    if not videos:
        raise FeatureError("no videos given")
    out = FeatureMapSet()
    dir_path = Path(out_dir) if out_dir is not None else None
    if dir_path is not None:
        dir_path.mkdir(parents=True, exist_ok=True)
    for view, video in enumerate(videos):
        video = np.asarray(video)
        if video.dtype != np.uint8 or video.ndim != 4 or video.shape[3] != 3:
            raise FeatureError(f"view {view}: videos must be (T, H, W, 3) uint8")
        for t in range(video.shape[0]):
            path = _map_path(dir_path, view, t) if dir_path is not None else None
            if path is not None and resume and path.exists():
                out.maps[(view, t)] = read_blob(path).astype(np.float64)
                continue
            try:
                m = feature_map(video, embedder, t, cfg)
            except EmbedderError as exc:
                raise EmbedderError(f"view {view} {exc}") from exc
            out.maps[(view, t)] = m
            if path is not None:
                write_blob(path, m.astype(np.float32))
    return out
