"""Text-driven highlight clips: best view, action centering, camera effects.

A localized query drives three effects. The action is centered by taking the
relevancy map's center of mass, reading rendered depth there, and
back-projecting to a world point; the best-scoring camera is re-aimed at that
point. Zoom crops around it, bullet time orbits it at the temporal peak, and
desaturate grays out pixels whose relevancy stays below 0.5.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .query import CanonicalSet, QueryEmbedding, Segment, localize, spatial_map, temporal_curve
from .raster import TileConfig, render
from .scene import Camera, DynamicScene, camera_to_json, look_at_camera


class HighlightError(ValueError):
    pass


EFFECTS = ("zoom", "bullet_time", "desaturate")

# Rec.601 luma weights; fixed so desaturation is deterministic
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class HighlightSpec:
    effect: str
    zoom_factor: float = 2.0
    orbit_degrees: float = 60.0
    frame_count: int = 12
    strength: float = 1.0
    out_width: Optional[int] = None
    out_height: Optional[int] = None

    def __post_init__(self):
        if self.effect not in EFFECTS:
            raise HighlightError(f"unknown effect '{self.effect}'")
        if self.effect == "zoom" and not self.zoom_factor > 1.0:
            raise HighlightError("zoom_factor must be > 1")
        if self.effect == "bullet_time" and self.frame_count < 1:
            raise HighlightError("frame_count must be >= 1")
        if not 0.0 < self.strength <= 1.0:
            raise HighlightError("strength must be in (0, 1]")


@dataclass
class CameraPath:
    entries: list[tuple[Camera, int]] = field(default_factory=list)

    def to_json(self) -> list[dict]:
        return [{"t": t, "camera": camera_to_json(cam)} for cam, t in self.entries]

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def action_center(score_map: np.ndarray, depth_map: np.ndarray,
                  camera: Camera) -> np.ndarray:
    """World-space center of mass of a relevancy map.

    (u, v) is the score-weighted mean pixel coordinate, z the rendered depth
    at that pixel, and the result the pinhole back-projection of (u, v, z).
    """
    m = np.asarray(score_map, dtype=np.float64)
    if m.ndim != 2 or m.shape != depth_map.shape:
        raise HighlightError("score and depth maps must be 2D and congruent")
    total = m.sum()
    if total <= 0.0:
        raise HighlightError("relevancy map has no positive mass")
    cols = np.arange(m.shape[1])
    rows = np.arange(m.shape[0])
    u = float((m.sum(axis=0) * cols).sum() / total)
    v = float((m.sum(axis=1) * rows).sum() / total)
    col = int(np.clip(np.floor(u), 0, m.shape[1] - 1))
    row = int(np.clip(np.floor(v), 0, m.shape[0] - 1))
    z = float(depth_map[row, col])
    cam_pt = np.array([(u - camera.cx) * z / camera.fx,
                       (v - camera.cy) * z / camera.fy,
                       z])
    return camera.rotation.T @ (cam_pt - camera.translation)


def reaim_camera(camera: Camera, target: np.ndarray) -> Camera:
    """Same position and intrinsics, optical axis through `target`."""
    up_world = -camera.rotation[1]  # current image-up direction
    return look_at_camera(camera.cam_id, camera.position, target, up_world,
                          camera.width, camera.height, camera.fx, camera.fy,
                          cx=camera.cx, cy=camera.cy)


def _view_scores(scene: DynamicScene, codec, query: QueryEmbedding,
                 canonicals: CanonicalSet, segment: Segment,
                 candidates: Sequence[Camera], tile: TileConfig,
                 k_neighbors: int) -> np.ndarray:
    scores = np.empty(len(candidates))
    for i, cam in enumerate(candidates):
        means = [spatial_map(scene, t, cam, codec, query, canonicals,
                             tile=tile, k_neighbors=k_neighbors).mean()
                 for t in segment.frames]
        scores[i] = np.mean(means)
    return scores


def _center_from_view(scene: DynamicScene, codec, query: QueryEmbedding,
                      canonicals: CanonicalSet, t: int, camera: Camera,
                      tile: TileConfig, k_neighbors: int) -> np.ndarray:
    rel = spatial_map(scene, t, camera, codec, query, canonicals,
                      tile=tile, k_neighbors=k_neighbors)
    depth = render(scene.frames[t], camera, channels=("depth",), cfg=tile)["depth"]
    return action_center(rel, depth, camera)


def choose_view(scene: DynamicScene, codec, query: QueryEmbedding,
                canonicals: CanonicalSet, segment: Segment,
                candidates: Optional[Sequence[Camera]] = None,
                tile: TileConfig = TileConfig(),
                k_neighbors: int = 20) -> Camera:
    """Highest mean-relevancy candidate over the segment, re-aimed so the
    action center at the peak frame projects to the principal point."""
    if candidates is None:
        candidates = scene.cameras
    if not candidates:
        raise HighlightError("no candidate cameras")
    scores = _view_scores(scene, codec, query, canonicals, segment,
                          candidates, tile, k_neighbors)
    best = candidates[int(np.argmax(scores))]
    center = _center_from_view(scene, codec, query, canonicals,
                               segment.peak, best, tile, k_neighbors)
    return reaim_camera(best, center)


def _orbit_cameras(base: Camera, center: np.ndarray, degrees: float,
                   count: int) -> list[Camera]:
    """Horizontal arc through the base camera position, aimed at `center`."""
    up = -base.rotation[1]
    axis = up / np.linalg.norm(up)
    radius = base.position - center
    out = []
    angles = np.linspace(-0.5, 0.5, count) * np.deg2rad(degrees) \
        if count > 1 else np.array([0.0])
    for i, th in enumerate(angles):
        c, s = np.cos(th), np.sin(th)
        rot = (c * radius + s * np.cross(axis, radius)
               + (1 - c) * axis * (axis @ radius))
        out.append(look_at_camera(base.cam_id, center + rot, center, up,
                                  base.width, base.height, base.fx, base.fy,
                                  cx=base.cx, cy=base.cy))
    return out


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _zoom_frame(rgb: np.ndarray, at: tuple[float, float], factor: float,
                out_w: int, out_h: int) -> np.ndarray:
    h, w = rgb.shape[:2]
    cw = max(2, int(round(w / factor)))
    ch = max(2, int(round(h / factor)))
    x0 = int(np.clip(round(at[0] - cw / 2.0), 0, w - cw))
    y0 = int(np.clip(round(at[1] - ch / 2.0), 0, h - ch))
    crop = _to_uint8(rgb[y0:y0 + ch, x0:x0 + cw])
    img = Image.fromarray(crop, mode="RGB").resize((out_w, out_h), Image.BILINEAR)
    return np.asarray(img)


def render_highlight(scene: DynamicScene, codec, query: QueryEmbedding,
                     canonicals: CanonicalSet, spec: HighlightSpec,
                     out_dir: Optional[str | Path] = None,
                     candidates: Optional[Sequence[Camera]] = None,
                     tile: TileConfig = TileConfig(),
                     dilation_radius: int = 2, k_neighbors: int = 20
                     ) -> tuple[list[np.ndarray], CameraPath]:
    """Frames plus the camera path for one effect; optionally written to
    `out_dir`/highlight/{effect}/{index}.png with a path.json sidecar."""
    volume = temporal_curve(scene, codec, query, canonicals)
    _, primary = localize(volume, dilation_radius=dilation_radius)
    if primary is None:
        raise HighlightError("query not found in scene")
    if candidates is None:
        candidates = scene.cameras
    if not candidates:
        raise HighlightError("no candidate cameras")

    scores = _view_scores(scene, codec, query, canonicals, primary,
                          candidates, tile, k_neighbors)
    best = candidates[int(np.argmax(scores))]
    center = _center_from_view(scene, codec, query, canonicals,
                               primary.peak, best, tile, k_neighbors)
    cam = reaim_camera(best, center)
    out_w = spec.out_width or cam.width
    out_h = spec.out_height or cam.height

    frames: list[np.ndarray] = []
    path = CameraPath()
    if spec.effect == "bullet_time":
        for orbit_cam in _orbit_cameras(cam, center, spec.orbit_degrees,
                                        spec.frame_count):
            rgb = render(scene.frames[primary.peak], orbit_cam,
                         channels=("rgb",), cfg=tile)["rgb"]
            frames.append(_to_uint8(rgb))
            path.entries.append((orbit_cam, primary.peak))
    elif spec.effect == "zoom":
        uv, _ = cam.project(center)
        at = (float(uv[0, 0]), float(uv[0, 1]))
        for t in primary.frames:
            rgb = render(scene.frames[t], cam, channels=("rgb",), cfg=tile)["rgb"]
            frames.append(_zoom_frame(rgb, at, spec.zoom_factor, out_w, out_h))
            path.entries.append((cam, t))
    else:  # desaturate
        for t in primary.frames:
            rgb = render(scene.frames[t], cam, channels=("rgb",), cfg=tile)["rgb"]
            rel = spatial_map(scene, t, cam, codec, query, canonicals,
                              tile=tile, k_neighbors=k_neighbors)
            luma = rgb @ _LUMA
            background = rel < 0.5
            blend = rgb.copy()
            blend[background] = ((1.0 - spec.strength) * rgb[background]
                                 + spec.strength * luma[background, None])
            frames.append(_to_uint8(blend))
            path.entries.append((cam, t))

    if out_dir is not None:
        effect_dir = Path(out_dir) / "highlight" / spec.effect
        effect_dir.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(frames):
            Image.fromarray(img, mode="RGB").save(effect_dir / f"{i:04d}.png")
        path.write(effect_dir / "path.json")
    return frames, path
