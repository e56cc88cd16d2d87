"""Open-vocabulary querying over distilled scenes.

Relevancy is the min over canonical phrases of the pairwise softmax between
the feature-query dot and the feature-canonical dot. Temporal localization
scores every Gaussian at every timestep in feature space (view-independent),
turns the counts into the s_t curve, and extracts dilated above-threshold
segments. Spatial maps render the smoothed latents, decode, and score per
pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import binary_dilation

from .attention import attend, knn
from .raster import TileConfig, render
from .scene import Camera, DynamicScene

ALPHA_FLOOR = 0.01


class QueryError(ValueError):
    pass


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1e-12)


@dataclass(frozen=True)
class QueryEmbedding:
    vector: np.ndarray
    text: Optional[str] = None

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        n = np.linalg.norm(v)
        if n < 1e-12:
            raise QueryError("query embedding must be nonzero")
        if abs(n - 1.0) > 1e-5:
            v = v / n
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class CanonicalSet:
    vectors: np.ndarray                       # (C, D) unit rows
    phrases: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if v.shape[0] < 1:
            raise QueryError("canonical set must be nonempty")
        object.__setattr__(self, "vectors", _normalize_rows(v))


def relevancy(features: np.ndarray, query: QueryEmbedding,
              canonicals: CanonicalSet) -> np.ndarray:
    """min_c exp(f.q) / (exp(f.q) + exp(f.c)), elementwise over leading dims.

    `features` must already be L2-normalized by the caller.
    """
    f = np.asarray(features, dtype=np.float64)
    dq = f @ query.vector
    dc_max = np.max(f @ canonicals.vectors.T, axis=-1)
    # min over c of the two-way softmax is attained at the largest f.c
    return 1.0 / (1.0 + np.exp(dc_max - dq))


@dataclass
class RelevancyVolume:
    scores: np.ndarray      # (M, T) in (0, 1)
    rel_avg: float
    counts: np.ndarray      # (T,) ints
    s: np.ndarray           # (T,) fractions, sums to 0 or 1
    threshold: float        # k = 1/T


def curve_from_scores(scores: np.ndarray) -> RelevancyVolume:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise QueryError("scores must be (M, T)")
    n_t = scores.shape[1]
    rel = scores > 0.5
    if not rel.any():
        return RelevancyVolume(scores=scores, rel_avg=float("nan"),
                               counts=np.zeros(n_t, dtype=np.int64),
                               s=np.zeros(n_t), threshold=1.0 / n_t)
    rel_avg = float(scores[rel].mean())
    counts = (scores > rel_avg).sum(axis=0)
    total = counts.sum()
    s = counts / total if total > 0 else np.zeros(n_t)
    return RelevancyVolume(scores=scores, rel_avg=rel_avg,
                           counts=counts.astype(np.int64), s=s,
                           threshold=1.0 / n_t)


def gaussian_scores(scene: DynamicScene, codec, query: QueryEmbedding,
                    canonicals: CanonicalSet, timesteps: Optional[Sequence[int]] = None,
                    smooth: bool = False, k_neighbors: int = 20) -> np.ndarray:
    """(M, T') relevancy of decoded per-Gaussian features.

    `smooth=True` scores attention-smoothed latents instead of raw ones.
    """
    ts = range(scene.num_timesteps) if timesteps is None else list(timesteps)
    cols = []
    for t in ts:
        frame = scene.frames[t]
        if frame.latent_features is None:
            raise QueryError(f"timestep {t} has no latent features; distill first")
        lat = frame.latent_features.astype(np.float64)
        if smooth:
            lat, _ = attend(lat, knn(frame.means, k_neighbors))
        decoded = _normalize_rows(codec.decode(lat))
        cols.append(relevancy(decoded, query, canonicals))
    return np.stack(cols, axis=1)


def temporal_curve(scene: DynamicScene, codec, query: QueryEmbedding,
                   canonicals: CanonicalSet,
                   timesteps: Optional[Sequence[int]] = None,
                   smooth: bool = False) -> RelevancyVolume:
    return curve_from_scores(gaussian_scores(scene, codec, query, canonicals,
                                             timesteps=timesteps, smooth=smooth))


@dataclass(frozen=True)
class Segment:
    t_start: int
    t_end: int   # inclusive
    peak: int

    @property
    def frames(self) -> range:
        return range(self.t_start, self.t_end + 1)


def _runs(binary: np.ndarray) -> list[tuple[int, int]]:
    out = []
    start = None
    for i, b in enumerate(binary):
        if b and start is None:
            start = i
        elif not b and start is not None:
            out.append((start, i - 1))
            start = None
    if start is not None:
        out.append((start, len(binary) - 1))
    return out


def localize(volume: RelevancyVolume, dilation_radius: int = 2
             ) -> tuple[list[Segment], Optional[Segment]]:
    """Segments of dilated [s_t > 1/T]; primary is the longest (earliest ties)."""
    if dilation_radius < 0:
        raise QueryError("dilation_radius must be >= 0")
    b = volume.s > volume.threshold
    if dilation_radius > 0 and b.any():
        b = binary_dilation(b, structure=np.ones(2 * dilation_radius + 1, dtype=bool))
    segments = [Segment(a, z, peak=(a + z) // 2) for a, z in _runs(b)]
    primary = None
    if segments:
        primary = max(segments, key=lambda s: (s.t_end - s.t_start, -s.t_start))
    return segments, primary


def spatial_map(scene: DynamicScene, t: int, camera: Camera, codec,
                query: QueryEmbedding, canonicals: CanonicalSet,
                tile: TileConfig = TileConfig(), k_neighbors: int = 20
                ) -> np.ndarray:
    """H x W relevancy of rendered, decoded features; background scores 0."""
    if not 0 <= t < scene.num_timesteps:
        raise QueryError(f"timestep {t} out of range")
    frame = scene.frames[t]
    if frame.latent_features is None:
        raise QueryError(f"timestep {t} has no latent features; distill first")
    smoothed, _ = attend(frame.latent_features.astype(np.float64),
                         knn(frame.means, k_neighbors))
    out = render(frame, camera, channels=("features", "alpha"), cfg=tile,
                 features_override=smoothed)
    lat = out["features"]
    decoded = codec.decode(lat.reshape(-1, lat.shape[-1]))
    decoded = decoded.reshape(lat.shape[0], lat.shape[1], -1)
    scores = relevancy(_normalize_rows(decoded), query, canonicals)
    scores[out["alpha"] < ALPHA_FLOOR] = 0.0
    return scores


@dataclass
class SceneScore:
    index: int
    score: float
    volume: RelevancyVolume = field(repr=False, default=None)


def select_scene(scenes: Sequence[DynamicScene], codecs: Sequence,
                 query: QueryEmbedding, canonicals: CanonicalSet,
                 stride: int = 10) -> tuple[int, list[SceneScore]]:
    """Best scene by max_t s_t over a strided timestep sample (plus T-1)."""
    if not scenes:
        raise QueryError("no scenes to select from")
    if len(codecs) != len(scenes):
        raise QueryError("one codec per scene required")
    results = []
    for i, (scene, codec) in enumerate(zip(scenes, codecs)):
        ts = sorted(set(range(0, scene.num_timesteps, stride))
                    | {scene.num_timesteps - 1})
        vol = temporal_curve(scene, codec, query, canonicals, timesteps=ts)
        score = float(vol.s.max()) if vol.s.size else 0.0
        results.append(SceneScore(index=i, score=score, volume=vol))
    best = max(results, key=lambda r: (r.score, -r.index)).index
    return best, results
