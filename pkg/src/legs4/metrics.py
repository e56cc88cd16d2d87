"""Grounding metrics and the benchmark harness.

vIoU and vAP normalize over the union of predicted and ground-truth frame
sets while summing only over their intersection, so temporal misses are
penalized inside the spatial metrics. AP is interpolation-free: pixels are
ranked by score and equal scores fall into a single threshold step.
"""

from __future__ import annotations

import csv
import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .query import (CanonicalSet, QueryEmbedding, localize, spatial_map,
                    temporal_curve)
from .scene import DynamicScene
from .synth import read_pgm


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise MetricError(f"degenerate bbox {self}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)


def box_iou(a: BBox, b: BBox) -> float:
    ix0, iy0 = max(a.x0, b.x0), max(a.y0, b.y0)
    ix1, iy1 = min(a.x1, b.x1), min(a.y1, b.y1)
    if ix0 > ix1 or iy0 > iy1:
        return 0.0
    inter = (ix1 - ix0 + 1) * (iy1 - iy0 + 1)
    return inter / (a.area + b.area - inter)


_EIGHT = np.ones((3, 3), dtype=bool)


def map_to_bbox(score_map: np.ndarray, threshold: float = 0.5) -> Optional[BBox]:
    """Tight box of the 8-connected component holding the global max score."""
    if not 0.0 < threshold < 1.0:
        raise MetricError("threshold must be in (0, 1)")
    m = np.asarray(score_map, dtype=np.float64)
    if m.ndim != 2:
        raise MetricError("score map must be 2D")
    binary = m > threshold
    if not binary.any():
        return None
    labels, _ = ndimage.label(binary, structure=_EIGHT)
    peak = np.unravel_index(np.argmax(np.where(binary, m, -np.inf)), m.shape)
    ys, xs = np.nonzero(labels == labels[peak])
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def mask_to_bbox(mask: np.ndarray) -> Optional[BBox]:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    ys, xs = np.nonzero(mask)
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def viou(pred_boxes: dict[int, BBox], gt_boxes: dict[int, BBox]) -> float:
    """Sum of per-frame box IoU over shared frames, divided by |union frames|."""
    inter = set(pred_boxes) & set(gt_boxes)
    union = set(pred_boxes) | set(gt_boxes)
    if not union:
        return 0.0
    return sum(box_iou(pred_boxes[t], gt_boxes[t]) for t in inter) / len(union)


def average_precision(scores: np.ndarray, mask: np.ndarray) -> float:
    """AP of pixel scores against a binary mask; ties share one threshold step."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if scores.shape != mask.shape:
        raise MetricError("score map and mask dims differ")
    n_pos = int(mask.sum())
    if n_pos == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    tp = np.cumsum(mask[order])
    ranks = np.arange(1, len(scores) + 1)
    # last index of every tie group shares that group's precision/recall
    step_end = np.nonzero(np.diff(sorted_scores, append=-np.inf))[0]
    prec = tp[step_end] / ranks[step_end]
    rec = tp[step_end] / n_pos
    return float(np.sum(np.diff(rec, prepend=0.0) * prec))


def vap(pred_maps: dict[int, np.ndarray], gt_masks: dict[int, np.ndarray]) -> float:
    """Sum of per-frame AP over shared frames, divided by |union frames|."""
    inter = set(pred_maps) & set(gt_masks)
    union = set(pred_maps) | set(gt_masks)
    if not union:
        return 0.0
    return sum(average_precision(pred_maps[t], gt_masks[t]) for t in inter) / len(union)


def temporal_prf(pred_frames: Iterable[int], gt_frames: Iterable[int]
                 ) -> tuple[float, float, float]:
    pred, gt = set(pred_frames), set(gt_frames)
    if not pred and not gt:
        return 1.0, 1.0, 1.0
    if not pred or not gt:
        return 0.0, 0.0, 0.0
    inter = len(pred & gt)
    return (inter / len(pred | gt), inter / len(gt), inter / len(pred))


@dataclass
class MetricRow:
    scene: str
    query: str
    view: int
    vap: float
    viou: float
    tiou: float
    trec: float
    tprec: float

    def as_dict(self) -> dict:
        return {"scene": self.scene, "query": self.query, "view": self.view,
                "vap": self.vap, "viou": self.viou, "tiou": self.tiou,
                "trec": self.trec, "tprec": self.tprec}


_METRIC_NAMES = ("vap", "viou", "tiou", "trec", "tprec")


@dataclass
class MetricReport:
    rows: list[MetricRow]
    aggregates: dict[str, dict[str, float]]    # metric -> {mean, std}
    missing: list[str] = field(default_factory=list)
    seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps({
            "rows": [r.as_dict() for r in self.rows],
            "aggregates": self.aggregates,
            "missing": self.missing,
            "seconds": self.seconds,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        raw = json.loads(text)
        rows = [MetricRow(**r) for r in raw["rows"]]
        return cls(rows=rows, aggregates=raw["aggregates"],
                   missing=raw.get("missing", []),
                   seconds=raw.get("seconds", 0.0))

    def write(self, json_path: str | Path, csv_path: str | Path) -> None:
        Path(json_path).write_text(self.to_json())
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["scene", "query", "view", *_METRIC_NAMES])
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row.as_dict())


def aggregate_rows(rows: Sequence[MetricRow]) -> dict[str, dict[str, float]]:
    """Per metric, mean and std of per-view values within each (scene, query),
    then averaged across (scene, query) pairs."""
    out = {}
    groups: dict[tuple[str, str], list[MetricRow]] = {}
    for row in rows:
        groups.setdefault((row.scene, row.query), []).append(row)
    for name in _METRIC_NAMES:
        means, stds = [], []
        for members in groups.values():
            vals = np.array([getattr(r, name) for r in members])
            means.append(vals.mean())
            stds.append(vals.std())
        out[name] = {"mean": float(np.mean(means)) if means else 0.0,
                     "std": float(np.mean(stds)) if stds else 0.0}
    return out


@dataclass(frozen=True)
class ViewAnnotations:
    view: int
    masks: dict[int, np.ndarray]      # t -> bool mask; key presence = GT frame

    @property
    def gt_frames(self) -> set[int]:
        return set(self.masks)


@dataclass(frozen=True)
class QueryAnnotations:
    scene: str
    slug: str
    query: str
    canonical_phrases: tuple[str, ...]
    views: dict[int, ViewAnnotations]


_VIEW_RE = re.compile(r"view_(\d+)$")
_FRAME_RE = re.compile(r"t_(\d+)\.pgm$")


def load_annotations(root: str | Path, scene: str
                     ) -> tuple[list[QueryAnnotations], list[str]]:
    """Reads annotations/{scene}/{slug}/view_{v}/t_{t}.pgm plus meta.json.

    Returns the parsed sets and a list of missing/invalid paths; partial
    queries still load.
    """
    scene_dir = Path(root) / scene
    missing: list[str] = []
    if not scene_dir.is_dir():
        return [], [str(scene_dir)]
    out = []
    for query_dir in sorted(p for p in scene_dir.iterdir() if p.is_dir()):
        meta_path = query_dir / "meta.json"
        if not meta_path.is_file():
            missing.append(str(meta_path))
            continue
        meta = json.loads(meta_path.read_text())
        views = {}
        for view_dir in sorted(query_dir.glob("view_*")):
            m = _VIEW_RE.search(view_dir.name)
            if m is None:
                continue
            masks = {}
            for pgm in sorted(view_dir.glob("t_*.pgm")):
                fm = _FRAME_RE.search(pgm.name)
                try:
                    masks[int(fm.group(1))] = read_pgm(pgm)
                except Exception:
                    missing.append(str(pgm))
            views[int(m.group(1))] = ViewAnnotations(int(m.group(1)), masks)
        out.append(QueryAnnotations(
            scene=scene, slug=query_dir.name, query=meta["query"],
            canonical_phrases=tuple(meta.get("canonicals", ())),
            views=views))
    return out, missing


@dataclass
class BenchmarkConfig:
    dilation_radius: int = 2
    bbox_threshold: float = 0.5
    smooth_temporal: bool = False
    k_neighbors: int = 20


def evaluate_query(scene: DynamicScene, codec, query: QueryEmbedding,
                   canonicals: CanonicalSet, annotations: QueryAnnotations,
                   cfg: BenchmarkConfig = BenchmarkConfig()) -> list[MetricRow]:
    """Metric rows for one (scene, query) across its annotated views."""
    volume = temporal_curve(scene, codec, query, canonicals,
                            smooth=cfg.smooth_temporal)
    segments, _ = localize(volume, dilation_radius=cfg.dilation_radius)
    pred_frames: set[int] = set()
    for seg in segments:
        pred_frames.update(seg.frames)

    rows = []
    for view_id, view_ann in sorted(annotations.views.items()):
        camera = scene.camera_by_id(view_id)
        gt_frames = view_ann.gt_frames
        tiou, trec, tprec = temporal_prf(pred_frames, gt_frames)

        shared = sorted(pred_frames & gt_frames)
        union_n = len(pred_frames | gt_frames)
        maps = {t: spatial_map(scene, t, camera, codec, query, canonicals,
                               k_neighbors=cfg.k_neighbors) for t in shared}

        ap_sum = sum(average_precision(maps[t], view_ann.masks[t])
                     for t in shared)
        iou_sum = 0.0
        for t in shared:
            pb = map_to_bbox(maps[t], cfg.bbox_threshold)
            gb = mask_to_bbox(view_ann.masks[t])
            if pb is not None and gb is not None:
                iou_sum += box_iou(pb, gb)
        denom = union_n if union_n else 1
        rows.append(MetricRow(
            scene=scene.name, query=annotations.query, view=view_id,
            vap=ap_sum / denom if union_n else 0.0,
            viou=iou_sum / denom if union_n else 0.0,
            tiou=tiou, trec=trec, tprec=tprec))
    return rows


def run_benchmark(scene: DynamicScene, codec, annotations_root: str | Path,
                  query_vectors: dict[str, np.ndarray],
                  canonical_vectors: dict[str, np.ndarray],
                  cfg: BenchmarkConfig = BenchmarkConfig()) -> MetricReport:
    """Evaluates every annotated query of one scene.

    `query_vectors` maps query text to its embedding; `canonical_vectors`
    maps query text to the (C, D) canonical matrix for that query.
    """
    start = time.perf_counter()
    ann_sets, missing = load_annotations(annotations_root, scene.name)
    rows: list[MetricRow] = []
    for ann in ann_sets:
        if ann.query not in query_vectors:
            missing.append(f"embedding for query {ann.query!r}")
            continue
        if ann.query not in canonical_vectors:
            missing.append(f"canonicals for query {ann.query!r}")
            continue
        query = QueryEmbedding(query_vectors[ann.query], text=ann.query)
        canon = CanonicalSet(canonical_vectors[ann.query],
                             phrases=ann.canonical_phrases)
        rows.extend(evaluate_query(scene, codec, query, canon, ann, cfg))
    return MetricReport(rows=rows, aggregates=aggregate_rows(rows),
                        missing=missing,
                        seconds=time.perf_counter() - start)
