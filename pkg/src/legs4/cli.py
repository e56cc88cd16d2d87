"""Command-line pipeline driver.

Chains the stages end to end on directories of blobs: `synth` writes a world,
`extract` turns its videos into feature maps, `train-codec` compresses them,
`distill` bakes latents onto the scene, and `query`/`localize`/`evaluate`/
`highlight`/`serve` consume the distilled result. Exit codes: 0 success,
1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .blobs import read_blob
from .codec import CodecTrainConfig, load_codec, reconstruction_cosine, save_codec, train_codec
from .distill import DistillConfig, distill_scene
from .embedders import (ENV_EMBEDDER_URL, HttpEmbedder, TextEmbeddingError,
                        load_query_dictionary, resolve_text_embedding)
from .features import DEFAULT_SCALES, ScalePyramidConfig, extract_maps
from .highlights import HighlightSpec, render_highlight
from .metrics import BenchmarkConfig, run_benchmark
from .query import (CanonicalSet, QueryEmbedding, RelevancyVolume, localize,
                    temporal_curve)
from .scene import load_scene, save_scene
from .synth import SynthConfig, embedder_from_world_dir, synth_world, write_world

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

_FEAT_RE = re.compile(r"feat_(\d+)_(\d+)\.4leg$")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse flavor whose usage failures raise instead of sys.exit(2)."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="legs4", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None,
                        help="global RNG seed (overrides config file)")
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file of default values for the subcommand flags")
    sub = parser.add_subparsers(dest="cmd")

    p = sub.add_parser("synth", help="write a deterministic synthetic world")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="embed video crop tubes into feature maps")
    p.add_argument("--scene", type=Path, required=True, help="world directory")
    p.add_argument("--out", type=Path, default=None,
                   help="feature directory (default <scene>/features)")
    p.add_argument("--scales", type=str, default=None, help="comma floats")
    p.add_argument("--stride-fraction", type=float, default=None)
    p.add_argument("--tube-length", type=int, default=None)
    p.add_argument("--aggregation", choices=("average", "concat", "single"),
                   default=None)
    p.add_argument("--single-index", type=int, default=None)
    p.add_argument("--embedder-url", type=str, default=None,
                   help=f"embedding endpoint (default ${ENV_EMBEDDER_URL})")
    p.add_argument("--feature-dim", type=int, default=None,
                   help="feature size when using an endpoint embedder")
    p.add_argument("--no-resume", action="store_true",
                   help="recompute maps even when blobs already exist")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-codec", help="fit the latent codec on extracted features")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--latent-dim", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("distill", help="optimize per-Gaussian latents against feature maps")
    p.add_argument("--scene", type=Path, required=True,
                   help="world or scene directory")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--codec", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--traces", type=Path, default=None,
                   help="directory for per-timestep loss curves")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("query", help="localize a text or embedding query in a scene")
    _query_flags(p)
    p.add_argument("--out", type=Path, default=None, help="response JSON path")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("localize", help="recompute segments from a saved response")
    p.add_argument("--response", type=Path, required=True)
    p.add_argument("--dilation", type=int, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="run the grounding benchmark over annotations")
    p.add_argument("--scene", type=Path, required=True,
                   help="distilled scene directory")
    p.add_argument("--codec", type=Path, required=True)
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--world", type=Path, default=None,
                   help="world directory for query embeddings "
                        "(default: the annotations' parent)")
    p.add_argument("--out", type=Path, required=True, help="report directory")
    p.add_argument("--dilation", type=int, default=None)
    p.add_argument("--k-neighbors", type=int, default=None)
    p.add_argument("--bbox-threshold", type=float, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("highlight", help="render a highlight clip for a query")
    _query_flags(p)
    p.add_argument("--effect", choices=("zoom", "bullet_time", "desaturate"),
                   required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--zoom-factor", type=float, default=None)
    p.add_argument("--orbit-degrees", type=float, default=None)
    p.add_argument("--strength", type=float, default=None)
    p.set_defaults(func=cmd_highlight)

    p = sub.add_parser("serve", help="start the HTTP query service")
    p.add_argument("--scenes", type=Path, required=True,
                   help="directory of scene bundles")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--host", type=str, default=None)
    p.set_defaults(func=cmd_serve)
    return parser


def _query_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scene", type=Path, required=True,
                   help="distilled scene directory")
    p.add_argument("--codec", type=Path, required=True)
    p.add_argument("--text", type=str, default=None)
    p.add_argument("--embedding", type=Path, default=None,
                   help="query embedding blob (alternative to --text)")
    p.add_argument("--world", type=Path, default=None,
                   help="world directory supplying the query dictionary "
                        "and canonical embeddings")
    p.add_argument("--canonicals", type=Path, default=None,
                   help="canonical embedding blob, one row per phrase")
    p.add_argument("--dilation", type=int, default=None)


def _pick(args, cfg: dict, name: str, default):
    """Flag beats config file beats built-in default."""
    val = getattr(args, name, None)
    if val is not None and val is not False:
        return val
    if name in cfg:
        return cfg[name]
    return default


def _seed(args, cfg: dict, default: int = 0) -> int:
    return int(_pick(args, cfg, "seed", default))


def _resolve_scene_dir(path: Path) -> Path:
    if (path / "scene.json").exists():
        return path
    if (path / "scene" / "scene.json").exists():
        return path / "scene"
    raise FileNotFoundError(f"no scene.json under {path} or {path}/scene")


def _load_feature_targets(features: Path) -> dict[int, list[np.ndarray]]:
    """feat_{view}_{t}.4leg files grouped as t -> per-view maps."""
    grouped: dict[int, dict[int, np.ndarray]] = {}
    for blob in sorted(features.glob("feat_*.4leg")):
        m = _FEAT_RE.search(blob.name)
        if not m:
            continue
        view, t = int(m.group(1)), int(m.group(2))
        grouped.setdefault(t, {})[view] = read_blob(blob)
    if not grouped:
        raise FileNotFoundError(f"no feature blobs under {features}")
    return {t: [views[v] for v in sorted(views)] for t, views in grouped.items()}


def _segments_json(segments) -> list[dict]:
    return [{"t_start": s.t_start, "t_end": s.t_end, "peak": s.peak}
            for s in segments]


def _query_id(scene_name: str, embedding: np.ndarray, canonicals: np.ndarray,
              dilation: int) -> str:
    h = hashlib.sha256()
    h.update(scene_name.encode())
    h.update(np.ascontiguousarray(embedding, dtype=np.float32).tobytes())
    h.update(np.ascontiguousarray(canonicals, dtype=np.float32).tobytes())
    h.update(str(int(dilation)).encode())
    return h.hexdigest()[:16]


def _world_tables(world: Path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """(query embeddings, canonical matrices) keyed by phrase."""
    queries = load_query_dictionary(world / "queries.json")
    gt = json.loads((world / "gt.json").read_text())
    concept_vecs = {phrase: read_blob(world / "embeddings" / f"concept_{i}.4leg")
                    for i, phrase in enumerate(gt["concepts"])}
    canonicals = {phrase: np.stack([concept_vecs[c] for c in names])
                  for phrase, names in gt["canonicals"].items()}
    return queries, canonicals


def _resolve_query(args, cfg: dict) -> tuple[QueryEmbedding, CanonicalSet]:
    text = _pick(args, cfg, "text", None)
    emb_path = _pick(args, cfg, "embedding", None)
    if (text is None) == (emb_path is None):
        raise UsageError("exactly one of --text / --embedding is required")

    world = _pick(args, cfg, "world", None)
    dictionary = None
    canonical_table = {}
    if world is not None:
        world = Path(world)
        if (world / "queries.json").exists():
            dictionary = load_query_dictionary(world / "queries.json")
        if (world / "gt.json").exists():
            _, canonical_table = _world_tables(world)

    if text is not None:
        vector = resolve_text_embedding(text, dictionary)
        query = QueryEmbedding(vector, text=text)
    else:
        query = QueryEmbedding(read_blob(Path(emb_path)))

    canon_path = _pick(args, cfg, "canonicals", None)
    if canon_path is not None:
        canon = np.atleast_2d(read_blob(Path(canon_path)))
    elif text is not None and text in canonical_table:
        canon = canonical_table[text]
    else:
        raise TextEmbeddingError(
            "no canonical embeddings: pass --canonicals or a --world directory "
            "whose gt.json lists canonicals for this query")
    return query, CanonicalSet(canon)


def _load_config(args) -> dict:
    if args.config is None:
        return {}
    doc = json.loads(Path(args.config).read_text())
    if not isinstance(doc, dict):
        raise UsageError("--config must contain a JSON object")
    return {key.replace("-", "_"): value for key, value in doc.items()}


def cmd_synth(args, cfg: dict) -> int:
    fields = {k: v for k, v in cfg.items()
              if k in SynthConfig.__dataclass_fields__}
    if "active_interval" in fields:
        fields["active_interval"] = tuple(fields["active_interval"])
    fields["seed"] = _seed(args, cfg, fields.get("seed", 0))
    world = synth_world(SynthConfig(**fields))
    out = write_world(world, args.out)
    print(f"wrote world '{world.scene.name}' to {out}")
    return EXIT_OK


def _make_embedder(args, cfg: dict, scene_dir: Path):
    url = _pick(args, cfg, "embedder_url", None) or os.environ.get(ENV_EMBEDDER_URL)
    if (scene_dir / "gt.json").exists():
        return embedder_from_world_dir(scene_dir)
    if url:
        dim = _pick(args, cfg, "feature_dim", None)
        if dim is None:
            raise UsageError("--feature-dim is required with an endpoint embedder")
        return HttpEmbedder(url, feature_dim=int(dim))
    raise TextEmbeddingError(
        f"no embedder: the scene directory has no gt.json and "
        f"{ENV_EMBEDDER_URL} is unset")


def cmd_extract(args, cfg: dict) -> int:
    scene_dir = Path(args.scene)
    videos = [read_blob(p) for p in sorted((scene_dir / "videos").glob("video_*.4leg"))]
    if not videos:
        raise FileNotFoundError(f"no videos under {scene_dir / 'videos'}")
    embedder = _make_embedder(args, cfg, scene_dir)

    scales = _pick(args, cfg, "scales", None)
    if isinstance(scales, str):
        scales = tuple(float(s) for s in scales.split(","))
    pyramid = ScalePyramidConfig(
        scales=tuple(scales) if scales else DEFAULT_SCALES,
        stride_fraction=float(_pick(args, cfg, "stride_fraction", 0.5)),
        tube_length=int(_pick(args, cfg, "tube_length", 8)),
        aggregation=_pick(args, cfg, "aggregation", "average"),
        single_index=_pick(args, cfg, "single_index", None))
    out = Path(_pick(args, cfg, "out", scene_dir / "features"))
    maps = extract_maps(videos, embedder, pyramid, out_dir=out,
                        resume=not args.no_resume)
    n = sum(len(v) for v in maps.maps.values())
    print(f"extracted {n} feature maps (D={maps.feature_dim}) to {out}")
    return EXIT_OK


def cmd_train_codec(args, cfg: dict) -> int:
    features = Path(args.features)
    blobs = sorted(features.glob("feat_*.4leg"))
    if not blobs:
        raise FileNotFoundError(f"no feature blobs under {features}")
    flat = np.concatenate([read_blob(b).reshape(-1, read_blob(b).shape[-1])
                           for b in blobs])
    seed = _seed(args, cfg)
    budget = int(_pick(args, cfg, "samples", 20000))
    if len(flat) > budget:
        rng = np.random.default_rng(seed)
        flat = flat[rng.choice(len(flat), budget, replace=False)]
    train_cfg = CodecTrainConfig(
        latent_dim=int(_pick(args, cfg, "latent_dim", 16)),
        epochs=int(_pick(args, cfg, "epochs", 60)),
        seed=seed)
    params, trace = train_codec(flat, train_cfg)
    save_codec(params, args.out)
    cosine = reconstruction_cosine(params, flat[:2000])
    print(f"codec {params.feature_dim}->{params.latent_dim} "
          f"loss {trace[-1]:.6f} cosine {cosine:.4f} saved to {args.out}")
    return EXIT_OK


def cmd_distill(args, cfg: dict) -> int:
    scene = load_scene(_resolve_scene_dir(Path(args.scene)))
    targets = _load_feature_targets(Path(args.features))
    codec = load_codec(args.codec)
    dcfg = DistillConfig(
        iterations=int(_pick(args, cfg, "iterations", 2000)),
        use_attention=not _pick(args, cfg, "no_attention", False),
        workers=int(_pick(args, cfg, "workers", 1)),
        seed=_seed(args, cfg))
    distilled, report = distill_scene(scene, targets, dcfg, codec=codec,
                                      out_dir=_pick(args, cfg, "traces", None))
    save_scene(distilled, args.out)
    print(f"distilled {len(report.traces)} timesteps to {args.out}")
    if report.failures:
        for t, msg in sorted(report.failures.items()):
            print(f"timestep {t} failed: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_query(args, cfg: dict) -> int:
    query, canon = _resolve_query(args, cfg)
    scene = load_scene(_resolve_scene_dir(Path(args.scene)))
    codec = load_codec(args.codec)
    dilation = int(_pick(args, cfg, "dilation", 2))
    volume = temporal_curve(scene, codec, query, canon)
    segments, primary = localize(volume, dilation_radius=dilation)
    response = {
        "query_id": _query_id(scene.name, query.vector, canon.vectors, dilation),
        "scene": scene.name,
        "s_curve": [float(v) for v in volume.s],
        "segments": _segments_json(segments),
        "primary": _segments_json([primary])[0] if primary else None,
    }
    doc = json.dumps(response, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(doc)
    else:
        print(doc, end="")
    return EXIT_OK


def cmd_localize(args, cfg: dict) -> int:
    doc = json.loads(Path(args.response).read_text())
    s = np.asarray(doc["s_curve"], dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("response has no s_curve")
    volume = RelevancyVolume(scores=np.zeros((0, s.size)), rel_avg=float("nan"),
                             counts=np.zeros(s.size, dtype=np.int64),
                             s=s, threshold=1.0 / s.size)
    segments, primary = localize(volume,
                                 dilation_radius=int(_pick(args, cfg, "dilation", 2)))
    out = {"segments": _segments_json(segments),
           "primary": _segments_json([primary])[0] if primary else None}
    text = json.dumps(out, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return EXIT_OK


def cmd_evaluate(args, cfg: dict) -> int:
    scene = load_scene(_resolve_scene_dir(Path(args.scene)))
    codec = load_codec(args.codec)
    annotations = Path(args.annotations)
    world = Path(_pick(args, cfg, "world", annotations.parent))
    queries, canonicals = _world_tables(world)
    bench = BenchmarkConfig(
        dilation_radius=int(_pick(args, cfg, "dilation", 2)),
        bbox_threshold=float(_pick(args, cfg, "bbox_threshold", 0.5)),
        k_neighbors=int(_pick(args, cfg, "k_neighbors", 20)))
    report = run_benchmark(scene, codec, annotations, queries, canonicals, bench)
    if not report.rows:
        raise RuntimeError(
            f"no annotated queries evaluated (missing: {report.missing})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.json", out / "report.csv")
    agg = report.aggregates
    print("  ".join(f"{name} {agg[name]['mean']:.4f}±{agg[name]['std']:.4f}"
                    for name in ("vap", "viou", "tiou", "trec", "tprec")))
    if report.missing:
        for item in report.missing:
            print(f"missing: {item}", file=sys.stderr)
    print(f"report written to {out}")
    return EXIT_OK


def cmd_highlight(args, cfg: dict) -> int:
    query, canon = _resolve_query(args, cfg)
    scene = load_scene(_resolve_scene_dir(Path(args.scene)))
    codec = load_codec(args.codec)
    spec = HighlightSpec(
        effect=args.effect,
        zoom_factor=float(_pick(args, cfg, "zoom_factor", 2.0)),
        orbit_degrees=float(_pick(args, cfg, "orbit_degrees", 60.0)),
        frame_count=int(_pick(args, cfg, "frames", 12)),
        strength=float(_pick(args, cfg, "strength", 1.0)))
    frames, _ = render_highlight(
        scene, codec, query, canon, spec, out_dir=args.out,
        dilation_radius=int(_pick(args, cfg, "dilation", 2)))
    print(f"wrote {len(frames)} frames to {Path(args.out) / 'highlight' / spec.effect}")
    return EXIT_OK


def cmd_serve(args, cfg: dict) -> int:
    import uvicorn

    from .service import build_app

    app = build_app(Path(args.scenes))
    uvicorn.run(app,
                host=_pick(args, cfg, "host", "127.0.0.1"),
                port=int(_pick(args, cfg, "port", 8000)))
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        cfg = _load_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary maps errors to exit codes
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
