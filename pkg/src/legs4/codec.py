"""Scene-specific feature compressor: a small tanh MLP autoencoder that maps
high-dimensional language features (D) to the per-Gaussian latent width (d).

Training minimizes mean squared reconstruction error plus a cosine-distance
regularizer weighted by `lam`. Gradients are analytic (verified against
central finite differences in the tests), optimization is Adam.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .blobs import read_blob, write_blob
from .optim import Adam


class CodecError(ValueError):
    pass


class CodecTrainingError(RuntimeError):
    """Raised when training diverges; carries the offending step."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class CodecTrainConfig:
    latent_dim: int
    hidden: tuple[int, ...] = (384,)
    lr: float = 7e-4
    batch_size: int = 4096
    epochs: int = 1
    lam: float = 1e-3
    seed: int = 0


def _mlp_forward(weights, biases, x):
    """tanh on every layer except the last (linear head). Returns output and
    the per-layer activations needed for backprop."""
    acts = [x]
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if i != last:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def _mlp_backward(weights, acts, grad_out):
    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    g = grad_out
    last = len(weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            g = g * (1.0 - acts[i + 1] ** 2)
        grads_w[i] = acts[i].T @ g
        grads_b[i] = g.sum(axis=0)
        g = g @ weights[i].T
    return g, grads_w, grads_b


@dataclass
class CodecParams:
    feature_dim: int
    latent_dim: int
    hidden: tuple[int, ...]
    enc_w: list = field(repr=False, default_factory=list)
    enc_b: list = field(repr=False, default_factory=list)
    dec_w: list = field(repr=False, default_factory=list)
    dec_b: list = field(repr=False, default_factory=list)

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.feature_dim:
            raise CodecError(f"encode: expected last dim {self.feature_dim}, got {x.shape[-1]}")
        flat = x.reshape(-1, self.feature_dim)
        out, _ = _mlp_forward(self.enc_w, self.enc_b, flat)
        return out.reshape(*x.shape[:-1], self.latent_dim)

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.latent_dim:
            raise CodecError(f"decode: expected last dim {self.latent_dim}, got {z.shape[-1]}")
        flat = z.reshape(-1, self.latent_dim)
        out, _ = _mlp_forward(self.dec_w, self.dec_b, flat)
        return out.reshape(*z.shape[:-1], self.feature_dim)

    def _param_list(self):
        return self.enc_w + self.enc_b + self.dec_w + self.dec_b


class IdentityCodec:
    """Pass-through codec for D == d setups (debugging, self-consistency tests)."""

    def __init__(self, dim: int):
        self.feature_dim = dim
        self.latent_dim = dim

    def encode(self, x):
        return np.asarray(x, dtype=np.float64)

    def decode(self, z):
        return np.asarray(z, dtype=np.float64)


def init_codec(feature_dim: int, cfg: CodecTrainConfig,
               rng: np.random.Generator) -> CodecParams:
    dims_enc = [feature_dim, *cfg.hidden, cfg.latent_dim]
    dims_dec = [cfg.latent_dim, *reversed(cfg.hidden), feature_dim]

    def make(dims):
        ws, bs = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            ws.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return ws, bs

    enc_w, enc_b = make(dims_enc)
    dec_w, dec_b = make(dims_dec)
    return CodecParams(feature_dim, cfg.latent_dim, tuple(cfg.hidden),
                       enc_w, enc_b, dec_w, dec_b)


def codec_loss_and_grads(params: CodecParams, x: np.ndarray, lam: float):
    """Loss mean(|x - rec|^2 + lam * (1 - cos(x, rec))) and gradients w.r.t.
    every weight and bias."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    z, acts_e = _mlp_forward(params.enc_w, params.enc_b, x)
    rec, acts_d = _mlp_forward(params.dec_w, params.dec_b, z)

    diff = rec - x
    sq = np.sum(diff * diff, axis=1)

    nx = np.linalg.norm(x, axis=1)
    nr = np.linalg.norm(rec, axis=1)
    ok = (nx > 1e-12) & (nr > 1e-12)
    dots = np.sum(x * rec, axis=1)
    cos = np.zeros(n)
    cos[ok] = dots[ok] / (nx[ok] * nr[ok])
    loss = float(np.mean(sq + lam * (1.0 - np.where(ok, cos, 1.0))))

    grad_rec = 2.0 * diff / n
    # d(1 - cos)/d rec = -(x / (|x||rec|) - cos * rec / |rec|^2)
    safe_nx = np.where(ok, nx, 1.0)
    safe_nr = np.where(ok, nr, 1.0)
    gcos = -(x / (safe_nx * safe_nr)[:, None] - (cos / safe_nr ** 2)[:, None] * rec)
    gcos[~ok] = 0.0
    grad_rec = grad_rec + lam * gcos / n

    grad_z, gw_d, gb_d = _mlp_backward(params.dec_w, acts_d, grad_rec)
    _, gw_e, gb_e = _mlp_backward(params.enc_w, acts_e, grad_z)
    return loss, gw_e + gb_e + gw_d + gb_d


def train_codec(samples: np.ndarray, cfg: CodecTrainConfig) -> tuple[CodecParams, list[float]]:
    """Train on a sample of D-vectors; returns the codec and the per-step loss
    trace (the last entry is the final loss). Deterministic under `cfg.seed`."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise CodecError("train_codec expects a (N, D) sample matrix")
    if cfg.latent_dim < 1 or cfg.latent_dim > samples.shape[1]:
        raise CodecError("latent_dim must be in [1, D]")
    rng = np.random.default_rng(cfg.seed)
    params = init_codec(samples.shape[1], cfg, rng)
    plist = params._param_list()
    opt = Adam(plist, lr=cfg.lr)
    history: list[float] = []
    n = samples.shape[0]
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            batch = samples[order[lo:lo + cfg.batch_size]]
            loss, grads = codec_loss_and_grads(params, batch, cfg.lam)
            if not np.isfinite(loss):
                raise CodecTrainingError(step, f"non-finite loss {loss}")
            opt.step(plist, grads)
            history.append(loss)
            step += 1
    return params, history


def save_codec(params: CodecParams, path: str | Path) -> None:
    root = Path(path)
    blob_dir = root / "codec"
    blob_dir.mkdir(parents=True, exist_ok=True)
    refs = {}
    for group, arrays in (("enc_w", params.enc_w), ("enc_b", params.enc_b),
                          ("dec_w", params.dec_w), ("dec_b", params.dec_b)):
        refs[group] = []
        for i, arr in enumerate(arrays):
            rel = f"codec/{group}_{i}.4leg"
            write_blob(root / rel, np.asarray(arr, dtype=np.float32))
            refs[group].append(rel)
    manifest = {"D": params.feature_dim, "d": params.latent_dim,
                "hidden": list(params.hidden), "weights": refs}
    (root / "codec.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_codec(path: str | Path) -> CodecParams:
    root = Path(path)
    manifest = json.loads((root / "codec.json").read_text())
    groups = {}
    for group in ("enc_w", "enc_b", "dec_w", "dec_b"):
        groups[group] = [read_blob(root / rel).astype(np.float64)
                         for rel in manifest["weights"][group]]
    return CodecParams(int(manifest["D"]), int(manifest["d"]),
                       tuple(manifest["hidden"]), **groups)


def reconstruction_cosine(codec, x: np.ndarray) -> float:
    """Mean cosine similarity between inputs and their reconstructions."""
    x = np.asarray(x, dtype=np.float64)
    rec = codec.decode(codec.encode(x))
    num = np.sum(x * rec, axis=-1)
    den = np.linalg.norm(x, axis=-1) * np.linalg.norm(rec, axis=-1)
    return float(np.mean(num / np.maximum(den, 1e-12)))
