"""Parameter-free self-attention over k-nearest-neighbor graphs.

Each Gaussian attends to its spatial neighbors (self first); weights are a
softmax over scaled dot products of the latent features themselves, so the
smoothing has no learned parameters and gradients flow to every participant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NeighborGraph:
    """indices[i, 0] == i (self); the rest are nearest others by (distance, index)."""

    indices: np.ndarray  # (M, k_eff) int64

    @property
    def count(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def knn(means: np.ndarray, k: int, chunk: int = 1024) -> NeighborGraph:
    """Exact k-nearest-neighbor lists over 3D means, self included as entry 0,
    remaining entries sorted by (squared distance, index)."""
    means = np.asarray(means, dtype=np.float64)
    m = means.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    k_eff = min(k, m)
    out = np.empty((m, k_eff), dtype=np.int64)
    out[:, 0] = np.arange(m)
    if k_eff == 1:
        return NeighborGraph(out)
    sq = np.sum(means * means, axis=1)
    for lo in range(0, m, chunk):
        hi = min(lo + chunk, m)
        d2 = sq[lo:hi, None] - 2.0 * (means[lo:hi] @ means.T) + sq[None, :]
        rows = np.arange(lo, hi)
        d2[np.arange(hi - lo), rows] = np.inf  # exclude self; it is prepended
        # lexsort last key is primary: sort by distance, ties by column index
        order = np.lexsort((np.broadcast_to(np.arange(m), d2.shape), d2), axis=1)
        out[lo:hi, 1:] = order[:, : k_eff - 1]
    return NeighborGraph(out)


def attend(features: np.ndarray, graph: NeighborGraph):
    """Smoothed features plus a cache for the backward pass.

    out_i = sum_j w_ij F_j with w = softmax_j(F_i . F_j / sqrt(d)) over the
    neighbor list of i.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.shape[0] != graph.count:
        raise ValueError("features row count does not match the neighbor graph")
    d = f.shape[1]
    idx = graph.indices
    gathered = f[idx]                                   # (M, k, d)
    logits = np.einsum("mkd,md->mk", gathered, f) / np.sqrt(d)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    out = np.einsum("mk,mkd->md", w, gathered)
    return out, (f, idx, w)


def attend_backward(cache, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of sum(grad_out * attend(F)) w.r.t. F.

    Three paths: the value path (F_j appears in out_i), the query path (F_i in
    the logits of row i), and the key path (F_j in logit z_ij).
    """
    f, idx, w = cache
    g = np.asarray(grad_out, dtype=np.float64)
    m, d = f.shape
    inv_sqrt_d = 1.0 / np.sqrt(d)
    gathered = f[idx]                                   # (M, k, d)

    grad = np.zeros_like(f)
    # value path: d out_i / d F_{idx[i,j]} += w_ij * g_i
    np.add.at(grad, idx, w[:, :, None] * g[:, None, :])

    # softmax backward: a_ij = g_i . F_j ; gz_ij = w_ij (a_ij - sum_l w_il a_il)
    a = np.einsum("md,mkd->mk", g, gathered)
    gz = w * (a - np.sum(w * a, axis=1, keepdims=True))

    # query path: z_ij = F_i . F_j / sqrt(d)
    grad += inv_sqrt_d * np.einsum("mk,mkd->md", gz, gathered)
    # key path
    np.add.at(grad, idx, inv_sqrt_d * gz[:, :, None] * f[:, None, :])
    return grad
