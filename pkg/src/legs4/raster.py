"""Tile-based software rasterizer for Gaussian splats with a differentiable
feature path.

Geometry (means, covariances, opacities) is fixed per call, so compositing
reduces to a sparse per-pixel weight matrix over Gaussians: out(p) = sum_i
w_i(p) * payload_i with w_i = alpha_i * prod_{k<i} (1 - alpha_k), contributors
visited in (depth, index) order, accumulation stopping once transmittance
drops below `stop_transmittance`. The weights are built once per
(frame, camera) as a `CompositePlan` and reused for features, colors, depth,
and for the backward pass (the output is linear in the payload, so
d out / d payload_i = w_i exactly, including the truncation).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import scipy.sparse as sp

from .scene import Camera, GaussianFrame


@dataclass(frozen=True)
class TileConfig:
    tile_size: int = 16
    eps_cov: float = 0.3           # px^2 added to the cov2d diagonal
    cutoff_radius: float = 3.0     # Mahalanobis cutoff; alpha = 0 beyond it
    near: float = 0.01             # splats at z <= near are culled
    stop_transmittance: float = 1e-4


class RenderError(ValueError):
    pass


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (N, 4) in (w, x, y, z) order -> rotation matrices (N, 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


@dataclass
class ScreenSplats:
    """Projected splats, struct-of-arrays. `index` maps back into the frame."""

    means2d: np.ndarray    # (K, 2) pixel coords
    cov2d: np.ndarray      # (K, 3) upper triangle (a, b, c) of the 2x2 covariance
    conic: np.ndarray      # (K, 3) upper triangle of the inverse covariance
    depth: np.ndarray      # (K,) camera-space z
    opacity: np.ndarray    # (K,)
    radius: np.ndarray     # (K, 2) cutoff extents in x and y
    index: np.ndarray      # (K,) original Gaussian indices

    @property
    def count(self) -> int:
        return self.means2d.shape[0]


def project(frame: GaussianFrame, camera: Camera, cfg: TileConfig = TileConfig()) -> ScreenSplats:
    """Perspective-project 3D Gaussians to screen-space splats.

    cov2d = J W Sigma W^T J^T + eps_cov * I with the pinhole Jacobian J
    evaluated at the mean; splats behind the near plane or fully outside the
    image are culled.
    """
    means = frame.means.astype(np.float64)
    w2c = camera.world_to_cam
    rot = w2c[:3, :3]
    cam_pts = means @ rot.T + w2c[:3, 3]
    z = cam_pts[:, 2]

    keep = z > cfg.near
    if not np.any(keep):
        return _empty_screen()
    cam_pts, z = cam_pts[keep], z[keep]
    idx = np.nonzero(keep)[0]

    rmat = quat_to_rotmat(frame.rotations[keep])
    scales = frame.scales[keep].astype(np.float64)
    a_mat = rmat * scales[:, None, :]
    cov3d = a_mat @ a_mat.transpose(0, 2, 1)
    cov_cam = np.einsum("ij,njk,lk->nil", rot, cov3d, rot)

    fx, fy = camera.fx, camera.fy
    x, y = cam_pts[:, 0], cam_pts[:, 1]
    inv_z = 1.0 / z
    jac = np.zeros((len(z), 2, 3))
    jac[:, 0, 0] = fx * inv_z
    jac[:, 0, 2] = -fx * x * inv_z * inv_z
    jac[:, 1, 1] = fy * inv_z
    jac[:, 1, 2] = -fy * y * inv_z * inv_z
    cov2d_full = jac @ cov_cam @ jac.transpose(0, 2, 1)
    a = cov2d_full[:, 0, 0] + cfg.eps_cov
    b = cov2d_full[:, 0, 1]
    c = cov2d_full[:, 1, 1] + cfg.eps_cov

    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    # exact axis-aligned extents of the cutoff ellipse d^T cov2d^-1 d = R^2
    r_ext = cfg.cutoff_radius * np.sqrt(np.stack([a, c], axis=1))

    u = fx * x * inv_z + camera.cx
    v = fy * y * inv_z + camera.cy
    means2d = np.stack([u, v], axis=1)

    on_image = (
        (u + r_ext[:, 0] >= 0.0) & (u - r_ext[:, 0] <= camera.width)
        & (v + r_ext[:, 1] >= 0.0) & (v - r_ext[:, 1] <= camera.height)
        & np.isfinite(u) & np.isfinite(v)
    )
    sel = np.nonzero(on_image)[0]
    return ScreenSplats(
        means2d=means2d[sel], cov2d=np.stack([a, b, c], axis=1)[sel],
        conic=conic[sel], depth=z[sel],
        opacity=frame.opacities[keep][sel].astype(np.float64),
        radius=r_ext[sel], index=idx[sel])


def _empty_screen() -> ScreenSplats:
    z0 = np.zeros(0)
    return ScreenSplats(means2d=np.zeros((0, 2)), cov2d=np.zeros((0, 3)),
                        conic=np.zeros((0, 3)), depth=z0, opacity=z0,
                        radius=np.zeros((0, 2)), index=np.zeros(0, dtype=np.int64))


@dataclass
class CompositePlan:
    """Per-pixel contributor lists in composite order plus a CSR view.

    Rows are pixels (row-major), columns are original Gaussian indices.
    Within a row, entries appear in (depth, index) order.
    """

    width: int
    height: int
    num_gaussians: int
    indptr: np.ndarray        # (H*W + 1,)
    contrib_idx: np.ndarray   # (nnz,) original Gaussian index
    contrib_w: np.ndarray     # (nnz,) compositing weight alpha_i * T_i
    contrib_depth: np.ndarray  # (nnz,) camera z of the contributor
    _csr: Optional[sp.csr_matrix] = field(default=None, repr=False)

    @property
    def csr(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.contrib_w, self.contrib_idx, self.indptr),
                shape=(self.width * self.height, self.num_gaussians))
        return self._csr

    @property
    def alpha(self) -> np.ndarray:
        """Accumulated opacity per pixel, (H, W)."""
        sums = np.add.reduceat(
            np.concatenate([self.contrib_w, [0.0]]), self.indptr[:-1])
        sums[self.indptr[:-1] == self.indptr[1:]] = 0.0
        return sums.reshape(self.height, self.width)

    def depth_image(self) -> np.ndarray:
        vals = self.contrib_w * self.contrib_depth
        sums = np.add.reduceat(np.concatenate([vals, [0.0]]), self.indptr[:-1])
        sums[self.indptr[:-1] == self.indptr[1:]] = 0.0
        return sums.reshape(self.height, self.width)

    def apply(self, payload: np.ndarray) -> np.ndarray:
        """Composite a per-Gaussian payload (M, C) -> (H, W, C)."""
        payload = np.asarray(payload)
        flat = payload.reshape(self.num_gaussians, -1)
        out = self.csr @ flat
        return out.reshape(self.height, self.width, *payload.shape[1:])

    def backward(self, grad_output: np.ndarray) -> np.ndarray:
        """Gradient of sum(grad_output * apply(payload)) w.r.t. the payload."""
        grad = np.asarray(grad_output).reshape(self.width * self.height, -1)
        return np.asarray(self.csr.T @ grad)


def build_plan(frame: GaussianFrame, camera: Camera,
               cfg: TileConfig = TileConfig()) -> CompositePlan:
    splats = project(frame, camera, cfg)
    width, height, ts = camera.width, camera.height, cfg.tile_size
    n_tx = (width + ts - 1) // ts
    n_ty = (height + ts - 1) // ts

    if splats.count == 0:
        return CompositePlan(width, height, frame.count,
                             np.zeros(width * height + 1, dtype=np.int64),
                             np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0))

    u, v = splats.means2d[:, 0], splats.means2d[:, 1]
    rx, ry = splats.radius[:, 0], splats.radius[:, 1]
    # pixel j is touched when |j + 0.5 - u| <= rx
    j0 = np.maximum(np.ceil(u - rx - 0.5), 0).astype(np.int64)
    j1 = np.minimum(np.floor(u + rx - 0.5), width - 1).astype(np.int64)
    i0 = np.maximum(np.ceil(v - ry - 0.5), 0).astype(np.int64)
    i1 = np.minimum(np.floor(v + ry - 0.5), height - 1).astype(np.int64)
    valid = (j1 >= j0) & (i1 >= i0)

    tile_lists: list[list[int]] = [[] for _ in range(n_tx * n_ty)]
    for k in np.nonzero(valid)[0]:
        for ty in range(i0[k] // ts, i1[k] // ts + 1):
            for tx in range(j0[k] // ts, j1[k] // ts + 1):
                tile_lists[ty * n_tx + tx].append(k)

    cutoff_sq = cfg.cutoff_radius ** 2
    pix_rows, gauss_cols, weights, depths = [], [], [], []
    for tile_id, members in enumerate(tile_lists):
        if not members:
            continue
        ty, tx = divmod(tile_id, n_tx)
        x_lo, x_hi = tx * ts, min((tx + 1) * ts, width)
        y_lo, y_hi = ty * ts, min((ty + 1) * ts, height)
        mem = np.asarray(members, dtype=np.int64)
        order = np.lexsort((splats.index[mem], splats.depth[mem]))
        mem = mem[order]

        xs = np.arange(x_lo, x_hi) + 0.5
        ys = np.arange(y_lo, y_hi) + 0.5
        px, py = np.meshgrid(xs, ys)          # (th, tw)
        dx = px.reshape(1, -1) - splats.means2d[mem, 0:1]
        dy = py.reshape(1, -1) - splats.means2d[mem, 1:2]
        ca, cb, cc = (splats.conic[mem, i:i + 1] for i in range(3))
        maha = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
        alpha = splats.opacity[mem, None] * np.exp(-0.5 * maha)
        alpha[maha > cutoff_sq] = 0.0

        trans = np.cumprod(1.0 - alpha, axis=0)
        trans = np.vstack([np.ones((1, alpha.shape[1])), trans[:-1]])
        w = alpha * trans
        w[trans < cfg.stop_transmittance] = 0.0

        # pixel-major nonzeros keep composite order within each pixel
        p_idx, s_idx = np.nonzero(w.T)
        if len(p_idx) == 0:
            continue
        tw = x_hi - x_lo
        pix_lin = (y_lo + p_idx // tw) * width + (x_lo + p_idx % tw)
        pix_rows.append(pix_lin)
        gauss_cols.append(splats.index[mem][s_idx])
        weights.append(w.T[p_idx, s_idx])
        depths.append(splats.depth[mem][s_idx])

    if not pix_rows:
        return CompositePlan(width, height, frame.count,
                             np.zeros(width * height + 1, dtype=np.int64),
                             np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0))

    pix = np.concatenate(pix_rows)
    cols = np.concatenate(gauss_cols)
    wvals = np.concatenate(weights)
    dvals = np.concatenate(depths)
    order = np.argsort(pix, kind="stable")    # stable: keeps in-pixel composite order
    pix, cols, wvals, dvals = pix[order], cols[order], wvals[order], dvals[order]
    indptr = np.zeros(width * height + 1, dtype=np.int64)
    np.add.at(indptr, pix + 1, 1)
    np.cumsum(indptr, out=indptr)
    return CompositePlan(width, height, frame.count, indptr, cols, wvals, dvals)


@dataclass
class RenderOutput:
    """Rendered channels plus the compositing context needed for backward."""

    plan: CompositePlan
    images: dict

    def __getitem__(self, key: str) -> np.ndarray:
        return self.images[key]


VALID_CHANNELS = ("features", "rgb", "depth", "alpha")


def render(frame: GaussianFrame, camera: Camera,
           channels: Iterable[str] = ("features",),
           cfg: TileConfig = TileConfig(),
           features_override: Optional[np.ndarray] = None) -> RenderOutput:
    """Rasterize the requested channels. `features_override` substitutes the
    per-Gaussian payload without touching the frame (used by distillation)."""
    channels = tuple(channels)
    for ch in channels:
        if ch not in VALID_CHANNELS:
            raise RenderError(f"unknown channel '{ch}'")
    plan = build_plan(frame, camera, cfg)
    images: dict = {"alpha": plan.alpha}
    if "features" in channels:
        feats = features_override if features_override is not None else frame.latent_features
        if feats is None:
            raise RenderError("frame has no latent features to render")
        if feats.shape[0] != frame.count:
            raise RenderError("feature payload row count does not match Gaussian count")
        images["features"] = plan.apply(np.asarray(feats, dtype=np.float64))
    if "rgb" in channels:
        images["rgb"] = plan.apply(frame.colors.astype(np.float64))
    if "depth" in channels:
        images["depth"] = plan.depth_image()
    return RenderOutput(plan=plan, images=images)


def render_backward(ctx: RenderOutput | CompositePlan, grad_features: np.ndarray) -> np.ndarray:
    """Per-Gaussian feature gradients for the forward's exact truncation.

    d out(p) / d payload_i = w_i(p), so the gradient is the plan transpose
    applied to the upstream image gradient.
    """
    plan = ctx.plan if isinstance(ctx, RenderOutput) else ctx
    grad = np.asarray(grad_features, dtype=np.float64)
    if grad.shape[0] != plan.height or grad.shape[1] != plan.width:
        raise RenderError(
            f"gradient spatial dims {grad.shape[:2]} do not match render "
            f"context {(plan.height, plan.width)}")
    return plan.backward(grad)
