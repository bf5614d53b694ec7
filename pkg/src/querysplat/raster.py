"""Differentiable splatting of 3D Gaussians.

Projects activated Gaussians to screen space (EWA: cov2d = J W cov3d W^T J^T
with the perspective Jacobian J), sorts by depth, and alpha-composites color /
feature / depth attributes front to back. An isotropic dilation s*I is added
to every projected covariance (the progressive low-pass filter input).

`rasterize_forward` runs 16x16 tiles with conservative per-Gaussian bounding
boxes; `reference_rasterize` is the brute-force per-pixel oracle. Both share
projection and ordering and apply the same alpha clamp (0.999) and skip rule
(a < 1/255), so their outputs agree bitwise. `rasterize_backward` returns
analytic gradients in parameter space (positions, log-scales, raw quaternions,
opacity/color logits, features) plus per-Gaussian screen-space positional
gradient norms used by densification.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import read_array, write_array
from .geometry import quat_mul, quat_to_rotmat, rotmat_to_quat

ALPHA_CLAMP = 0.999
SKIP_ALPHA = 1.0 / 255.0
TILE = 16
DEFAULT_NEAR = 0.01


@dataclass
class Camera:
    """Pinhole camera: world-to-camera rigid transform + intrinsics (pixels)."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = DEFAULT_NEAR

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self):
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if not np.isclose(np.linalg.det(R), 1.0, atol=1e-6):
            raise ValueError("camera rotation must have det +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")
        if self.near <= 0:
            raise ValueError("near plane must be positive")

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def view_dir(self) -> np.ndarray:
        """Optical axis (+z) in world coordinates."""
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])

    def scaled(self, factor: float) -> "Camera":
        """Camera for an image resized by `factor` (e.g. feature-grid renders)."""
        return Camera(
            self.rotation,
            self.translation,
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
            self.near,
        )


@dataclass
class GaussianSet:
    """Raw per-Gaussian parameters; activations happen at use sites."""

    positions: np.ndarray
    log_scales: np.ndarray
    quaternions: np.ndarray
    opacity_logits: np.ndarray
    color_logits: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        n = self.positions.shape[0]
        assert self.positions.shape == (n, 3)
        assert self.log_scales.shape == (n, 3)
        assert self.quaternions.shape == (n, 4)
        assert self.opacity_logits.shape == (n,)
        assert self.color_logits.shape == (n, 3)
        if self.features is not None:
            assert self.features.shape[0] == n

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.positions.copy(),
            self.log_scales.copy(),
            self.quaternions.copy(),
            self.opacity_logits.copy(),
            self.color_logits.copy(),
            None if self.features is None else self.features.copy(),
        )

    def astype(self, dtype) -> "GaussianSet":
        return GaussianSet(
            self.positions.astype(dtype),
            self.log_scales.astype(dtype),
            self.quaternions.astype(dtype),
            self.opacity_logits.astype(dtype),
            self.color_logits.astype(dtype),
            None if self.features is None else self.features.astype(dtype),
        )


@dataclass
class Projected2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    valid: bool


@dataclass
class RenderOutput:
    color: np.ndarray | None
    alpha: np.ndarray
    depth: np.ndarray | None
    feature: np.ndarray | None = None


@dataclass
class ParamGrads:
    positions: np.ndarray
    log_scales: np.ndarray
    quaternions: np.ndarray
    opacity_logits: np.ndarray
    color_logits: np.ndarray
    features: np.ndarray | None
    screen_grad_norm: np.ndarray


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _check_finite_params(gset: GaussianSet):
    stacked = [gset.positions, gset.log_scales, gset.quaternions, gset.opacity_logits[:, None], gset.color_logits]
    if gset.features is not None:
        stacked.append(gset.features)
    bad = ~np.all([np.all(np.isfinite(a), axis=1) for a in stacked], axis=0)
    if np.any(bad):
        raise ValueError(f"non-finite parameters in Gaussian index {int(np.argmax(bad))}")


def activate(gset: GaussianSet) -> dict:
    """Raw parameters -> rendering quantities (rotations, covariances, opacities, colors)."""
    dt = gset.positions.dtype
    norms = np.linalg.norm(gset.quaternions, axis=1, keepdims=True)
    identity = np.zeros_like(gset.quaternions)
    identity[:, 0] = 1.0
    qn = np.where(norms < 1e-8, identity, gset.quaternions / np.maximum(norms, 1e-30))
    R = quat_to_rotmat(qn)
    scales = np.exp(gset.log_scales)
    M = R * scales[:, None, :]
    cov = M @ np.swapaxes(M, 1, 2)
    return {
        "positions": gset.positions,
        "scales": scales,
        "rotations": R.astype(dt),
        "cov3d": cov.astype(dt),
        "opacities": _sigmoid(gset.opacity_logits),
        "colors": _sigmoid(gset.color_logits),
        "features": gset.features,
        "quat_norm": norms[:, 0],
        "quat_unit": qn,
    }


# -- projection ---------------------------------------------------------------


def _project_batch(act: dict, cam: Camera, s: float) -> dict:
    """EWA projection of all Gaussians; caches intermediates for backward."""
    dt = act["positions"].dtype
    W = cam.rotation.astype(dt)
    t = cam.translation.astype(dt)
    fx, fy, cx, cy = (dt.type(v) for v in (cam.fx, cam.fy, cam.cx, cam.cy))

    p_cam = act["positions"] @ W.T + t
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    in_front = z > cam.near
    z_safe = np.where(in_front, z, dt.type(1.0))

    mean2d = np.stack([fx * x / z_safe + cx, fy * y / z_safe + cy], axis=1)

    n = p_cam.shape[0]
    J = np.zeros((n, 2, 3), dtype=dt)
    J[:, 0, 0] = fx / z_safe
    J[:, 0, 2] = -fx * x / z_safe**2
    J[:, 1, 1] = fy / z_safe
    J[:, 1, 2] = -fy * y / z_safe**2

    U = J @ W
    cov2d = U @ act["cov3d"] @ np.swapaxes(U, 1, 2)

    m00 = cov2d[:, 0, 0] + s
    m01 = cov2d[:, 0, 1]
    m11 = cov2d[:, 1, 1] + s
    det = m00 * m11 - m01 * m01
    mid = 0.5 * (m00 + m11)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    ext = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))

    inside = (
        (mean2d[:, 0] >= -ext)
        & (mean2d[:, 0] <= cam.width - 1 + ext)
        & (mean2d[:, 1] >= -ext)
        & (mean2d[:, 1] <= cam.height - 1 + ext)
    )
    valid = in_front & inside & (det > 1e-12)

    return {
        "p_cam": p_cam,
        "mean2d": mean2d,
        "cov2d": cov2d,
        "J": J,
        "U": U,
        "W": W,
        "m": (m00, m01, m11),
        "det": det,
        "lam_max": lam_max,
        "valid": valid,
        "depth": z,
    }


def project_gaussian(position: np.ndarray, cov3d: np.ndarray, cam: Camera, s: float = 0.0) -> Projected2D:
    """Project one activated Gaussian (position + 3D covariance) to screen space."""
    act = {
        "positions": np.asarray(position, dtype=np.float64).reshape(1, 3),
        "cov3d": np.asarray(cov3d, dtype=np.float64).reshape(1, 3, 3),
    }
    pr = _project_batch(act, cam, s)
    return Projected2D(pr["mean2d"][0], pr["cov2d"][0], float(pr["depth"][0]), bool(pr["valid"][0]))


def depth_order(depths: np.ndarray) -> np.ndarray:
    """Stable ascending permutation by depth; ties keep original index order."""
    return np.argsort(np.asarray(depths), kind="stable")


# -- compositing ---------------------------------------------------------------


def _skip_radii(m, opacities, dt):
    """Per-axis half-extents of the a >= 1/255 region of each Gaussian."""
    m00, m01, m11 = m
    c = 2.0 * np.log(np.maximum(opacities, 1e-12) * 255.0)
    c = np.maximum(c, 0.0)
    rx = np.sqrt(np.maximum(c * m00, 0.0)) + dt.type(1e-3)
    ry = np.sqrt(np.maximum(c * m11, 0.0)) + dt.type(1e-3)
    live = opacities >= SKIP_ALPHA
    return rx, ry, live


def _alpha_block(mx, my, inv00, inv01, inv11, opacity, X, Y):
    """Effective per-pixel alpha of one Gaussian over a pixel block."""
    dx = X - mx
    dy = Y - my
    q = inv00 * dx * dx + 2.0 * inv01 * dx * dy + inv11 * dy * dy
    a = opacity * np.exp(-0.5 * q)
    return np.where(a >= SKIP_ALPHA, np.minimum(a, ALPHA_CLAMP), 0.0)


def _prep(gset: GaussianSet, cam: Camera, s: float, channels):
    if s < 0:
        raise ValueError("low-pass dilation s must be >= 0")
    _check_finite_params(gset)
    act = activate(gset)
    if "feature" in channels and act["features"] is None:
        raise ValueError("feature channel requested but GaussianSet has no features")
    pr = _project_batch(act, cam, s)
    dt = gset.positions.dtype
    valid_idx = np.nonzero(pr["valid"])[0]
    order = valid_idx[depth_order(pr["depth"][valid_idx])]

    m00, m01, m11 = pr["m"]
    det = pr["det"]
    inv00 = m11 / det
    inv01 = -m01 / det
    inv11 = m00 / det
    rx, ry, live = _skip_radii(pr["m"], act["opacities"], dt)
    order = np.array([i for i in order if live[i]], dtype=np.int64)
    return act, pr, dt, order, (inv00, inv01, inv11), (rx, ry)


def _alloc_outputs(cam, channels, dt, fdim):
    H, W = cam.height, cam.width
    out = {
        "color": np.zeros((H, W, 3), dtype=dt) if "color" in channels else None,
        "alpha": np.zeros((H, W), dtype=dt),
        "depth": np.zeros((H, W), dtype=dt) if "depth" in channels else None,
        "feature": np.zeros((H, W, fdim), dtype=dt) if "feature" in channels else None,
    }
    return out


def _composite_block(idxs, act, pr, inv, X, Y, out, sl, background, channels, dt):
    """Front-to-back compositing of `idxs` (already depth-ordered) over one block."""
    inv00, inv01, inv11 = inv
    T = np.ones(X.shape, dtype=dt)
    for i in idxs:
        a = _alpha_block(
            pr["mean2d"][i, 0], pr["mean2d"][i, 1], inv00[i], inv01[i], inv11[i], act["opacities"][i], X, Y
        )
        w = T * a
        if out["color"] is not None:
            out["color"][sl] += w[..., None] * act["colors"][i]
        if out["feature"] is not None:
            out["feature"][sl] += w[..., None] * act["features"][i]
        if out["depth"] is not None:
            out["depth"][sl] += w * pr["depth"][i]
        out["alpha"][sl] += w
        T = T * (1.0 - a)
    if out["color"] is not None and background is not None:
        out["color"][sl] += T[..., None] * np.asarray(background, dtype=dt)


def reference_rasterize(
    gset: GaussianSet, cam: Camera, s: float, channels=("color",), background=(0.0, 0.0, 0.0)
) -> RenderOutput:
    """Brute-force oracle: full per-pixel loop over all valid Gaussians."""
    act, pr, dt, order, inv, _ = _prep(gset, cam, s, channels)
    out = _alloc_outputs(cam, channels, dt, gset.feature_dim)
    X, Y = np.meshgrid(np.arange(cam.width, dtype=dt), np.arange(cam.height, dtype=dt))
    _composite_block(order, act, pr, inv, X, Y, out, np.s_[:, :], background, channels, dt)
    np.minimum(out["alpha"], 1.0, out=out["alpha"])
    return RenderOutput(out["color"], out["alpha"], out["depth"], out["feature"])


def _tile_lists(pr, order, rx, ry, cam):
    """Per-tile candidate index lists (depth order preserved)."""
    ntx = (cam.width + TILE - 1) // TILE
    nty = (cam.height + TILE - 1) // TILE
    tiles = [[[] for _ in range(ntx)] for _ in range(nty)]
    mean2d = pr["mean2d"]
    for i in order:
        x0 = int(np.floor((mean2d[i, 0] - rx[i]) / TILE))
        x1 = int(np.floor((mean2d[i, 0] + rx[i]) / TILE))
        y0 = int(np.floor((mean2d[i, 1] - ry[i]) / TILE))
        y1 = int(np.floor((mean2d[i, 1] + ry[i]) / TILE))
        for ty in range(max(y0, 0), min(y1, nty - 1) + 1):
            for tx in range(max(x0, 0), min(x1, ntx - 1) + 1):
                tiles[ty][tx].append(i)
    return tiles, ntx, nty


def rasterize_forward(
    gset: GaussianSet, cam: Camera, s: float, channels=("color",), background=(0.0, 0.0, 0.0)
) -> RenderOutput:
    """Tiled front-to-back rasterization; agrees with `reference_rasterize` bitwise."""
    act, pr, dt, order, inv, (rx, ry) = _prep(gset, cam, s, channels)
    out = _alloc_outputs(cam, channels, dt, gset.feature_dim)
    tiles, ntx, nty = _tile_lists(pr, order, rx, ry, cam)
    cols = np.arange(cam.width, dtype=dt)
    rows = np.arange(cam.height, dtype=dt)
    for ty in range(nty):
        for tx in range(ntx):
            sl = np.s_[ty * TILE : min((ty + 1) * TILE, cam.height), tx * TILE : min((tx + 1) * TILE, cam.width)]
            X, Y = np.meshgrid(cols[sl[1]], rows[sl[0]])
            _composite_block(tiles[ty][tx], act, pr, inv, X, Y, out, sl, background, channels, dt)
    np.minimum(out["alpha"], 1.0, out=out["alpha"])
    return RenderOutput(out["color"], out["alpha"], out["depth"], out["feature"])


# -- backward -------------------------------------------------------------------


def _quat_rotmat_grad(qn: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """d(sum dR * R(qn))/dqn for unit quaternions, vectorized over N."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = np.empty_like(qn)
    g[:, 0] = 2 * (
        -z * dR[:, 0, 1] + y * dR[:, 0, 2] + z * dR[:, 1, 0] - x * dR[:, 1, 2] - y * dR[:, 2, 0] + x * dR[:, 2, 1]
    )
    g[:, 1] = 2 * (
        y * dR[:, 0, 1]
        + z * dR[:, 0, 2]
        + y * dR[:, 1, 0]
        - 2 * x * dR[:, 1, 1]
        - w * dR[:, 1, 2]
        + z * dR[:, 2, 0]
        + w * dR[:, 2, 1]
        - 2 * x * dR[:, 2, 2]
    )
    g[:, 2] = 2 * (
        -2 * y * dR[:, 0, 0]
        + x * dR[:, 0, 1]
        + w * dR[:, 0, 2]
        + x * dR[:, 1, 0]
        + z * dR[:, 1, 2]
        - w * dR[:, 2, 0]
        + z * dR[:, 2, 1]
        - 2 * y * dR[:, 2, 2]
    )
    g[:, 3] = 2 * (
        -2 * z * dR[:, 0, 0]
        - w * dR[:, 0, 1]
        + x * dR[:, 0, 2]
        + w * dR[:, 1, 0]
        - 2 * z * dR[:, 1, 1]
        + y * dR[:, 1, 2]
        + x * dR[:, 2, 0]
        + y * dR[:, 2, 1]
    )
    return g


def rasterize_backward(
    gset: GaussianSet,
    cam: Camera,
    s: float,
    grad: RenderOutput,
    channels=("color",),
    background=(0.0, 0.0, 0.0),
) -> ParamGrads:
    """Analytic gradients of a scalar loss given per-pixel output gradients.

    `grad` fields may be None (treated as zero). Occluded or skipped Gaussians
    receive exactly zero gradient. The depth channel is forward-only: its
    gradient flows into camera-space z but is rarely exercised.
    """
    act, pr, dt, order, inv, (rx, ry) = _prep(gset, cam, s, channels)
    n = gset.count
    fdim = gset.feature_dim

    g_color = None if grad.color is None else np.asarray(grad.color, dtype=dt)
    g_alpha = None if grad.alpha is None else np.asarray(grad.alpha, dtype=dt)
    g_depth = None if grad.depth is None else np.asarray(grad.depth, dtype=dt)
    g_feat = None if grad.feature is None else np.asarray(grad.feature, dtype=dt)
    for name, g, want in (("color", g_color, (cam.height, cam.width, 3)), ("alpha", g_alpha, (cam.height, cam.width))):
        if g is not None and g.shape != want:
            raise ValueError(f"grad.{name} has shape {g.shape}, expected {want}")
    if g_feat is not None and g_feat.shape != (cam.height, cam.width, fdim):
        raise ValueError("grad.feature shape mismatch")

    d_mean2d = np.zeros((n, 2), dtype=dt)
    d_inv = np.zeros((n, 3), dtype=dt)  # dL/dMinv as (00, 01sym, 11)
    d_opac = np.zeros(n, dtype=dt)
    d_color = np.zeros((n, 3), dtype=dt)
    d_feature = np.zeros((n, fdim), dtype=dt) if fdim else None
    d_depthattr = np.zeros(n, dtype=dt)

    inv00, inv01, inv11 = inv
    bg = np.asarray(background, dtype=dt)
    tiles, ntx, nty = _tile_lists(pr, order, rx, ry, cam)
    cols = np.arange(cam.width, dtype=dt)
    rows = np.arange(cam.height, dtype=dt)

    for ty in range(nty):
        for tx in range(ntx):
            idxs = tiles[ty][tx]
            if not idxs:
                continue
            sl = np.s_[ty * TILE : min((ty + 1) * TILE, cam.height), tx * TILE : min((tx + 1) * TILE, cam.width)]
            X, Y = np.meshgrid(cols[sl[1]], rows[sl[0]])
            gc = g_color[sl] if g_color is not None else None
            ga = g_alpha[sl] if g_alpha is not None else None
            gd = g_depth[sl] if g_depth is not None else None
            gf = g_feat[sl] if g_feat is not None else None

            # forward sweep over the tile, caching alpha and transmittance
            T = np.ones(X.shape, dtype=dt)
            a_list, t_list = [], []
            for i in idxs:
                a = _alpha_block(
                    pr["mean2d"][i, 0], pr["mean2d"][i, 1], inv00[i], inv01[i], inv11[i], act["opacities"][i], X, Y
                )
                a_list.append(a)
                t_list.append(T)
                T = T * (1.0 - a)

            # suffix accumulator Q = sum_{j>i} (g.u_j) w_j + (g.bg) T_final
            Q = np.zeros(X.shape, dtype=dt)
            if gc is not None:
                Q += T * (gc @ bg)
            for k in range(len(idxs) - 1, -1, -1):
                i = idxs[k]
                a, Ti = a_list[k], t_list[k]
                w = Ti * a
                gu = np.zeros(X.shape, dtype=dt)
                if gc is not None:
                    gu += gc @ act["colors"][i]
                    d_color[i] += (gc * w[..., None]).sum(axis=(0, 1))
                if gf is not None:
                    gu += gf @ act["features"][i]
                    d_feature[i] += (gf * w[..., None]).sum(axis=(0, 1))
                if gd is not None:
                    gu += gd * pr["depth"][i]
                    d_depthattr[i] += (gd * w).sum()
                if ga is not None:
                    gu += ga
                active = (a > 0.0) & (a < ALPHA_CLAMP)
                da = np.where(active, gu * Ti - Q / np.maximum(1.0 - a, 1e-12), 0.0)
                Q = Q + gu * w
                # chain a = opacity * exp(-q/2) through q = d^T Minv d
                dg2d = da * act["opacities"][i]
                g2d = np.where(a > 0, a / act["opacities"][i], 0.0)
                dq = -0.5 * dg2d * g2d
                dx = X - pr["mean2d"][i, 0]
                dy = Y - pr["mean2d"][i, 1]
                gx = dq * 2.0 * (inv00[i] * dx + inv01[i] * dy)
                gy = dq * 2.0 * (inv01[i] * dx + inv11[i] * dy)
                d_mean2d[i, 0] += -gx.sum()
                d_mean2d[i, 1] += -gy.sum()
                d_inv[i, 0] += (dq * dx * dx).sum()
                d_inv[i, 1] += (dq * 2.0 * dx * dy).sum()
                d_inv[i, 2] += (dq * dy * dy).sum()
                d_opac[i] += np.where(active, da * g2d, 0.0).sum()

    # dL/dM from dL/dMinv: dM = -Minv dMinv Minv (symmetric M)
    dMinv = np.zeros((n, 2, 2), dtype=dt)
    dMinv[:, 0, 0] = d_inv[:, 0]
    dMinv[:, 0, 1] = 0.5 * d_inv[:, 1]
    dMinv[:, 1, 0] = 0.5 * d_inv[:, 1]
    dMinv[:, 1, 1] = d_inv[:, 2]
    Minv = np.zeros((n, 2, 2), dtype=dt)
    Minv[:, 0, 0] = inv00
    Minv[:, 0, 1] = inv01
    Minv[:, 1, 0] = inv01
    Minv[:, 1, 1] = inv11
    d_cov2d = -Minv @ dMinv @ Minv

    # covariance chain: cov2d = U cov3d U^T, U = J W
    U = pr["U"]
    G2 = d_cov2d + np.swapaxes(d_cov2d, 1, 2)
    d_U = G2 @ U @ act["cov3d"]
    d_cov3d = np.swapaxes(U, 1, 2) @ d_cov2d @ U
    W = pr["W"]
    d_J = d_U @ W.T

    # mean chain + Jacobian dependence on the camera-space point
    p_cam = pr["p_cam"]
    x, y = p_cam[:, 0], p_cam[:, 1]
    z = np.where(pr["valid"], p_cam[:, 2], dt.type(1.0))
    z2 = z * z
    fx, fy = dt.type(cam.fx), dt.type(cam.fy)
    d_pcam = np.zeros((n, 3), dtype=dt)
    d_pcam[:, 0] = d_mean2d[:, 0] * fx / z + d_J[:, 0, 2] * (-fx / z2)
    d_pcam[:, 1] = d_mean2d[:, 1] * fy / z + d_J[:, 1, 2] * (-fy / z2)
    d_pcam[:, 2] = (
        d_mean2d[:, 0] * (-fx * x / z2)
        + d_mean2d[:, 1] * (-fy * y / z2)
        + d_J[:, 0, 0] * (-fx / z2)
        + d_J[:, 1, 1] * (-fy / z2)
        + d_J[:, 0, 2] * (2 * fx * x / (z2 * z))
        + d_J[:, 1, 2] * (2 * fy * y / (z2 * z))
        + d_depthattr
    )
    invalid = ~pr["valid"]
    d_pcam[invalid] = 0.0
    d_positions = d_pcam @ W

    # cov3d = (R S)(R S)^T
    G3 = d_cov3d + np.swapaxes(d_cov3d, 1, 2)
    Mrs = act["rotations"] * act["scales"][:, None, :]
    d_Mrs = G3 @ Mrs
    d_R = d_Mrs * act["scales"][:, None, :]
    d_logscale = np.einsum("nij,nij->nj", act["rotations"], d_Mrs) * act["scales"]
    d_logscale[invalid] = 0.0

    # rotation -> unit quaternion -> raw quaternion
    qn = act["quat_unit"].astype(dt)
    d_qn = _quat_rotmat_grad(qn, d_R)
    norms = np.maximum(act["quat_norm"].astype(dt), 1e-8)
    proj = d_qn - qn * np.sum(d_qn * qn, axis=1, keepdims=True)
    d_quat = proj / norms[:, None]
    d_quat[act["quat_norm"] < 1e-8] = 0.0
    d_quat[invalid] = 0.0

    opac = act["opacities"]
    d_opac_logit = d_opac * opac * (1.0 - opac)
    col = act["colors"]
    d_color_logit = d_color * col * (1.0 - col)

    return ParamGrads(
        positions=d_positions.astype(dt),
        log_scales=d_logscale,
        quaternions=d_quat,
        opacity_logits=d_opac_logit,
        color_logits=d_color_logit,
        features=d_feature,
        screen_grad_norm=np.linalg.norm(d_mean2d, axis=1),
    )


# -- pose utilities -------------------------------------------------------------


def transform_gaussians(gset: GaussianSet, R: np.ndarray, t: np.ndarray) -> GaussianSet:
    """Rigidly transform a GaussianSet (positions and orientations)."""
    qr = rotmat_to_quat(np.asarray(R, dtype=np.float64)).astype(gset.quaternions.dtype)
    out = gset.copy()
    out.positions = (gset.positions @ np.asarray(R, dtype=gset.positions.dtype).T) + np.asarray(
        t, dtype=gset.positions.dtype
    )
    out.quaternions = quat_mul(np.broadcast_to(qr, gset.quaternions.shape), gset.quaternions)
    return out


# -- file format ----------------------------------------------------------------


def save_gset(path, gset: GaussianSet) -> None:
    """Write `gset v1 N d'` header + parameter blocks in fixed order."""
    with open(path, "wb") as fh:
        fh.write(f"gset v1 {gset.count} {gset.feature_dim}\n".encode("utf-8"))
        write_array(fh, gset.positions.astype(np.float32))
        write_array(fh, gset.log_scales.astype(np.float32))
        write_array(fh, gset.quaternions.astype(np.float32))
        write_array(fh, gset.opacity_logits.astype(np.float32))
        write_array(fh, gset.color_logits.astype(np.float32))
        feats = gset.features if gset.features is not None else np.zeros((gset.count, 0), dtype=np.float32)
        write_array(fh, feats.astype(np.float32))


def load_gset(path) -> GaussianSet:
    with open(path, "rb") as fh:
        header = fh.readline().decode("utf-8").split()
        if len(header) != 4 or header[0] != "gset" or header[1] != "v1":
            raise ValueError(f"bad gset header: {header}")
        n, fdim = int(header[2]), int(header[3])
        positions = read_array(fh)
        log_scales = read_array(fh)
        quaternions = read_array(fh)
        opacity_logits = read_array(fh)
        color_logits = read_array(fh)
        features = read_array(fh)
        if positions.shape != (n, 3) or features.shape != (n, fdim):
            raise ValueError("gset payload does not match header")
        return GaussianSet(
            positions, log_scales, quaternions, opacity_logits, color_logits, features if fdim else None
        )
