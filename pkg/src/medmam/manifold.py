"""Poincare-ball geometry kernel with learnable curvature.

Convention: curvature ``c > 0``, ball radius ``1/sqrt(c)``, conformal factor
``lambda_x = 2 / (1 - c * ||x||^2)``. Points and tangent vectors are plain
float64 arrays; batched variants operate on row-stacked ``(N, D)`` arrays.

Two parallel-transport variants ship side by side:

* ``mode="paper"`` - the subtractive rule
  ``w - (1 - sqrt(c)*||v||)^2 / (1 - c*<u, w>) * v``. It is not an isometry
  in general; ``transport_audit`` quantifies how far its output norm drifts
  from the input norm.
* ``mode="gyro"`` - the standard gyrovector transport
  ``(lambda_u / lambda_v) * gyr[v, -u] w``, which preserves Riemannian norm.

Ops used inside the trainable pipeline (``project``, ``mobius_add``,
``log_map``, both transports) come with hand-written backward closures that
also produce the curvature cotangent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import as_f64, require_finite
from .errors import ContractError, TransportSingularityError

Array = np.ndarray

_TINY = 1e-15
_ATANH_CLAMP = 1.0 - 1e-15
_BALL_MARGIN = 1e-5  # safeguard rescale factor is (1 - _BALL_MARGIN)
_SINGULAR_EPS = 1e-12

TRANSPORT_MODES = ("paper", "gyro")

CURVATURE_MIN = 1e-6


@dataclass(frozen=True)
class Curvature:
    """Positive ball curvature; optionally trainable (clamped at 1e-6)."""

    value: float = 0.1
    trainable: bool = False

    def __post_init__(self):
        v = float(self.value)
        if not np.isfinite(v) or v <= 0.0:
            raise ContractError(f"curvature must be a positive real, got {self.value}")


@dataclass(frozen=True)
class BallPoint:
    """A point strictly inside the ball of radius 1/sqrt(c)."""

    coords: Array
    c: Curvature

    def __post_init__(self):
        coords = as_f64(self.coords)
        require_finite("BallPoint", coords)
        radius = 1.0 / np.sqrt(self.c.value)
        if np.linalg.norm(coords) >= radius:
            raise ContractError(
                f"point norm {np.linalg.norm(coords):.6g} is not strictly "
                f"inside the ball of radius {radius:.6g}"
            )
        object.__setattr__(self, "coords", coords)


@dataclass(frozen=True)
class TangentVec:
    """A tangent vector attached to a base point."""

    base: BallPoint
    components: Array

    def __post_init__(self):
        comps = as_f64(self.components)
        require_finite("TangentVec", comps)
        if comps.shape != self.base.coords.shape:
            raise ContractError(
                f"tangent components shape {comps.shape} does not match "
                f"base point shape {self.base.coords.shape}"
            )
        object.__setattr__(self, "components", comps)


def _check_c(c) -> float:
    c = float(c)
    if not np.isfinite(c) or c <= 0.0:
        raise ContractError(f"curvature must be a positive real, got {c}")
    return c


def _rows(name: str, x) -> tuple[Array, bool]:
    x = as_f64(x)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ContractError(f"{name}: expected 1-d or 2-d array, got shape {x.shape}")


def _pair(name: str, x, y) -> tuple[Array, Array, bool]:
    xr, was1 = _rows(name, x)
    yr, _ = _rows(name, y)
    if xr.shape != yr.shape:
        raise ContractError(f"{name}: shape mismatch {xr.shape} vs {yr.shape}")
    return xr, yr, was1


def _sq(x: Array) -> Array:
    return np.sum(x * x, axis=1, keepdims=True)


def _dot(x: Array, y: Array) -> Array:
    return np.sum(x * y, axis=1, keepdims=True)


def conformal_factor(x, c) -> Array:
    """lambda_x = 2 / (1 - c * ||x||^2)."""
    c = _check_c(c)
    xr, was1 = _rows("conformal_factor", x)
    lam = 2.0 / (1.0 - c * _sq(xr))
    return float(lam[0, 0]) if was1 else lam[:, 0]


def is_in_ball(x, c) -> bool:
    c = _check_c(c)
    xr, _ = _rows("is_in_ball", x)
    return bool(np.all(_sq(xr) < 1.0 / c))


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def project_vjp(z: Array, c: float):
    """Project onto the ball; returns (points, vjp -> (g_z, g_c)).

    Row behavior: norms at or below the radius pass through unchanged; norms
    above the radius are divided by the norm itself. If the result still sits
    on or outside the boundary (possible when the radius is <= 1) it is pulled
    back to radius * (1 - 1e-5). At the measure-zero branch tie the
    below-threshold derivative is used.
    """
    c = _check_c(c)
    z = as_f64(z)
    require_finite("project", z)
    r = c ** -0.5
    n = np.sqrt(_sq(z))
    above = n > r
    n_safe = np.maximum(n, _TINY)
    out1 = np.where(above, z / n_safe, z)
    n1 = np.where(above, 1.0, n)
    guard = n1 >= r
    # per-row multiplier k: out = k * z
    k = np.where(above, 1.0 / n_safe, 1.0)
    k = np.where(guard, r * (1.0 - _BALL_MARGIN) / n_safe, k)
    out = k * z
    del out1

    def vjp(g: Array):
        g = as_f64(g)
        gdotz = _dot(g, z)
        # dk/dn and dk/dc per branch
        dk_dn = np.where(above, -1.0 / (n_safe * n_safe), 0.0)
        dk_dn = np.where(guard, -r * (1.0 - _BALL_MARGIN) / (n_safe * n_safe), dk_dn)
        dr_dc = -0.5 * c ** -1.5
        dk_dc = np.where(guard, (1.0 - _BALL_MARGIN) / n_safe * dr_dc, 0.0)
        gz = k * g + gdotz * dk_dn * (z / n_safe)
        gc = float(np.sum(gdotz * dk_dc))
        return gz, gc

    return out, vjp


def project(z, c):
    """Map an arbitrary finite vector to a point strictly inside the ball."""
    zr, was1 = _rows("project", z)
    out, _ = project_vjp(zr, c)
    return out[0] if was1 else out


# ---------------------------------------------------------------------------
# Mobius addition
# ---------------------------------------------------------------------------


def mobius_add_vjp(x: Array, y: Array, c: float):
    c = _check_c(c)
    x, y = as_f64(x), as_f64(y)
    x2, y2, xy = _sq(x), _sq(y), _dot(x, y)
    a = 1.0 + 2.0 * c * xy + c * y2
    b = 1.0 - c * x2
    den = 1.0 + 2.0 * c * xy + c * c * x2 * y2
    den_safe = np.maximum(den, _TINY)
    num = a * x + b * y
    out = num / den_safe

    def vjp(g: Array):
        g = as_f64(g)
        g_num = g / den_safe
        g_den = -_dot(g, out) / den_safe
        gx = a * g_num
        gy = b * g_num
        g_a = _dot(g_num, x)
        g_b = _dot(g_num, y)
        g_xy = 2.0 * c * (g_a + g_den)
        g_y2 = c * g_a + c * c * x2 * g_den
        g_x2 = -c * g_b + c * c * y2 * g_den
        gc_rows = (
            (2.0 * xy + y2) * g_a
            - x2 * g_b
            + (2.0 * xy + 2.0 * c * x2 * y2) * g_den
        )
        gx = gx + 2.0 * x * g_x2 + y * g_xy
        gy = gy + 2.0 * y * g_y2 + x * g_xy
        return gx, gy, float(np.sum(gc_rows))

    return out, vjp


def mobius_add(x, y, c):
    """Curvature-c Mobius (gyrovector) addition."""
    xr, yr, was1 = _pair("mobius_add", x, y)
    out, _ = mobius_add_vjp(xr, yr, c)
    return out[0] if was1 else out


# ---------------------------------------------------------------------------
# log / exp maps and distance
# ---------------------------------------------------------------------------


def _coincident_rows(x: Array, y: Array) -> Array:
    return np.all(x == y, axis=1, keepdims=True)


def log_map_vjp(x: Array, y: Array, c: float):
    """Tangent vector at x toward y; coincident rows map to exact zero."""
    c = _check_c(c)
    x, y = as_f64(x), as_f64(y)
    same = _coincident_rows(x, y)
    m, vjp_m = mobius_add_vjp(-x, y, c)
    n = np.sqrt(_sq(m))
    n_safe = np.maximum(n, _TINY)
    sqrt_c = np.sqrt(c)
    q = sqrt_c * n_safe
    clamped = q >= _ATANH_CLAMP
    qc = np.minimum(q, _ATANH_CLAMP)
    t = np.arctanh(qc)
    x2 = _sq(x)
    A = (1.0 - c * x2) / sqrt_c
    u = t / n_safe
    out = np.where(same, 0.0, (A * u) * m)

    def vjp(g: Array):
        g = np.where(same, 0.0, as_f64(g))
        g_m = (A * u) * g
        g_Au = _dot(g, m)
        g_A = u * g_Au
        g_u = A * g_Au
        g_t = g_u / n_safe
        g_n = -t / (n_safe * n_safe) * g_u
        g_q = np.where(clamped, 0.0, g_t / (1.0 - qc * qc))
        g_n = g_n + sqrt_c * g_q
        gc_rows = (n_safe / (2.0 * sqrt_c)) * g_q
        g_m = g_m + np.where(n > _TINY, g_n / n_safe, 0.0) * m
        g_x2 = -sqrt_c * g_A
        gc_rows = gc_rows + (
            -x2 / sqrt_c + (1.0 - c * x2) * (-0.5) * c ** -1.5
        ) * g_A
        g_negx, gy, gc_m = vjp_m(g_m)
        gx = -g_negx + 2.0 * x * g_x2
        return gx, gy, float(np.sum(gc_rows)) + gc_m

    return out, vjp


def log_map(x, y, c):
    xr, yr, was1 = _pair("log_map", x, y)
    out, _ = log_map_vjp(xr, yr, c)
    return out[0] if was1 else out


def exp_map(x, v, c):
    """Shoot a geodesic from x along tangent vector v (inverse of log_map)."""
    c = _check_c(c)
    xr, vr, was1 = _pair("exp_map", x, v)
    require_finite("exp_map", vr)
    nv = np.sqrt(_sq(vr))
    nv_safe = np.maximum(nv, _TINY)
    sqrt_c = np.sqrt(c)
    lam = 2.0 / (1.0 - c * _sq(xr))
    s = np.tanh(sqrt_c * lam * nv_safe / 2.0)
    w = (s / (sqrt_c * nv_safe)) * vr
    out = mobius_add(xr, w, c)
    return out[0] if was1 else out


def geodesic_distance(x, y, c):
    """Symmetric geodesic distance; exactly zero for identical inputs."""
    c = _check_c(c)
    xr, yr, was1 = _pair("geodesic_distance", x, y)
    same = _coincident_rows(xr, yr)
    m = mobius_add(-xr, yr, c)
    if m.ndim == 1:
        m = m[None, :]
    sqrt_c = np.sqrt(c)
    q = np.minimum(sqrt_c * np.sqrt(_sq(m)), _ATANH_CLAMP)
    d = np.where(same, 0.0, (2.0 / sqrt_c) * np.arctanh(q))
    return float(d[0, 0]) if was1 else d[:, 0]


# ---------------------------------------------------------------------------
# parallel transport
# ---------------------------------------------------------------------------


def transport_paper_vjp(u: Array, v: Array, w: Array, c: float):
    """Subtractive transport rule: w - (1 - sqrt(c)||v||)^2 / (1 - c<u,w>) * v."""
    c = _check_c(c)
    u, v, w = as_f64(u), as_f64(v), as_f64(w)
    sqrt_c = np.sqrt(c)
    nv = np.sqrt(_sq(v))
    a = 1.0 - sqrt_c * nv
    num = a * a
    duw = _dot(u, w)
    den = 1.0 - c * duw
    if np.any(np.abs(den) <= _SINGULAR_EPS):
        i = int(np.argmin(np.abs(den)))
        raise TransportSingularityError(
            f"transport denominator 1 - c*<u,w> = {float(den[i, 0]):.3e} is "
            f"singular (inner product <u,w> = {float(duw[i, 0]):.6g})"
        )
    coef = num / den
    out = w - coef * v
    nv_safe = np.maximum(nv, _TINY)

    def vjp(g: Array):
        g = as_f64(g)
        gw = g.copy()
        gv = -coef * g
        g_coef = -_dot(g, v)
        g_num = g_coef / den
        g_den = -coef * g_coef / den
        g_a = 2.0 * a * g_num
        g_nv = -sqrt_c * g_a
        gc_rows = -(nv / (2.0 * sqrt_c)) * g_a
        g_duw = -c * g_den
        gc_rows = gc_rows - duw * g_den
        gu = w * g_duw
        gw = gw + u * g_duw
        gv = gv + np.where(nv > _TINY, g_nv / nv_safe, 0.0) * v
        return gu, gv, gw, float(np.sum(gc_rows))

    return out, vjp


def transport_gyro_vjp(u: Array, v: Array, w: Array, c: float):
    """Gyrovector transport (lambda_u / lambda_v) * gyr[v, -u] w."""
    c = _check_c(c)
    u, v, w = as_f64(u), as_f64(v), as_f64(w)
    u2, v2 = _sq(u), _sq(v)
    uw, vw, uv = _dot(u, w), _dot(v, w), _dot(u, v)
    c2 = c * c
    A = -c2 * vw * u2 - c * uw + 2.0 * c2 * uv * uw
    B = c2 * uw * v2 - c * vw
    D = 1.0 - 2.0 * c * uv + c2 * u2 * v2
    gyr = w + (2.0 / D) * (A * v - B * u)
    ratio = (1.0 - c * v2) / (1.0 - c * u2)
    out = ratio * gyr

    def vjp(g: Array):
        g = as_f64(g)
        g_ratio = _dot(g, gyr)
        g_gyr = ratio * g
        # ratio = (1 - c v2) / (1 - c u2)
        inv_u = 1.0 / (1.0 - c * u2)
        g_v2 = -c * inv_u * g_ratio
        g_u2 = ratio * c * inv_u * g_ratio
        gc_rows = (-v2 + ratio * u2) * inv_u * g_ratio
        # gyr = w + (2/D) (A v - B u)
        gw = g_gyr.copy()
        g_A = (2.0 / D) * _dot(g_gyr, v)
        g_B = -(2.0 / D) * _dot(g_gyr, u)
        gv = (2.0 * A / D) * g_gyr
        gu = -(2.0 * B / D) * g_gyr
        g_D = -_dot(g_gyr, gyr - w) / D
        # A = -c^2 vw u2 - c uw + 2 c^2 uv uw
        g_vw = -c2 * u2 * g_A
        g_u2 = g_u2 - c2 * vw * g_A
        g_uw = (-c + 2.0 * c2 * uv) * g_A
        g_uv = 2.0 * c2 * uw * g_A
        gc_rows = gc_rows + (-2.0 * c * vw * u2 - uw + 4.0 * c * uv * uw) * g_A
        # B = c^2 uw v2 - c vw
        g_uw = g_uw + c2 * v2 * g_B
        g_v2 = g_v2 + c2 * uw * g_B
        g_vw = g_vw - c * g_B
        gc_rows = gc_rows + (2.0 * c * uw * v2 - vw) * g_B
        # D = 1 - 2 c uv + c^2 u2 v2
        g_uv = g_uv - 2.0 * c * g_D
        g_u2 = g_u2 + c2 * v2 * g_D
        g_v2 = g_v2 + c2 * u2 * g_D
        gc_rows = gc_rows + (-2.0 * uv + 2.0 * c * u2 * v2) * g_D
        # fan reductions back to vectors
        gu = gu + 2.0 * u * g_u2 + w * g_uw + v * g_uv
        gv = gv + 2.0 * v * g_v2 + w * g_vw + u * g_uv
        gw = gw + u * g_uw + v * g_vw
        return gu, gv, gw, float(np.sum(gc_rows))

    return out, vjp


def parallel_transport(u, v, w, c, mode: str = "paper"):
    """Transport tangent vector w from the tangent space at u to v."""
    if mode not in TRANSPORT_MODES:
        raise ContractError(f"unknown transport mode '{mode}'")
    ur, was1 = _rows("parallel_transport", u)
    vr, _ = _rows("parallel_transport", v)
    wr, _ = _rows("parallel_transport", w)
    if not (ur.shape == vr.shape == wr.shape):
        raise ContractError(
            f"parallel_transport: shapes differ u={ur.shape} v={vr.shape} w={wr.shape}"
        )
    fn = transport_paper_vjp if mode == "paper" else transport_gyro_vjp
    out, _ = fn(ur, vr, wr, c)
    return out[0] if was1 else out


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------


def sample_ball(rng: np.random.Generator, n: int, dim: int, c: float,
                max_radius_frac: float = 0.85) -> Array:
    """Uniform-in-ball sample, kept away from the boundary for conditioning."""
    c = _check_c(c)
    direction = rng.normal(size=(n, dim))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), _TINY)
    radius = (1.0 / np.sqrt(c)) * max_radius_frac * rng.uniform(size=(n, 1)) ** (1.0 / dim)
    return direction * radius


def transport_audit(c: float, dim: int = 8, trials: int = 1000, seed: int = 0) -> dict:
    """Measure how far the paper-mode transport drifts from norm
    preservation, against the gyrovector reference.

    Returns summary statistics; never asserts that the deviation is small.
    """
    c = _check_c(c)
    rng = np.random.default_rng(seed)
    u = sample_ball(rng, trials, dim, c)
    v = sample_ball(rng, trials, dim, c)
    w = rng.normal(size=(trials, dim))

    den = 1.0 - c * _dot(u, w)
    ok = np.abs(den[:, 0]) > 1e-6
    u, v, w = u[ok], v[ok], w[ok]

    paper = parallel_transport(u, v, w, c, mode="paper")
    gyro = parallel_transport(u, v, w, c, mode="gyro")

    wn = np.linalg.norm(w, axis=1)
    paper_dev = np.abs(np.linalg.norm(paper, axis=1) - wn) / wn
    lam_u = conformal_factor(u, c)
    lam_v = conformal_factor(v, c)
    riem_in = lam_u * wn
    riem_out = lam_v * np.linalg.norm(gyro, axis=1)
    gyro_dev = np.abs(riem_out - riem_in) / riem_in
    diff = np.linalg.norm(paper - gyro, axis=1) / wn

    return {
        "curvature": float(c),
        "dim": int(dim),
        "trials": int(trials),
        "used": int(u.shape[0]),
        "excluded_near_singular": int(trials - u.shape[0]),
        "paper_euclidean_norm_rel_dev_max": float(paper_dev.max()),
        "paper_euclidean_norm_rel_dev_mean": float(paper_dev.mean()),
        "gyro_riemannian_norm_rel_dev_max": float(gyro_dev.max()),
        "gyro_riemannian_norm_rel_dev_mean": float(gyro_dev.mean()),
        "paper_vs_gyro_rel_diff_max": float(diff.max()),
        "paper_vs_gyro_rel_diff_mean": float(diff.mean()),
    }
