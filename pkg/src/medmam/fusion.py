"""Temporal feature-pair alignment: gated Euclidean context-difference fusion,
hyperbolic difference modeling, and cross-space compression, composed into one
differentiable map from a feature pair to a fused representation.

Shapes, with ``d`` the per-layer width and ``3d`` the bundle width:

* inputs ``f1, f2``: ``(N, 3d)``
* fused Euclidean feature ``f_e``: ``(N, 3d)``, gate ``alpha``: ``(N, 1)``
* hyperbolic difference ``delta_h``: ``(N, 3d)``
* compressed output ``f_fused``: ``(N, 2d)``

Every stage returns ``(out, vjp)``; ``medmam_forward_vjp`` chains them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import manifold
from .diffcore import Param, as_f64, concat, layer_norm, linear, relu, sigmoid
from .errors import ContractError

Array = np.ndarray


@dataclass(frozen=True)
class FeatureBundle:
    """One region's temporal feature vector of width 3d (d = 256 at full
    scale; desk-scale experiments use much smaller widths)."""

    values: Array
    region_id: int

    def __post_init__(self):
        values = as_f64(self.values)
        if values.ndim != 1 or values.size % 3 != 0:
            raise ContractError(
                f"feature bundle length {values.shape} must be a flat multiple of 3"
            )
        if not np.all(np.isfinite(values)):
            raise ContractError("feature bundle contains non-finite entries")
        if self.region_id < 0:
            raise ContractError(f"negative region id {self.region_id}")
        object.__setattr__(self, "values", values)


@dataclass
class FusionOutput:
    f_e: Array        # (N, 3d)
    delta_h: Array    # (N, 3d)
    f_fused: Array    # (N, 2d)
    alpha: Array      # (N, 1), strictly inside (0, 1)


@dataclass
class MedMamParams:
    """All learnable state of the fusion pipeline."""

    context_weight: Param      # (3d, 9d)
    context_ln_scale: Param    # (3d,)
    context_ln_shift: Param    # (3d,)
    gate_weight: Param         # (1, 9d)
    gate_bias: Param           # (1,)
    stream1_hidden_w: Param    # (3d, 3d)
    stream1_hidden_b: Param    # (3d,)
    stream1_out_w: Param       # (3d, 3d)
    stream1_out_b: Param       # (3d,)
    stream2_hidden_w: Param
    stream2_hidden_b: Param
    stream2_out_w: Param
    stream2_out_b: Param
    compress1_weight: Param    # (4d, 6d)
    compress1_bias: Param      # (4d,)
    compress1_ln_scale: Param  # (4d,)
    compress1_ln_shift: Param  # (4d,)
    compress2_weight: Param    # (2d, 4d)
    compress2_bias: Param      # (2d,)
    curvature: Param           # scalar, kept positive by the optimizer clamp
    curvature_trainable: bool = True

    def named(self) -> Iterator[Param]:
        for name in (
            "context_weight", "context_ln_scale", "context_ln_shift",
            "gate_weight", "gate_bias",
            "stream1_hidden_w", "stream1_hidden_b", "stream1_out_w", "stream1_out_b",
            "stream2_hidden_w", "stream2_hidden_b", "stream2_out_w", "stream2_out_b",
            "compress1_weight", "compress1_bias",
            "compress1_ln_scale", "compress1_ln_shift",
            "compress2_weight", "compress2_bias",
            "curvature",
        ):
            yield getattr(self, name)

    @property
    def c(self) -> float:
        return float(self.curvature.value)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Array:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_medmam_params(d: int, rng: np.random.Generator, curvature: float = 0.1,
                       curvature_trainable: bool = True,
                       prefix: str = "medmam/") -> MedMamParams:
    """Seeded init: uniform(+-1/sqrt(fan_in)) weights, zero biases, unit LN."""
    if d < 1:
        raise ContractError(f"per-layer width d must be >= 1, got {d}")
    manifold.Curvature(curvature, curvature_trainable)
    b = 3 * d

    def p(name, value):
        return Param(prefix + name, value)

    return MedMamParams(
        context_weight=p("context_weight", _uniform(rng, (b, 3 * b), 3 * b)),
        context_ln_scale=p("context_ln_scale", np.ones(b)),
        context_ln_shift=p("context_ln_shift", np.zeros(b)),
        gate_weight=p("gate_weight", _uniform(rng, (1, 3 * b), 3 * b)),
        gate_bias=p("gate_bias", np.zeros(1)),
        stream1_hidden_w=p("stream1_hidden_w", _uniform(rng, (b, b), b)),
        stream1_hidden_b=p("stream1_hidden_b", np.zeros(b)),
        stream1_out_w=p("stream1_out_w", _uniform(rng, (b, b), b)),
        stream1_out_b=p("stream1_out_b", np.zeros(b)),
        stream2_hidden_w=p("stream2_hidden_w", _uniform(rng, (b, b), b)),
        stream2_hidden_b=p("stream2_hidden_b", np.zeros(b)),
        stream2_out_w=p("stream2_out_w", _uniform(rng, (b, b), b)),
        stream2_out_b=p("stream2_out_b", np.zeros(b)),
        compress1_weight=p("compress1_weight", _uniform(rng, (4 * d, 2 * b), 2 * b)),
        compress1_bias=p("compress1_bias", np.zeros(4 * d)),
        compress1_ln_scale=p("compress1_ln_scale", np.ones(4 * d)),
        compress1_ln_shift=p("compress1_ln_shift", np.zeros(4 * d)),
        compress2_weight=p("compress2_weight", _uniform(rng, (2 * d, 4 * d), 4 * d)),
        compress2_bias=p("compress2_bias", np.zeros(2 * d)),
        curvature=p("curvature", np.array(float(curvature))),
        curvature_trainable=curvature_trainable,
    )


def _check_pair(f1: Array, f2: Array) -> tuple[Array, Array]:
    f1, f2 = as_f64(f1), as_f64(f2)
    if f1.ndim != 2 or f1.shape != f2.shape:
        raise ContractError(
            f"feature pair shapes differ or are not batched: {f1.shape} vs {f2.shape}"
        )
    if f1.shape[1] % 3 != 0:
        raise ContractError(f"bundle width {f1.shape[1]} is not a multiple of 3")
    return f1, f2


# ---------------------------------------------------------------------------
# stage 1: Euclidean gated fusion
# ---------------------------------------------------------------------------


def euclid_fuse_vjp(f1: Array, f2: Array, p: MedMamParams):
    f1, f2 = _check_pair(f1, f2)
    de = f2 - f1
    h, vjp_cat = concat(f1, f2, de)
    ctx_lin = h @ p.context_weight.value.T
    ctx_act, vjp_relu = relu(ctx_lin)
    ctx, vjp_ln = layer_norm(ctx_act, p.context_ln_scale.value, p.context_ln_shift.value)
    gate_lin, vjp_gate = linear(h, p.gate_weight.value, p.gate_bias.value)
    alpha, vjp_sig = sigmoid(gate_lin)
    f_e = alpha * ctx + (1.0 - alpha) * de

    def vjp(g_fe: Array, g_alpha: Array | None = None):
        g_fe = as_f64(g_fe)
        g_alpha_total = np.sum(g_fe * (ctx - de), axis=1, keepdims=True)
        if g_alpha is not None:
            g_alpha_total = g_alpha_total + as_f64(g_alpha)
        g_ctx = alpha * g_fe
        g_de = (1.0 - alpha) * g_fe
        g_act, g_scale, g_shift = vjp_ln(g_ctx)
        (g_ctx_lin,) = vjp_relu(g_act)
        g_h = g_ctx_lin @ p.context_weight.value
        g_wc = g_ctx_lin.T @ h
        (g_gate_lin,) = vjp_sig(g_alpha_total)
        gh2, g_wa, g_b1 = vjp_gate(g_gate_lin)
        g_h = g_h + gh2
        g_f1, g_f2, g_de_cat = vjp_cat(g_h)
        g_de = g_de + g_de_cat
        grads = {
            "context_weight": g_wc,
            "context_ln_scale": g_scale,
            "context_ln_shift": g_shift,
            "gate_weight": g_wa,
            "gate_bias": g_b1,
        }
        return g_f1 - g_de, g_f2 + g_de, grads

    return (f_e, alpha), vjp


def euclid_fuse(f1, f2, p: MedMamParams):
    """Gated sum of a learned context and the raw temporal difference."""
    (f_e, alpha), _ = euclid_fuse_vjp(np.atleast_2d(f1), np.atleast_2d(f2), p)
    if np.asarray(f1).ndim == 1:
        return f_e[0], float(alpha[0, 0])
    return f_e, alpha


# ---------------------------------------------------------------------------
# stage 2: hyperbolic difference
# ---------------------------------------------------------------------------


def _stream_vjp(f: Array, w1: Param, b1: Param, w2: Param, b2: Param):
    pre, vjp_l1 = linear(f, w1.value, b1.value)
    hid, vjp_relu = relu(pre)
    out, vjp_l2 = linear(hid, w2.value, b2.value)

    def vjp(g: Array):
        g_hid, g_w2, g_b2 = vjp_l2(g)
        (g_pre,) = vjp_relu(g_hid)
        g_f, g_w1, g_b1 = vjp_l1(g_pre)
        return g_f, {w1.name: g_w1, b1.name: g_b1, w2.name: g_w2, b2.name: g_b2}

    return out, vjp


def manifold_chain_vjp(s1: Array, s2: Array, c: float, mode: str):
    """Ball projection of two embeddings, then transported log-map difference.

    Rows where both projected points coincide bitwise yield an exact zero
    difference regardless of mode (the paper-mode transport would otherwise
    move the zero tangent off zero).
    """
    if mode not in manifold.TRANSPORT_MODES:
        raise ContractError(f"unknown transport mode '{mode}'")
    x1, vjp_p1 = manifold.project_vjp(s1, c)
    x2, vjp_p2 = manifold.project_vjp(s2, c)
    w, vjp_log = manifold.log_map_vjp(x1, x2, c)
    same = np.all(x1 == x2, axis=1, keepdims=True)
    tfun = manifold.transport_paper_vjp if mode == "paper" else manifold.transport_gyro_vjp
    dh_raw, vjp_t = tfun(x1, x2, w, c)
    dh = np.where(same, 0.0, dh_raw)

    def vjp(g: Array):
        g = np.where(same, 0.0, as_f64(g))
        gu, gv, gw, gc = vjp_t(g)
        gx1_l, gx2_l, gc_l = vjp_log(gw)
        gx1 = gu + gx1_l
        gx2 = gv + gx2_l
        gs1, gc_p1 = vjp_p1(gx1)
        gs2, gc_p2 = vjp_p2(gx2)
        return gs1, gs2, gc + gc_l + gc_p1 + gc_p2

    return dh, vjp, (x1, x2)


def manifold_diff_vjp(f1: Array, f2: Array, p: MedMamParams, mode: str = "paper"):
    f1, f2 = _check_pair(f1, f2)
    s1, vjp_s1 = _stream_vjp(f1, p.stream1_hidden_w, p.stream1_hidden_b,
                             p.stream1_out_w, p.stream1_out_b)
    s2, vjp_s2 = _stream_vjp(f2, p.stream2_hidden_w, p.stream2_hidden_b,
                             p.stream2_out_w, p.stream2_out_b)
    dh, vjp_chain, _ = manifold_chain_vjp(s1, s2, p.c, mode)

    def vjp(g: Array):
        gs1, gs2, gc = vjp_chain(g)
        g_f1, grads1 = vjp_s1(gs1)
        g_f2, grads2 = vjp_s2(gs2)
        grads = {
            "stream1_hidden_w": grads1[p.stream1_hidden_w.name],
            "stream1_hidden_b": grads1[p.stream1_hidden_b.name],
            "stream1_out_w": grads1[p.stream1_out_w.name],
            "stream1_out_b": grads1[p.stream1_out_b.name],
            "stream2_hidden_w": grads2[p.stream2_hidden_w.name],
            "stream2_hidden_b": grads2[p.stream2_hidden_b.name],
            "stream2_out_w": grads2[p.stream2_out_w.name],
            "stream2_out_b": grads2[p.stream2_out_b.name],
            "curvature": np.array(gc),
        }
        return g_f1, g_f2, grads

    return dh, vjp


def manifold_diff(f1, f2, p: MedMamParams, mode: str = "paper"):
    """Transported log-map difference of the two stream embeddings."""
    out, _ = manifold_diff_vjp(np.atleast_2d(f1), np.atleast_2d(f2), p, mode)
    return out[0] if np.asarray(f1).ndim == 1 else out


# ---------------------------------------------------------------------------
# stage 3: cross-space compression
# ---------------------------------------------------------------------------


def cross_space_compress_vjp(f_e: Array, delta_h: Array, p: MedMamParams):
    f_e, delta_h = as_f64(f_e), as_f64(delta_h)
    if f_e.shape != delta_h.shape:
        raise ContractError(
            f"compression inputs differ in shape: {f_e.shape} vs {delta_h.shape}"
        )
    cat, vjp_cat = concat(f_e, delta_h)
    pre, vjp_l1 = linear(cat, p.compress1_weight.value, p.compress1_bias.value)
    act, vjp_relu = relu(pre)
    z1, vjp_ln = layer_norm(act, p.compress1_ln_scale.value, p.compress1_ln_shift.value)
    f_fused, vjp_l2 = linear(z1, p.compress2_weight.value, p.compress2_bias.value)

    def vjp(g: Array):
        g_z1, g_w2, g_b3 = vjp_l2(as_f64(g))
        g_act, g_scale, g_shift = vjp_ln(g_z1)
        (g_pre,) = vjp_relu(g_act)
        g_cat, g_w1, g_b2 = vjp_l1(g_pre)
        g_fe, g_dh = vjp_cat(g_cat)
        grads = {
            "compress1_weight": g_w1,
            "compress1_bias": g_b2,
            "compress1_ln_scale": g_scale,
            "compress1_ln_shift": g_shift,
            "compress2_weight": g_w2,
            "compress2_bias": g_b3,
        }
        return g_fe, g_dh, grads

    return (f_fused, z1), vjp


def cross_space_compress(f_e, delta_h, p: MedMamParams):
    (f_fused, _), _ = cross_space_compress_vjp(np.atleast_2d(f_e), np.atleast_2d(delta_h), p)
    return f_fused[0] if np.asarray(f_e).ndim == 1 else f_fused


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------


def medmam_forward_vjp(f1: Array, f2: Array, p: MedMamParams, mode: str = "paper"):
    """Full pipeline; vjp(g_fused) -> (g_f1, g_f2, {field_name: grad})."""
    f1, f2 = _check_pair(f1, f2)
    (f_e, alpha), vjp_fuse = euclid_fuse_vjp(f1, f2, p)
    dh, vjp_diff = manifold_diff_vjp(f1, f2, p, mode)
    (f_fused, _), vjp_comp = cross_space_compress_vjp(f_e, dh, p)
    out = FusionOutput(f_e=f_e, delta_h=dh, f_fused=f_fused, alpha=alpha)

    def vjp(g_fused: Array):
        g_fe, g_dh, grads_c = vjp_comp(g_fused)
        g_f1_m, g_f2_m, grads_m = vjp_diff(g_dh)
        g_f1_e, g_f2_e, grads_e = vjp_fuse(g_fe)
        grads = {**grads_c, **grads_m, **grads_e}
        return g_f1_m + g_f1_e, g_f2_m + g_f2_e, grads

    return out, vjp


def medmam_forward(f1, f2, p: MedMamParams, mode: str = "paper") -> FusionOutput:
    """Deterministic per-sample map from a temporal feature pair to the fused
    feature; batching is a pure row-wise map."""
    single = np.asarray(f1).ndim == 1
    out, _ = medmam_forward_vjp(np.atleast_2d(f1), np.atleast_2d(f2), p, mode)
    if single:
        return FusionOutput(
            f_e=out.f_e[0], delta_h=out.delta_h[0],
            f_fused=out.f_fused[0], alpha=float(out.alpha[0, 0]),
        )
    return out
