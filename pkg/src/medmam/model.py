"""Parameter assembly and the end-to-end differentiable training step.

The trainable surface depends on the fusion arm:

* ``medmam``       - the full pipeline from :mod:`medmam.fusion`
* ``no_manifold``  - same Euclidean fusion + compression, with the hyperbolic
                     slot zeroed (isolates the manifold branch's contribution)
* ``concat``       - a single linear map of [f1, f2] to the fused width
* ``diff``         - a single linear map of (f2 - f1) to the fused width

All arms share the text projection, the optional matching head, and the
region-query classification head. ``forward_batch`` returns per-component
losses plus a pullback that accumulates gradients into every Param.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fusion, semantics
from .config import RunConfig
from .diffcore import Param, as_f64, linear
from .errors import ContractError

Array = np.ndarray


@dataclass
class ModelParams:
    cfg_fusion_mode: str
    medmam: fusion.MedMamParams | None
    flat_weight: Param | None   # concat / diff arms
    flat_bias: Param | None
    text_proj: Param
    itm_weight: Param
    itm_bias: Param
    head: semantics.HeadParams
    table: dict[str, Param]

    def zero_grads(self) -> None:
        for p in self.table.values():
            p.zero_grad()

    def values(self) -> dict[str, Array]:
        return {name: p.value.copy() for name, p in self.table.items()}

    def load_values(self, values: dict[str, Array]) -> None:
        missing = set(self.table) - set(values)
        extra = set(values) - set(self.table)
        if missing or extra:
            raise ContractError(
                f"checkpoint does not match config: missing={sorted(missing)[:3]} "
                f"extra={sorted(extra)[:3]}"
            )
        for name, p in self.table.items():
            arr = as_f64(values[name])
            if arr.shape != p.value.shape:
                raise ContractError(
                    f"checkpoint entry '{name}' has shape {arr.shape}, "
                    f"expected {p.value.shape}"
                )
            p.value = arr.copy()


def build_params(cfg: RunConfig, rng: np.random.Generator) -> ModelParams:
    d = cfg.d
    bundle = 3 * d
    table: dict[str, Param] = {}

    def track(p: Param) -> Param:
        table[p.name] = p
        return p

    medmam_params = None
    flat_w = flat_b = None
    if cfg.fusion_mode in ("medmam", "no_manifold"):
        medmam_params = fusion.init_medmam_params(
            d, rng, curvature=cfg.curvature,
            curvature_trainable=cfg.curvature_trainable,
        )
        for p in medmam_params.named():
            if cfg.fusion_mode == "no_manifold" and (
                "stream" in p.name or p.name.endswith("curvature")
            ):
                continue  # hyperbolic branch absent in this arm
            track(p)
    else:
        in_width = 2 * bundle if cfg.fusion_mode == "concat" else bundle
        bound = 1.0 / np.sqrt(in_width)
        flat_w = track(Param(
            f"{cfg.fusion_mode}/weight",
            rng.uniform(-bound, bound, size=(2 * d, in_width)),
        ))
        flat_b = track(Param(f"{cfg.fusion_mode}/bias", np.zeros(2 * d)))

    bound = 1.0 / np.sqrt(semantics.TEXT_EMBED_DIM)
    text_proj = track(Param(
        "text/proj",
        rng.uniform(-bound, bound, size=(2 * d, semantics.TEXT_EMBED_DIM)),
    ))
    bound = 1.0 / np.sqrt(4 * d)
    itm_weight = track(Param("itm/match_w", rng.uniform(-bound, bound, size=4 * d)))
    itm_bias = track(Param("itm/match_b", np.zeros(1)))
    head = semantics.init_head_params(d, cfg.n_regions, rng)
    for p in head.named():
        track(p)

    return ModelParams(
        cfg_fusion_mode=cfg.fusion_mode,
        medmam=medmam_params,
        flat_weight=flat_w,
        flat_bias=flat_b,
        text_proj=text_proj,
        itm_weight=itm_weight,
        itm_bias=itm_bias,
        head=head,
        table=table,
    )


# ---------------------------------------------------------------------------
# fused-feature stage per arm
# ---------------------------------------------------------------------------


def _fused_vjp(mp: ModelParams, cfg: RunConfig, f1: Array, f2: Array):
    """Returns (f_fused, vjp(g) -> (g_f1, g_f2, {param_name: grad}))."""
    mode = mp.cfg_fusion_mode
    if mode == "medmam":
        out, vjp_full = fusion.medmam_forward_vjp(f1, f2, mp.medmam, cfg.transport_mode)

        def vjp(g):
            g_f1, g_f2, grads = vjp_full(g)
            return g_f1, g_f2, {getattr(mp.medmam, k).name: v for k, v in grads.items()}

        return out.f_fused, vjp

    if mode == "no_manifold":
        p = mp.medmam
        (f_e, _alpha), vjp_fuse = fusion.euclid_fuse_vjp(f1, f2, p)
        (fused, _z1), vjp_comp = fusion.cross_space_compress_vjp(
            f_e, np.zeros_like(f_e), p
        )

        def vjp(g):
            g_fe, _g_dh, grads_c = vjp_comp(g)
            g_f1, g_f2, grads_e = vjp_fuse(g_fe)
            merged = {**grads_c, **grads_e}
            return g_f1, g_f2, {getattr(p, k).name: v for k, v in merged.items()}

        return fused, vjp

    if mode == "concat":
        cat = np.concatenate([f1, f2], axis=1)
        width = f1.shape[1]
        fused, vjp_lin = linear(cat, mp.flat_weight.value, mp.flat_bias.value)

        def vjp(g):
            g_cat, gw, gb = vjp_lin(g)
            return (g_cat[:, :width], g_cat[:, width:],
                    {mp.flat_weight.name: gw, mp.flat_bias.name: gb})

        return fused, vjp

    if mode == "diff":
        fused, vjp_lin = linear(f2 - f1, mp.flat_weight.value, mp.flat_bias.value)

        def vjp(g):
            g_d, gw, gb = vjp_lin(g)
            return -g_d, g_d, {mp.flat_weight.name: gw, mp.flat_bias.name: gb}

        return fused, vjp

    raise ContractError(f"unknown fusion mode '{mode}'")


# ---------------------------------------------------------------------------
# full training objective
# ---------------------------------------------------------------------------


def forward_batch(mp: ModelParams, cfg: RunConfig, f1: Array, f2: Array,
                  regions: Array, raw_text: Array, labels: Array,
                  class_w: Array, neg_idx: Array | None):
    """One batch through every enabled objective.

    Returns ``(components, logits, pullback)`` where ``components`` maps
    {"total", "cls", "itc", "itm"} to floats (disabled parts are None) and
    ``pullback()`` accumulates gradients into ``mp.table`` entries.
    """
    fused, vjp_fused = _fused_vjp(mp, cfg, f1, f2)
    f_text, vjp_text = semantics.embed_batch_vjp(raw_text, mp.text_proj.value)

    logits, vjp_head = semantics.progression_head_vjp(fused, regions, mp.head)
    cls, vjp_cls = semantics.weighted_softmax_ce_vjp(logits, labels, class_w)

    itc = itm = None
    vjp_itc = vjp_cos = vjp_itm = None
    if cfg.flags.itc:
        sim, vjp_cos = semantics.cosine_matrix_vjp(fused, f_text)
        itc, vjp_itc = semantics.itc_loss_vjp(sim, cfg.tau)
    if cfg.flags.itm:
        if neg_idx is None:
            raise ContractError("matching objective enabled but no negatives given")
        itm, vjp_itm = semantics.itm_loss_vjp(
            fused, f_text, neg_idx, mp.itm_weight.value, mp.itm_bias.value
        )

    total = semantics.total_loss(itc, itm, cls, cfg.flags.itc, cfg.flags.itm)
    components = {"total": total, "cls": cls, "itc": itc, "itm": itm}

    def pullback():
        def add(name, g):
            mp.table[name].grad += g

        (g_logits,) = vjp_cls(1.0)
        g_fused, head_grads = vjp_head(g_logits)
        for key, g in head_grads.items():
            add(getattr(mp.head, key).name, g)
        g_text = np.zeros_like(f_text)
        if cfg.flags.itc:
            (g_sim,) = vjp_itc(1.0)
            gf_cos, gt_cos = vjp_cos(g_sim)
            g_fused = g_fused + gf_cos
            g_text = g_text + gt_cos
        if cfg.flags.itm:
            gf_itm, gt_itm, g_w, g_b = vjp_itm(1.0)
            g_fused = g_fused + gf_itm
            g_text = g_text + gt_itm
            add(mp.itm_weight.name, g_w)
            add(mp.itm_bias.name, g_b)
        (g_proj,) = vjp_text(g_text)
        add(mp.text_proj.name, g_proj)
        g_f1, g_f2, fused_grads = vjp_fused(g_fused)
        for name, g in fused_grads.items():
            if name in mp.table:  # no_manifold arm drops the hyperbolic params
                add(name, g)
        return g_f1, g_f2

    return components, logits, pullback


def predict_logits(mp: ModelParams, cfg: RunConfig, f1: Array, f2: Array,
                   regions: Array) -> Array:
    """Pure classification path; no text needed."""
    fused, _ = _fused_vjp(mp, cfg, f1, f2)
    logits, _ = semantics.progression_head_vjp(fused, regions, mp.head)
    return logits
