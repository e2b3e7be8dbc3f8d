"""Text-side stand-ins and training objectives.

The text encoder is a deterministic stub: each exact string hashes (SHA-256)
to a seeded unit-norm 768-vector, followed by a learnable linear projection to
the fused-feature width 2d. Objectives: temperature-scaled contrastive loss
over a cosine similarity matrix, a binary matching loss with one in-batch
negative per sample, class-weighted cross-entropy, and their unit-weight sum.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import Param, as_f64, concat, linear, relu, softmax_rows
from .errors import ContractError

Array = np.ndarray

LABELS = ("improved", "no_change", "worsened")
LABEL_TO_INDEX = {name: i for i, name in enumerate(LABELS)}

LABEL_PHRASES = {
    "improved": "the condition has improved",
    "no_change": "the condition shows no change",
    "worsened": "the condition has worsened",
}

HEALTHY_TEMPLATE = "both of two images are healthy, there is no evident change"

TEXT_EMBED_DIM = 768

_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ProgressionText:
    region_id: int
    label: str
    text: str

    def __post_init__(self):
        if not self.text:
            raise ContractError("progression text must be non-empty")


def render_template(region_id: int, label: str, healthy: bool = False,
                    n_regions: int | None = None) -> ProgressionText:
    """Deterministic description string for a region/label pair."""
    if region_id < 0 or (n_regions is not None and region_id >= n_regions):
        raise ContractError(f"unknown region id {region_id}")
    if label not in LABELS:
        raise ContractError(f"unknown label '{label}'")
    if healthy:
        return ProgressionText(region_id, label, HEALTHY_TEMPLATE)
    return ProgressionText(
        region_id, label, f"At region_{region_id}, {LABEL_PHRASES[label]}"
    )


def raw_text_embedding(text: str, seed: int = 0) -> Array:
    """Unit-norm 768-vector derived from a stable hash of the exact string."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i: i + 4], "little") for i in range(0, 32, 4)]
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF] + words))
    vec = rng.standard_normal(TEXT_EMBED_DIM)
    return vec / np.linalg.norm(vec)


def embed_text(text: str | ProgressionText, head: Param, seed: int = 0) -> Array:
    """Project the hashed embedding through the learnable 2d x 768 head."""
    if isinstance(text, ProgressionText):
        text = text.text
    head_v = as_f64(head.value if isinstance(head, Param) else head)
    if head_v.ndim != 2 or head_v.shape[1] != TEXT_EMBED_DIM:
        raise ContractError(
            f"text head must be (2d, {TEXT_EMBED_DIM}), got {head_v.shape}"
        )
    raw = raw_text_embedding(text, seed=seed)
    out, _ = embed_batch_vjp(raw[None, :], head_v)
    return out[0]


def embed_batch_vjp(raw: Array, head_value: Array):
    """Batched projection of precomputed raw embeddings; vjp -> (g_head,)."""
    raw = as_f64(raw)
    out = raw @ head_value.T

    def vjp(g: Array):
        return (as_f64(g).T @ raw,)

    return out, vjp


# ---------------------------------------------------------------------------
# similarity + contrastive loss
# ---------------------------------------------------------------------------


def _normalize_rows_vjp(x: Array, what: str):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    bad = np.flatnonzero(n[:, 0] <= 1e-12)
    if bad.size:
        raise ContractError(f"{what}: zero-norm row {int(bad[0])}")
    xn = x / n

    def vjp(g: Array):
        return (g - xn * np.sum(g * xn, axis=1, keepdims=True)) / n

    return xn, vjp


def cosine_matrix_vjp(f_fused: Array, f_text: Array):
    f_fused, f_text = as_f64(f_fused), as_f64(f_text)
    if f_fused.shape != f_text.shape or f_fused.ndim != 2:
        raise ContractError(
            f"cosine_matrix: shapes {f_fused.shape} vs {f_text.shape}"
        )
    fn, vjp_f = _normalize_rows_vjp(f_fused, "cosine_matrix fused")
    tn, vjp_t = _normalize_rows_vjp(f_text, "cosine_matrix text")
    s = fn @ tn.T

    def vjp(g: Array):
        g = as_f64(g)
        return vjp_f(g @ tn), vjp_t(g.T @ fn)

    return s, vjp


def cosine_matrix(f_fused, f_text) -> Array:
    s, _ = cosine_matrix_vjp(f_fused, f_text)
    return s


def itc_loss_vjp(s: Array, tau: float):
    s = as_f64(s)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ContractError(f"similarity matrix must be square, got {s.shape}")
    if not tau > 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    n = s.shape[0]
    scaled = s / tau
    m = scaled.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(scaled - m).sum(axis=1))
    loss = float(np.mean(lse - np.diag(scaled)))
    p = np.exp(scaled - lse[:, None])

    def vjp(g_loss: float = 1.0):
        gs = (p - np.eye(n)) / (n * tau) * float(g_loss)
        return (gs,)

    return loss, vjp


def itc_loss(s, tau: float = 0.05) -> float:
    """Mean over rows of -log softmax(row / tau) at the diagonal entry."""
    loss, _ = itc_loss_vjp(np.asarray(s), tau)
    return loss


# ---------------------------------------------------------------------------
# matching loss
# ---------------------------------------------------------------------------


def sample_misaligned(n: int, rng: np.random.Generator) -> Array:
    """One uniformly sampled in-batch index j != i per row."""
    if n < 2:
        raise ContractError("matching loss needs a batch of at least 2")
    offsets = rng.integers(1, n, size=n)
    return (np.arange(n) + offsets) % n


def match_bce_vjp(logits: Array, labels: Array):
    """Stable binary cross-entropy from logits; loss -> 0 as logits saturate
    toward +inf on positives and -inf on negatives."""
    z = as_f64(logits).reshape(-1)
    labels = as_f64(labels).reshape(-1)
    if z.shape != labels.shape:
        raise ContractError(f"match_bce: {z.shape} logits vs {labels.shape} labels")
    loss = float(np.mean(np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - labels * z))
    sig = np.empty_like(z)
    pos = z >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    sig[~pos] = ez / (1.0 + ez)

    def vjp(g_loss: float = 1.0):
        return ((sig - labels) / z.size * float(g_loss),)

    return loss, vjp


def itm_loss_vjp(f_fused: Array, f_text: Array, neg_idx: Array,
                 match_w: Array, match_b: Array):
    f_fused, f_text = as_f64(f_fused), as_f64(f_text)
    if f_fused.shape != f_text.shape:
        raise ContractError(
            f"matching loss inputs differ in shape: {f_fused.shape} vs {f_text.shape}"
        )
    n = f_fused.shape[0]
    if n < 2:
        raise ContractError("matching loss needs a batch of at least 2")
    neg_idx = np.asarray(neg_idx)
    if neg_idx.shape != (n,) or np.any(neg_idx == np.arange(n)):
        raise ContractError("negative indices must be one misaligned index per row")
    w = as_f64(match_w).reshape(-1)
    b = float(np.asarray(match_b).reshape(()))
    pairs_pos, vjp_cat_pos = concat(f_fused, f_text)
    pairs_neg, vjp_cat_neg = concat(f_fused, f_text[neg_idx])
    pairs = np.concatenate([pairs_pos, pairs_neg], axis=0)
    labels = np.concatenate([np.ones(n), np.zeros(n)])
    z = pairs @ w + b
    loss, vjp_bce = match_bce_vjp(z, labels)

    def vjp(g_loss: float = 1.0):
        (gz,) = vjp_bce(g_loss)
        g_pairs = gz[:, None] * w[None, :]
        g_w = pairs.T @ gz
        g_b = np.array([gz.sum()])
        g_f1, g_t1 = vjp_cat_pos(g_pairs[:n])
        g_f2, g_t2 = vjp_cat_neg(g_pairs[n:])
        g_fused = g_f1 + g_f2
        g_text = g_t1.copy()
        np.add.at(g_text, neg_idx, g_t2)
        return g_fused, g_text, g_w, g_b

    return loss, vjp


def itm_loss(f_fused, f_text, match_w, match_b, seed: int = 0) -> float:
    """Binary matching loss: aligned pairs positive, one seeded in-batch
    misaligned text per sample negative."""
    f_fused = as_f64(f_fused)
    rng = np.random.default_rng(seed)
    neg_idx = sample_misaligned(f_fused.shape[0], rng)
    loss, _ = itm_loss_vjp(f_fused, f_text, neg_idx, match_w, match_b)
    return loss


# ---------------------------------------------------------------------------
# classification losses
# ---------------------------------------------------------------------------


def class_weights(labels: Sequence[int], n_classes: int = 3) -> Array:
    """Inverse-frequency weights w_c = N / count_c; every class must appear."""
    labels = np.asarray(labels, dtype=int)
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts == 0):
        missing = int(np.flatnonzero(counts == 0)[0])
        raise ContractError(f"class {missing} has zero count")
    return labels.size / counts.astype(np.float64)


def weighted_ce_vjp(p: Array, y_onehot: Array, w: Array):
    p, y_onehot, w = as_f64(p), as_f64(y_onehot), as_f64(w)
    if p.shape != y_onehot.shape or p.ndim != 2 or p.shape[1] != w.size:
        raise ContractError(
            f"weighted_ce: shapes p={p.shape} y={y_onehot.shape} w={w.shape}"
        )
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9) or np.any(p < -1e-12):
        raise ContractError("weighted_ce: rows of p must be probability vectors")
    n = p.shape[0]
    pc = np.maximum(p, _PROB_FLOOR)
    loss = float(-(y_onehot * w[None, :] * np.log(pc)).sum() / n)

    def vjp(g_loss: float = 1.0):
        gp = np.where(p > _PROB_FLOOR, -(y_onehot * w[None, :]) / pc / n, 0.0)
        return (gp * float(g_loss),)

    return loss, vjp


def weighted_ce(p, y_onehot, w) -> float:
    """-(1/N) sum_i sum_c w_c * y_ic * log p_ic."""
    loss, _ = weighted_ce_vjp(p, y_onehot, w)
    return loss


def one_hot(labels: Sequence[int], n_classes: int = 3) -> Array:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def weighted_softmax_ce_vjp(logits: Array, labels: Array, w: Array):
    """Fused stable softmax + weighted CE; vjp -> (g_logits,)."""
    logits, w = as_f64(logits), as_f64(w)
    labels = np.asarray(labels, dtype=int)
    n = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    wi = w[labels]
    loss = float(np.mean(wi * (lse - logits[np.arange(n), labels])))
    p = np.exp(logits - lse[:, None])

    def vjp(g_loss: float = 1.0):
        g = p.copy()
        g[np.arange(n), labels] -= 1.0
        g *= wi[:, None] / n
        return (g * float(g_loss),)

    return loss, vjp


def total_loss(itc: float | None, itm: float | None, cls: float,
               use_itc: bool, use_itm: bool) -> float:
    """Unit-weight sum of the enabled components."""
    total = float(cls)
    if use_itc:
        if itc is None or not np.isfinite(itc):
            raise ContractError("contrastive component enabled but not finite")
        total += float(itc)
    if use_itm:
        if itm is None or not np.isfinite(itm):
            raise ContractError("matching component enabled but not finite")
        total += float(itm)
    return total


# ---------------------------------------------------------------------------
# progression head
# ---------------------------------------------------------------------------


@dataclass
class HeadParams:
    """Region-query cross-attention over the two halves of the fused feature,
    a feed-forward layer, and a linear 3-way classifier."""

    queries: Param      # (K, 2d)
    query_proj: Param   # (d, 2d)
    key_proj: Param     # (d, d)
    value_proj: Param   # (d, d)
    ff_weight: Param    # (d, d)
    ff_bias: Param      # (d,)
    out_weight: Param   # (3, d)
    out_bias: Param     # (3,)

    def named(self):
        for name in ("queries", "query_proj", "key_proj", "value_proj",
                     "ff_weight", "ff_bias", "out_weight", "out_bias"):
            yield getattr(self, name)


def init_head_params(d: int, n_regions: int, rng: np.random.Generator,
                     prefix: str = "head/") -> HeadParams:
    def u(shape, fan_in):
        return rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in), size=shape)

    return HeadParams(
        queries=Param(prefix + "queries", u((n_regions, 2 * d), 2 * d)),
        query_proj=Param(prefix + "query_proj", u((d, 2 * d), 2 * d)),
        key_proj=Param(prefix + "key_proj", u((d, d), d)),
        value_proj=Param(prefix + "value_proj", u((d, d), d)),
        ff_weight=Param(prefix + "ff_weight", u((d, d), d)),
        ff_bias=Param(prefix + "ff_bias", np.zeros(d)),
        out_weight=Param(prefix + "out_weight", u((3, d), d)),
        out_bias=Param(prefix + "out_bias", np.zeros(3)),
    )


def progression_head_vjp(f_fused: Array, region_ids: Array, hp: HeadParams):
    f_fused = as_f64(f_fused)
    region_ids = np.asarray(region_ids, dtype=int)
    n_regions = hp.queries.value.shape[0]
    if region_ids.ndim != 1 or region_ids.shape[0] != f_fused.shape[0]:
        raise ContractError("region ids must be one integer per row")
    if np.any(region_ids < 0) or np.any(region_ids >= n_regions):
        bad = region_ids[(region_ids < 0) | (region_ids >= n_regions)][0]
        raise ContractError(f"region id {int(bad)} out of range [0, {n_regions})")
    two_d = f_fused.shape[1]
    if two_d % 2 != 0:
        raise ContractError(f"fused width {two_d} must be even")
    d = two_d // 2
    t1, t2 = f_fused[:, :d], f_fused[:, d:]
    q = hp.queries.value[region_ids]                      # (N, 2d)
    qp = q @ hp.query_proj.value.T                        # (N, d)
    k1 = t1 @ hp.key_proj.value.T
    k2 = t2 @ hp.key_proj.value.T
    v1 = t1 @ hp.value_proj.value.T
    v2 = t2 @ hp.value_proj.value.T
    scale = 1.0 / np.sqrt(d)
    scores = np.stack(
        [np.sum(qp * k1, axis=1), np.sum(qp * k2, axis=1)], axis=1
    ) * scale                                             # (N, 2)
    attn, vjp_soft = softmax_rows(scores)
    att = attn[:, :1] * v1 + attn[:, 1:] * v2             # (N, d)
    ff_pre, vjp_ff = linear(att, hp.ff_weight.value, hp.ff_bias.value)
    ff_act, vjp_relu = relu(ff_pre)
    logits, vjp_out = linear(ff_act, hp.out_weight.value, hp.out_bias.value)

    def vjp(g: Array):
        g_ff_act, g_wo, g_bo = vjp_out(as_f64(g))
        (g_ff_pre,) = vjp_relu(g_ff_act)
        g_att, g_wf, g_bf = vjp_ff(g_ff_pre)
        g_attn = np.stack(
            [np.sum(g_att * v1, axis=1), np.sum(g_att * v2, axis=1)], axis=1
        )
        g_v1 = attn[:, :1] * g_att
        g_v2 = attn[:, 1:] * g_att
        (g_scores,) = vjp_soft(g_attn)
        g_scores = g_scores * scale
        g_qp = g_scores[:, :1] * k1 + g_scores[:, 1:] * k2
        g_k1 = g_scores[:, :1] * qp
        g_k2 = g_scores[:, 1:] * qp
        g_q = g_qp @ hp.query_proj.value
        g_wq = g_qp.T @ q
        g_t1 = g_k1 @ hp.key_proj.value + g_v1 @ hp.value_proj.value
        g_t2 = g_k2 @ hp.key_proj.value + g_v2 @ hp.value_proj.value
        g_wk = g_k1.T @ t1 + g_k2.T @ t2
        g_wv = g_v1.T @ t1 + g_v2.T @ t2
        g_queries = np.zeros_like(hp.queries.value)
        np.add.at(g_queries, region_ids, g_q)
        g_fused = np.concatenate([g_t1, g_t2], axis=1)
        grads = {
            "queries": g_queries,
            "query_proj": g_wq,
            "key_proj": g_wk,
            "value_proj": g_wv,
            "ff_weight": g_wf,
            "ff_bias": g_bf,
            "out_weight": g_wo,
            "out_bias": g_bo,
        }
        return g_fused, grads

    return logits, vjp


def progression_head(f_fused, region_ids, hp: HeadParams) -> Array:
    single = np.asarray(f_fused).ndim == 1
    logits, _ = progression_head_vjp(
        np.atleast_2d(f_fused), np.atleast_1d(region_ids), hp
    )
    return logits[0] if single else logits
