"""Experiment orchestration: deterministic training, evaluation, ablation
arms, geometry audit, and a programmatic gradient suite.

Determinism contract: everything a run touches is derived from the config
seed through fixed SeedSequence streams (param init, epoch shuffles, matching
negatives), so two runs of the same config produce identical reports apart
from wall time.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import fusion, metrics, semantics, synth
from .config import SPLIT_RATIOS, RunConfig
from .diffcore import AdamW, grad_check, load_checkpoint, save_checkpoint
from .errors import ContractError, DivergenceError
from .manifold import CURVATURE_MIN, transport_audit
from .model import ModelParams, build_params, forward_batch, predict_logits

Array = np.ndarray

AUDIT_TRIALS = 1000

ABLATION_ARMS = {
    "diff": {"fusion_mode": "diff"},
    "concat": {"fusion_mode": "concat"},
    "medmam_no_manifold": {"fusion_mode": "no_manifold"},
    "medmam": {"fusion_mode": "medmam"},
    "no_itc": {"flags": {"itc": False, "itm": False}},
    "itc": {"flags": {"itc": True, "itm": False}},
    "itm": {"flags": {"itc": False, "itm": True}},
    "itc_itm": {"flags": {"itc": True, "itm": True}},
}


@dataclass
class RunReport:
    split: str
    weighted_accuracy: float
    weighted_f1: float
    macro_f1: float
    per_class: dict
    confusion: list
    loss_curves: dict = field(default_factory=dict)
    lr_curve: list = field(default_factory=list)
    val_f1_curve: list = field(default_factory=list)
    best_epoch: int | None = None
    epochs_run: int = 0
    geometry_audit: dict | None = None
    config: dict | None = None
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "weighted_accuracy": self.weighted_accuracy,
            "weighted_f1": self.weighted_f1,
            "macro_f1": self.macro_f1,
            "per_class": self.per_class,
            "confusion": self.confusion,
            "loss_curves": self.loss_curves,
            "lr_curve": self.lr_curve,
            "val_f1_curve": self.val_f1_curve,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
            "geometry_audit": self.geometry_audit,
            "config": self.config,
            "wall_time_s": self.wall_time_s,
        }

    def metrics_dict(self) -> dict:
        """Everything except wall time, for determinism comparisons."""
        out = self.to_dict()
        out.pop("wall_time_s")
        return out


def _raw_embeddings(texts) -> Array:
    cache: dict[str, Array] = {}
    rows = []
    for t in texts:
        if t not in cache:
            cache[t] = semantics.raw_text_embedding(t)
        rows.append(cache[t])
    return np.stack(rows)


def _batches(order: Array, batch_size: int):
    """Contiguous batches; a trailing singleton is merged into its neighbor
    so the matching loss always sees at least two samples."""
    n = order.size
    bounds = list(range(0, n, batch_size))
    out = [order[b: b + batch_size] for b in bounds]
    if len(out) > 1 and out[-1].size == 1:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def _split_metrics(mp: ModelParams, cfg: RunConfig, samples, split_name: str) -> RunReport:
    f1, f2, regions, labels, _ = synth.arrays_from_samples(samples)
    logits = predict_logits(mp, cfg, f1, f2, regions)
    preds = np.argmax(logits, axis=1)
    conf = metrics.confusion_matrix(labels, preds)
    per_class = {
        name: stats
        for name, stats in zip(semantics.LABELS, metrics.per_class_stats(conf))
    }
    return RunReport(
        split=split_name,
        weighted_accuracy=metrics.accuracy(conf),
        weighted_f1=metrics.weighted_f1(conf),
        macro_f1=metrics.macro_f1(conf),
        per_class=per_class,
        confusion=conf.tolist(),
    )


def _build_optimizer(mp: ModelParams, cfg: RunConfig) -> AdamW:
    main, stub, curv = [], [], []
    for name, p in mp.table.items():
        if p is mp.text_proj:
            stub.append(p)
        elif name.endswith("curvature"):
            if cfg.curvature_trainable:
                curv.append(p)
        else:
            main.append(p)
    groups = [
        {"params": main, "lr": cfg.lr_main, "weight_decay": cfg.weight_decay},
        {"params": stub, "lr": cfg.lr_stub, "weight_decay": cfg.weight_decay},
    ]
    if curv:
        groups.append({
            "params": curv, "lr": cfg.lr_main, "weight_decay": 0.0,
            "clamp_min": CURVATURE_MIN,
        })
    return AdamW(groups)


def _geometry_summary(mp: ModelParams, cfg: RunConfig) -> dict:
    c = mp.medmam.c if mp.medmam is not None and mp.cfg_fusion_mode == "medmam" else cfg.curvature
    return transport_audit(c, dim=3 * cfg.d, trials=AUDIT_TRIALS, seed=cfg.seed)


def train(cfg: RunConfig, checkpoint_path: str | None = None) -> RunReport:
    """Train from the config's synthetic dataset; report test metrics of the
    best-validation checkpoint. Deterministic given (seed, config)."""
    start = time.perf_counter()
    data = synth.generate(cfg.synth_config())
    train_s, val_s, test_s = synth.split(data, SPLIT_RATIOS, seed=cfg.seed)

    tf1, tf2, tregions, tlabels, ttexts = synth.arrays_from_samples(train_s)
    raw_text = _raw_embeddings(ttexts)
    class_w = semantics.class_weights(tlabels)

    mp = build_params(cfg, np.random.default_rng([cfg.seed, 1]))
    optimizer = _build_optimizer(mp, cfg)
    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    itm_rng = np.random.default_rng([cfg.seed, 3])

    loss_curves: dict[str, list] = {"total": [], "cls": [], "itc": [], "itm": []}
    lr_curve: list[float] = []
    val_f1_curve: list[float] = []
    best_values = mp.values()
    best_f1 = -np.inf
    best_epoch = None
    stale = 0
    epochs_run = 0

    for epoch in range(cfg.epochs):
        lr_scale = cfg.scheduler.factor ** (epoch // cfg.scheduler.step)
        lr_curve.append(cfg.lr_main * lr_scale)
        sums = {"total": 0.0, "cls": 0.0, "itc": 0.0, "itm": 0.0}
        order = shuffle_rng.permutation(len(train_s))
        batches = _batches(order, cfg.batch_size)
        for bi, idx in enumerate(batches):
            neg_idx = None
            if cfg.flags.itm:
                neg_idx = semantics.sample_misaligned(idx.size, itm_rng)
            mp.zero_grads()
            comps, _, pullback = forward_batch(
                mp, cfg, tf1[idx], tf2[idx], tregions[idx], raw_text[idx],
                tlabels[idx], class_w, neg_idx,
            )
            if not np.isfinite(comps["total"]):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} batch {bi}: {comps}"
                )
            pullback()
            optimizer.step(lr_scale=lr_scale)
            for key in sums:
                if comps[key] is not None:
                    sums[key] += comps[key]
        n_batches = len(batches)
        for key in sums:
            enabled = key in ("total", "cls") or getattr(cfg.flags, key, False)
            loss_curves[key].append(sums[key] / n_batches if enabled else None)
        epochs_run = epoch + 1

        val_report = _split_metrics(mp, cfg, val_s, "val")
        val_f1_curve.append(val_report.weighted_f1)
        if val_report.weighted_f1 > best_f1:
            best_f1 = val_report.weighted_f1
            best_epoch = epoch
            best_values = mp.values()
            stale = 0
        else:
            stale += 1
            if cfg.early_stop_patience is not None and stale >= cfg.early_stop_patience:
                break

    mp.load_values(best_values)
    report = _split_metrics(mp, cfg, test_s, "test")
    report.loss_curves = loss_curves
    report.lr_curve = lr_curve
    report.val_f1_curve = val_f1_curve
    report.best_epoch = best_epoch
    report.epochs_run = epochs_run
    report.geometry_audit = _geometry_summary(mp, cfg)
    report.config = cfg.to_dict()
    if checkpoint_path is not None:
        save_checkpoint(mp.table, checkpoint_path)
    report.wall_time_s = time.perf_counter() - start
    return report


def evaluate(checkpoint, cfg: RunConfig, split: str = "test") -> RunReport:
    """Pure evaluation of a checkpoint on one split of the config's dataset."""
    start = time.perf_counter()
    if isinstance(checkpoint, str):
        values = load_checkpoint(checkpoint)
    else:
        values = dict(checkpoint)
    mp = build_params(cfg, np.random.default_rng([cfg.seed, 1]))
    mp.load_values(values)
    data = synth.generate(cfg.synth_config())
    parts = dict(zip(("train", "val", "test"), synth.split(data, SPLIT_RATIOS, seed=cfg.seed)))
    if split not in parts:
        raise ContractError(f"unknown split '{split}'")
    report = _split_metrics(mp, cfg, parts[split], split)
    report.config = cfg.to_dict()
    report.wall_time_s = time.perf_counter() - start
    return report


def weighted_f1(confusion) -> float:
    """Support-weighted F1 of a counts matrix (zero-support classes excluded)."""
    return metrics.weighted_f1(confusion)


def ablate(base_cfg: RunConfig, arms, n_seeds: int = 1) -> dict[str, list[RunReport]]:
    """Run each named arm over shared seeds; returns arm -> per-seed reports."""
    arms = list(arms)
    if not arms:
        raise ContractError("ablate: no arms given")
    for arm in arms:
        if arm not in ABLATION_ARMS:
            raise ContractError(
                f"unknown ablation arm '{arm}' (known: {sorted(ABLATION_ARMS)})"
            )
    results: dict[str, list[RunReport]] = {}
    for arm in arms:
        overrides = ABLATION_ARMS[arm]
        reports = []
        for k in range(n_seeds):
            cfg = base_cfg.replace(seed=base_cfg.seed + k, **overrides)
            reports.append(train(cfg))
        results[arm] = reports
    return results


def comparison_rows(results: dict[str, list[RunReport]]) -> list[dict]:
    """Flatten ablation results into CSV-ready rows plus per-arm means."""
    rows = []
    for arm, reports in results.items():
        for rep in reports:
            rows.append({
                "arm": arm,
                "seed": rep.config["seed"] if rep.config else "",
                "weighted_accuracy": rep.weighted_accuracy,
                "weighted_f1": rep.weighted_f1,
                "macro_f1": rep.macro_f1,
            })
        rows.append({
            "arm": arm + "/mean",
            "seed": "",
            "weighted_accuracy": float(np.mean([r.weighted_accuracy for r in reports])),
            "weighted_f1": float(np.mean([r.weighted_f1 for r in reports])),
            "macro_f1": float(np.mean([r.macro_f1 for r in reports])),
        })
    return rows


def geometry_audit(curvatures=(0.01, 0.1, 1.0), dim: int = 8,
                   trials: int = AUDIT_TRIALS, seed: int = 0) -> dict:
    """Printed-form transport audit across curvatures."""
    return {
        f"c={c:g}": transport_audit(c, dim=dim, trials=trials, seed=seed)
        for c in curvatures
    }


# ---------------------------------------------------------------------------
# gradient suite
# ---------------------------------------------------------------------------


def _model_fd(cfg: RunConfig, seed: int, with_objectives: bool) -> float:
    """Central-difference check of the full pipeline for one seed: every
    pipeline parameter plus both inputs.

    The checked scalar carries a small fixed linear probe term over every
    swept coordinate. The probe's own difference quotient is exact, so it
    costs nothing, but it bounds each coordinate's gradient away from zero:
    without it, coordinates whose true gradient cancels to ~1e-16 measure one
    ulp of the loss against the 1e-8 floor and report noise, not math. Any
    real error in the backward pass still shows up additively on top of the
    probe."""
    rng = np.random.default_rng(seed)
    mp = build_params(cfg, np.random.default_rng([seed, 1]))
    n = 4
    f1 = rng.normal(size=(n, 3 * cfg.d))
    f2 = rng.normal(size=(n, 3 * cfg.d))
    regions = rng.integers(0, cfg.n_regions, size=n)
    labels = rng.integers(0, 3, size=n)
    # O(1) entries rather than unit-norm hash rows: the projection is linear
    # in them, and unit-norm rows leave per-entry gradients near the FD
    # noise floor where the relative quotient measures rounding, not math
    raw_text = rng.normal(size=(n, semantics.TEXT_EMBED_DIM))
    class_w = np.array([1.0, 1.3, 0.8])
    neg_idx = semantics.sample_misaligned(n, np.random.default_rng(seed + 7))
    # sweep the pipeline's own parameters plus both inputs; the text, match
    # and head blocks do not couple back through the pipeline and carry their
    # own direct FD checks
    names = [p.name for p in mp.medmam.named()]
    rho = rng.normal(size=(n, 2 * cfg.d))
    probe_rng = np.random.default_rng(seed + 1000)

    def draw_probe(shape):
        signs = probe_rng.choice([-1.0, 1.0], size=shape)
        return signs * probe_rng.uniform(0.5, 1.5, size=shape)  # bounded away from 0

    probes = [draw_probe(f1.shape), draw_probe(f2.shape)] + [
        draw_probe(mp.table[nm].value.shape) for nm in names
    ]
    kappa = 1e-3

    def with_probe(value, args):
        return value + kappa * sum(float(np.sum(a * z)) for a, z in zip(args, probes))

    def fn(f1_, f2_, *values):
        args = [f1_, f2_] + list(values)
        for name, value in zip(names, values):
            mp.table[name].value = np.asarray(value, dtype=float)
        if with_objectives:
            mp.zero_grads()
            comps, _, pullback = forward_batch(
                mp, cfg, f1_, f2_, regions, raw_text, labels, class_w, neg_idx
            )

            def grad_fn():
                gf1, gf2 = pullback()
                grads = [gf1, gf2] + [mp.table[nm].grad for nm in names]
                return [g + kappa * z for g, z in zip(grads, probes)]

            return with_probe(comps["total"], args), grad_fn
        out, vjp_full = fusion.medmam_forward_vjp(f1_, f2_, mp.medmam, cfg.transport_mode)
        value = float(np.sum(out.f_fused * rho))

        def grad_fn():
            gf1, gf2, grads = vjp_full(rho)
            by_name = {getattr(mp.medmam, k).name: v for k, v in grads.items()}
            raw = [gf1, gf2] + [
                by_name.get(nm, np.zeros_like(mp.table[nm].value)) for nm in names
            ]
            return [g + kappa * z for g, z in zip(raw, probes)]

        return with_probe(value, args), grad_fn

    inputs = [f1, f2] + [mp.table[nm].value.copy() for nm in names]
    return grad_check(fn, inputs)


def gradient_suite(seeds=(0, 1), include_primitives: bool = True) -> dict:
    """FD verification across primitives, the fusion pipeline, and each
    objective. The contrastive temperature is checked at tau = 1.0: at 0.05
    the row softmax saturates and off-diagonal gradients sink below the FD
    noise floor, so the relative-error quotient stops measuring correctness.
    """
    from . import diffcore as dc

    start = time.perf_counter()
    out: dict[str, float] = {}

    if include_primitives:
        rng = np.random.default_rng(1234)
        worst = 0.0
        for trial in range(100):
            kind = dc.PRIMITIVE_KINDS[trial % len(dc.PRIMITIVE_KINDS)]
            n = int(rng.integers(1, 5))
            d = int(rng.integers(3, 6))
            x = rng.normal(size=(n, d))
            if kind == "linear":
                o = int(rng.integers(1, 5))
                inputs = [x, rng.normal(size=(o, d)), rng.normal(size=o)]
                rho = rng.normal(size=(n, o))
            elif kind == "layer_norm":
                inputs = [x, rng.normal(size=d), rng.normal(size=d)]
                rho = rng.normal(size=(n, d))
            elif kind == "concat":
                other = rng.normal(size=(n, int(rng.integers(1, 4))))
                inputs = [x, other]
                rho = rng.normal(size=(n, d + other.shape[1]))
            elif kind == "matmul":
                m = int(rng.integers(1, 5))
                inputs = [x, rng.normal(size=(d, m))]
                rho = rng.normal(size=(n, m))
            else:
                inputs = [x]
                rho = rng.normal(size=(n, d))

            def fn(*xs, _kind=kind, _rho=rho):
                o_, vjp = dc.primitive(_kind, *xs)
                val = float(np.sum(o_ * _rho))

                def grad_fn():
                    g = vjp(_rho)
                    return list(g) if isinstance(g, tuple) else [g]

                return val, grad_fn

            worst = max(worst, grad_check(fn, inputs))
        out["primitives_max"] = worst

    fd_cfg = RunConfig(
        seed=0, d=2, n_regions=3, tau=1.0, curvature=0.3,
        curvature_trainable=True, transport_mode="paper",
    )
    out["medmam_forward_paper_max"] = max(
        _model_fd(fd_cfg, s, with_objectives=False) for s in seeds
    )
    gyro_cfg = fd_cfg.replace(transport_mode="gyro")
    out["medmam_forward_gyro_max"] = max(
        _model_fd(gyro_cfg, s, with_objectives=False) for s in seeds
    )
    out["full_objective_max"] = max(
        _model_fd(fd_cfg, s, with_objectives=True) for s in seeds
    )

    # individual objectives
    rng = np.random.default_rng(99)
    s_mat = np.clip(rng.normal(size=(5, 5)) * 0.4, -1, 1)

    def itc_fn(s_):
        loss, vjp = semantics.itc_loss_vjp(s_, 1.0)
        return loss, lambda: list(vjp(1.0))

    out["itc_max"] = grad_check(itc_fn, [s_mat])

    f = rng.normal(size=(4, 4))
    t = rng.normal(size=(4, 4))
    w = rng.normal(size=8)
    b = np.array([0.2])
    neg = semantics.sample_misaligned(4, np.random.default_rng(3))

    def itm_fn(f_, t_, w_, b_):
        loss, vjp = semantics.itm_loss_vjp(f_, t_, neg, w_, b_)
        return loss, lambda: list(vjp(1.0))

    out["itm_max"] = grad_check(itm_fn, [f, t, w, b])

    logits = rng.normal(size=(5, 3))
    labels = np.array([0, 1, 2, 1, 0])
    cw = np.array([1.0, 1.5, 0.7])

    def ce_fn(z_):
        loss, vjp = semantics.weighted_softmax_ce_vjp(z_, labels, cw)
        return loss, lambda: list(vjp(1.0))

    out["weighted_ce_max"] = grad_check(ce_fn, [logits])

    hp = semantics.init_head_params(2, 3, np.random.default_rng(11))
    head_names = [p.name.split("/", 1)[1] for p in hp.named()]
    fh = rng.normal(size=(5, 4))
    regions_h = np.array([0, 1, 2, 1, 0])

    def head_fn(fh_, *values):
        for name, value in zip(head_names, values):
            getattr(hp, name).value = np.asarray(value, dtype=float)
        z_, vjp_head = semantics.progression_head_vjp(fh_, regions_h, hp)
        loss, vjp_ce = semantics.weighted_softmax_ce_vjp(z_, labels, cw)

        def grad_fn():
            (gz,) = vjp_ce(1.0)
            gfh, grads = vjp_head(gz)
            return [gfh] + [grads[nm] for nm in head_names]

        return loss, grad_fn

    out["head_classifier_max"] = grad_check(
        head_fn, [fh] + [getattr(hp, nm).value.copy() for nm in head_names]
    )

    out["runtime_s"] = time.perf_counter() - start
    out["max_rel_error"] = max(
        v for k, v in out.items() if k.endswith("_max")
    )
    out["passed"] = bool(out["max_rel_error"] < 1e-5)
    return out
