"""Thin host-side binding over the geometry kernel and the fusion forward.

Inputs are borrowed read-only through the buffer protocol (no copy for
contiguous float64 buffers); outputs are freshly allocated ``ArrayView``
wrappers. Every call routes to the installed native library, so results are
bit-for-bit identical to calling it directly, and native contract errors
surface unchanged as catchable exceptions.

``medmam_forward`` takes the pipeline parameters as one array per learnable
tensor, ordered as in ``PARAM_ORDER``, with the curvature passed in
``scalars["c"]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import medmam
from medmam import fusion, manifold
from medmam.diffcore import Param
from medmam.errors import ContractError

__version__ = medmam.__version__

Array = np.ndarray

EXPORTED_OPS = (
    "project",
    "mobius_add",
    "log_map",
    "exp_map",
    "geodesic_distance",
    "parallel_transport",
    "medmam_forward",
)

# array order for medmam_forward after (f1, f2); curvature rides in scalars
PARAM_ORDER = (
    "context_weight", "context_ln_scale", "context_ln_shift",
    "gate_weight", "gate_bias",
    "stream1_hidden_w", "stream1_hidden_b", "stream1_out_w", "stream1_out_b",
    "stream2_hidden_w", "stream2_hidden_b", "stream2_out_w", "stream2_out_b",
    "compress1_weight", "compress1_bias",
    "compress1_ln_scale", "compress1_ln_shift",
    "compress2_weight", "compress2_bias",
)


@dataclass(frozen=True)
class ArrayView:
    """Shape plus a contiguous float64 buffer."""

    shape: tuple
    data: Array

    def __post_init__(self):
        if self.data.shape != self.shape:
            raise ContractError(
                f"view shape {self.shape} does not match buffer {self.data.shape}"
            )

    def __array__(self, dtype=None, copy=None):
        if dtype is not None and dtype != self.data.dtype:
            return self.data.astype(dtype)
        return self.data


def borrow(obj, op_name: str) -> Array:
    """Read-only zero-copy view of a contiguous float64 host buffer."""
    try:
        arr = np.asarray(obj)
    except Exception as exc:
        raise ContractError(f"{op_name}: input does not expose a buffer ({exc})") from exc
    if arr.dtype != np.float64:
        raise ContractError(
            f"{op_name}: expected float64 buffer, got {arr.dtype}"
        )
    if not arr.flags["C_CONTIGUOUS"]:
        raise ContractError(f"{op_name}: input buffer must be C-contiguous")
    view = arr.view()
    view.flags.writeable = False
    return view


def _fresh(result: Array) -> ArrayView:
    out = np.array(result, dtype=np.float64, order="C", copy=True)
    return ArrayView(shape=out.shape, data=out)


def _build_params(arrays, c: float) -> fusion.MedMamParams:
    if len(arrays) != len(PARAM_ORDER):
        raise ContractError(
            f"medmam_forward: expected {len(PARAM_ORDER)} parameter arrays "
            f"after (f1, f2), got {len(arrays)}"
        )
    fields = {
        name: Param("medmam/" + name, np.array(arr, copy=True))
        for name, arr in zip(PARAM_ORDER, arrays)
    }
    return fusion.MedMamParams(
        **fields,
        curvature=Param("medmam/curvature", np.array(float(c))),
        curvature_trainable=False,
    )


def project(z, c: float) -> ArrayView:
    return _fresh(manifold.project(borrow(z, "project"), c))


def mobius_add(x, y, c: float) -> ArrayView:
    return _fresh(manifold.mobius_add(borrow(x, "mobius_add"), borrow(y, "mobius_add"), c))


def log_map(x, y, c: float) -> ArrayView:
    return _fresh(manifold.log_map(borrow(x, "log_map"), borrow(y, "log_map"), c))


def exp_map(x, v, c: float) -> ArrayView:
    return _fresh(manifold.exp_map(borrow(x, "exp_map"), borrow(v, "exp_map"), c))


def geodesic_distance(x, y, c: float) -> ArrayView:
    out = manifold.geodesic_distance(
        borrow(x, "geodesic_distance"), borrow(y, "geodesic_distance"), c
    )
    return _fresh(np.asarray(out))


def parallel_transport(u, v, w, c: float, mode: str = "paper") -> ArrayView:
    return _fresh(manifold.parallel_transport(
        borrow(u, "parallel_transport"), borrow(v, "parallel_transport"),
        borrow(w, "parallel_transport"), c, mode=mode,
    ))


def medmam_forward(f1, f2, param_arrays, c: float, mode: str = "paper") -> dict:
    """Full fusion forward; returns views of every stage output."""
    params = _build_params([borrow(a, "medmam_forward") for a in param_arrays], c)
    out = fusion.medmam_forward(
        borrow(f1, "medmam_forward"), borrow(f2, "medmam_forward"), params, mode
    )
    return {
        "f_e": _fresh(out.f_e),
        "delta_h": _fresh(out.delta_h),
        "f_fused": _fresh(out.f_fused),
        "alpha": _fresh(np.asarray(out.alpha)),
    }


def bound_call(op_name: str, arrays, scalars: dict | None = None):
    """Dispatch one exported op over borrowed host buffers."""
    scalars = dict(scalars or {})
    if op_name not in EXPORTED_OPS:
        raise ContractError(f"unknown bound op '{op_name}' (exported: {EXPORTED_OPS})")
    arrays = list(arrays)
    if op_name == "medmam_forward":
        return medmam_forward(
            arrays[0], arrays[1], arrays[2:],
            c=scalars.pop("c"), mode=scalars.pop("mode", "paper"),
        )
    c = scalars.pop("c")
    if op_name == "project":
        return project(arrays[0], c)
    if op_name == "mobius_add":
        return mobius_add(arrays[0], arrays[1], c)
    if op_name == "log_map":
        return log_map(arrays[0], arrays[1], c)
    if op_name == "exp_map":
        return exp_map(arrays[0], arrays[1], c)
    if op_name == "geodesic_distance":
        return geodesic_distance(arrays[0], arrays[1], c)
    return parallel_transport(
        arrays[0], arrays[1], arrays[2], c, mode=scalars.pop("mode", "paper")
    )
