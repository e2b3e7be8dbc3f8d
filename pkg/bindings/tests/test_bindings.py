"""Binding parity: every exported op must agree bit-for-bit with the native
call, borrow inputs zero-copy, and surface native contract errors as normal
exceptions. The primary suite never imports this package."""
import numpy as np
import pytest

mb = pytest.importorskip("medmam_bindings")

import medmam
from medmam import fusion, manifold
from medmam.errors import ContractError, TransportSingularityError


def ball(rng, n, dim, c):
    return manifold.sample_ball(rng, n, dim, c)


def test_version_mirrors_native():
    assert mb.__version__ == medmam.__version__


def test_project_parity_bitwise():
    rng = np.random.default_rng(0)
    for trial in range(100):
        c = float(rng.uniform(0.02, 2.0))
        z = rng.normal(size=(int(rng.integers(1, 5)), 4)) * rng.uniform(0.1, 10.0)
        bound = mb.project(z, c)
        assert np.array_equal(np.asarray(bound), manifold.project(z, c))


@pytest.mark.parametrize("op,n_args", [
    ("mobius_add", 2), ("log_map", 2), ("geodesic_distance", 2),
])
def test_pair_op_parity_bitwise(op, n_args):
    rng = np.random.default_rng(1)
    native = getattr(manifold, op)
    for trial in range(100):
        c = float(rng.uniform(0.02, 2.0))
        x = ball(rng, 3, 5, c)
        y = ball(rng, 3, 5, c)
        bound = mb.bound_call(op, [x, y], {"c": c})
        assert np.array_equal(np.asarray(bound), np.asarray(native(x, y, c)))


def test_exp_map_parity_bitwise():
    rng = np.random.default_rng(2)
    for trial in range(100):
        c = float(rng.uniform(0.02, 2.0))
        x = ball(rng, 3, 5, c)
        v = rng.normal(size=(3, 5)) * 0.3
        bound = mb.exp_map(x, v, c)
        assert np.array_equal(np.asarray(bound), manifold.exp_map(x, v, c))


@pytest.mark.parametrize("mode", ["paper", "gyro"])
def test_transport_parity_bitwise(mode):
    rng = np.random.default_rng(3)
    for trial in range(100):
        c = float(rng.uniform(0.02, 2.0))
        u = ball(rng, 3, 5, c)
        v = ball(rng, 3, 5, c)
        w = rng.normal(size=(3, 5))
        bound = mb.parallel_transport(u, v, w, c, mode=mode)
        assert np.array_equal(
            np.asarray(bound), manifold.parallel_transport(u, v, w, c, mode=mode)
        )


def test_medmam_forward_parity_bitwise():
    rng = np.random.default_rng(4)
    d = 3
    for trial in range(100):
        params = fusion.init_medmam_params(d, rng, curvature=0.1)
        f1 = rng.normal(size=(4, 3 * d))
        f2 = rng.normal(size=(4, 3 * d))
        arrays = [getattr(params, name).value for name in mb.PARAM_ORDER]
        bound = mb.medmam_forward(f1, f2, arrays, c=params.c, mode="paper")
        native = fusion.medmam_forward(f1, f2, params, mode="paper")
        assert np.array_equal(np.asarray(bound["f_fused"]), native.f_fused)
        assert np.array_equal(np.asarray(bound["f_e"]), native.f_e)
        assert np.array_equal(np.asarray(bound["delta_h"]), native.delta_h)
        assert np.array_equal(np.asarray(bound["alpha"]), native.alpha)


def test_log_map_origin_closed_form():
    import math

    out = mb.log_map(np.zeros((1, 2)), np.array([[0.5, 0.0]]), 1.0)
    assert abs(np.asarray(out)[0, 0] - math.atanh(0.5)) < 1e-12


def test_borrow_is_zero_copy_and_read_only():
    x = np.zeros((2, 3))
    view = mb.borrow(x, "test")
    assert np.shares_memory(view, x)
    assert not view.flags.writeable
    with pytest.raises((ValueError, RuntimeError)):
        view[0, 0] = 1.0


def test_host_roundtrip_preserves_bits():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 4))
    back = np.asarray(mb.borrow(x, "test"))
    assert back.tobytes() == x.tobytes()


def test_outputs_are_fresh_allocations():
    x = np.full((2, 2), 0.1)
    out = mb.project(x, 0.1)
    assert not np.shares_memory(np.asarray(out), x)


def test_wrong_dtype_rejected_naming_op():
    with pytest.raises(ContractError, match="project"):
        mb.project(np.zeros((2, 2), dtype=np.float32), 0.1)


def test_noncontiguous_rejected():
    base = np.zeros((4, 4))
    with pytest.raises(ContractError, match="contiguous"):
        mb.mobius_add(base[:, ::2], base[:, ::2], 0.1)


def test_invalid_shape_raises_host_exception_naming_op():
    with pytest.raises(ContractError, match="mobius_add"):
        mb.mobius_add(np.zeros(2), np.zeros(3), 1.0)


def test_native_singularity_error_surfaces():
    u = np.array([[0.5, 0.0]])
    w = np.array([[2.0, 0.0]])
    v = np.array([[0.1, 0.0]])
    with pytest.raises(TransportSingularityError, match="<u,w>"):
        mb.parallel_transport(u, v, w, 1.0, mode="paper")


def test_unknown_op_rejected():
    with pytest.raises(ContractError, match="unknown bound op"):
        mb.bound_call("fft", [np.zeros(2)], {"c": 1.0})
