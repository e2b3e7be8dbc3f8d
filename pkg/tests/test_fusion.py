import math

import numpy as np
import pytest

from medmam import fusion, manifold
from medmam.diffcore import grad_check
from medmam.errors import ContractError

import oracles


def make_params(d, seed=0, curvature=0.1):
    rng = np.random.default_rng(seed)
    return fusion.init_medmam_params(d, rng, curvature=curvature)


def rand_pair(rng, n, d):
    return rng.normal(size=(n, 3 * d)), rng.normal(size=(n, 3 * d))


# ---------------------------------------------------------------------------
# Euclidean fusion
# ---------------------------------------------------------------------------


def test_euclid_fuse_equal_inputs_drop_difference_path():
    d = 3
    p = make_params(d, seed=1)
    rng = np.random.default_rng(2)
    f = rng.normal(size=(4, 3 * d))
    (f_e, alpha), _ = fusion.euclid_fuse_vjp(f, f, p)
    # difference path contributes zero, so f_e = alpha * context
    h = np.concatenate([f, f, np.zeros_like(f)], axis=1)
    ctx_lin = h @ p.context_weight.value.T
    ctx = np.maximum(ctx_lin, 0.0)
    mu = ctx.mean(axis=1, keepdims=True)
    var = ((ctx - mu) ** 2).mean(axis=1, keepdims=True)
    ctx = (ctx - mu) / np.sqrt(np.maximum(var, 1e-5))
    assert np.allclose(f_e, alpha * ctx, atol=1e-12)


def test_euclid_fuse_zero_gate_gives_half():
    d = 2
    p = make_params(d, seed=3)
    p.gate_weight.value[:] = 0.0
    p.gate_bias.value[:] = 0.0
    rng = np.random.default_rng(4)
    f1, f2 = rand_pair(rng, 5, d)
    (f_e, alpha), _ = fusion.euclid_fuse_vjp(f1, f2, p)
    assert np.all(alpha == 0.5)


def test_euclid_fuse_alpha_strictly_inside_unit_interval():
    d = 2
    p = make_params(d, seed=5)
    rng = np.random.default_rng(6)
    f1, f2 = rand_pair(rng, 64, d)
    f1[0] *= 100.0  # push the gate toward saturation
    (_, alpha), _ = fusion.euclid_fuse_vjp(f1, f2, p)
    assert np.all(alpha > 0.0) and np.all(alpha < 1.0)


def test_euclid_fuse_matches_scalar_oracle():
    d = 4
    p = make_params(d, seed=0)
    rng = np.random.default_rng(0)
    f1, f2 = rand_pair(rng, 3, d)
    (f_e, alpha), _ = fusion.euclid_fuse_vjp(f1, f2, p)
    for i in range(3):
        fe_ref, alpha_ref = oracles.context_fusion(
            list(f1[i]), list(f2[i]),
            [list(r) for r in p.context_weight.value],
            list(p.context_ln_scale.value), list(p.context_ln_shift.value),
            list(p.gate_weight.value[0]), float(p.gate_bias.value[0]),
        )
        assert abs(alpha_ref - alpha[i, 0]) < 1e-12
        assert np.max(np.abs(f_e[i] - fe_ref)) < 1e-12


def test_euclid_fuse_length_mismatch():
    p = make_params(2)
    with pytest.raises(ContractError):
        fusion.euclid_fuse_vjp(np.zeros((2, 6)), np.zeros((2, 9)), p)


# ---------------------------------------------------------------------------
# manifold difference
# ---------------------------------------------------------------------------


def _tie_streams(p):
    for src, dst in (
        ("stream1_hidden_w", "stream2_hidden_w"),
        ("stream1_hidden_b", "stream2_hidden_b"),
        ("stream1_out_w", "stream2_out_w"),
        ("stream1_out_b", "stream2_out_b"),
    ):
        getattr(p, dst).value[:] = getattr(p, src).value


@pytest.mark.parametrize("mode", ["paper", "gyro"])
def test_manifold_diff_coincident_inputs_exact_zero(mode):
    d = 3
    p = make_params(d, seed=7)
    _tie_streams(p)
    rng = np.random.default_rng(8)
    f = rng.normal(size=(6, 3 * d))
    dh = fusion.manifold_diff(f, f, p, mode=mode)
    assert np.all(dh == 0.0)


@pytest.mark.parametrize("mode", ["paper", "gyro"])
def test_manifold_chain_matches_hand_composition(mode):
    # stream outputs forced to u = 0 and v = (0.5, 0, ...) at c = 1
    c = 1.0
    dim = 6
    s1 = np.zeros((1, dim))
    s2 = np.zeros((1, dim))
    s2[0, 0] = 0.5
    dh, _, (x1, x2) = fusion.manifold_chain_vjp(s1, s2, c, mode)
    assert np.array_equal(x1, s1) and np.array_equal(x2, s2)
    w = np.zeros(dim)
    w[0] = math.atanh(0.5)
    if mode == "paper":
        # w - (1 - sqrt(c)*0.5)^2 / (1 - 0) * v
        expected = w.copy()
        expected[0] -= 0.25 * 0.5
    else:
        # lambda_0 / lambda_v = 2 / (8/3) = 0.75 and trivial gyration
        expected = 0.75 * w
    assert np.allclose(dh[0], expected, atol=1e-12)


def test_manifold_diff_modes_differ_and_are_finite():
    d = 3
    p = make_params(d, seed=9)
    rng = np.random.default_rng(10)
    f1, f2 = rand_pair(rng, 8, d)
    dh_paper = fusion.manifold_diff(f1, f2, p, mode="paper")
    dh_gyro = fusion.manifold_diff(f1, f2, p, mode="gyro")
    assert np.all(np.isfinite(dh_paper)) and np.all(np.isfinite(dh_gyro))
    assert np.linalg.norm(dh_paper - dh_gyro) > 1e-6


def test_manifold_chain_gyro_orthogonal_equivariance():
    """Rotating both embeddings rotates the gyro-mode difference conjugately."""
    rng = np.random.default_rng(11)
    dim = 9
    c = 0.1
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    s1 = rng.normal(size=(20, dim))
    s2 = rng.normal(size=(20, dim))
    dh, _, _ = fusion.manifold_chain_vjp(s1, s2, c, "gyro")
    dh_rot, _, _ = fusion.manifold_chain_vjp(s1 @ q.T, s2 @ q.T, c, "gyro")
    assert np.max(np.abs(dh_rot - dh @ q.T)) < 1e-9


# ---------------------------------------------------------------------------
# compression
# ---------------------------------------------------------------------------


def test_compress_zero_final_weights_give_zero():
    d = 2
    p = make_params(d, seed=12)
    p.compress2_weight.value[:] = 0.0
    p.compress2_bias.value[:] = 0.0
    rng = np.random.default_rng(13)
    (out, _), _ = fusion.cross_space_compress_vjp(
        rng.normal(size=(5, 3 * d)), rng.normal(size=(5, 3 * d)), p
    )
    assert np.all(out == 0.0)


def test_compress_matches_scalar_oracle():
    d = 2
    p = make_params(d, seed=0)
    rng = np.random.default_rng(0)
    f_e = rng.normal(size=(3, 3 * d))
    dh = rng.normal(size=(3, 3 * d))
    (out, z1), _ = fusion.cross_space_compress_vjp(f_e, dh, p)
    assert z1.shape == (3, 4 * d) and out.shape == (3, 2 * d)
    for i in range(3):
        ref = oracles.compress(
            list(f_e[i]), list(dh[i]),
            [list(r) for r in p.compress1_weight.value], list(p.compress1_bias.value),
            list(p.compress1_ln_scale.value), list(p.compress1_ln_shift.value),
            [list(r) for r in p.compress2_weight.value], list(p.compress2_bias.value),
        )
        assert np.max(np.abs(out[i] - ref)) < 1e-12


def test_compress_shape_mismatch():
    p = make_params(2)
    with pytest.raises(ContractError):
        fusion.cross_space_compress_vjp(np.zeros((2, 6)), np.zeros((2, 5)), p)


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------


def test_forward_equal_inputs_and_tied_streams():
    d = 3
    p = make_params(d, seed=14)
    _tie_streams(p)
    rng = np.random.default_rng(15)
    f = rng.normal(size=(4, 3 * d))
    out, _ = fusion.medmam_forward_vjp(f, f, p, mode="paper")
    assert np.all(out.delta_h == 0.0)
    assert np.all(np.isfinite(out.f_fused))


def test_forward_batching_is_a_pure_map():
    d = 2
    p = make_params(d, seed=16)
    rng = np.random.default_rng(17)
    f1, f2 = rand_pair(rng, 6, d)
    out = fusion.medmam_forward(f1, f2, p, mode="paper")
    perm = np.array([3, 0, 5, 1, 4, 2])
    out_p = fusion.medmam_forward(f1[perm], f2[perm], p, mode="paper")
    assert np.array_equal(out_p.f_fused, out.f_fused[perm])
    assert np.array_equal(out_p.alpha, out.alpha[perm])


def test_forward_deterministic():
    d = 2
    p = make_params(d, seed=18)
    rng = np.random.default_rng(19)
    f1, f2 = rand_pair(rng, 4, d)
    a = fusion.medmam_forward(f1, f2, p, mode="gyro").f_fused
    b = fusion.medmam_forward(f1, f2, p, mode="gyro").f_fused
    assert np.array_equal(a, b)


def test_forward_matches_composed_stage_oracles():
    """End-to-end values equal the scalar-loop composition of both Euclidean
    stages with the library's own manifold stage in between."""
    d = 4
    p = make_params(d, seed=0)
    rng = np.random.default_rng(0)
    f1, f2 = rand_pair(rng, 4, d)
    out = fusion.medmam_forward(f1, f2, p, mode="paper")
    dh = fusion.manifold_diff(f1, f2, p, mode="paper")
    for i in range(4):
        fe_ref, _ = oracles.context_fusion(
            list(f1[i]), list(f2[i]),
            [list(r) for r in p.context_weight.value],
            list(p.context_ln_scale.value), list(p.context_ln_shift.value),
            list(p.gate_weight.value[0]), float(p.gate_bias.value[0]),
        )
        fused_ref = oracles.compress(
            fe_ref, list(dh[i]),
            [list(r) for r in p.compress1_weight.value], list(p.compress1_bias.value),
            list(p.compress1_ln_scale.value), list(p.compress1_ln_shift.value),
            [list(r) for r in p.compress2_weight.value], list(p.compress2_bias.value),
        )
        assert np.max(np.abs(out.f_fused[i] - fused_ref)) < 1e-10


@pytest.mark.parametrize("mode", ["paper", "gyro"])
def test_forward_gradients_pass_fd(mode):
    """Inputs and every parameter (curvature included) against central FD."""
    d = 2
    p = make_params(d, seed=20, curvature=0.3)
    rng = np.random.default_rng(21)
    f1, f2 = rand_pair(rng, 3, d)
    rho = rng.normal(size=(3, 2 * d))
    names = [prm.name.split("/", 1)[1] for prm in p.named()]

    def fn(f1_, f2_, *param_values):
        for name, value in zip(names, param_values):
            getattr(p, name).value = np.asarray(value, dtype=float)
        out, vjp = fusion.medmam_forward_vjp(f1_, f2_, p, mode)
        value = float(np.sum(out.f_fused * rho))

        def grad_fn():
            g1, g2, grads = vjp(rho)
            return [g1, g2] + [grads[n] for n in names]

        return value, grad_fn

    inputs = [f1, f2] + [getattr(p, n).value.copy() for n in names]
    assert grad_check(fn, inputs) < 1e-5


def test_feature_bundle_validation():
    fusion.FeatureBundle(np.zeros(6), 0)
    with pytest.raises(ContractError):
        fusion.FeatureBundle(np.zeros(7), 0)
    with pytest.raises(ContractError):
        fusion.FeatureBundle(np.array([np.inf] * 6), 0)
    with pytest.raises(ContractError):
        fusion.FeatureBundle(np.zeros(6), -1)
