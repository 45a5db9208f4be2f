import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uav_ssl import numcore as nc
from uav_ssl.errors import BatchTooSmallError, DegenerateEmbeddingError, NumericError, PreconditionError
from uav_ssl.losses import LossConfig, contrastive_loss, reconstruction_loss, total_loss
from uav_ssl.masking import MaskPlan
from uav_ssl.numcore import Tensor, finite_difference_grad

from conftest import toy_plan


def infonce_loop(fa, fv, tau, symmetric=False):
    """Scalar-loop InfoNCE used as an independent oracle."""
    b = len(fa)
    cos = [[float(np.dot(fa[i], fv[j]) / (np.linalg.norm(fa[i]) * np.linalg.norm(fv[j]))) / tau
            for j in range(b)] for i in range(b)]
    a2v = -sum(cos[i][i] - math.log(sum(math.exp(c) for c in cos[i])) for i in range(b)) / b
    if not symmetric:
        return a2v
    v2a = -sum(cos[i][i] - math.log(sum(math.exp(cos[j][i]) for j in range(b))) for i in range(b)) / b
    return (a2v + v2a) / 2


def mse_loop(a, ar, v, vr, masked_a, masked_v):
    total = 0.0
    for tgt, rec, masked in ((a, ar, masked_a), (v, vr, masked_v)):
        acc, cnt = 0.0, 0
        for b in range(tgt.shape[0]):
            for t in masked[b]:
                for k in range(tgt.shape[2]):
                    acc += (tgt[b, t, k] - rec[b, t, k]) ** 2
                    cnt += 1
        total += acc / cnt
    return total


# -- contrastive -------------------------------------------------------------

def test_orthonormal_pair_hand_value():
    e = np.eye(2)
    val = contrastive_loss(Tensor(e), Tensor(e), LossConfig(tau=1.0)).item()
    assert val == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert val == pytest.approx(0.3133, abs=1e-3)


@pytest.mark.parametrize("b", [2, 5, 16])
def test_identical_embeddings_give_log_b(b):
    x = np.tile(np.array([[0.3, -1.2, 2.0]]), (b, 1))
    assert contrastive_loss(Tensor(x), Tensor(x), LossConfig(tau=0.07)).item() == pytest.approx(math.log(b), abs=1e-4)


def test_matches_loop_oracle_both_directions():
    gen = np.random.default_rng(0)
    fa, fv = gen.standard_normal((6, 5)), gen.standard_normal((6, 5))
    for direction in ("a2v", "symmetric"):
        cfg = LossConfig(tau=0.3, direction=direction)
        assert contrastive_loss(Tensor(fa), Tensor(fv), cfg).item() == pytest.approx(
            infonce_loop(fa, fv, 0.3, direction == "symmetric"), abs=1e-12)


@pytest.mark.parametrize("b", [2, 3, 4])
def test_matched_pairing_minimizes_over_permutations(b):
    gen = np.random.default_rng(b)
    fa = np.eye(b, 6) * 3 + 0.1 * gen.standard_normal((b, 6))
    fv = fa + 0.05 * gen.standard_normal((b, 6))
    cfg = LossConfig(tau=0.2)
    matched = contrastive_loss(Tensor(fa), Tensor(fv), cfg).item()
    for perm in itertools.permutations(range(b)):
        if perm != tuple(range(b)):
            assert matched < contrastive_loss(Tensor(fa), Tensor(fv[list(perm)]), cfg).item()


def test_errors():
    with pytest.raises(BatchTooSmallError):
        contrastive_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))))
    z = np.ones((2, 3))
    z[1] = 0
    with pytest.raises(DegenerateEmbeddingError):
        contrastive_loss(Tensor(z), Tensor(np.ones((2, 3))))


def test_contrastive_gradient_matches_fd_float64():
    gen = np.random.default_rng(1)
    fa = Tensor(gen.standard_normal((2, 4)), requires_grad=True)
    fv = Tensor(gen.standard_normal((2, 4)), requires_grad=True)
    cfg = LossConfig(tau=0.5, direction="symmetric")
    contrastive_loss(fa, fv, cfg).backward()
    for t in (fa, fv):
        fd = finite_difference_grad(lambda _: contrastive_loss(fa, fv, cfg), t, eps=1e-6).data
        assert np.max(np.abs(t.grad - fd) / np.maximum(np.abs(fd), 1e-9)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0), st.integers(0, 3))
def test_row_scale_invariance(seed, c, row):
    gen = np.random.default_rng(seed)
    fa, fv = gen.standard_normal((4, 6)), gen.standard_normal((4, 6))
    cfg = LossConfig(tau=0.1)
    base = contrastive_loss(Tensor(fa), Tensor(fv), cfg).item()
    fa[row] *= c
    assert abs(contrastive_loss(Tensor(fa), Tensor(fv), cfg).item() - base) < 1e-6


def test_large_tau_tends_to_log_b():
    gen = np.random.default_rng(2)
    fa, fv = gen.standard_normal((64, 32)), gen.standard_normal((64, 32))
    val = contrastive_loss(Tensor(fa), Tensor(fv), LossConfig(tau=100.0)).item()
    assert abs(val - math.log(64)) < 0.1


# -- reconstruction ------------------------------------------------------------

def _plan_and_data(seed=0, b=2, n=4, m=4, k=5):
    gen = np.random.default_rng(seed)
    from conftest import toy_config
    plan = toy_plan(toy_config(), b, seed)
    a, v = gen.standard_normal((b, n, k)), gen.standard_normal((b, m, k))
    return plan, a, v, gen


def test_perfect_reconstruction_is_zero():
    plan, a, v, _ = _plan_and_data()
    assert reconstruction_loss(a, Tensor(a), v, Tensor(v), plan).item() == 0.0


def test_constant_offset_audio_term_is_one():
    plan, a, v, _ = _plan_and_data()
    assert reconstruction_loss(a, Tensor(a + 1.0), v, Tensor(v), plan).item() == pytest.approx(1.0, abs=1e-12)


def test_reconstruction_matches_loop():
    plan, a, v, gen = _plan_and_data(seed=3, b=3)
    ar, vr = gen.standard_normal(a.shape), gen.standard_normal(v.shape)
    got = reconstruction_loss(a, Tensor(ar), v, Tensor(vr), plan).item()
    assert got == pytest.approx(mse_loop(a, ar, v, vr, plan.masked_audio, plan.masked_visual), abs=1e-6)


def test_all_tokens_variant():
    plan, a, v, gen = _plan_and_data(seed=4)
    ar, vr = gen.standard_normal(a.shape), gen.standard_normal(v.shape)
    got = reconstruction_loss(a, Tensor(ar), v, Tensor(vr), plan, LossConfig(recon_target="all_tokens")).item()
    assert got == pytest.approx(((a - ar) ** 2).mean() + ((v - vr) ** 2).mean(), abs=1e-12)


def test_empty_mask_rejected():
    plan = MaskPlan(0, 0, np.zeros((1, 0), int), np.array([[0, 1]]), np.array([[0]]), np.array([[1]]))
    a = np.zeros((1, 2, 3))
    v = np.zeros((1, 2, 3))
    with pytest.raises(PreconditionError):
        reconstruction_loss(a, Tensor(a), v, Tensor(v), plan)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_reconstruction_nonnegative_and_zero_iff_equal_on_masked(seed):
    plan, a, v, gen = _plan_and_data(seed=seed)
    ar = a.copy()
    # change only unmasked audio tokens: still zero
    keep = plan.kept_audio
    ar[np.arange(2)[:, None], keep] += 5.0
    assert reconstruction_loss(a, Tensor(ar), v, Tensor(v), plan).item() == 0.0
    ar[0, plan.masked_audio[0, 0], 0] += 1e-3
    assert reconstruction_loss(a, Tensor(ar), v, Tensor(v), plan).item() > 0.0


# -- total ---------------------------------------------------------------------

def test_total_loss_arithmetic():
    assert total_loss(0.5, 0.3, 0.0) == 0.5
    assert total_loss(0.5, 0.3, 0.1) == pytest.approx(0.53)
    with pytest.raises(NumericError):
        total_loss(float("nan"), 0.3, 0.1)


def test_total_loss_gradient_linearity():
    gen = np.random.default_rng(7)
    w = Tensor(gen.standard_normal(4), requires_grad=True)
    lr = lambda t: nc.tsum(t * t)
    lc = lambda t: nc.tsum(nc.exp(t * 0.3))
    lam = 0.25
    total_loss(lr(w), lc(w), lam).backward()
    g_total = w.grad.copy()
    fd_r = finite_difference_grad(lr, w, 1e-6).data
    fd_c = finite_difference_grad(lc, w, 1e-6).data
    np.testing.assert_allclose(g_total, fd_r + lam * fd_c, rtol=1e-6)
