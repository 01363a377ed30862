import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jointcodes import autodiff as ad
from jointcodes.autodiff import Tensor, finite_difference_check
from jointcodes.losses import (
    LossWeights,
    anticontrastive_loss,
    contrastive_loss,
    kl_loss,
    recon_loss,
    total_loss,
)

from oracles import anticontrastive_loop, contrastive_loop, kl_loop, recon_loop

E1, E2 = [1.0, 0.0], [0.0, 1.0]


def test_contrastive_identical_unit_rows_is_zero():
    v = np.array([[0.6, 0.8], [0.6, 0.8]])
    for tau in (0.05, 0.1, 1.0, 7.0):
        assert abs(contrastive_loss(Tensor(v), Tensor(v), tau).item()) < 1e-9


def test_contrastive_orthonormal_closed_form():
    z = Tensor([E1, E2])
    assert abs(contrastive_loss(z, z, 0.1).item() - (-20.0)) < 1e-9


def test_contrastive_matches_loop_oracle():
    rng = np.random.default_rng(0)
    za, zb = rng.standard_normal((8, 16)), rng.standard_normal((8, 16))
    got = contrastive_loss(Tensor(za), Tensor(zb), 0.1).item()
    assert abs(got - contrastive_loop(za, zb, 0.1)) < 1e-9
    got = contrastive_loss(Tensor(za), Tensor(zb), 0.1, include_positive=True).item()
    assert abs(got - contrastive_loop(za, zb, 0.1, include_positive=True)) < 1e-9


def test_contrastive_errors():
    with pytest.raises(ValueError):
        contrastive_loss(Tensor([E1]), Tensor([E1]), 0.1)
    with pytest.raises(ValueError):
        contrastive_loss(Tensor([E1, E2]), Tensor([E1, E2]), 0.0)


def test_contrastive_increases_as_pairs_rotate_apart():
    values = []
    for theta in np.linspace(0.0, np.pi / 2, 7):
        c, s = np.cos(theta), np.sin(theta)
        zb = np.array([[c, s], [-s, c]])  # rotate each row of the orthonormal Zb away from Za
        values.append(contrastive_loss(Tensor([E1, E2]), Tensor(zb), 0.1).item())
    assert all(b > a for a, b in zip(values, values[1:]))


def test_contrastive_permutation_invariant():
    rng = np.random.default_rng(1)
    za, zb = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
    p = rng.permutation(6)
    base = contrastive_loss(Tensor(za), Tensor(zb), 0.1).item()
    assert abs(contrastive_loss(Tensor(za[p]), Tensor(zb[p]), 0.1).item() - base) < 1e-9


def test_anti_examples():
    v = np.array([[1.0, -2.0, 0.5]])
    assert abs(anticontrastive_loss(Tensor(v), Tensor(v)).item() - 0.5) < 1e-12
    assert abs(anticontrastive_loss(Tensor([E1, E2]), Tensor([E2, E1])).item()) < 1e-12


def test_anti_matches_loop_oracle():
    rng = np.random.default_rng(2)
    za, zs = rng.standard_normal((8, 16)), rng.standard_normal((8, 16))
    assert abs(anticontrastive_loss(Tensor(za), Tensor(zs)).item() - anticontrastive_loop(za, zs)) < 1e-12


def test_anti_zero_row_errors():
    with pytest.raises(ValueError):
        anticontrastive_loss(Tensor([[0.0, 0.0]]), Tensor([E1]))


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (5, 4), elements=st.floats(-3, 3)).filter(lambda a: np.all(np.linalg.norm(a, axis=1) > 0.1)),
    arrays(np.float64, (5, 4), elements=st.floats(-3, 3)).filter(lambda a: np.all(np.linalg.norm(a, axis=1) > 0.1)),
    arrays(np.float64, (5,), elements=st.floats(0.1, 10)),
    st.integers(0, 4),
)
def test_anti_scale_and_sign_invariance(za, zs, scales, row):
    base = anticontrastive_loss(Tensor(za), Tensor(zs)).item()
    scaled = anticontrastive_loss(Tensor(za * scales[:, None]), Tensor(zs)).item()
    flipped = zs.copy()
    flipped[row] *= -1
    neg = anticontrastive_loss(Tensor(za), Tensor(flipped)).item()
    assert abs(scaled - base) < 1e-12
    assert abs(neg - base) < 1e-12


def test_kl_examples():
    assert kl_loss(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4)))).item() == 0.0
    assert abs(kl_loss(Tensor([[1.0]]), Tensor([[0.0]])).item() - 0.5) < 1e-12


def test_kl_matches_loop_oracle_and_nonnegative():
    rng = np.random.default_rng(3)
    for _ in range(20):
        mu, lv = rng.standard_normal((6, 5)), rng.uniform(-3, 3, (6, 5))
        got = kl_loss(Tensor(mu), Tensor(lv)).item()
        assert abs(got - kl_loop(mu, lv)) < 1e-12
        assert got >= 0


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=st.floats(-5, 5)),
    arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
)
def test_kl_nonnegative_zero_only_at_prior(mu, lv):
    v = kl_loss(Tensor(mu), Tensor(lv)).item()
    assert v >= 0
    if np.all(mu == 0) and np.all(lv == 0):
        assert v == 0
    elif np.max(np.abs(mu)) > 1e-3 or np.max(np.abs(lv)) > 1e-3:
        assert v > 0


def test_recon_examples():
    x = np.random.default_rng(4).random((2, 3, 4, 4))
    assert recon_loss(Tensor(x), Tensor(x)).item() == 0.0
    y = np.zeros((1, 3, 4, 4))
    yh = y.copy()
    yh[0, 1, 2, 3] = 0.5
    assert abs(recon_loss(Tensor(y), Tensor(yh)).item() - 0.125) < 1e-12


def test_recon_matches_loop_and_checks_shape():
    rng = np.random.default_rng(5)
    x, xh = rng.random((3, 3, 4, 4)), rng.random((3, 3, 4, 4))
    assert abs(recon_loss(Tensor(x), Tensor(xh)).item() - recon_loop(x, xh)) < 1e-12
    with pytest.raises(ValueError):
        recon_loss(Tensor(x), Tensor(xh[:, :2]))


def test_total_loss_defaults_and_arithmetic():
    w = LossWeights()
    assert (w.lambda_con, w.lambda_anti, w.lambda_kl, w.tau) == (0.02, 0.0005, 5e-5, 0.1)
    report, total = total_loss(1.0, 2.0, 4.0, 8.0, w)
    assert abs(report.total - 1.0424) < 1e-12
    assert abs(total.item() - 1.0424) < 1e-12
    assert (report.rec, report.con, report.anti, report.kl) == (1.0, 2.0, 4.0, 8.0)


def test_total_loss_zero_lambdas_is_rec():
    report, _ = total_loss(3.5, 100.0, 0.3, 7.0, LossWeights(0.0, 0.0, 0.0, 0.1))
    assert report.total == 3.5


def test_total_loss_invariant_and_nonfinite():
    rng = np.random.default_rng(6)
    for _ in range(50):
        terms = rng.uniform(-50, 50, 4)
        w = LossWeights(*rng.uniform(0, 1, 3), tau=0.1)
        rep, _ = total_loss(*terms, w)
        expect = rep.rec + w.lambda_con * rep.con + w.lambda_anti * rep.anti + w.lambda_kl * rep.kl
        assert abs(rep.total - expect) < 1e-12
    with pytest.raises(FloatingPointError, match="anti"):
        total_loss(1.0, 1.0, float("nan"), 1.0, LossWeights())


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(tau=0.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_con=-1.0)


@pytest.mark.parametrize("seed", range(10))
def test_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    b, d = rng.integers(2, 5), rng.integers(2, 17)
    za, zb = rng.standard_normal((b, d)), rng.standard_normal((b, d))
    zbT = Tensor(zb)
    assert finite_difference_check(lambda t: contrastive_loss(t, zbT, 0.1), za, 1e-5) < 1e-4
    assert finite_difference_check(lambda t: anticontrastive_loss(t, zbT), za, 1e-5) < 1e-4
    lv = Tensor(rng.uniform(-2, 2, (b, d)))
    assert finite_difference_check(lambda t: kl_loss(t, lv), za, 1e-5) < 1e-4
    mu = Tensor(za)
    assert finite_difference_check(lambda t: kl_loss(mu, t), lv.data, 1e-5) < 1e-4
    x = Tensor(rng.random((b, 3, 2, 2)))
    assert finite_difference_check(lambda t: recon_loss(x, ad.sigmoid(t)), rng.standard_normal((b, 3, 2, 2)), 1e-5) < 1e-4
