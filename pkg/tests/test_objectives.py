import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from uacgan import objectives as obj
from uacgan.mine import EMADenominator, dv_bound, mine_step
from uacgan.models import LabelSpec, LatentSpec, build_networks
from uacgan.oracle import DiscreteJoint, conditional_entropy, tac_value_exhaustive


def test_gan_value_examples():
    assert float(obj.gan_value([0.5], [0.5])) == pytest.approx(2 * math.log(0.5), abs=1e-4)
    assert float(obj.gan_value([1 - 1e-7], [1e-7])) == pytest.approx(0.0, abs=1e-6)
    assert float(obj.gan_value([0.9], [0.1])) == pytest.approx(-0.2107, abs=1e-4)


def test_gan_value_clamps_and_counts():
    obj.clamp_counter.clear()
    v = obj.gan_value([1.0], [0.0])
    assert math.isfinite(float(v))
    assert obj.clamp_counter["gan_value"] == 2


def test_cross_entropy_examples():
    labels = torch.arange(10) % 10
    assert float(obj.cross_entropy_term(torch.full((10, 10), 0.1), labels)) == pytest.approx(math.log(10), abs=1e-6)
    assert float(obj.cross_entropy_term(torch.eye(3), torch.arange(3))) == pytest.approx(0.0, abs=1e-6)
    assert float(obj.cross_entropy_term([[0.2, 0.8]], [1])) == pytest.approx(0.2231, abs=1e-4)


def test_tac_value_examples():
    assert float(obj.tac_value(torch.eye(3), torch.arange(3))) == pytest.approx(0.0, abs=1e-6)
    assert float(obj.tac_value(torch.full((4, 3), 1 / 3), torch.tensor([0, 1, 2, 0]))) == pytest.approx(-1.0986,
                                                                                                       abs=1e-4)
    assert float(obj.tac_value([[0.6, 0.4]], [0])) == pytest.approx(-0.5108, abs=1e-4)


def test_compose_ac_zero_terms():
    rep = obj.compose("ac", {"term_a": 0.0, "term_b": 0.0, "term_c": 0.0})
    assert rep.loss_D == rep.loss_G == rep.loss_C == 0
    assert rep.loss_Cmi is None and rep.loss_T is None and rep.term_d is None and rep.v_mine is None


def test_compose_uac_signs():
    rep = obj.compose("uac", {"term_a": 0.0, "term_b": 0.0, "term_c": 0.0, "v_mine": 0.7}, lambda_mi=1.0)
    assert rep.loss_G == pytest.approx(0.7)
    assert rep.loss_T == pytest.approx(-0.7)


def test_compose_tac_is_ac_plus_term_d():
    terms = {"term_a": -1.2, "term_b": 0.4, "term_c": 0.3, "g_gan": 0.9, "term_d": -0.25}
    ac = obj.compose("ac", terms)
    tac = obj.compose("tac", terms)
    assert tac.loss_D == ac.loss_D and tac.loss_C == ac.loss_C
    assert tac.loss_G == pytest.approx(ac.loss_G + terms["term_d"])
    assert tac.loss_Cmi == pytest.approx(-terms["term_d"])


def test_compose_missing_terms():
    with pytest.raises(ValueError, match="term_d"):
        obj.compose("tac", {"term_a": 0, "term_b": 0, "term_c": 0})
    with pytest.raises(ValueError, match="v_mine"):
        obj.compose("uac", {"term_a": 0, "term_b": 0, "term_c": 0})
    with pytest.raises(ValueError):
        obj.compose("bogus", {"term_a": 0, "term_b": 0, "term_c": 0})


def test_compose_ac_ignores_extra_terms():
    base = {"term_a": -1.0, "term_b": 0.5, "term_c": 0.2}
    assert obj.compose("ac", base) == obj.compose("ac", {**base, "term_d": 3.0, "v_mine": 9.0})


def test_classifier_on_fake_switch():
    terms = {"term_a": -1.0, "term_b": 0.5, "term_c": 0.2}
    assert obj.compose("ac", terms).loss_C == pytest.approx(0.7)
    assert obj.compose("ac", terms, classifier_on_fake=False).loss_C == pytest.approx(0.5)


def test_generator_gan_loss_forms():
    assert float(obj.generator_gan_loss([0.25])) == pytest.approx(-math.log(0.25))
    assert float(obj.generator_gan_loss([0.25], saturating=True)) == pytest.approx(math.log(0.75))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 20), K=st.integers(2, 6), seed=st.integers(0, 10_000))
def test_cross_entropy_matches_scalar_loop(n, K, seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(K), size=n)
    labels = rng.integers(0, K, n)
    loop = -sum(math.log(max(min(probs[i, labels[i]], 1 - obj.PROB_EPS), obj.PROB_EPS)) for i in range(n)) / n
    assert float(obj.cross_entropy_term(torch.tensor(probs), torch.tensor(labels))) == pytest.approx(loop, abs=1e-6)


def test_loss_report_finite_and_nonnegative_ce():
    rep = obj.compose("tac", {"term_a": -1.0, "term_b": 0.5, "term_c": 0.2, "term_d": -0.3})
    assert rep.is_finite() and rep.term_b >= 0 and rep.term_c >= 0


def test_tac_lower_bound_on_discrete_toy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = DiscreteJoint.random(rng, 6, 3)
        exact = tac_value_exhaustive(q, q.posterior)
        assert exact == pytest.approx(-conditional_entropy(q), abs=1e-6)
        other = rng.dirichlet(np.ones(3), size=6)
        assert tac_value_exhaustive(q, other) < exact


def _mog_bundle(seed=0):
    return build_networks("mog-mlp", (1,), LabelSpec(3), LatentSpec(2), seed=seed).to(torch.float64)


def test_sign_step_on_T_increases_v_mine():
    b = _mog_bundle()
    gen = torch.Generator().manual_seed(0)
    z = torch.randn(256, 2, generator=gen, dtype=torch.float64)
    y = torch.randint(0, 3, (256,), generator=gen)
    y_bar = torch.randint(0, 3, (256,), generator=gen)
    with torch.no_grad():
        x = b.G(z, y)

    def v():
        return dv_bound(b.T(x, y), b.T(x, y_bar))

    before = float(v())
    est, surrogate = mine_step(b.T, x, y, y_bar, EMADenominator(1.0))
    grads = torch.autograd.grad(surrogate, list(b.T.parameters()))
    with torch.no_grad():
        for p, g in zip(b.T.parameters(), grads):
            p -= 1e-3 * g
    assert float(v()) > before


def test_sign_step_on_G_decreases_v_mine():
    b = _mog_bundle(1)
    gen = torch.Generator().manual_seed(1)
    z = torch.randn(256, 2, generator=gen, dtype=torch.float64)
    y = torch.randint(0, 3, (256,), generator=gen)
    y_bar = torch.randint(0, 3, (256,), generator=gen)
    # give T some structure first so v_mine depends on G
    opt = torch.optim.Adam(b.T.parameters(), lr=1e-2)
    ema = EMADenominator(1.0)
    for _ in range(50):
        with torch.no_grad():
            x = b.G(z, y)
        _, s = mine_step(b.T, x, y, y_bar, ema)
        opt.zero_grad()
        s.backward()
        opt.step()

    def v():
        x = b.G(z, y)
        return dv_bound(b.T(x, y), b.T(x, y_bar))

    before = v()
    grads = torch.autograd.grad(before, list(b.G.parameters()))
    with torch.no_grad():
        for p, g in zip(b.G.parameters(), grads):
            p -= 1e-3 * g
    assert float(v()) < float(before)
