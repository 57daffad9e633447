import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from straightflow.analytic import (
    DeltaField, MixtureField, delta_velocity, mixture_posterior, mixture_velocity, verify_theorem1,
)
from straightflow.errors import DomainError
from straightflow.flowcore import chord_deviation, euler_sample


def _gauss_pdf(x, mean, sd):
    return math.exp(-0.5 * ((x - mean) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))


def test_delta_velocity_examples(rng):
    y = rng.normal(size=(3, 4, 4))
    f = DeltaField(y)
    assert not delta_velocity(f, y, 0.7).any()
    one = DeltaField(np.ones((1, 1, 1)))
    assert delta_velocity(one, np.zeros((1, 1, 1)), 0.0).item() == 1.0
    assert delta_velocity(one, np.full((1, 1, 1), 0.5), 0.5).item() == 1.0


def test_delta_velocity_domain():
    f = DeltaField(np.ones((1, 1, 1)))
    for t in (1.0, 1 - 1e-13, -0.1):
        with pytest.raises(DomainError):
            delta_velocity(f, np.zeros((1, 1, 1)), t)


def _scalar_mixture():
    return MixtureField(np.array([0.3, 0.7]), np.array([-1.0, 1.0]).reshape(2, 1, 1, 1))


def test_posterior_matches_direct_densities():
    f = _scalar_mixture()
    x, t = 0.2, 0.5
    dens = [w * _gauss_pdf(x, t * y, 1 - t) for w, y in ((0.3, -1.0), (0.7, 1.0))]
    expect = np.array(dens) / sum(dens)
    got = mixture_posterior(f, np.full((1, 1, 1), x), t)
    np.testing.assert_allclose(got, expect, rtol=1e-13)


def test_posterior_prior_at_time_zero(rng):
    f = MixtureField(np.array([0.2, 0.5, 0.3]), rng.normal(size=(3, 2, 3, 3)))
    np.testing.assert_allclose(mixture_posterior(f, rng.normal(size=(2, 3, 3)), 0.0), f.weights, rtol=1e-13)


def test_posterior_symmetric_bisector(rng):
    a = rng.normal(size=(2, 3, 3))
    f = MixtureField.uniform(np.stack([a, -a]))
    x = rng.normal(size=(2, 3, 3))
    x -= (x * a).sum() / (a * a).sum() * a   # project onto the bisector plane
    np.testing.assert_allclose(mixture_posterior(f, x, 0.6), [0.5, 0.5], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 0.999), st.integers(0, 2**31))
def test_posterior_normalized(t, seed):
    r = np.random.default_rng(seed)
    f = MixtureField.uniform(r.normal(scale=3, size=(4, 1, 2, 2)))
    p = mixture_posterior(f, r.normal(scale=3, size=(5, 1, 2, 2)), t)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_posterior_stable_near_one():
    f = MixtureField.uniform(np.array([-5.0, 5.0]).reshape(2, 1, 1, 1))
    p = mixture_posterior(f, np.full((1, 1, 1), 4.99), 1 - 1e-11)
    assert np.all(np.isfinite(p)) and p[1] == 1.0


def test_posterior_concentrates():
    # separation 4: posterior of the generating component at t=0.99 along its own path.
    # Direct density evaluation with the worst noise in [-4, 4] gives >= 1 - 1e-100.
    ya, yb = -2.0, 2.0
    f = MixtureField.uniform(np.array([ya, yb]).reshape(2, 1, 1, 1))
    t = 0.99
    for e in np.linspace(-4, 4, 81):
        x = t * yb + (1 - t) * e
        la = math.log(0.5) - (x - t * ya) ** 2 / (2 * (1 - t) ** 2)
        lb = math.log(0.5) - (x - t * yb) ** 2 / (2 * (1 - t) ** 2)
        direct = 1.0 / (1.0 + math.exp(la - lb))
        got = mixture_posterior(f, np.full((1, 1, 1), x), t)[1]
        assert direct >= 0.999 and got >= 0.999
        assert got == pytest.approx(direct, abs=1e-15)


def test_single_component_equals_delta(rng):
    y = rng.normal(size=(3, 4, 4))
    f = MixtureField(np.array([1.0]), y[None])
    x = rng.normal(size=(3, 4, 4))
    for t in (0.0, 0.3, 0.9):
        assert np.array_equal(mixture_velocity(f, x, t), delta_velocity(DeltaField(y), x, t))


def test_symmetric_mixture_equilibrium():
    a = np.ones((1, 2, 2))
    f = MixtureField.uniform(np.stack([a, -a]))
    traj = euler_sample(f, np.zeros((1, 2, 2)), None, 20)
    assert not traj.states.any()


def test_mixture_velocity_monte_carlo():
    # Monte-Carlo oracle: simulate 1e6 conditional paths, bin x_t near 0.2 at t=0.5.
    f = _scalar_mixture()
    x0, t, half = 0.2, 0.5, 0.005
    r = np.random.default_rng(2024)
    n = 1_000_000
    comp = r.uniform(size=n) < 0.7
    y = np.where(comp, 1.0, -1.0)
    xt = t * y + (1 - t) * r.standard_normal(n)
    sel = np.abs(xt - x0) < half
    vel = (y[sel] - xt[sel]) / (1 - t)
    est, se = vel.mean(), vel.std(ddof=1) / math.sqrt(sel.sum())
    got = mixture_velocity(f, np.full((1, 1, 1), x0), t).item()
    assert abs(got - est) < 3 * se


def test_identical_components_stay_straight(rng):
    y = rng.normal(size=(3, 4, 4))
    f = MixtureField(np.array([0.25, 0.75]), np.stack([y, y]))
    for _ in range(4):
        traj = euler_sample(f, rng.normal(size=y.shape), None, 30)
        assert chord_deviation(traj) < 1e-12


def test_mixture_weight_validation(rng):
    with pytest.raises(DomainError):
        MixtureField(np.array([0.5, 0.6]), rng.normal(size=(2, 1, 1, 1)))
    with pytest.raises(DomainError):
        MixtureField(np.array([1.0, 0.0]), rng.normal(size=(2, 1, 1, 1)))


def test_theorem_report_delta(rng):
    y = rng.normal(size=(3, 16, 16))
    eps = [rng.standard_normal(y.shape) for _ in range(16)]
    rep = verify_theorem1(y, eps, [1, 30])
    assert rep.passed and rep.max_endpoint_discrepancy < 1e-9 and rep.max_chord_deviation < 1e-9
    d = json.loads(rep.to_json())
    assert set(d) == {"max_endpoint_discrepancy", "max_chord_deviation", "pass"} and d["pass"] is True


def test_theorem_degenerate_noise_equals_target(rng):
    y = rng.normal(size=(2, 3, 3))
    rep = verify_theorem1(y, [y.copy(), y.copy()], [1, 5, 30])
    assert rep.passed and rep.max_endpoint_discrepancy == 0.0 and rep.max_chord_deviation == 0.0


def test_theorem_harness_on_marginal_field(rng):
    a = np.zeros((1, 4, 4))
    a[0, 0, 0] = 2.5
    f = MixtureField.uniform(np.stack([a, -a]))
    eps = [rng.standard_normal(a.shape) for _ in range(8)]
    rep = verify_theorem1(a, eps, [1, 30], field=f)
    assert not rep.passed and rep.max_endpoint_discrepancy > 0
    # reference: 1-step vs a 1000-step integration, per noise sample
    worst_ref = 0.0
    for e in eps:
        one = euler_sample(f, e, None, 1).final
        ref = euler_sample(f, e, None, 1000).final
        worst_ref = max(worst_ref, np.linalg.norm(one - ref) / max(np.linalg.norm(one), np.linalg.norm(ref)))
    # 30 steps resolves the same mode as the reference, so the two discrepancies agree closely
    assert rep.max_endpoint_discrepancy == pytest.approx(worst_ref, rel=0.05)


def test_theorem_requires_inputs(rng):
    with pytest.raises(ValueError):
        verify_theorem1(np.ones((1, 1, 1)), [], [1])
    with pytest.raises(ValueError):
        verify_theorem1(np.ones((1, 1, 1)), [np.ones((1, 1, 1))], [])
