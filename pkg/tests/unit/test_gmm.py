import numpy as np
import pytest

from steerkit._exceptions import FitError
from steerkit._gmm import fit_gmm_em, mixture_log_likelihood, stack_demos
from steerkit._policy import build_noise_schedule


def _two_clusters(rng, n=200):
    a = rng.normal(-1.0, 0.1, size=(n, 2, 2))
    b = rng.normal(1.0, 0.1, size=(n, 2, 2))
    return np.concatenate([a, b])


def test_em_log_likelihood_is_nondecreasing():
    rng = np.random.default_rng(0)
    history = []
    fit_gmm_em(_two_clusters(rng), 3, 40, rng, history=history)
    assert len(history) == 40
    assert all(b >= a - 1e-8 for a, b in zip(history, history[1:]))


def test_fitted_mixture_scores_at_least_last_em_iterate():
    rng = np.random.default_rng(4)
    demos = _two_clusters(rng, n=50)
    history = []
    policy = fit_gmm_em(demos, 2, 15, rng, history=history)
    x, _, _ = stack_demos(demos)
    ll = mixture_log_likelihood(x, policy.weights, policy.means, policy.variances)
    assert ll >= history[-1] - 1e-6


def test_em_recovers_separated_clusters():
    rng = np.random.default_rng(1)
    policy = fit_gmm_em(_two_clusters(rng), 2, 50, rng)
    centers = sorted(float(m.mean()) for m in policy.means)
    assert centers == pytest.approx([-1.0, 1.0], abs=0.05)
    assert policy.weights == pytest.approx([0.5, 0.5], abs=0.05)


def test_em_floors_variances():
    rng = np.random.default_rng(2)
    demos = np.zeros((10, 2, 2))
    policy = fit_gmm_em(demos, 2, 5, rng, cov_floor=1e-4)
    assert np.all(policy.variances >= 1e-4)


def test_em_accepts_per_rollout_stacks():
    rng = np.random.default_rng(3)
    demos = [rng.normal(size=(3, 4, 3)), rng.normal(size=(5, 4, 3))]
    x, horizon, dim = stack_demos(demos)
    assert x.shape == (8, 12) and (horizon, dim) == (4, 3)
    policy = fit_gmm_em(
        demos, 2, 5, rng, condition_key="k", schedule=build_noise_schedule(6), backend="flow"
    )
    assert policy.backend == "flow"
    assert policy.schedule.steps == 6
    assert policy.condition_key == "k"


def test_em_rejects_too_few_chunks():
    with pytest.raises(FitError):
        fit_gmm_em(np.zeros((2, 2, 2)), 3, 5, np.random.default_rng(0))


def test_em_rejects_empty_and_ragged_demos():
    with pytest.raises(FitError):
        fit_gmm_em([], 1)
    with pytest.raises(FitError):
        stack_demos([np.zeros((2, 2)), np.zeros((3, 2))])


def test_em_is_deterministic_given_rng():
    demos = _two_clusters(np.random.default_rng(4), 50)
    a = fit_gmm_em(demos, 3, 10, np.random.default_rng(9))
    b = fit_gmm_em(demos, 3, 10, np.random.default_rng(9))
    assert np.array_equal(a.means, b.means)
