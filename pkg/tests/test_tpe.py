import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from oracles import grid_optimum, planted_loss
from smallaug.errors import ObjectiveFailure
from smallaug.tpe import (POLICY_SPACE, Categorical, CategoricalDensity, IntUniform, ParamSpace, ParzenDensity,
                          TpeConfig, Trial, Uniform, density, optimize, random_search, score, split_trials, suggest)


def trials(losses, params=None):
    params = params or [{"op": "single", "p": 0.5, "m": 1}] * len(losses)
    return [Trial(dict(pt), float(v), i) for i, (v, pt) in enumerate(zip(losses, params))]


# -- space and trials ---------------------------------------------------------

def test_policy_space_shape():
    op, p, m = POLICY_SPACE.dims
    assert op.choices == ("single", "multiple", "all")
    assert (p.lo, p.hi) == (0, 1)
    assert m.choices == (1, 2, 3)


def test_invalid_dims():
    with pytest.raises(ValueError):
        Uniform("x", 1, 1)
    with pytest.raises(ValueError):
        Categorical("x", ())
    with pytest.raises(ValueError):
        IntUniform("x", 3, 1)


def test_trial_json_line():
    t = Trial({"op": "all", "p": 0.25, "m": 2}, 0.5, 3)
    line = t.to_json()
    assert list(json.loads(line)) == ["index", "op", "p", "m", "loss"]
    assert Trial.from_json(line) == t


def test_config_validation():
    for bad in (dict(gamma=0), dict(gamma=1), dict(n_startup=0), dict(n_candidates=0)):
        with pytest.raises(ValueError):
            TpeConfig(**bad)


# -- split --------------------------------------------------------------------

def test_split_example():
    good, bad = split_trials(trials([3, 1, 2, 4]), 0.25)
    assert [t.loss for t in good] == [1]
    assert sorted(t.loss for t in bad) == [2, 3, 4]


def test_split_single_trial():
    good, bad = split_trials(trials([7]), 0.25)
    assert len(good) == 1 and bad == []


def test_split_ties_prefer_low_index():
    good, _ = split_trials(trials([1, 1, 1, 1, 1, 1, 1, 1]), 0.25)
    assert [t.index for t in good] == [0, 1]


@given(st.lists(st.integers(0, 5), min_size=1, max_size=60), st.floats(0.05, 0.95))
def test_split_sizes_and_order(losses, gamma):
    good, bad = split_trials(trials(losses), gamma)
    assert len(good) == math.ceil(gamma * len(losses))
    assert len(good) + len(bad) == len(losses)
    if bad:
        assert max(t.loss for t in good) <= min(t.loss for t in bad)


# -- densities ----------------------------------------------------------------

def test_categorical_prior_only():
    d = CategoricalDensity(("a", "b", "c"), [])
    assert np.allclose(d.probs, [1 / 3] * 3)


def test_categorical_smoothed_frequencies():
    d = CategoricalDensity(("a", "b", "c"), ["a", "a", "b"], prior_weight=1.0)
    assert d.probs.tolist() == [3 / 6, 2 / 6, 1 / 6]
    assert math.isclose(score(d, "c"), math.log(1 / 6))


@given(st.lists(st.sampled_from([1, 2, 3]), max_size=40))
def test_categorical_sums_to_one(obs):
    d = density(IntUniform("m", 1, 3), obs)
    assert math.isclose(d.probs.sum(), 1.0, abs_tol=1e-15)


def _integral(d):
    points = sorted({float(v) for v in d.mu if d.lo < v < d.hi})
    return quad(lambda x: float(d.pdf([x])[0]), d.lo, d.hi, points=points or None, limit=500,
                epsabs=1e-12, epsrel=1e-12)[0]


@pytest.mark.parametrize("obs", [[], [0.5], [0.0, 1.0], [0.2, 0.21, 0.22, 0.9], [0.999, 0.9995, 0.5]])
def test_parzen_integrates_to_one(obs):
    assert abs(_integral(ParzenDensity(0.0, 1.0, obs)) - 1.0) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_parzen_integral_property(obs):
    assert abs(_integral(ParzenDensity(0.0, 1.0, obs)) - 1.0) < 1e-6


def test_parzen_outside_support():
    d = ParzenDensity(0.0, 1.0, [0.3])
    assert d.log_pdf([-0.1, 1.1]).tolist() == [-math.inf, -math.inf]


def test_parzen_samples_in_range():
    d = ParzenDensity(0.0, 1.0, [0.0, 0.01, 1.0])
    xs = d.sample(np.random.default_rng(0), 2000)
    assert min(xs) >= 0 and max(xs) <= 1


def test_parzen_empty_is_uniform():
    d = ParzenDensity(2.0, 6.0, [])
    assert np.allclose(d.pdf([2.0, 3.3, 6.0]), 0.25)


# -- suggest ------------------------------------------------------------------

def test_startup_draws_uniform_ops():
    rng = np.random.default_rng(0)
    cfg = TpeConfig()
    counts = {"single": 0, "multiple": 0, "all": 0}
    for _ in range(10_000):
        counts[suggest(POLICY_SPACE, [], cfg, rng)["op"]] += 1
    sd = math.sqrt(10_000 * (1 / 3) * (2 / 3))
    assert all(abs(c - 10_000 / 3) <= 3 * sd for c in counts.values())


def test_good_mode_dominates_suggestions():
    rng = np.random.default_rng(1)
    hist = []
    for i in range(40):
        op = "single" if i < 10 else "all"
        hist.append(Trial({"op": op, "p": float(rng.uniform()), "m": int(rng.integers(1, 4))},
                          0.0 if op == "single" else 1.0, i))
    cfg = TpeConfig()
    hits = sum(suggest(POLICY_SPACE, hist, cfg, np.random.default_rng(s))["op"] == "single" for s in range(1000))
    assert hits >= 900


def test_suggest_deterministic():
    hist = optimize(POLICY_SPACE, planted_loss, 20, rng=np.random.default_rng(5))
    a = suggest(POLICY_SPACE, hist, TpeConfig(), np.random.default_rng(3))
    b = suggest(POLICY_SPACE, hist, TpeConfig(), np.random.default_rng(3))
    assert a == b


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["single", "multiple", "all"]), st.floats(0, 1), st.integers(1, 3),
                          st.floats(-10, 10)), min_size=10, max_size=40), st.integers(0, 2**31))
def test_suggestions_in_space(rows, seed):
    hist = [Trial({"op": o, "p": p, "m": m}, v, i) for i, (o, p, m, v) in enumerate(rows)]
    pt = suggest(POLICY_SPACE, hist, TpeConfig(), np.random.default_rng(seed))
    assert POLICY_SPACE.contains(pt)
    assert type(pt["p"]) is float and type(pt["m"]) is int and type(pt["op"]) is str


# -- optimize -----------------------------------------------------------------

def test_zero_objective():
    hist = optimize(POLICY_SPACE, lambda _: 0.0, 5)
    assert [t.index for t in hist] == list(range(5))
    assert all(t.loss == 0 for t in hist)


def test_objective_failure_keeps_history():
    def boom(pt):
        if boom.calls == 3:
            raise RuntimeError("down")
        boom.calls += 1
        return 1.0
    boom.calls = 0
    with pytest.raises(ObjectiveFailure) as err:
        optimize(POLICY_SPACE, boom, 10)
    assert err.value.index == 3 and len(err.value.history) == 3


def test_nan_loss_is_failure():
    with pytest.raises(ObjectiveFailure):
        optimize(POLICY_SPACE, lambda _: float("nan"), 3)


def test_startup_boundary_matches_random_sampling():
    cfg = TpeConfig(n_startup=10)
    a = optimize(POLICY_SPACE, planted_loss, 10, cfg, np.random.default_rng(4))
    b = random_search(POLICY_SPACE, planted_loss, 10, np.random.default_rng(4))
    assert [t.params for t in a] == [t.params for t in b]


def test_optimize_deterministic():
    a = optimize(POLICY_SPACE, planted_loss, 30, rng=np.random.default_rng(8))
    b = optimize(POLICY_SPACE, planted_loss, 30, rng=np.random.default_rng(8))
    assert a == b


def test_grid_oracle_on_planted_objective():
    opt = grid_optimum(planted_loss)
    assert opt["op"] == "single" and opt["p"] == 0.5


def test_planted_objective_found():
    hits = 0
    for seed in range(20):
        best = min(optimize(POLICY_SPACE, planted_loss, 60, rng=np.random.default_rng(seed)), key=lambda t: t.loss)
        hits += best.params["op"] == "single" and abs(best.params["p"] - 0.5) < 0.15
    assert hits >= 18


def test_param_space_contains():
    space = ParamSpace([Categorical("a", ("x",)), Uniform("b", 0, 2), IntUniform("c", 0, 1)])
    assert space.contains({"a": "x", "b": 1.5, "c": 1})
    assert not space.contains({"a": "x", "b": 2.5, "c": 1})
    assert not space.contains({"a": "x", "b": 1.0})
