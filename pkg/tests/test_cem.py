import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajpilot import cem
from trajpilot.cem import CemConfig, LatentPredictor, LatentPredictorConfig


def test_l1_to_goal_trivial_and_oracle():
    z = np.arange(6.0)
    assert cem.l1_to_goal(z, z) == 0.0
    assert cem.l1_to_goal(z + 1.0, z) == 1.0
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=64), rng.normal(size=64)
    assert cem.l1_to_goal(a, b) == pytest.approx(sum(abs(x - y) for x, y in zip(a, b)) / 64, abs=1e-15)
    with pytest.raises(ValueError):
        cem.l1_to_goal(np.zeros(3), np.zeros(4))


def test_cem_finds_known_optimum():
    target = np.array([0.4, -0.7, 1.1])

    def score(x):
        return np.linalg.norm(x - target, axis=-1)

    cfg = CemConfig(population=64, elite_fraction=0.1, iterations=5, seed=0)
    x, s = cem.cem_search(score, np.zeros(3), np.ones(3), cfg)
    assert np.linalg.norm(x - target) <= 0.05
    assert s == pytest.approx(np.linalg.norm(x - target))


def test_cem_zero_iterations_is_best_of_initial_population():
    mean, std = np.array([1.0, 2.0]), np.array([0.5, 0.3])

    def score(x):
        return (x ** 2).sum(-1)

    x, s = cem.cem_search(score, mean, std, CemConfig(population=16, iterations=0, seed=3))
    draws = mean + std * np.random.default_rng(3).standard_normal((1, 16, 2))[0]
    best = np.argmin(score(draws))
    np.testing.assert_array_equal(x, draws[best])
    assert s == score(draws)[best]


def test_cem_degenerate_std_returns_optimum():
    opt = np.array([0.3, 0.2, -0.1])
    x, s = cem.cem_search(lambda x: np.abs(x - opt).sum(-1), opt, np.zeros(3), CemConfig(seed=1))
    np.testing.assert_array_equal(x, opt)
    assert s == 0.0


def test_cem_best_score_non_increasing_in_iterations():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(8, 8))

    def score(x):
        return np.sin(x @ a).sum(-1) + 0.1 * (x ** 2).sum(-1)

    best = [cem.cem_search(score, np.zeros(8), np.ones(8), CemConfig(iterations=n, seed=2))[1] for n in range(6)]
    assert all(b <= a_ for a_, b in zip(best, best[1:]))


def test_cem_rejects_nonfinite_scores_and_bad_config():
    with pytest.raises(FloatingPointError):
        cem.cem_search(lambda x: np.full(len(x), np.nan), np.zeros(2), np.ones(2), CemConfig())
    with pytest.raises(ValueError):
        CemConfig(elite_fraction=1.0).validate()
    assert CemConfig(population=5, elite_fraction=0.01).n_elite == 1


def test_cem_batch_is_deterministic_per_seed():
    target = np.random.default_rng(0).normal(size=(3, 4))

    def score(x):
        return np.abs(x - target[:, None]).sum(-1)

    a = cem.cem_search_batch(score, np.zeros(4), np.ones(4), 3, CemConfig(seed=7))
    b = cem.cem_search_batch(score, np.zeros(4), np.ones(4), 3, CemConfig(seed=7))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def _tags(n_takes, per_take, n_actions, rng):
    take = np.repeat(np.arange(n_takes), per_take)
    seg = np.tile(np.arange(per_take), n_takes)
    action = rng.integers(n_actions, size=n_takes * per_take)
    return take, seg, action


def test_pair_probe_identical_latents():
    rng = np.random.default_rng(0)
    take, seg, action = _tags(5, 10, 4, rng)
    z = np.tile(rng.normal(size=8), (50, 1))
    rows = cem.pair_geometry_probe(z, take, seg, action, n_pairs=1000, far_gap=3)
    assert [r["pair_type"] for r in rows] == list(cem.PAIR_TYPES)
    for r in rows:
        assert r["l1"] == 0.0
        assert r["cosine"] == pytest.approx(1.0, abs=1e-12)
        assert r["n"] >= 1


def test_pair_probe_two_point_corpus():
    z = np.array([[0.0, 1.0], [2.0, 1.0]])
    rows = {r["pair_type"]: r for r in cem.pair_geometry_probe(z, [0, 1], [0, 0], [3, 3])}
    for name in ("same-action cross-recording", "random cross-recording"):
        assert rows[name]["n"] == 1 and rows[name]["l1"] == 1.0
    assert rows["adjacent same-recording"]["n"] == 0 and math.isnan(rows["adjacent same-recording"]["l1"])
    with pytest.raises(ValueError):
        cem.pair_geometry_probe(z[:1], [0], [0], [0])


def test_pair_probe_recovers_scene_dominant_ordering():
    rng = np.random.default_rng(1)
    take, seg, action = _tags(30, 12, 6, rng)
    scene = rng.normal(0, 2.0, (30, 16))[take]
    z = scene + rng.normal(0, 1.0, (6, 16))[action] + rng.normal(0, 0.3, (len(take), 16))
    rows = {r["pair_type"]: r["l1"] for r in cem.pair_geometry_probe(z, take, seg, action, n_pairs=1000, far_gap=4)}
    assert rows["adjacent same-recording"] < rows["same-action cross-recording"] < rows["random cross-recording"]


def test_monotonicity_fraction_cases():
    start, goal = np.zeros(5), np.ones(5)
    line = np.stack([start + t * (goal - start) for t in np.linspace(0, 1, 6)])[None]
    assert cem.monotonicity_fraction(line) == 1.0
    detour = np.stack([start, start - 1.0, goal * 0.5, goal])[None]
    assert cem.monotonicity_fraction(detour) == 0.0
    assert cem.monotonicity_fraction(np.concatenate([line[:, :4], detour])) == 0.5
    with pytest.raises(ValueError):
        cem.monotonicity_fraction(np.zeros((0, 3, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(3, 8))
def test_monotonicity_fraction_in_unit_interval(seed, h):
    z = np.random.default_rng(seed).normal(size=(20, h, 4))
    f = cem.monotonicity_fraction(z)
    assert 0.0 <= f <= 1.0


def test_score_accuracy_correlation_cases():
    x = np.arange(10.0)
    r, (lo, hi) = cem.score_accuracy_correlation(x, x)
    assert r == pytest.approx(1.0)
    assert cem.score_accuracy_correlation(x, -x)[0] == pytest.approx(-1.0)
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=50), rng.normal(size=50)
    expect = np.corrcoef(a, b)[0, 1]
    r, (lo, hi) = cem.score_accuracy_correlation(a, b)
    assert r == pytest.approx(expect, abs=1e-12)
    assert lo < r < hi
    with pytest.raises(ValueError):
        cem.score_accuracy_correlation(np.ones(5), x[:5])
    with pytest.raises(ValueError):
        cem.score_accuracy_correlation(x[:2], x[:2])


def test_latent_predictor_is_causal_over_mid_steps():
    rng = np.random.default_rng(0)
    model = LatentPredictor(rng, LatentPredictorConfig(width=16, layers=2, heads=2), d_v=8).eval()
    zs, zg = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
    ctrl = rng.normal(size=(2, 4, 16, 6))
    base = model.predict(zs, zg, ctrl, 6)
    bumped = ctrl.copy()
    bumped[:, 2] += 1.0
    out = model.predict(zs, zg, bumped, 6)
    np.testing.assert_array_equal(out[:, :2], base[:, :2])
    assert np.abs(out[:, 2:] - base[:, 2:]).max() > 0
    with pytest.raises(ValueError):
        model.predict(zs, zg, ctrl, 5)


def test_latent_predictor_without_controls_ignores_them():
    rng = np.random.default_rng(1)
    model = LatentPredictor(rng, LatentPredictorConfig(width=16, layers=1, heads=2, use_controls=False), d_v=8)
    zs, zg = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    a = model.predict(zs, zg, rng.normal(size=(3, 2, 16, 6)), 4)
    b = model.predict(zs, zg, rng.normal(size=(3, 2, 16, 6)), 4)
    np.testing.assert_array_equal(a, b)


def test_latent_predictor_learns_and_cem_plan_shapes():
    rng = np.random.default_rng(2)
    n, d_v = 200, 6
    controls = rng.normal(size=(n, 16, 6))
    # latent of a segment is a fixed linear function of its controls
    proj = rng.normal(size=(96, d_v)) / 10
    latents = controls.reshape(n, -1) @ proj
    windows = {4: np.stack([np.arange(i, i + 4) for i in range(n - 4)])}
    cfg = LatentPredictorConfig(width=16, layers=1, heads=2, steps=150, batch_size=32, lr=3e-3)
    model = cem.train_latent_predictor(latents, controls, windows, cfg)
    w = windows[4][:20]
    pred = model.predict(latents[w[:, 0]], latents[w[:, -1]], controls[w[:, 1:-1]], 4)
    base = np.abs(latents[w[:, 1:-1]] - latents.mean(0)).mean()
    assert np.abs(pred - latents[w[:, 1:-1]]).mean() < base
    ctrl, scores = cem.cem_plan(model, latents[w[:3, 0]], latents[w[:3, -1]], 4, np.zeros(96), np.ones(96),
                                CemConfig(population=8, iterations=1))
    assert ctrl.shape == (3, 2, 16, 6) and scores.shape == (3,)
    assert np.all(scores >= 0)
