import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from trajpilot import metrics, pilot
from trajpilot.core import as_tensor, grad_check, parameter
from trajpilot.pilot import CandidateSet, HorizonBank, ScorerConfig, ScorerModel
from trajpilot.predictor import PredictorConfig, PredictorModel, plan_rankings
from trajpilot.synthworld import ActionBank, WorldConfig, generate_corpus

D, D_V = 4, 6


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def basis_bank(n=10):
    return ActionBank([f"t{i}" for i in range(n)], np.eye(n), np.arange(n))


def hand_bank(starts, goals):
    n = len(starts)
    z = np.zeros((n, 1, 2))
    return HorizonBank(3, np.zeros((n, 3), int), np.arange(n), unit(np.asarray(starts, float)),
                       unit(np.asarray(goals, float)), z, np.zeros((n, 1, 16, 6)), np.zeros((n, 1), int),
                       np.zeros((n, 1), int), z)


def test_retrieve_hand_set_bank_matches_cosine_oracle():
    starts = [[1, 0], [0, 1], [1, 1]]
    goals = [[0, 1], [0, 1], [1, 0]]
    hb = hand_bank(starts, goals)
    qs, qg = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    idx, sc = pilot.retrieve(hb, qs, qg, k=3)
    expect = [unit(np.array(s, float)) @ qs + unit(np.array(g, float)) @ qg for s, g in zip(starts, goals)]
    assert idx[0].tolist() == list(np.argsort(-np.array(expect), kind="stable"))
    np.testing.assert_allclose(sc[0], np.sort(expect)[::-1], atol=1e-12)
    assert sc[0, 0] == pytest.approx(2.0)
    idx_a, sc_a = pilot.retrieve(hb, qs, k=3, mode="anticipation")
    assert idx_a[0].tolist() == [0, 2, 1]


def test_retrieve_truncates_breaks_ties_and_excludes():
    hb = hand_bank([[1, 0], [1, 0], [0, 1]], [[1, 0], [1, 0], [1, 0]])
    idx, _ = pilot.retrieve(hb, [1.0, 0.0], [1.0, 0.0], k=10)
    assert idx[0].tolist() == [0, 1, 2]
    idx, _ = pilot.retrieve(hb, [1.0, 0.0], [1.0, 0.0], k=2, exclude_takes=[0])
    assert idx[0].tolist() == [1, 2]
    with pytest.raises(ValueError):
        pilot.retrieve(hb, [1.0, 0.0], None, k=1, mode="planning")
    with pytest.raises(ValueError):
        pilot.retrieve(hb, [1.0, 0.0], [1.0, 0.0], mode="other")
    with pytest.raises(ValueError):
        pilot.retrieve(hand_bank(np.zeros((0, 2)) + 1, np.zeros((0, 2)) + 1), [1.0, 0.0], [1.0, 0.0])


@pytest.fixture(scope="module")
def small_world():
    cfg = WorldConfig(n_takes=31, test_fraction=0.2, segments_per_take=24, n_actions=8, actions_per_scenario=4,
                      n_scenarios=2, d=D, d_v=D_V, n_tok=3, seed=0)
    corpus = generate_corpus(cfg)
    seg_z = unit(np.random.default_rng(0).normal(size=(len(corpus), D)))
    return corpus, seg_z


def test_bank_entry_count_matches_windows(small_world):
    corpus, seg_z = small_world
    bank = pilot.build_bank(corpus, seg_z)
    assert bank.size(5) == len(corpus.windows("train", 5)) == 500
    assert bank.horizons() == [3, 4, 5, 6, 7, 8]
    assert not bank[5].key_start.flags.writeable
    with pytest.raises(KeyError):
        bank[9]


def test_single_entry_and_duplicate_banks(small_world):
    corpus, seg_z = small_world
    w = corpus.windows("train", 4)
    one = pilot.build_horizon_bank(corpus, seg_z, w[:1])
    idx, _ = pilot.retrieve(one, seg_z[w[5, 0]], seg_z[w[5, -1]], k=16)
    assert idx.tolist() == [[0]]
    dup = pilot.build_horizon_bank(corpus, seg_z, np.stack([w[3], w[3]]))
    assert len(dup) == 2
    np.testing.assert_array_equal(dup.mid_latents[0], dup.mid_latents[1])
    with pytest.raises(ValueError):
        pilot.build_horizon_bank(corpus, seg_z, np.zeros((0, 4), int))


def test_utility_perfect_and_all_wrong():
    bank = basis_bank()
    gt = np.array([1, 4, 7])
    u, _ = pilot.candidate_utility(bank.embeddings[gt], gt, bank.embeddings[gt], bank)
    assert u == pytest.approx(2.6)
    wrong = unit(np.array([[0, 0, 5, 4, 0, 3, 2, 0, 1, 0.0]] * 3))
    # wrong has no mass on texts 1, 4, 7 and five positive texts above them
    u, comp = pilot.candidate_utility(wrong, gt, bank.embeddings[gt], bank)
    assert comp["teacher"] == 0 and u == 0.0


def test_utility_seeded_formula_oracle():
    bank = basis_bank()
    gt = np.array([2, 5, 8])
    step1 = bank.embeddings[2]
    step2 = unit(3 * bank.embeddings[0] + 2 * bank.embeddings[1] + bank.embeddings[5])
    step3 = unit(np.array([6, 5, 0, 4, 3, 0, 2, 1, 0, 0.5]))
    pred = np.stack([step1, step2, step3])
    u, comp = pilot.candidate_utility(pred, gt, bank.embeddings[gt], bank)

    def rank(p, t):
        s = p @ bank.embeddings.T
        return sum(1 for j in range(len(s)) if s[j] > s[t] or (s[j] == s[t] and j < t))

    ranks = [rank(p, t) for p, t in zip(pred, gt)]
    assert ranks == [0, 2, 9]
    s_teacher = np.mean([p @ bank.embeddings[t] for p, t in zip(pred, gt)])
    expect = 0.1 * s_teacher + 1 / 3 + 0.5 * 2 / 3 + 0.0
    assert u == pytest.approx(expect, abs=1e-12)


def make_cs(rng, q=3, k=5, h=2, utility=True):
    cand_mid = unit(rng.normal(size=(q, k, h, D)))
    return CandidateSet(
        horizon=h + 2, windows=np.zeros((q, h + 2), int), indices=np.tile(np.arange(k), (q, 1)),
        retrieval_scores=rng.uniform(0, 2, (q, k)), cand_mid=cand_mid,
        cand_start=unit(rng.normal(size=(q, D))), cand_goal=unit(rng.normal(size=(q, D))),
        cand_traj=unit(rng.normal(size=(q, k, h, D))), cand_label_emb=unit(rng.normal(size=(q, k, h, D))),
        cand_text_ids=rng.integers(6, size=(q, k, h)), notraj_mid=unit(rng.normal(size=(q, h, D))),
        notraj_start=unit(rng.normal(size=(q, D))), notraj_goal=unit(rng.normal(size=(q, D))),
        query=rng.normal(size=(q, pilot.feature_dims(D, D_V)[1])),
        utility=rng.uniform(0, 2.6, (q, k)) if utility else None,
        utility_notraj=rng.uniform(0, 2.6, q) if utility else None,
    )


def tiny_scorer(seed=0):
    return ScorerModel(np.random.default_rng(seed), ScorerConfig(width=8, layers=2, heads=2), D, D_V).eval()


def test_scorer_matches_reference_forward():
    rng = np.random.default_rng(1)
    cs = make_cs(rng)
    scorer = tiny_scorer()
    gate, rank = pilot.scorer_forward(scorer, cs)
    st_ = scorer.state_dict()
    feats = pilot.candidate_features(cs)
    hor = st_["horizon_emb"][cs.horizon - 3]
    qt = cs.query @ st_["query_proj.weight"] + st_["query_proj.bias"] + st_["query_type"] + hor
    ct = feats @ st_["cand_proj.weight"] + st_["cand_proj.bias"] + hor
    y = oracles.transformer(st_, "body.", np.concatenate([qt[:, None], ct], axis=1), heads=2, n_layers=2)
    np.testing.assert_allclose(gate, y[:, 0] @ st_["gate_head.weight"][:, 0] + st_["gate_head.bias"][0],
                               atol=1e-10)
    np.testing.assert_allclose(rank, y[:, 1:] @ st_["rank_head.weight"][:, 0], atol=1e-10)


def test_scorer_is_permutation_equivariant():
    rng = np.random.default_rng(2)
    cs = make_cs(rng, k=6)
    scorer = tiny_scorer(1)
    gate, rank = pilot.scorer_forward(scorer, cs)
    perm = rng.permutation(6)
    feats = pilot.candidate_features(cs)
    g2, r2 = scorer(feats[:, perm], cs.query, cs.horizon)
    np.testing.assert_allclose(g2.data, gate, atol=1e-12)
    np.testing.assert_allclose(r2.data, rank[:, perm], atol=1e-12)
    same = np.repeat(feats[:, :1], 4, axis=1)
    _, r3 = scorer(same, cs.query, cs.horizon)
    np.testing.assert_allclose(r3.data, r3.data[:, :1].repeat(4, axis=1), atol=1e-12)
    with pytest.raises(ValueError):
        scorer(feats[:, :0], cs.query, cs.horizon)


def scorer_loss_oracle(gate, rank, u, u0, margin, temp):
    y = (u.max(1) > u0 + margin).astype(float)
    bce = np.logaddexp(0, gate) - gate * y
    logp = rank - np.log(np.exp(rank).sum(1, keepdims=True))
    ce = -logp[np.arange(len(u)), u.argmax(1)]
    logq = u / temp - np.log(np.exp(u / temp).sum(1, keepdims=True))
    kl = (np.exp(logp) * (logp - logq)).sum(1)
    return np.mean(bce + y * (ce + kl))


def test_scorer_loss_oracle_and_limits():
    rng = np.random.default_rng(3)
    gate, rank = rng.normal(size=6), rng.normal(size=(6, 8))
    u, u0 = rng.uniform(0, 2.6, (6, 8)), rng.uniform(0, 2.6, 6)
    got = pilot.scorer_loss(as_tensor(gate), as_tensor(rank), u, u0, 0.05, 0.7).item()
    assert abs(got - scorer_loss_oracle(gate, rank, u, u0, 0.05, 0.7)) <= 1e-10
    low = np.full((6, 8), 0.5)
    got = pilot.scorer_loss(as_tensor(gate), as_tensor(rank), low, np.ones(6)).item()
    assert got == pytest.approx(np.mean(np.logaddexp(0, gate)), abs=1e-12)
    peak_u = np.zeros((1, 8))
    peak_u[0, 3] = 60.0
    peak_r = np.zeros((1, 8))
    peak_r[0, 3] = 60.0
    limit = pilot.scorer_loss(as_tensor(np.array([60.0])), as_tensor(peak_r), peak_u, np.zeros(1)).item()
    assert 0 <= limit <= 1e-20 or limit == pytest.approx(0.0, abs=1e-20)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_scorer_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    cs = make_cs(rng, q=4, k=3)
    cs.utility[0, 1] = 5.0  # at least one gate-positive query
    scorer = ScorerModel(rng, ScorerConfig(width=8, layers=1, heads=2), D, D_V)
    feats = pilot.candidate_features(cs)

    def loss():
        g, r = scorer(feats, cs.query, cs.horizon)
        return pilot.scorer_loss(g, r, cs.utility, cs.utility_notraj)

    assert grad_check(loss, scorer.parameters(), max_entries=6, rng=rng) <= 1e-4


def test_negative_gate_returns_notraj_bitwise_and_k1_returns_candidate():
    rng = np.random.default_rng(4)
    cs = make_cs(rng)
    scorer = tiny_scorer()
    scorer.gate_head.bias.data[:] = -1e9
    sel = pilot.gate_then_rank_infer(scorer, cs)
    assert not sel.gate_positive.any() and (sel.chosen == -1).all()
    np.testing.assert_array_equal(sel.mid, cs.notraj_mid)
    np.testing.assert_array_equal(sel.start, cs.notraj_start)
    scorer.gate_head.bias.data[:] = 1e9
    one = cs.subset(1)
    sel = pilot.gate_then_rank_infer(scorer, one)
    np.testing.assert_array_equal(sel.mid, one.cand_mid[:, 0])
    np.testing.assert_array_equal(sel.goal, one.cand_goal)


def test_pool_oracle_k1_and_perfect_candidate():
    rng = np.random.default_rng(5)
    cs = make_cs(rng)
    np.testing.assert_array_equal(pilot.pool_oracle(cs.subset(1)).mid, cs.cand_mid[:, 0])
    bank = ActionBank([f"t{i}" for i in range(D)], np.eye(D), np.arange(D))
    gt_mid = np.array([[1, 2]] * 3)
    cs.cand_mid[0, 2] = np.eye(D)[[1, 2]]
    cs.utility = pilot.candidate_utility(cs.cand_mid, gt_mid[:, None], np.eye(D)[gt_mid][:, None], bank)[0]
    sel = pilot.pool_oracle(cs)
    assert sel.chosen[0] == 2
    p = {"start": np.eye(D)[[0] * 3], "goal": np.eye(D)[[3] * 3], "mid": sel.mid}
    r = plan_rankings(p, np.full(3, 4), bank, k=4)[0]
    m = metrics.sample_metrics(metrics.SequencePrediction(r, np.array([0, 1, 2, 3])))
    assert m["MSeq"] == 1.0
    with pytest.raises(ValueError):
        pilot.pool_oracle(make_cs(rng, utility=False))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pool_oracle_utility_monotone_in_k(seed):
    cs = make_cs(np.random.default_rng(seed), q=4, k=16)
    best = []
    for k in (1, 5, 16):
        sub = cs.subset(k)
        best.append(sub.utility[np.arange(4), pilot.pool_oracle(sub).chosen])
    assert np.all(best[0] <= best[1]) and np.all(best[1] <= best[2])


def test_pool_recall_same_and_any_step():
    rng = np.random.default_rng(6)
    cs = make_cs(rng, q=1, k=2, h=2)
    cs.cand_text_ids = np.array([[[1, 2], [3, 4]]])
    assert pilot.pool_recall(cs, np.array([[1, 4]])) == {"same_step": 1.0, "any_step": 1.0}
    assert pilot.pool_recall(cs, np.array([[2, 1]])) == {"same_step": 0.0, "any_step": 1.0}
    assert pilot.pool_recall(cs, np.array([[5, 3]])) == {"same_step": 0.0, "any_step": 0.5}


def test_build_candidates_end_to_end(small_world):
    corpus, seg_z = small_world
    rng = np.random.default_rng(7)
    cfg = PredictorConfig(width=8, layers=1, heads=2, d=D, d_v=D_V)
    traj = PredictorModel(rng, cfg).eval()
    notraj = PredictorModel(rng, PredictorConfig(**{**cfg.__dict__, "use_traj": False})).eval()
    bank = pilot.build_bank(corpus, seg_z)
    w = corpus.windows("train", 5)[:7]
    cs = pilot.build_candidates(corpus, seg_z, bank, traj, notraj, w, k=4, exclude_own_take=True,
                                with_utility=True)
    assert cs.cand_mid.shape == (7, 4, 3, D) and cs.utility.shape == (7, 4) and cs.utility_notraj.shape == (7,)
    assert not np.isin(bank[5].takes[cs.indices], corpus.take[w[:, 0]][:, None]).any(axis=None) or \
        all(t not in bank[5].takes[cs.indices[i]] for i, t in enumerate(corpus.take[w[:, 0]]))
    assert cs.query.shape[1] == pilot.feature_dims(D, D_V)[1]
    masked = pilot.build_candidates(corpus, seg_z, bank, traj, notraj, w, k=4, goal_masked=True)
    assert not masked.query[:, D_V:2 * D_V].any()
    scorer = pilot.train_scorer([cs], ScorerConfig(width=8, layers=1, heads=2, epochs=2, batch_size=4), D, D_V)
    sel = pilot.gate_then_rank_infer(scorer, cs)
    assert sel.mid.shape == (7, 3, D)
