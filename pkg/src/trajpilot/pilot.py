"""Test-time trajectory supply: retrieval bank, gate-then-rank scorer, pool oracle.

For each query the bank returns the K training windows whose endpoint
trajectory embeddings best match the query's. Their mid trajectories are
rolled through the frozen trajectory-conditioned predictor, giving K
candidate plans. A small permutation-equivariant transformer decides
whether any candidate should replace the No-Traj prediction (gate) and, if
so, which one (rank).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import special

from .alignment import TrainingDivergedError, text_scores
from .core import (
    AdamW,
    Linear,
    Module,
    Tensor,
    Transformer,
    as_tensor,
    concat,
    log_softmax,
    logsumexp,
    no_grad,
    parameter,
    softmax,
)
from .predictor import MAX_MIDS, PlanBatch, make_batch, predict
from .synthworld import HORIZONS

log = logging.getLogger(__name__)

UTILITY_WEIGHTS = {"teacher": 0.1, "r1": 1.0, "r5": 0.5, "seq": 1.0}


# -- retrieval bank ----------------------------------------------------------------


@dataclass(frozen=True)
class HorizonBank:
    horizon: int
    windows: np.ndarray  # (n, H) segment rows
    takes: np.ndarray  # (n,)
    key_start: np.ndarray  # (n, d) unit
    key_goal: np.ndarray  # (n, d) unit
    mid_latents: np.ndarray  # (n, h, d)
    mid_controls: np.ndarray  # (n, h, 16, 6)
    mid_labels: np.ndarray  # (n, h) bank label ids
    mid_text_ids: np.ndarray  # (n, h)
    mid_label_emb: np.ndarray  # (n, h, d)

    def __len__(self) -> int:
        return len(self.windows)


class TrajectoryBank:
    """Immutable per-horizon retrieval index over training windows."""

    def __init__(self, banks: dict[int, HorizonBank]):
        for b in banks.values():
            for v in vars(b).values():
                if isinstance(v, np.ndarray):
                    v.flags.writeable = False
        self._banks = dict(banks)

    def __getitem__(self, horizon: int) -> HorizonBank:
        if horizon not in self._banks:
            raise KeyError(f"no bank for horizon {horizon}")
        return self._banks[horizon]

    def horizons(self) -> list[int]:
        return sorted(self._banks)

    def size(self, horizon: int) -> int:
        return len(self._banks[horizon]) if horizon in self._banks else 0


def build_horizon_bank(corpus, seg_z: np.ndarray, windows: np.ndarray) -> HorizonBank:
    windows = np.asarray(windows, dtype=int)
    if windows.ndim != 2 or len(windows) == 0:
        raise ValueError("bank needs at least one window")
    mids = windows[:, 1:-1]
    labels = corpus.label[mids]
    return HorizonBank(
        horizon=windows.shape[1],
        windows=windows.copy(),
        takes=corpus.take[windows[:, 0]],
        key_start=seg_z[windows[:, 0]],
        key_goal=seg_z[windows[:, -1]],
        mid_latents=seg_z[mids],
        mid_controls=corpus.controls[mids],
        mid_labels=labels,
        mid_text_ids=corpus.bank.text_ids[labels],
        mid_label_emb=corpus.bank.embeddings[labels],
    )


def build_bank(corpus, seg_z: np.ndarray, windows_by_h=None, split: str = "train") -> TrajectoryBank:
    """One entry per window of the given split, one sub-bank per horizon."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if windows_by_h is None:
        windows_by_h = {h: corpus.windows(split, h) for h in HORIZONS}
    return TrajectoryBank({h: build_horizon_bank(corpus, seg_z, w) for h, w in windows_by_h.items() if len(w)})


def retrieve(bank: HorizonBank, q_start, q_goal=None, k: int = 16, mode: str = "planning",
             exclude_takes=None) -> tuple[np.ndarray, np.ndarray]:
    """Top-k entries by endpoint cosine; returns (indices, scores), each (Q, k).

    Planning scores cos(start) + cos(goal); anticipation scores cos(start)
    only. Ties go to the lower bank index. ``exclude_takes`` (Q,) drops
    entries from the query's own recording.
    """
    if len(bank) == 0:
        raise ValueError("empty bank")
    qs = np.atleast_2d(np.asarray(q_start, dtype=float))
    scores = qs @ bank.key_start.T
    if mode == "planning":
        if q_goal is None:
            raise ValueError("planning retrieval needs a goal query")
        scores = scores + np.atleast_2d(np.asarray(q_goal, dtype=float)) @ bank.key_goal.T
    elif mode != "anticipation":
        raise ValueError(f"unknown retrieval mode {mode!r}")
    if exclude_takes is not None:
        scores = np.where(bank.takes[None, :] == np.asarray(exclude_takes)[:, None], -np.inf, scores)
    k = min(k, len(bank))
    idx = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(scores, idx, axis=1)


# -- candidates and utility --------------------------------------------------------


@dataclass
class CandidateSet:
    """K candidates per query for Q queries of a single horizon."""

    horizon: int
    windows: np.ndarray  # (Q, H) query segment rows
    indices: np.ndarray  # (Q, K) bank indices
    retrieval_scores: np.ndarray  # (Q, K)
    cand_mid: np.ndarray  # (Q, K, h, d) candidate mid predictions
    cand_start: np.ndarray  # (Q, d)
    cand_goal: np.ndarray  # (Q, d)
    cand_traj: np.ndarray  # (Q, K, h, d) retrieved trajectory latents
    cand_label_emb: np.ndarray  # (Q, K, h, d)
    cand_text_ids: np.ndarray  # (Q, K, h) retrieved label text ids
    notraj_mid: np.ndarray  # (Q, h, d)
    notraj_start: np.ndarray
    notraj_goal: np.ndarray
    query: np.ndarray  # (Q, query_dim)
    utility: np.ndarray | None = None  # (Q, K)
    utility_notraj: np.ndarray | None = None  # (Q,)

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def subset(self, k: int) -> "CandidateSet":
        """The first ``k`` retrieved candidates of every query."""
        out = dict(vars(self))
        for name in ("indices", "retrieval_scores", "cand_mid", "cand_traj", "cand_label_emb", "cand_text_ids"):
            out[name] = out[name][:, :k]
        if self.utility is not None:
            out["utility"] = self.utility[:, :k]
        return CandidateSet(**out)


def candidate_utility(pred_mid, gt_text_ids, gt_label_emb, bank) -> tuple[np.ndarray, dict]:
    """u = 0.1 s_teacher + R@1 + 0.5 R@5 + seq over mid steps.

    ``pred_mid`` is (..., h, d); GT arrays are (..., h) and (..., h, d) and
    broadcast against it. Returns u (...) and its components.
    """
    pred_mid = np.asarray(pred_mid, dtype=float)
    gt = np.asarray(gt_text_ids)
    s_teacher = (pred_mid * np.asarray(gt_label_emb)).sum(-1).mean(-1)
    scores = text_scores(pred_mid, bank.embeddings, bank.text_ids, bank.n_texts)
    order = np.argsort(-scores, axis=-1, kind="stable")
    gt_b = np.broadcast_to(gt, order.shape[:-1])[..., None]
    hit1 = order[..., :1] == gt_b
    hit5 = (order[..., :5] == gt_b).any(-1)
    r1 = hit1[..., 0].mean(-1)
    r5 = hit5.mean(-1)
    seq = hit1[..., 0].all(-1).astype(float)
    w = UTILITY_WEIGHTS
    u = w["teacher"] * s_teacher + w["r1"] * r1 + w["r5"] * r5 + w["seq"] * seq
    return u, {"teacher": s_teacher, "r1": r1, "r5": r5, "seq": seq}


def query_features(corpus, windows: np.ndarray, seg_z: np.ndarray, token_scale: float,
                   notraj_mid: np.ndarray, goal_masked: bool) -> np.ndarray:
    """Pooled visual tokens of both endpoints, endpoint trajectory latents, padded No-Traj mids."""
    s, g = windows[:, 0], windows[:, -1]
    vs = corpus.tokens[s].mean(axis=1) * token_scale
    vg = corpus.tokens[g].mean(axis=1) * token_scale
    zg = seg_z[g]
    if goal_masked:
        vg, zg = np.zeros_like(vg), np.zeros_like(zg)
    return np.concatenate([vs, vg, seg_z[s], zg, _pad_mids(notraj_mid).reshape(len(s), -1)], axis=1)


def _pad_mids(x: np.ndarray) -> np.ndarray:
    """Zero-pad the step axis (second to last) to MAX_MIDS."""
    pad = [(0, 0)] * x.ndim
    pad[-2] = (0, MAX_MIDS - x.shape[-2])
    return np.pad(x, pad)


def build_candidates(corpus, seg_z, bank: TrajectoryBank, traj_model, notraj_model, windows, k: int,
                     goal_masked: bool = False, exclude_own_take: bool = False,
                     with_utility: bool = False) -> CandidateSet:
    """Retrieve, roll out and (optionally) score candidates for windows of one horizon."""
    windows = np.asarray(windows, dtype=int)
    horizon = windows.shape[1]
    hb = bank[horizon]
    mode = "anticipation" if goal_masked else "planning"
    q_goal = None if goal_masked else seg_z[windows[:, -1]]
    exclude = corpus.take[windows[:, 0]] if exclude_own_take else None
    idx, scores = retrieve(hb, seg_z[windows[:, 0]], q_goal, k, mode, exclude)
    q, kk = idx.shape
    base = make_batch(corpus, list(windows), seg_z, goal_masked=goal_masked)
    nt = predict(notraj_model, base.replace(z_mid=np.zeros_like(base.z_mid)))
    rep = np.repeat(np.arange(q), kk)
    rolled = base.take(rep).replace(z_mid=hb.mid_latents[idx.reshape(-1)])
    cp = predict(traj_model, rolled)
    h, d = horizon - 2, seg_z.shape[1]
    cs = CandidateSet(
        horizon=horizon, windows=windows, indices=idx, retrieval_scores=scores,
        cand_mid=cp["mid"].reshape(q, kk, h, d),
        cand_start=cp["start"].reshape(q, kk, d)[:, 0], cand_goal=cp["goal"].reshape(q, kk, d)[:, 0],
        cand_traj=hb.mid_latents[idx], cand_label_emb=hb.mid_label_emb[idx], cand_text_ids=hb.mid_text_ids[idx],
        notraj_mid=nt["mid"], notraj_start=nt["start"], notraj_goal=nt["goal"],
        query=query_features(corpus, windows, seg_z, traj_model.token_scale, nt["mid"], goal_masked),
    )
    if with_utility:
        gt_tid = base.tid_mid[:, :h]
        gt_emb = base.target_mid[:, :h]
        cs.utility = candidate_utility(cs.cand_mid, gt_tid[:, None], gt_emb[:, None], corpus.bank)[0]
        cs.utility_notraj = candidate_utility(cs.notraj_mid, gt_tid, gt_emb, corpus.bank)[0]
    return cs


# -- scorer ------------------------------------------------------------------------


@dataclass
class ScorerConfig:
    width: int = 64
    layers: int = 2
    heads: int = 4
    k: int = 16
    margin: float = 0.05
    kl_temp: float = 1.0
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0


def candidate_features(cs: CandidateSet) -> np.ndarray:
    """(Q, K, F) per-candidate feature rows; zero padding beyond the horizon."""
    q, k = cs.indices.shape
    nt = np.broadcast_to(cs.notraj_mid[:, None], cs.cand_mid.shape)
    agree = (cs.cand_mid * nt).sum(-1)  # (Q, K, h)
    parts = [_pad_mids(x).reshape(q, k, -1) for x in (cs.cand_mid, nt, cs.cand_traj, cs.cand_label_emb)]
    agree = np.pad(agree, [(0, 0), (0, 0), (0, MAX_MIDS - agree.shape[-1])])
    return np.concatenate(parts + [agree, cs.retrieval_scores[..., None]], axis=-1)


def feature_dims(d: int, d_v: int) -> tuple[int, int]:
    cand = 4 * MAX_MIDS * d + MAX_MIDS + 1
    query = 2 * d_v + 2 * d + MAX_MIDS * d
    return cand, query


class ScorerModel(Module):
    """Query token plus one token per candidate; no positional embeddings."""

    def __init__(self, rng: np.random.Generator, cfg: ScorerConfig, d: int, d_v: int):
        self.cfg = cfg
        cand_dim, query_dim = feature_dims(d, d_v)
        self.cand_proj = Linear(rng, cand_dim, cfg.width)
        self.query_proj = Linear(rng, query_dim, cfg.width)
        self.query_type = parameter(rng.normal(0, 0.02, cfg.width))
        self.horizon_emb = parameter(rng.normal(0, 0.02, (len(HORIZONS), cfg.width)))
        self.body = Transformer(rng, cfg.width, cfg.layers, cfg.heads)
        self.gate_head = Linear(rng, cfg.width, 1)
        # a shared offset on every rank score cancels in the softmax
        self.rank_head = Linear(rng, cfg.width, 1, bias=False)

    def forward(self, cand_feats, query, horizon: int) -> tuple[Tensor, Tensor]:
        cand_feats = np.asarray(cand_feats, dtype=float)
        if cand_feats.shape[-2] < 1:
            raise ValueError("empty candidate set")
        q = len(cand_feats)
        hor = self.horizon_emb[horizon - min(HORIZONS)]
        qt = (self.query_proj(as_tensor(query)) + self.query_type + hor).reshape(q, 1, -1)
        ct = self.cand_proj(as_tensor(cand_feats)) + hor
        y = self.body(concat([qt, ct], axis=1))
        gate = self.gate_head(y[:, 0]).reshape(q)
        rank = self.rank_head(y[:, 1:]).reshape(q, -1)
        return gate, rank


def scorer_forward(scorer: ScorerModel, cs: CandidateSet) -> tuple[np.ndarray, np.ndarray]:
    with no_grad():
        g, r = scorer(candidate_features(cs), cs.query, cs.horizon)
    return g.data, r.data


def gate_targets(u, u0, margin: float) -> np.ndarray:
    return (np.asarray(u).max(axis=-1) > np.asarray(u0) + margin).astype(float)


def scorer_loss(gate: Tensor, rank: Tensor, u, u0, margin: float = 0.05, kl_temp: float = 1.0) -> Tensor:
    """BCE on the gate; CE to the best candidate plus KL to softmax(u / T) on gate positives."""
    u = np.asarray(u, dtype=float)
    q, k = u.shape
    y = gate_targets(u, u0, margin)
    gate2 = gate.reshape(q, 1)
    softplus = logsumexp(concat([as_tensor(np.zeros((q, 1))), gate2], axis=1), axis=1)
    bce = softplus - gate * y
    logp = log_softmax(rank, axis=1)
    best = np.argmax(u, axis=1)
    onehot = np.zeros((q, k))
    onehot[np.arange(q), best] = 1.0
    ce = -(logp * onehot).sum(axis=1)
    logq = special.log_softmax(u / kl_temp, axis=1)
    kl = (softmax(rank, axis=1) * (logp - logq)).sum(axis=1)
    return (bce + (ce + kl) * y).mean()


def train_scorer(sets: list[CandidateSet], cfg: ScorerConfig, d: int, d_v: int) -> ScorerModel:
    """Fit on candidate sets that carry utilities; batches never mix horizons."""
    rng = np.random.default_rng(cfg.seed)
    scorer = ScorerModel(rng, cfg, d, d_v)
    feats = [(candidate_features(cs), cs.query, cs.utility, cs.utility_notraj, cs.horizon) for cs in sets]
    if any(f[2] is None for f in feats):
        raise ValueError("scorer training needs candidate utilities")
    chunks = [(i, s) for i, f in enumerate(feats) for s in range(0, len(f[0]), cfg.batch_size)]
    opt = AdamW(scorer.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    for epoch in range(cfg.epochs):
        perms = [rng.permutation(len(f[0])) for f in feats]
        for ci in rng.permutation(len(chunks)):
            i, s = chunks[ci]
            cf, qf, u, u0, h = feats[i]
            idx = perms[i][s:s + cfg.batch_size]
            opt.zero_grad()
            gate, rank = scorer(cf[idx], qf[idx], h)
            loss = scorer_loss(gate, rank, u[idx], u0[idx], cfg.margin, cfg.kl_temp)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"scorer loss {loss.item()} at epoch {epoch}")
            loss.backward()
            opt.step()
    return scorer.eval()


# -- inference ---------------------------------------------------------------------


@dataclass
class Selection:
    start: np.ndarray  # (Q, d)
    goal: np.ndarray
    mid: np.ndarray  # (Q, h, d)
    gate_positive: np.ndarray  # (Q,) bool
    chosen: np.ndarray  # (Q,) candidate index, -1 for fallback


def gate_then_rank_infer(scorer: ScorerModel, cs: CandidateSet) -> Selection:
    """Fall back to No-Traj when the gate logit is negative, else take the top-ranked candidate."""
    gate, rank = scorer_forward(scorer, cs)
    return select(cs, gate >= 0, np.argmax(rank, axis=1))


def select(cs: CandidateSet, positive: np.ndarray, choice: np.ndarray) -> Selection:
    q = len(cs)
    pick = cs.cand_mid[np.arange(q), choice]
    pos = np.asarray(positive, dtype=bool)
    return Selection(
        start=np.where(pos[:, None], cs.cand_start, cs.notraj_start),
        goal=np.where(pos[:, None], cs.cand_goal, cs.notraj_goal),
        mid=np.where(pos[:, None, None], pick, cs.notraj_mid),
        gate_positive=pos,
        chosen=np.where(pos, choice, -1),
    )


def pool_oracle(cs: CandidateSet) -> Selection:
    """Per query, the candidate with the highest utility (always used)."""
    if cs.utility is None:
        raise ValueError("pool oracle needs utilities")
    return select(cs, np.ones(len(cs), bool), np.argmax(cs.utility, axis=1))


def pool_recall(cs: CandidateSet, gt_text_ids: np.ndarray) -> dict[str, float]:
    """Whether the retrieved label sequences contain the GT mid labels at all.

    same-step: some candidate has the GT label at the same mid position;
    any-step: the GT label appears at any mid position of some candidate.
    """
    gt = np.asarray(gt_text_ids)  # (Q, h)
    same = (cs.cand_text_ids == gt[:, None, :]).any(axis=1)
    flat = cs.cand_text_ids.reshape(len(cs), -1)
    anyp = (flat[:, None, :] == gt[:, :, None]).any(axis=2)
    return {"same_step": float(same.mean()), "any_step": float(anyp.mean())}
