"""Causal plan predictor conditioned on endpoint context and per-step trajectories.

Token layout is ``[start context (8), goal context (8), mid_1 .. mid_h]``.
Context tokens come from learned queries cross-attending into each
endpoint's visual tokens, plus the projected endpoint trajectory embedding.
Each mid token sums a trajectory projection, a shared mid query, a step
embedding, a horizon embedding and the mid type embedding. The structured
mask keeps context blind to mids and mids causal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .alignment import TrainingDivergedError, symmetric_mp_cross_entropy, temperature, text_scores, positives_mask
from .core import (
    AdamW,
    Linear,
    Module,
    Tensor,
    Transformer,
    as_tensor,
    concat,
    l2_normalize,
    masked_multihead_attention,
    matmul,
    no_grad,
    parameter,
)
from .alignment import LOG_TEMP_INIT
from .synthworld import HORIZONS

log = logging.getLogger(__name__)

N_QUERIES = 8
N_CONTEXT = 2 * N_QUERIES
MAX_MIDS = max(HORIZONS) - 2
START, GOAL, MID = 0, 1, 2


def structured_mask(h: int, n_context: int = N_CONTEXT) -> np.ndarray:
    """Context attends to context only; mid i attends to context and mids <= i."""
    if h < 1:
        raise ValueError("need at least one mid step")
    n = n_context + h
    mask = np.zeros((n, n), dtype=bool)
    mask[:n_context, :n_context] = True
    mask[n_context:, :n_context] = True
    mask[n_context:, n_context:] = np.tril(np.ones((h, h), dtype=bool))
    return mask


@dataclass
class PredictorConfig:
    width: int = 128
    layers: int = 4
    heads: int = 4
    d: int = 32
    d_v: int = 64
    lam: float = 0.5
    traj_dropout: float = 0.1
    goal_dropout: float = 0.0
    use_traj: bool = True
    steps: int = 1500
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0


@dataclass
class PlanBatch:
    """Padded batch of plan windows; mids beyond a sample's horizon are padding."""

    start_tokens: np.ndarray  # (B, N_tok, d_v)
    goal_tokens: np.ndarray
    z_start: np.ndarray  # (B, d) endpoint trajectory embeddings
    z_goal: np.ndarray
    z_mid: np.ndarray  # (B, h_max, d)
    horizon: np.ndarray  # (B,)
    goal_masked: np.ndarray  # (B,) bool
    target_start: np.ndarray | None = None  # (B, d) bank embeddings
    target_goal: np.ndarray | None = None
    target_mid: np.ndarray | None = None  # (B, h_max, d)
    tid_start: np.ndarray | None = None
    tid_goal: np.ndarray | None = None
    tid_mid: np.ndarray | None = None  # (B, h_max), -1 on padding

    def __len__(self) -> int:
        return len(self.horizon)

    @property
    def h_max(self) -> int:
        return self.z_mid.shape[1]

    @property
    def mid_valid(self) -> np.ndarray:
        return np.arange(self.h_max)[None, :] < (self.horizon[:, None] - 2)

    def replace(self, **kw) -> "PlanBatch":
        return PlanBatch(**{**self.__dict__, **kw})

    def take(self, idx) -> "PlanBatch":
        out = {}
        for k, v in self.__dict__.items():
            out[k] = None if v is None else v[idx]
        return PlanBatch(**out)


def make_batch(corpus, windows, seg_z: np.ndarray, goal_masked=None, z_mid=None) -> PlanBatch:
    """Assemble windows (lists of segment rows, possibly of mixed horizon)."""
    windows = [np.asarray(w, dtype=int) for w in windows]
    if not windows:
        raise ValueError("empty batch")
    horizon = np.array([len(w) for w in windows])
    if horizon.min() < min(HORIZONS) or horizon.max() > max(HORIZONS):
        raise ValueError(f"horizon outside {HORIZONS}: {sorted(set(horizon.tolist()))}")
    b, h_max = len(windows), horizon.max() - 2
    d = seg_z.shape[1]
    starts = np.array([w[0] for w in windows])
    goals = np.array([w[-1] for w in windows])
    emb = corpus.bank.embeddings[corpus.label]
    tid = corpus.text_id
    zm = np.zeros((b, h_max, d))
    tm = np.zeros((b, h_max, emb.shape[1]))
    im = np.full((b, h_max), -1)
    for i, w in enumerate(windows):
        mids = w[1:-1]
        zm[i, :len(mids)] = seg_z[mids]
        tm[i, :len(mids)] = emb[mids]
        im[i, :len(mids)] = tid[mids]
    if z_mid is not None:
        zm = np.asarray(z_mid, dtype=float)
    return PlanBatch(
        start_tokens=corpus.tokens[starts], goal_tokens=corpus.tokens[goals],
        z_start=seg_z[starts], z_goal=seg_z[goals], z_mid=zm, horizon=horizon,
        goal_masked=np.zeros(b, bool) if goal_masked is None else np.broadcast_to(goal_masked, (b,)).copy(),
        target_start=emb[starts], target_goal=emb[goals], target_mid=tm,
        tid_start=tid[starts], tid_goal=tid[goals], tid_mid=im,
    )


class ContextCompressor(Module):
    """Learned queries read one endpoint's token grid through mask-free cross-attention."""

    def __init__(self, rng: np.random.Generator, d_v: int, width: int, heads: int):
        self.heads = heads
        self.k = Linear(rng, d_v, width, bias=False)
        self.v = Linear(rng, d_v, width)

    def forward(self, tokens, queries: Tensor) -> Tensor:
        tokens = as_tensor(tokens)
        if tokens.shape[-2] < 1:
            raise ValueError("empty token grid")
        lead = tokens.shape[:-2]
        q = as_tensor(np.zeros((*lead, 1, 1))) + queries
        return masked_multihead_attention(q, self.k(tokens), self.v(tokens), None, self.heads)


def compress_context(compressor: ContextCompressor, tokens, queries: Tensor, traj_proj: Linear,
                     traj_embed) -> Tensor:
    """Cross-attention readout plus the projected trajectory embedding on every query."""
    read = compressor(tokens, queries)
    t = traj_proj(as_tensor(np.asarray(traj_embed, dtype=float)))
    return read + t.reshape(*t.shape[:-1], 1, t.shape[-1])


class PredictorModel(Module):
    def __init__(self, rng: np.random.Generator, cfg: PredictorConfig):
        w = cfg.width
        self.cfg = cfg
        self.start_queries = parameter(rng.normal(0, 1.0, (N_QUERIES, w)))
        self.goal_queries = parameter(rng.normal(0, 1.0, (N_QUERIES, w)))
        self.compressor = ContextCompressor(rng, cfg.d_v, w, cfg.heads)
        self.traj_proj = Linear(rng, cfg.d, w, bias=False)
        self.mid_query = parameter(rng.normal(0, 0.02, w))
        self.step_emb = parameter(rng.normal(0, 0.02, (MAX_MIDS, w)))
        self.horizon_emb = parameter(rng.normal(0, 0.02, (len(HORIZONS), w)))
        self.type_emb = parameter(rng.normal(0, 0.02, (3, w)))
        self.body = Transformer(rng, w, cfg.layers, cfg.heads)
        self.head = Linear(rng, w, cfg.d)
        self.log_temp = parameter(np.array(LOG_TEMP_INIT))
        self.token_scale = 1.0

    def fit_normalizer(self, tokens: np.ndarray) -> None:
        self.token_scale = 1.0 / max(float(np.asarray(tokens).std()), 1e-8)

    def buffers(self) -> dict[str, np.ndarray]:
        return {"token_scale": np.array(self.token_scale)}

    def load_buffers(self, extra) -> None:
        self.token_scale = float(extra["token_scale"])

    def forward(self, batch: PlanBatch) -> dict[str, Tensor]:
        b, h = len(batch), batch.h_max
        if h < 1 or h > MAX_MIDS:
            raise ValueError(f"mid count {h} outside 1..{MAX_MIDS}")
        z_start, z_goal, z_mid = batch.z_start, batch.z_goal, batch.z_mid
        if not self.cfg.use_traj:
            z_start, z_goal, z_mid = np.zeros_like(z_start), np.zeros_like(z_goal), np.zeros_like(z_mid)
        hidx = batch.horizon - min(HORIZONS)
        hor = self.horizon_emb[hidx].reshape(b, 1, -1)
        start = compress_context(self.compressor, batch.start_tokens * self.token_scale, self.start_queries,
                                 self.traj_proj, z_start)
        goal = compress_context(self.compressor, batch.goal_tokens * self.token_scale, self.goal_queries,
                                self.traj_proj, z_goal)
        keep = (~np.asarray(batch.goal_masked, dtype=bool)).astype(float).reshape(b, 1, 1)
        goal = goal * keep
        start = start + self.type_emb[START] + hor
        goal = goal + self.type_emb[GOAL] + hor
        mids = (self.traj_proj(as_tensor(z_mid)) + self.mid_query + self.step_emb[:h]
                + self.type_emb[MID] + hor)
        x = concat([start, goal, mids], axis=1)
        y = self.body(x, mask=structured_mask(h))
        return {
            "start": l2_normalize(self.head(y[:, :N_QUERIES].mean(axis=1))),
            "goal": l2_normalize(self.head(y[:, N_QUERIES:N_CONTEXT].mean(axis=1))),
            "mid": l2_normalize(self.head(y[:, N_CONTEXT:])),
        }


def predictor_loss(pred: Tensor, targets, text_ids, lam: float = 0.5, log_temp: Tensor | None = None,
                   weights=None) -> Tensor:
    """Weighted sum of (1 - cos) plus ``lam`` times pooled symmetric mpCE.

    ``pred`` is the (P, d) pool of unit predictions mixing all roles;
    ``weights`` defaults to one per row (a plain sum of cosine terms).
    """
    targets = np.asarray(targets, dtype=float)
    if pred.shape[0] == 0:
        raise ValueError("empty prediction pool")
    if targets.shape != pred.shape:
        raise ValueError(f"targets {targets.shape} do not match predictions {pred.shape}")
    w = np.ones(len(targets)) if weights is None else np.asarray(weights, dtype=float)
    cos = (pred * targets).sum(axis=1)
    loss = ((1.0 - cos) * w).sum()
    if lam:
        tau = temperature(log_temp if log_temp is not None else as_tensor(np.array(LOG_TEMP_INIT)))
        logits = matmul(pred, as_tensor(targets.T)) * tau
        loss = loss + lam * symmetric_mp_cross_entropy(logits, positives_mask(text_ids, text_ids))
    return loss


def pool_predictions(out: dict[str, Tensor], batch: PlanBatch):
    """Flatten start, goal and valid mid predictions into one pool with role weights."""
    b, h = len(batch), batch.h_max
    valid = batch.mid_valid.reshape(-1)
    rows = np.flatnonzero(valid)
    mids = out["mid"].reshape(b * h, -1)[rows]
    pred = concat([out["start"], out["goal"], mids], axis=0)
    targets = np.concatenate([batch.target_start, batch.target_goal, batch.target_mid.reshape(b * h, -1)[rows]])
    tids = np.concatenate([batch.tid_start, batch.tid_goal, batch.tid_mid.reshape(-1)[rows]])
    n_mid = np.repeat(batch.horizon - 2, h)[rows]
    weights = np.concatenate([np.full(2 * b, 1.0 / b), 1.0 / (b * n_mid)])
    return pred, targets, tids, weights


def batch_loss(model: PredictorModel, batch: PlanBatch, lam: float | None = None) -> Tensor:
    out = model(batch)
    pred, targets, tids, weights = pool_predictions(out, batch)
    lam = model.cfg.lam if lam is None else lam
    return predictor_loss(pred, targets, tids, lam, model.log_temp, weights)


def apply_dropout(batch: PlanBatch, rng: np.random.Generator, traj_p: float, goal_p: float) -> PlanBatch:
    """Per-sample trajectory dropout (all mids zeroed) and goal dropout."""
    b = len(batch)
    drop = rng.random(b) < traj_p
    gmask = batch.goal_masked | (rng.random(b) < goal_p)
    z_mid = np.where(drop[:, None, None], 0.0, batch.z_mid)
    return batch.replace(z_mid=z_mid, goal_masked=gmask)


def train_predictor(corpus, seg_z: np.ndarray, cfg: PredictorConfig, windows_by_h=None) -> PredictorModel:
    """Train on training-split windows with horizons mixed uniformly within each batch."""
    rng = np.random.default_rng(cfg.seed)
    model = PredictorModel(rng, cfg)
    model.fit_normalizer(corpus.tokens[corpus.rows("train")])
    if windows_by_h is None:
        windows_by_h = {h: corpus.windows("train", h) for h in HORIZONS}
    pool = [w for h in HORIZONS for w in windows_by_h[h]]
    if not pool:
        raise ValueError("no training windows")
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    for step in range(cfg.steps):
        idx = rng.integers(len(pool), size=cfg.batch_size)
        batch = make_batch(corpus, [pool[i] for i in idx], seg_z)
        batch = apply_dropout(batch, rng, cfg.traj_dropout if cfg.use_traj else 0.0, cfg.goal_dropout)
        opt.zero_grad()
        loss = batch_loss(model, batch)
        if not np.isfinite(loss.data):
            raise TrainingDivergedError(f"predictor loss {loss.item()} at step {step}")
        loss.backward()
        opt.step()
        if step % 100 == 0:
            log.debug("predictor step %d loss %.4f", step, loss.item())
    return model.eval()


def predict(model: PredictorModel, batch: PlanBatch, chunk: int = 256) -> dict[str, np.ndarray]:
    """Frozen forward pass in chunks; returns unit predictions as arrays."""
    outs = []
    with no_grad():
        for i in range(0, len(batch), chunk):
            o = model(batch.take(slice(i, i + chunk)))
            outs.append({k: v.data for k, v in o.items()})
    return {k: np.concatenate([o[k] for o in outs]) for k in outs[0]}


def eval_loss(model: PredictorModel, batch: PlanBatch, chunk: int = 256) -> float:
    """Sample-weighted mean of the cosine part of the loss (deterministic, pool-free)."""
    p = predict(model, batch, chunk)
    cos_s = (p["start"] * batch.target_start).sum(-1)
    cos_g = (p["goal"] * batch.target_goal).sum(-1)
    valid = batch.mid_valid
    cos_m = ((p["mid"] * batch.target_mid).sum(-1) * valid).sum(-1) / valid.sum(-1)
    return float(np.mean(3.0 - cos_s - cos_g - cos_m))


def readout(prediction, bank, k: int) -> np.ndarray:
    """Top-k bank label ids by cosine, ties to the lower index."""
    if len(bank.labels) == 0:
        raise ValueError("empty bank")
    if k > len(bank.labels):
        raise ValueError(f"k={k} exceeds bank size {len(bank.labels)}")
    cos = bank.embeddings @ np.asarray(prediction, dtype=float)
    return np.argsort(-cos, kind="stable")[:k]


def ranked_text_ids(predictions: np.ndarray, bank, k: int = 5) -> np.ndarray:
    """Duplicate-free text-id rankings: each text scored by its best paraphrase."""
    scores = text_scores(predictions, bank.embeddings, bank.text_ids, bank.n_texts)
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def plan_rankings(p: dict[str, np.ndarray], horizon: np.ndarray, bank, k: int = 5) -> list[np.ndarray]:
    """Per-sample (H, k) rankings ordered [start, mids.., goal]."""
    rs, rg, rm = (ranked_text_ids(p[key], bank, k) for key in ("start", "goal", "mid"))
    return [np.vstack([rs[i][None], rm[i, :h - 2], rg[i][None]]) for i, h in enumerate(horizon)]
