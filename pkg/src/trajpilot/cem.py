"""Latent-space planning baseline and the probes that explain its failure.

A latent regressor maps (z_start, z_goal, per-step controls) to predicted
mid latents under the same structured mask as the plan predictor. CEM
searches raw control space for the sequence whose last predicted latent is
closest to z_goal in l1, and a linear classifier reads actions off the
latents. The probes measure how the visual latent space is organized.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from . import geometry
from .alignment import TrainingDivergedError
from .core import AdamW, Linear, Module, Transformer, as_tensor, concat, no_grad, parameter
from .predictor import MAX_MIDS, structured_mask
from .synthworld import HORIZONS

log = logging.getLogger(__name__)

CONTROL_DIM = geometry.KNOTS * 6


def l1_to_goal(pred, goal) -> np.ndarray:
    """Mean absolute difference over the last axis."""
    pred, goal = np.asarray(pred, dtype=float), np.asarray(goal, dtype=float)
    if pred.shape[-1] != goal.shape[-1]:
        raise ValueError(f"dimension mismatch: {pred.shape} vs {goal.shape}")
    return np.abs(pred - goal).mean(axis=-1)


# -- latent regressor ----------------------------------------------------------------


@dataclass
class LatentPredictorConfig:
    width: int = 64
    layers: int = 2
    heads: int = 4
    use_controls: bool = True
    steps: int = 800
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0


class LatentPredictor(Module):
    """Tokens [z_start, z_goal, mid_1..mid_h]; mid tokens carry projected controls."""

    def __init__(self, rng: np.random.Generator, cfg: LatentPredictorConfig, d_v: int):
        w = cfg.width
        self.cfg = cfg
        self.ctx_proj = Linear(rng, d_v, w)
        self.ctrl_proj = Linear(rng, CONTROL_DIM, w)
        self.type_emb = parameter(rng.normal(0, 0.02, (3, w)))
        self.step_emb = parameter(rng.normal(0, 0.02, (MAX_MIDS, w)))
        self.horizon_emb = parameter(rng.normal(0, 0.02, (len(HORIZONS), w)))
        self.body = Transformer(rng, w, cfg.layers, cfg.heads)
        self.head = Linear(rng, w, d_v)
        self.z_shift = np.zeros(d_v)
        self.z_scale = np.ones(d_v)
        self.c_shift = np.zeros(CONTROL_DIM)
        self.c_scale = np.ones(CONTROL_DIM)

    def fit_normalizer(self, latents: np.ndarray, controls: np.ndarray) -> None:
        self.z_shift, self.z_scale = latents.mean(0), np.maximum(latents.std(0), 1e-8)
        flat = controls.reshape(len(controls), -1)
        self.c_shift, self.c_scale = flat.mean(0), np.maximum(flat.std(0), 1e-8)

    def buffers(self) -> dict[str, np.ndarray]:
        return {"z_shift": self.z_shift, "z_scale": self.z_scale, "c_shift": self.c_shift, "c_scale": self.c_scale}

    def load_buffers(self, extra) -> None:
        for k in ("z_shift", "z_scale", "c_shift", "c_scale"):
            setattr(self, k, extra[k].copy())

    def forward(self, z_start, z_goal, controls, horizon: int):
        """Normalized predictions (B, h, d_v) as a Tensor."""
        controls = np.asarray(controls, dtype=float)
        b, h = controls.shape[:2]
        if h != horizon - 2:
            raise ValueError(f"{h} control steps do not match horizon {horizon}")
        c = (controls.reshape(b, h, -1) - self.c_shift) / self.c_scale
        if not self.cfg.use_controls:
            c = np.zeros_like(c)
        zs = (np.asarray(z_start) - self.z_shift) / self.z_scale
        zg = (np.asarray(z_goal) - self.z_shift) / self.z_scale
        hor = self.horizon_emb[horizon - min(HORIZONS)]
        ctx = self.ctx_proj(as_tensor(np.stack([zs, zg], axis=1))) + self.type_emb[:2] + hor
        mids = self.ctrl_proj(as_tensor(c)) + self.step_emb[:h] + self.type_emb[2] + hor
        y = self.body(concat([ctx, mids], axis=1), mask=structured_mask(h, n_context=2))
        return self.head(y[:, 2:])

    def predict(self, z_start, z_goal, controls, horizon: int, chunk: int = 2048) -> np.ndarray:
        """Mid latents in original units, (B, h, d_v)."""
        out = []
        with no_grad():
            for i in range(0, len(z_start), chunk):
                s = slice(i, i + chunk)
                out.append(self(z_start[s], z_goal[s], controls[s], horizon).data)
        pred = np.concatenate(out) * self.z_scale + self.z_shift
        if not np.isfinite(pred).all():
            raise FloatingPointError("latent predictor produced non-finite output")
        return pred


def train_latent_predictor(latents: np.ndarray, controls: np.ndarray, windows_by_h: dict,
                           cfg: LatentPredictorConfig) -> LatentPredictor:
    """l1 regression of mid latents; each step samples one horizon, then windows."""
    rng = np.random.default_rng(cfg.seed)
    model = LatentPredictor(rng, cfg, latents.shape[1])
    rows = np.unique(np.concatenate([w.reshape(-1) for w in windows_by_h.values()]))
    model.fit_normalizer(latents[rows], controls[rows])
    horizons = sorted(h for h, w in windows_by_h.items() if len(w))
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    for step in range(cfg.steps):
        h = horizons[rng.integers(len(horizons))]
        w = windows_by_h[h][rng.integers(len(windows_by_h[h]), size=cfg.batch_size)]
        target = (latents[w[:, 1:-1]] - model.z_shift) / model.z_scale
        opt.zero_grad()
        pred = model(latents[w[:, 0]], latents[w[:, -1]], controls[w[:, 1:-1]], h)
        loss = (pred - target).abs().mean()
        if not np.isfinite(loss.data):
            raise TrainingDivergedError(f"latent predictor loss {loss.item()} at step {step}")
        loss.backward()
        opt.step()
    return model.eval()


# -- CEM ------------------------------------------------------------------------------


@dataclass
class CemConfig:
    population: int = 64
    elite_fraction: float = 0.1
    iterations: int = 5
    seed: int = 0

    @property
    def n_elite(self) -> int:
        return max(1, int(round(self.elite_fraction * self.population)))

    def validate(self) -> None:
        if not 0 < self.elite_fraction < 1:
            raise ValueError("elite_fraction must lie in (0, 1)")
        if self.population < 1 or self.iterations < 0:
            raise ValueError("population must be positive and iterations non-negative")


def cem_search_batch(score_fn: Callable[[np.ndarray], np.ndarray], init_mean, init_std, n_queries: int,
                     cfg: CemConfig) -> tuple[np.ndarray, np.ndarray]:
    """Minimize ``score_fn`` independently for ``n_queries`` problems.

    ``score_fn`` maps (Q, P, D) samples to (Q, P) scores. A diagonal Gaussian
    per query is refit on its elites each iteration; the result is the best
    sample ever evaluated, so the best score never gets worse.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    mean = np.broadcast_to(np.asarray(init_mean, dtype=float), (n_queries, np.shape(init_mean)[-1])).copy()
    std = np.broadcast_to(np.asarray(init_std, dtype=float), mean.shape).copy()
    if np.any(std < 0):
        raise ValueError("std must be non-negative")
    best_x = np.zeros_like(mean)
    best_s = np.full(n_queries, np.inf)
    rows = np.arange(n_queries)
    for it in range(cfg.iterations + 1):
        x = mean[:, None, :] + std[:, None, :] * rng.standard_normal((n_queries, cfg.population, mean.shape[1]))
        s = np.asarray(score_fn(x), dtype=float)
        if not np.isfinite(s).all():
            raise FloatingPointError("non-finite CEM score")
        arg = np.argmin(s, axis=1)
        better = s[rows, arg] < best_s
        best_s = np.where(better, s[rows, arg], best_s)
        best_x[better] = x[rows[better], arg[better]]
        if it == cfg.iterations:
            break
        elite = np.argsort(s, axis=1, kind="stable")[:, :cfg.n_elite]
        ex = np.take_along_axis(x, elite[:, :, None], axis=1)
        mean, std = ex.mean(axis=1), ex.std(axis=1)
    return best_x, best_s


def cem_search(score_fn: Callable[[np.ndarray], np.ndarray], init_mean, init_std,
               cfg: CemConfig) -> tuple[np.ndarray, float]:
    """Single-problem CEM; ``score_fn`` maps (P, D) samples to (P,) scores."""
    x, s = cem_search_batch(lambda xs: score_fn(xs[0])[None], init_mean, init_std, 1, cfg)
    return x[0], float(s[0])


def cem_plan(model: LatentPredictor, z_start, z_goal, horizon: int, init_mean, init_std,
             cfg: CemConfig) -> tuple[np.ndarray, np.ndarray]:
    """Control sequences (Q, h, 16, 6) whose last predicted latent best matches z_goal."""
    h = horizon - 2
    q = len(z_start)

    def score(x):
        p = x.shape[1]
        ctrl = x.reshape(q * p, h, geometry.KNOTS, 6)
        zs, zg = np.repeat(z_start, p, axis=0), np.repeat(z_goal, p, axis=0)
        last = model.predict(zs, zg, ctrl, horizon)[:, -1]
        return l1_to_goal(last, zg).reshape(q, p)

    x, s = cem_search_batch(score, np.tile(init_mean, h), np.tile(init_std, h), q, cfg)
    return x.reshape(q, h, geometry.KNOTS, 6), s


# -- probes -----------------------------------------------------------------------------

PAIR_TYPES = ("adjacent same-recording", "far same-recording", "same-action cross-recording",
              "random cross-recording")


def pair_geometry_probe(latents, take, segment_index, action, n_pairs: int = 2000, far_gap: int = 6,
                        seed: int = 0, max_random: int = 200_000) -> list[dict]:
    """Mean l1 and cosine between latent pairs of four kinds.

    Types without any admissible pair are reported with n = 0 and NaN means.
    """
    z = np.asarray(latents, dtype=float)
    take, seg, act = (np.asarray(a) for a in (take, segment_index, action))
    n = len(z)
    if n < 2:
        raise ValueError("need at least two latents")
    rng = np.random.default_rng(seed)
    if n * (n - 1) // 2 <= max_random:
        i, j = np.triu_indices(n, k=1)
    else:
        i, j = rng.integers(n, size=max_random), rng.integers(n, size=max_random)
        keep = i != j
        i, j = i[keep], j[keep]
        # same-recording pairs are rare under uniform sampling; enumerate them
        wi, wj = [], []
        for t in np.unique(take):
            r = np.flatnonzero(take == t)
            a, b = np.triu_indices(len(r), k=1)
            wi.append(r[a])
            wj.append(r[b])
        i, j = np.concatenate([i] + wi), np.concatenate([j] + wj)
    same_take = take[i] == take[j]
    gap = np.abs(seg[i] - seg[j])
    kinds = {
        PAIR_TYPES[0]: same_take & (gap == 1),
        PAIR_TYPES[1]: same_take & (gap >= far_gap),
        PAIR_TYPES[2]: ~same_take & (act[i] == act[j]),
        PAIR_TYPES[3]: ~same_take,
    }
    if not any(m.any() for m in kinds.values()):
        raise ValueError("no admissible pair types")
    rows = []
    for name, m in kinds.items():
        sel = np.flatnonzero(m)
        if len(sel) > n_pairs:
            sel = rng.choice(sel, size=n_pairs, replace=False)
        a, b = z[i[sel]], z[j[sel]]
        if len(sel):
            cos = (a * b).sum(1) / np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-12)
            l1, cs = float(l1_to_goal(a, b).mean()), float(cos.mean())
        else:
            l1 = cs = float("nan")
        rows.append({"pair_type": name, "l1": l1, "cosine": cs, "n": int(len(sel))})
    return rows


def monotonicity_fraction(sequences) -> float:
    """Fraction of sequences whose l1 distance to the final latent strictly decreases."""
    seq = np.asarray(sequences, dtype=float)
    if seq.ndim != 3 or len(seq) == 0:
        raise ValueError("need a non-empty (n, H, d) array")
    dist = l1_to_goal(seq, seq[:, -1:, :])
    return float(np.all(np.diff(dist, axis=1) < 0, axis=1).mean())


def score_accuracy_correlation(scores, accuracies) -> tuple[float, tuple[float, float]]:
    """Pearson r with its 95% confidence interval."""
    x, y = np.asarray(scores, dtype=float), np.asarray(accuracies, dtype=float)
    if len(x) != len(y) or len(x) < 3:
        raise ValueError("need at least three paired observations")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("correlation is undefined for constant input")
    res = stats.pearsonr(x, y)
    ci = res.confidence_interval(0.95)
    return float(res.statistic), (float(ci.low), float(ci.high))
