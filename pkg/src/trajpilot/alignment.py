"""Trajectory encoder and the duplicate-aware multi-positive contrastive objective.

The encoder maps a 16x6 control tensor to a unit vector in the action-text
embedding space. Training pulls each trajectory toward every bank embedding
that shares its text id (paraphrases count as positives, not negatives).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from .core import AdamW, Linear, Module, Tensor, Transformer, as_tensor, l2_normalize, logsumexp, matmul, no_grad, parameter

log = logging.getLogger(__name__)

LOG_TEMP_INIT = math.log(1 / 0.07)
LOG_TEMP_RANGE = (0.0, math.log(100.0))


class TrainingDivergedError(RuntimeError):
    """A loss or gradient became non-finite during training."""


def temperature(log_temp: Tensor) -> Tensor:
    """exp(log_temp) clamped to [1, 100]."""
    return log_temp.clip(*LOG_TEMP_RANGE).exp()


@dataclass
class AlignConfig:
    width: int = 128
    layers: int = 4
    heads: int = 4
    d: int = 32
    epochs: int = 40
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0


class TrajEncoder(Module):
    """Transformer over the 16 control rows, mean-pooled and projected to unit length."""

    def __init__(self, rng: np.random.Generator, width: int = 128, layers: int = 4, heads: int = 4, d: int = 32):
        self.width, self.d = width, d
        self.inp = Linear(rng, 6, width)
        self.pos = parameter(rng.normal(0, 0.02, (geometry.KNOTS, width)))
        self.body = Transformer(rng, width, layers, heads)
        self.out = Linear(rng, width, d)
        self.log_temp = parameter(np.array(LOG_TEMP_INIT))
        # per-column standardization, fitted once on training controls
        self.shift = np.zeros(6)
        self.scale = np.ones(6)

    def fit_normalizer(self, controls: np.ndarray) -> None:
        flat = np.asarray(controls).reshape(-1, 6)
        self.shift = flat.mean(axis=0)
        self.scale = np.maximum(flat.std(axis=0), 1e-8)

    def forward(self, controls) -> Tensor:
        c = np.asarray(controls, dtype=float)
        if c.shape[-2:] != (geometry.KNOTS, 6):
            raise ValueError(f"controls must end in ({geometry.KNOTS}, 6), got {c.shape}")
        x = self.inp(as_tensor((c - self.shift) / self.scale)) + self.pos
        h = self.body(x).mean(axis=-2)
        return l2_normalize(self.out(h))

    def encode(self, controls, batch_size: int = 512) -> np.ndarray:
        """Frozen-encoder embeddings as a plain array."""
        c = np.asarray(controls, dtype=float)
        lead = c.shape[:-2]
        flat = c.reshape(-1, geometry.KNOTS, 6)
        with no_grad():
            parts = [self(flat[i:i + batch_size]).data for i in range(0, len(flat), batch_size)]
        out = np.concatenate(parts) if parts else np.zeros((0, self.d))
        return out.reshape(*lead, self.d)

    def buffers(self) -> dict[str, np.ndarray]:
        return {"shift": self.shift, "scale": self.scale}

    def load_buffers(self, extra: dict[str, np.ndarray]) -> None:
        self.shift, self.scale = extra["shift"].copy(), extra["scale"].copy()


def positives_mask(row_ids, col_ids) -> np.ndarray:
    return np.asarray(row_ids)[:, None] == np.asarray(col_ids)[None, :]


def mp_cross_entropy(logits: Tensor, positives) -> Tensor:
    """-(1/B) sum_i [log sum_{j pos} e^l_ij - log sum_j e^l_ij]."""
    logits = as_tensor(logits)
    positives = np.asarray(positives, dtype=bool)
    if positives.shape != logits.shape or logits.ndim != 2:
        raise ValueError(f"positives {positives.shape} must match 2-D logits {logits.shape}")
    if not positives.any(axis=1).all():
        raise ValueError("every row needs at least one positive")
    if not np.isfinite(logits.data).all():
        raise ValueError("non-finite logits")
    return (logsumexp(logits, axis=1) - logsumexp(logits, axis=1, mask=positives)).mean()


def symmetric_mp_cross_entropy(logits: Tensor, positives) -> Tensor:
    positives = np.asarray(positives, dtype=bool)
    return 0.5 * (mp_cross_entropy(logits, positives) + mp_cross_entropy(logits.T, positives.T))


def align_loss(z: Tensor, text_embeddings, text_ids, log_temp: Tensor) -> Tensor:
    """Symmetrized mpCE on l_ij = tau z_i . e_j with M_ij = [t_i == t_j]."""
    e = np.asarray(text_embeddings, dtype=float)
    if len(e) < 2:
        raise ValueError("alignment needs a batch of at least two samples")
    if not np.allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-9):
        raise ValueError("text embeddings must be unit-norm")
    logits = matmul(z, as_tensor(e.T)) * temperature(log_temp)
    return symmetric_mp_cross_entropy(logits, positives_mask(text_ids, text_ids))


def train_alignment(controls, text_embeddings, text_ids, config: AlignConfig) -> TrajEncoder:
    """Fit the encoder with uniformly shuffled mini-batches; returns it in eval mode."""
    controls = np.asarray(controls, dtype=float)
    text_embeddings = np.asarray(text_embeddings, dtype=float)
    text_ids = np.asarray(text_ids)
    n = len(controls)
    if n < 2:
        raise ValueError("alignment needs at least two training examples")
    rng = np.random.default_rng(config.seed)
    enc = TrajEncoder(rng, config.width, config.layers, config.heads, config.d)
    enc.fit_normalizer(controls)
    opt = AdamW(enc.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    bs = min(config.batch_size, n)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n - bs + 1, bs):
            idx = order[start:start + bs]
            opt.zero_grad()
            loss = align_loss(enc(controls[idx]), text_embeddings[idx], text_ids[idx], enc.log_temp)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(
                    f"alignment loss {loss.item()} at epoch {epoch}, temperature {np.exp(enc.log_temp.data):.3g}")
            loss.backward()
            opt.step()
            total += loss.item()
        log.debug("align epoch %d loss %.4f", epoch, total / max(1, n // bs))
    return enc.eval()


def text_scores(z: np.ndarray, bank_embeddings: np.ndarray, bank_text_ids: np.ndarray, n_texts: int) -> np.ndarray:
    """Best paraphrase cosine per distinct text id, shape (..., n_texts)."""
    cos = z @ bank_embeddings.T
    out = np.full(cos.shape[:-1] + (n_texts,), -np.inf)
    for t in range(n_texts):
        cols = bank_text_ids == t
        if cols.any():
            out[..., t] = cos[..., cols].max(axis=-1)
    return out


def retrieval_recall_at_1(enc: TrajEncoder, controls, text_ids, bank) -> float:
    """Trajectory-to-text R@1 over distinct text ids (chance is 1/n_texts)."""
    z = enc.encode(controls)
    scores = text_scores(z, bank.embeddings, bank.text_ids, bank.n_texts)
    return float(np.mean(scores.argmax(axis=-1) == np.asarray(text_ids)))
