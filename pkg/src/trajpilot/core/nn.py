"""Transformer building blocks on top of the autograd ``Tensor``."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, gelu, layer_norm, matmul, parameter, softmax


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; sub-modules are
    ``Module`` attributes or lists of modules. Names are dotted attribute paths,
    which is what checkpoints key on.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.data.shape}")
            p.data = value.copy()

    def train(self, mode: bool = True):
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)


def _init(rng: np.random.Generator, shape, std: float) -> Tensor:
    return parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = _init(rng, (d_in, d_out), 1.0 / math.sqrt(d_in))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, width: int):
        self.gain = parameter(np.ones(width))
        self.bias = parameter(np.zeros(width))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


def attention_weights(q: np.ndarray, k: np.ndarray, mask=None) -> np.ndarray:
    """Reference softmax weights for single-head attention (no autograd)."""
    logits = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def masked_multihead_attention(q: Tensor, k: Tensor, v: Tensor, mask, heads: int) -> Tensor:
    """Scaled dot-product attention split over ``heads``.

    ``q`` is (..., Tq, D), ``k``/``v`` are (..., Tk, D). ``mask`` is a boolean
    (Tq, Tk) or broadcastable (..., Tq, Tk) array; ``None`` allows every key.
    Disallowed keys receive exactly zero weight.
    """
    *lead, tq, width = q.shape
    tk = k.shape[-2]
    if k.shape[-1] != width or v.shape[-1] != width:
        raise ValueError(f"width mismatch: q={q.shape} k={k.shape} v={v.shape}")
    if v.shape[-2] != tk:
        raise ValueError(f"key/value length mismatch: {k.shape} vs {v.shape}")
    if width % heads:
        raise ValueError(f"width {width} not divisible by {heads} heads")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (tq, tk):
            raise ValueError(f"mask shape {mask.shape} does not match ({tq}, {tk})")
        if not mask.any(axis=-1).all():
            raise ValueError("attention mask has an all-masked query row")
        mask = mask[..., None, :, :]  # broadcast over heads
    dh = width // heads

    def split(x: Tensor, t: int) -> Tensor:
        return x.reshape(*x.shape[:-2], t, heads, dh).swapaxes(-2, -3)

    qh, kh, vh = split(q, tq), split(k, tk), split(v, tk)
    logits = matmul(qh, kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    weights = softmax(logits, axis=-1, mask=mask)
    out = matmul(weights, vh)  # (..., heads, tq, dh)
    return out.swapaxes(-2, -3).reshape(*lead, tq, width)


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, width: int, heads: int, d_kv: int | None = None):
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        d_kv = d_kv or width
        self.heads = heads
        self.q = Linear(rng, width, width)
        # key bias only shifts every logit in a row equally; softmax ignores it
        self.k = Linear(rng, d_kv, width, bias=False)
        self.v = Linear(rng, d_kv, width)
        self.out = Linear(rng, width, width)

    def forward(self, x: Tensor, context: Tensor | None = None, mask=None) -> Tensor:
        context = x if context is None else context
        a = masked_multihead_attention(self.q(x), self.k(context), self.v(context), mask, self.heads)
        return self.out(a)


class Block(Module):
    """Pre-norm residual block: x + MHA(LN(x)); x + MLP(LN(x)) with GELU."""

    def __init__(self, rng: np.random.Generator, width: int, heads: int, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(width)
        self.attn = MultiHeadAttention(rng, width, heads)
        self.ln2 = LayerNorm(width)
        self.fc1 = Linear(rng, width, mlp_ratio * width)
        self.fc2 = Linear(rng, mlp_ratio * width, width)

    def forward(self, x: Tensor, mask=None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.fc2(gelu(self.fc1(self.ln2(x))))


class Transformer(Module):
    def __init__(self, rng: np.random.Generator, width: int, layers: int, heads: int):
        self.blocks = [Block(rng, width, heads) for _ in range(layers)]
        self.ln_f = LayerNorm(width)

    def forward(self, x: Tensor, mask=None) -> Tensor:
        for block in self.blocks:
            x = block(x, mask=mask)
        return self.ln_f(x)
