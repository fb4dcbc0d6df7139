"""Arbitrary-precision reference implementations shared by the tests."""

import mpmath
import numpy as np

mpmath.mp.dps = 50


def mp_logsumexp(values):
    values = [mpmath.mpf(float(v)) for v in values]
    m = max(values)
    return m + mpmath.log(mpmath.fsum(mpmath.exp(v - m) for v in values))


def mpce(logits, positives):
    """-(1/B) sum_i [log sum_{j pos} e^l_ij - log sum_j e^l_ij], evaluated in mpmath."""
    logits, positives = np.asarray(logits), np.asarray(positives, dtype=bool)
    total = mpmath.mpf(0)
    for row, pos in zip(logits, positives):
        total += mp_logsumexp(row) - mp_logsumexp(row[pos])
    return total / len(logits)


def symmetric_mpce(logits, positives):
    logits, positives = np.asarray(logits), np.asarray(positives, dtype=bool)
    return (mpce(logits, positives) + mpce(logits.T, positives.T)) / 2


def align_loss(z, e, text_ids, tau):
    """Contrastive alignment objective from first principles."""
    z, e = np.asarray(z), np.asarray(e)
    logits = [[mpmath.mpf(float(tau)) * mpmath.fsum(mpmath.mpf(float(a)) * mpmath.mpf(float(b))
                                                   for a, b in zip(zi, ej)) for ej in e] for zi in z]
    positives = np.asarray(text_ids)[:, None] == np.asarray(text_ids)[None, :]
    return symmetric_mpce(np.array([[float(x) for x in row] for row in logits]), positives)


def cosine_sum(pred, targets, weights=None):
    w = np.ones(len(pred)) if weights is None else weights
    return mpmath.fsum(
        mpmath.mpf(float(wi)) * (1 - mpmath.fsum(mpmath.mpf(float(a)) * mpmath.mpf(float(b)) for a, b in zip(p, t))
                                 / (mpmath.sqrt(mpmath.fsum(mpmath.mpf(float(a)) ** 2 for a in p))
                                    * mpmath.sqrt(mpmath.fsum(mpmath.mpf(float(b)) ** 2 for b in t))))
        for p, t, wi in zip(pred, targets, w))


def _layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def transformer(state, prefix, x, heads, n_layers, mask=None):
    """Pre-norm transformer forward written with explicit per-head loops."""
    p = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    for layer in range(n_layers):
        b = f"blocks.{layer}."
        h = _layer_norm(x, p[b + "ln1.gain"], p[b + "ln1.bias"])
        q = h @ p[b + "attn.q.weight"] + p[b + "attn.q.bias"]
        k = h @ p[b + "attn.k.weight"]
        v = h @ p[b + "attn.v.weight"] + p[b + "attn.v.bias"]
        dh = x.shape[-1] // heads
        out = np.zeros_like(x)
        for hd in range(heads):
            s = slice(hd * dh, (hd + 1) * dh)
            logits = q[..., s] @ np.swapaxes(k[..., s], -1, -2) / np.sqrt(dh)
            if mask is not None:
                logits = np.where(mask, logits, -np.inf)
            w = np.exp(logits - logits.max(-1, keepdims=True))
            out[..., s] = (w / w.sum(-1, keepdims=True)) @ v[..., s]
        x = x + out @ p[b + "attn.out.weight"] + p[b + "attn.out.bias"]
        h = _layer_norm(x, p[b + "ln2.gain"], p[b + "ln2.bias"])
        x = x + _gelu(h @ p[b + "fc1.weight"] + p[b + "fc1.bias"]) @ p[b + "fc2.weight"] + p[b + "fc2.bias"]
    return _layer_norm(x, p["ln_f.gain"], p["ln_f.bias"])
