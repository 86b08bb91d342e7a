"""Transformer encoder used inside every aggregator, with its analytic backward pass.

Each layer is a pre-norm block::

    h = h + attention(layer_norm_1(h))
    h = h + feed_forward(layer_norm_2(h))

with full bidirectional multi-head attention (projections without bias) and a
GELU feed-forward. There is no final normalization, so an encoder whose
weights are all zero is the identity. All arrays are batched as
``(batch, sequence, dim)`` and computed in float64.
"""
from typing import Dict, List, Optional, Tuple

import numpy as np

from gqe.core.errors import DimensionError
from gqe.models.aggregator import EncoderConfig, EncoderVariant

LN_EPS = 1e-5
INIT_SCALE = 0.02
GELU_C = np.sqrt(2.0 / np.pi)
GELU_A = 0.044715

Weights = Dict[str, np.ndarray]


def encoder_tensor_shapes(config: EncoderConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Encoder tensors in declaration order."""
    if config.variant == EncoderVariant.IDENTITY:
        return []
    f, ff = config.dim, config.ff_dim
    shapes = []
    for layer in range(config.layers):
        p = f"layers.{layer}."
        shapes += [
            (p + "ln1.gain", (f,)),
            (p + "ln1.bias", (f,)),
            (p + "attn.wq", (f, f)),
            (p + "attn.wk", (f, f)),
            (p + "attn.wv", (f, f)),
            (p + "attn.wo", (f, f)),
            (p + "ln2.gain", (f,)),
            (p + "ln2.bias", (f,)),
            (p + "ff.w1", (f, ff)),
            (p + "ff.b1", (ff,)),
            (p + "ff.w2", (ff, f)),
            (p + "ff.b2", (f,)),
        ]
    return shapes


def init_encoder_weights(config: EncoderConfig, rng: np.random.Generator) -> Weights:
    """Gaussian(0, 0.02) matrices, unit gains, zero biases."""
    weights = {}
    for name, shape in encoder_tensor_shapes(config):
        if name.endswith(".gain"):
            weights[name] = np.ones(shape)
        elif name.endswith(".bias") or name.endswith(".b1") or name.endswith(".b2"):
            weights[name] = np.zeros(shape)
        else:
            weights[name] = rng.normal(0.0, INIT_SCALE, size=shape)
    return weights


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_backward(dy, gain, cache):
    xhat, inv = cache
    f = dy.shape[-1]
    dgain = (dy * xhat).reshape(-1, f).sum(axis=0)
    dbias = dy.reshape(-1, f).sum(axis=0)
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _split_heads(t, heads):
    b, s, f = t.shape
    return t.reshape(b, s, heads, f // heads).transpose(0, 2, 1, 3)


def _merge_heads(t):
    b, h, s, d = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, s, h * d)


def _softmax(x, axis=-1):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def _attention(a, wq, wk, wv, wo, heads):
    d = a.shape[-1] // heads
    qh = _split_heads(a @ wq, heads)
    kh = _split_heads(a @ wk, heads)
    vh = _split_heads(a @ wv, heads)
    probs = _softmax(qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(d))
    o = _merge_heads(probs @ vh)
    return o @ wo, (a, qh, kh, vh, probs, o)


def _attention_backward(dout, wq, wk, wv, wo, heads, cache):
    a, qh, kh, vh, probs, o = cache
    d = a.shape[-1] // heads
    dwo = np.einsum("bsf,bsg->fg", o, dout)
    doh = _split_heads(dout @ wo.T, heads)
    dprobs = doh @ vh.transpose(0, 1, 3, 2)
    dvh = probs.transpose(0, 1, 3, 2) @ doh
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) / np.sqrt(d)
    dq = _merge_heads(dscores @ kh)
    dk = _merge_heads(dscores.transpose(0, 1, 3, 2) @ qh)
    dv = _merge_heads(dvh)
    grads = {
        "attn.wq": np.einsum("bsf,bsg->fg", a, dq),
        "attn.wk": np.einsum("bsf,bsg->fg", a, dk),
        "attn.wv": np.einsum("bsf,bsg->fg", a, dv),
        "attn.wo": dwo,
    }
    da = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return da, grads


def _gelu(u):
    t = np.tanh(GELU_C * (u + GELU_A * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)


def _check_shape(config: EncoderConfig, x: np.ndarray) -> None:
    if x.ndim != 3 or x.shape[-1] != config.dim:
        raise DimensionError(f"encoder expects (batch, seq, {config.dim}), got {x.shape}")


def encoder_forward_cached(config: EncoderConfig, weights: Weights, x: np.ndarray):
    """Forward pass over a batch; returns the output and the cache for the backward pass."""
    _check_shape(config, x)
    if config.variant == EncoderVariant.IDENTITY:
        return x, None
    h = x
    caches = []
    for layer in range(config.layers):
        w = {name[len(f"layers.{layer}."):]: t for name, t in weights.items()
             if name.startswith(f"layers.{layer}.")}
        a, ln1 = _layer_norm(h, w["ln1.gain"], w["ln1.bias"])
        att, attn = _attention(a, w["attn.wq"], w["attn.wk"], w["attn.wv"], w["attn.wo"], config.heads)
        h1 = h + att
        z, ln2 = _layer_norm(h1, w["ln2.gain"], w["ln2.bias"])
        u = z @ w["ff.w1"] + w["ff.b1"]
        g, t = _gelu(u)
        h = h1 + g @ w["ff.w2"] + w["ff.b2"]
        caches.append((w, ln1, attn, ln2, z, u, g, t))
    return h, caches


def encoder_backward(
    config: EncoderConfig, caches: Optional[list], dout: np.ndarray
) -> Tuple[np.ndarray, Weights]:
    """Gradients w.r.t. the encoder input and every encoder tensor."""
    if config.variant == EncoderVariant.IDENTITY:
        return dout, {}
    grads: Weights = {}
    dh = dout
    for layer in reversed(range(config.layers)):
        w, ln1, attn, ln2, z, u, g, t = caches[layer]
        p = f"layers.{layer}."
        grads[p + "ff.w2"] = np.einsum("bsf,bsg->fg", g, dh)
        grads[p + "ff.b2"] = dh.reshape(-1, dh.shape[-1]).sum(axis=0)
        du = (dh @ w["ff.w2"].T) * _gelu_grad(u, t)
        grads[p + "ff.w1"] = np.einsum("bsf,bsg->fg", z, du)
        grads[p + "ff.b1"] = du.reshape(-1, du.shape[-1]).sum(axis=0)
        dz = du @ w["ff.w1"].T
        dh1, grads[p + "ln2.gain"], grads[p + "ln2.bias"] = _layer_norm_backward(dz, w["ln2.gain"], ln2)
        dh1 = dh1 + dh
        da, attn_grads = _attention_backward(
            dh1, w["attn.wq"], w["attn.wk"], w["attn.wv"], w["attn.wo"], config.heads, attn
        )
        for name, grad in attn_grads.items():
            grads[p + name] = grad
        dh0, grads[p + "ln1.gain"], grads[p + "ln1.bias"] = _layer_norm_backward(da, w["ln1.gain"], ln1)
        dh = dh0 + dh1
    return dh, grads


def encoder_forward(config: EncoderConfig, weights: Weights, sequence: np.ndarray) -> np.ndarray:
    """Encode one ``(K+1, F)`` sequence or a ``(batch, K+1, F)`` batch."""
    sequence = np.asarray(sequence, dtype=np.float64)
    single = sequence.ndim == 2
    batch = sequence[None] if single else sequence
    expected = dict(encoder_tensor_shapes(config))
    for name, shape in expected.items():
        if name not in weights or weights[name].shape != shape:
            raise DimensionError(f"encoder tensor {name} must have shape {shape}")
    out, _ = encoder_forward_cached(config, weights, batch)
    return out[0] if single else out
