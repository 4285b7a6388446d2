"""Neural building blocks: attention, transformer/conformer layers, LSTM,
convolutional subsampler, sinusoidal positions.

Blocks are thin parameter bundles over the tape ops; they register their
parameters into a :class:`~fnt.params.ParamSet` under a dotted name scope
and are stateless across calls. Residual ordering is pre-norm throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import NumericsError, ShapeError, ValidationError


@dataclass
class BlockConfig:
    model_dim: int
    heads: int
    ffn_dim: int
    conv_kernel: int = 3
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ValidationError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.conv_kernel % 2 == 0:
            raise ValidationError(f"conv_kernel must be odd, got {self.conv_kernel}")


def sinusoid_positions(positions, dim):
    """Absolute sinusoidal encodings for arbitrary (possibly negative) positions."""
    positions = np.asarray(positions, dtype=np.float64)
    half = (dim + 1) // 2
    freqs = np.exp(-math.log(10000.0) * (2 * np.arange(half) / dim))
    ang = positions[:, None] * freqs[None, :]
    pe = np.zeros((len(positions), 2 * half))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe[:, :dim].astype(tt.default_dtype())


def add_positions(x, start=0):
    """Add sinusoidal encodings for positions start..start+T-1."""
    pe = sinusoid_positions(np.arange(start, start + x.shape[0]), x.shape[1])
    return x + tt.Tensor(pe)


def causal_mask(n):
    return np.tril(np.ones((n, n), dtype=bool))


def validate_mask(mask, tq, tk, op):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (tq, tk):
        raise ShapeError(op, mask.shape, (tq, tk))
    if not mask.any(axis=1).all():
        raise NumericsError(f"{op}: a query row is fully masked")
    return mask


class LayerNorm:
    def __init__(self, ps, name, dim, eps=1e-5):
        self.gain = ps.ones(f"{name}.gain", (dim,))
        self.bias = ps.zeros(f"{name}.bias", (dim,))
        self.eps = eps

    def __call__(self, x):
        return tt.layer_norm(x, self.gain, self.bias, self.eps)


class Linear:
    def __init__(self, ps, name, d_in, d_out, zero_init=False):
        if zero_init:
            self.w = ps.zeros(f"{name}.w", (d_in, d_out))
        else:
            self.w = ps.normal(f"{name}.w", (d_in, d_out), 1.0 / math.sqrt(d_in))
        self.b = ps.zeros(f"{name}.b", (d_out,))

    def __call__(self, x):
        return tt.matmul(x, self.w) + self.b


class MultiHeadAttention:
    """Scaled dot-product attention; masked positions get exactly zero weight."""

    def __init__(self, ps, name, dim, heads, kv_dim=None, zero_out=False):
        if dim % heads != 0:
            raise ValidationError(f"attention dim {dim} not divisible by heads {heads}")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.d_head = dim // heads
        self.wq = Linear(ps, f"{name}.q", dim, dim)
        self.wk = Linear(ps, f"{name}.k", kv_dim, dim)
        self.wv = Linear(ps, f"{name}.v", kv_dim, dim)
        self.wo = Linear(ps, f"{name}.out", dim, dim, zero_init=zero_out)

    def __call__(self, q, k, v, mask=None):
        tq, tk = q.shape[0], k.shape[0]
        if mask is not None:
            mask = validate_mask(mask, tq, tk, "multi_head_attention")
        qq, kk, vv = self.wq(q), self.wk(k), self.wv(v)
        scale = 1.0 / math.sqrt(self.d_head)
        outs = []
        for h in range(self.heads):
            sl = slice(h * self.d_head, (h + 1) * self.d_head)
            scores = tt.scale(tt.matmul(qq[:, sl], tt.transpose(kk[:, sl])), scale)
            if mask is not None:
                scores = tt.masked_fill(scores, mask, -np.inf)
            attn = tt.softmax(scores, axis=-1)
            outs.append(tt.matmul(attn, vv[:, sl]))
        return self.wo(tt.concat(outs, axis=1))


class FeedForward:
    def __init__(self, ps, name, dim, ffn_dim):
        self.fc1 = Linear(ps, f"{name}.fc1", dim, ffn_dim)
        self.fc2 = Linear(ps, f"{name}.fc2", ffn_dim, dim)

    def __call__(self, x):
        return self.fc2(tt.relu(self.fc1(x)))


class TransformerLayer:
    """Pre-norm residual: self-attention, optional cross-attention, feed-forward.

    Cross-attention output projections start at zero so a freshly wired
    context path reproduces the context-free layer exactly.
    """

    def __init__(self, ps, name, dim, heads, ffn_dim, cross_attention=False, ctx_dim=None):
        self.ln1 = LayerNorm(ps, f"{name}.ln1", dim)
        self.attn = MultiHeadAttention(ps, f"{name}.attn", dim, heads)
        self.cross = None
        if cross_attention:
            self.ln_cross = LayerNorm(ps, f"{name}.ln_cross", dim)
            self.cross = MultiHeadAttention(
                ps, f"{name}.cross", dim, heads, kv_dim=ctx_dim or dim, zero_out=True
            )
        self.ln2 = LayerNorm(ps, f"{name}.ln2", dim)
        self.ffn = FeedForward(ps, f"{name}.ffn", dim, ffn_dim)

    def __call__(self, x, self_mask=None, context=None):
        if x.shape[0] == 0:
            raise NumericsError("transformer_layer: zero-length input")
        if self.cross is not None and context is None:
            raise NumericsError("transformer_layer: configured for cross-attention but no context given")
        if self.cross is None and context is not None:
            raise NumericsError("transformer_layer: context given but layer has no cross-attention")
        h = self.ln1(x)
        x = x + self.attn(h, h, h, self_mask)
        if self.cross is not None:
            h = self.ln_cross(x)
            x = x + self.cross(h, context, context)  # full visibility over context
        h = self.ln2(x)
        return x + self.ffn(h)


class TransformerStack:
    def __init__(self, ps, name, layers, dim, heads, ffn_dim, cross_attention=False, ctx_dim=None):
        self.layers = [
            TransformerLayer(ps, f"{name}.layer{i}", dim, heads, ffn_dim, cross_attention, ctx_dim)
            for i in range(layers)
        ]
        self.ln_out = LayerNorm(ps, f"{name}.ln_out", dim)

    def __call__(self, x, self_mask=None, context=None):
        for layer in self.layers:
            x = layer(x, self_mask=self_mask, context=context)
        return self.ln_out(x)


class ConformerLayer:
    """Half-step FFN, self-attention, depthwise conv module, half-step FFN, final norm.

    Sequences shorter than the conv kernel are handled by the conv's own
    zero padding.
    """

    def __init__(self, ps, name, dim, heads, ffn_dim, conv_kernel=3):
        if conv_kernel % 2 == 0:
            raise ValidationError("conformer conv kernel must be odd")
        self.ln_ffn1 = LayerNorm(ps, f"{name}.ln_ffn1", dim)
        self.ffn1 = FeedForward(ps, f"{name}.ffn1", dim, ffn_dim)
        self.ln_attn = LayerNorm(ps, f"{name}.ln_attn", dim)
        self.attn = MultiHeadAttention(ps, f"{name}.attn", dim, heads)
        self.ln_conv = LayerNorm(ps, f"{name}.ln_conv", dim)
        self.pw1 = Linear(ps, f"{name}.conv_pw1", dim, 2 * dim)
        self.dw_w = ps.normal(f"{name}.conv_dw.w", (conv_kernel, dim), 1.0 / math.sqrt(conv_kernel))
        self.dw_b = ps.zeros(f"{name}.conv_dw.b", (dim,))
        self.pw2 = Linear(ps, f"{name}.conv_pw2", dim, dim)
        self.ln_ffn2 = LayerNorm(ps, f"{name}.ln_ffn2", dim)
        self.ffn2 = FeedForward(ps, f"{name}.ffn2", dim, ffn_dim)
        self.ln_out = LayerNorm(ps, f"{name}.ln_out", dim)
        self.dim = dim

    def _conv_module(self, x):
        h = self.pw1(x)
        a, g = h[:, : self.dim], h[:, self.dim :]
        h = a * tt.sigmoid(g)  # GLU
        h = tt.depthwise_conv1d(h, self.dw_w, self.dw_b)
        h = tt.swish(h)
        return self.pw2(h)

    def __call__(self, x, mask=None):
        if x.shape[0] == 0:
            raise NumericsError("conformer_layer: zero-length input")
        x = x + tt.scale(self.ffn1(self.ln_ffn1(x)), 0.5)
        h = self.ln_attn(x)
        x = x + self.attn(h, h, h, mask)
        x = x + self._conv_module(self.ln_conv(x))
        x = x + tt.scale(self.ffn2(self.ln_ffn2(x)), 0.5)
        return self.ln_out(x)


class LstmLayer:
    def __init__(self, ps, name, d_in, hidden):
        self.hidden = hidden
        bound = 1.0 / math.sqrt(hidden)
        self.w_ih = ps.uniform(f"{name}.w_ih", (d_in, 4 * hidden), bound)
        self.w_hh = ps.uniform(f"{name}.w_hh", (hidden, 4 * hidden), bound)
        self.b = ps.zeros(f"{name}.b", (4 * hidden,))

    def step(self, x_row, state):
        """One recurrence step. x_row: 1 x d_in; state: (h, c) each 1 x hidden."""
        h_prev, c_prev = state
        gates = tt.matmul(x_row, self.w_ih) + tt.matmul(h_prev, self.w_hh) + self.b
        H = self.hidden
        i = tt.sigmoid(gates[:, 0:H])
        f = tt.sigmoid(gates[:, H : 2 * H])
        g = tt.tanh(gates[:, 2 * H : 3 * H])
        o = tt.sigmoid(gates[:, 3 * H : 4 * H])
        c = f * c_prev + i * g
        h = o * tt.tanh(c)
        return h, (h, c)

    def init_state(self):
        z = tt.Tensor(np.zeros((1, self.hidden)))
        return z, z

    def __call__(self, x):
        state = self.init_state()
        rows = []
        for t in range(x.shape[0]):
            out, state = self.step(x[t : t + 1, :], state)
            rows.append(out)
        return tt.concat(rows, axis=0)


class LstmStack:
    def __init__(self, ps, name, d_in, hidden, layers):
        dims = [d_in] + [hidden] * layers
        self.layers = [LstmLayer(ps, f"{name}.l{i}", dims[i], hidden) for i in range(layers)]

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def init_state(self):
        return [layer.init_state() for layer in self.layers]

    def step(self, x_row, states):
        new_states = []
        h = x_row
        for layer, st in zip(self.layers, states):
            h, st = layer.step(h, st)
            new_states.append(st)
        return h, new_states


class Subsampler:
    """Strided convolutions reducing time by factor 1, 2, or 4."""

    def __init__(self, ps, name, d_in, model_dim, factor):
        if factor not in (1, 2, 4):
            raise ValidationError(f"subsample factor must be 1, 2, or 4, got {factor}")
        self.factor = factor
        self.convs = []
        if factor == 1:
            self.proj = Linear(ps, f"{name}.proj", d_in, model_dim)
        else:
            dims = [d_in] + [model_dim] * (1 if factor == 2 else 2)
            for i in range(len(dims) - 1):
                w = ps.normal(f"{name}.conv{i}.w", (3, dims[i], dims[i + 1]), 1.0 / math.sqrt(3 * dims[i]))
                b = ps.zeros(f"{name}.conv{i}.b", (dims[i + 1],))
                self.convs.append((w, b))
            self.proj = None

    def out_len(self, t):
        n = t
        for _ in range(len(self.convs)):
            n = (n + 1) // 2
        return n

    def __call__(self, x):
        # linear conv stack: keeps channel/session offsets additive so the
        # encoder's attention can still calibrate against history frames
        if x.shape[0] < self.factor:
            raise ShapeError("subsample", x.shape, (self.factor,))
        if self.proj is not None:
            return self.proj(x)
        for w, b in self.convs:
            x = tt.conv1d(x, w, b, stride=2, padding=1)
        return x
