"""The four elementary sequence layers and their stochastic masks.

All layers consume and produce arrays shaped [T, B, D]: time-major, batch in
the middle, features last. Training-mode randomness always comes from an
explicit ``numpy.random.Generator`` so identical seeds give bit-identical
outputs.

Layers:

* ``FeedForward`` — position-wise boom projection up to a hidden size and back,
  with dropout after both linears, a residual path, and post-layer-norm.
* ``RelativeAttention`` — causal multi-head attention over a sliding window of
  the current input plus a detached memory of previous inputs, scored with
  content and relative-position terms.
* ``QRNN`` — convolutional gates feeding a forget-gate recurrence (fo-pooling),
  with DropConnect on the gate weights.
* ``rnn_dropout`` — one dropout pattern per (batch, feature) position, held
  fixed across every time-step of the window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape
from .errors import ConfigError, ShapeError
from .tape import Module, Parameter, Tensor, _node, as_tensor

MASK_VALUE = -1e30  # additive pre-softmax mask; underflows to exactly 0 weight


def _check_rate(p, name):
    if not (0.0 <= p < 1.0):
        raise ConfigError(f"{name} must be in [0, 1), got {p}")


def _check_sequence(x):
    if x.ndim != 3:
        raise ShapeError(f"expected [T, B, D] input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class FeedForwardConfig:
    embed_dim: int
    boom_dim: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.embed_dim < 1 or self.boom_dim < self.embed_dim:
            raise ConfigError(
                f"boom_dim ({self.boom_dim}) must be >= embed_dim ({self.embed_dim}) >= 1")
        _check_rate(self.dropout_rate, "dropout_rate")


@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int
    num_heads: int
    attn_length: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.num_heads < 1 or self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim ({self.embed_dim}) must be divisible by num_heads ({self.num_heads})")
        if self.attn_length < 1:
            raise ConfigError(f"attn_length must be >= 1, got {self.attn_length}")
        _check_rate(self.dropout_rate, "dropout_rate")


@dataclass(frozen=True)
class QRNNConfig:
    embed_dim: int
    conv_width: int = 1
    weight_drop_rate: float = 0.0
    carry_state: bool = True

    def __post_init__(self):
        if self.conv_width not in (1, 2):
            raise ConfigError(f"conv_width must be 1 or 2, got {self.conv_width}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")
        _check_rate(self.weight_drop_rate, "weight_drop_rate")


# ---------------------------------------------------------------------------
# carried state containers


@dataclass
class QRNNState:
    """Final fo-pool cell of the previous window, detached from its graph."""

    cell: np.ndarray  # [B, D]
    fresh: bool = True  # True while the cell is still the all-zeros start state

    @classmethod
    def zeros(cls, batch, dim, dtype=np.float32):
        return cls(np.zeros((batch, dim), dtype=dtype), fresh=True)

    def reset_columns(self, flags):
        """Zero the cell for every flagged batch column (stream boundary)."""
        flags = np.asarray(flags, dtype=bool)
        if flags.any():
            cell = self.cell.copy()
            cell[flags] = 0.0
            return QRNNState(cell, fresh=bool(flags.all() and self.fresh))
        return self


@dataclass
class AttentionMemory:
    """Detached inputs of earlier windows, oldest first, with validity flags.

    ``valid`` marks which (position, column) entries hold real history; a
    column that just started a new stream has none.
    """

    data: np.ndarray  # [M, B, D]
    valid: np.ndarray = None  # [M, B] bool

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(self.data.shape[:2], dtype=bool)

    @classmethod
    def empty(cls, batch, dim, dtype=np.float32):
        return cls(np.zeros((0, batch, dim), dtype=dtype),
                   np.zeros((0, batch), dtype=bool))

    @property
    def length(self):
        return self.data.shape[0]

    def reset_columns(self, flags):
        """Invalidate history for every flagged batch column."""
        flags = np.asarray(flags, dtype=bool)
        if flags.any() and self.length:
            valid = self.valid.copy()
            valid[:, flags] = False
            return AttentionMemory(self.data, valid)
        return self

    def trim(self, max_length):
        """Keep only the newest ``max_length`` positions."""
        if max_length <= 0:
            b, d = self.data.shape[1], self.data.shape[2]
            return AttentionMemory.empty(b, d, self.data.dtype)
        if self.length <= max_length:
            return self
        return AttentionMemory(self.data[-max_length:], self.valid[-max_length:])


# ---------------------------------------------------------------------------
# dropout family


def dropout(x, rate, training, rng):
    """Inverted elementwise dropout; identity when eval or rate 0."""
    _check_rate(rate, "dropout rate")
    if not training or rate == 0.0:
        return as_tensor(x)
    if rng is None:
        raise ConfigError("training-mode dropout needs an explicit rng")
    x = as_tensor(x)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    return tape.mul(x, Tensor(keep / np.asarray(1.0 - rate, dtype=x.dtype)))


def rnn_dropout(x, rate, training, rng):
    """Drop whole feature lanes: one mask per (batch, feature), all time-steps.

    Surviving lanes are scaled by 1/(1-rate) so the expectation matches the
    undropped input.
    """
    _check_rate(rate, "rnn_dropout rate")
    x = as_tensor(x)
    _check_sequence(x.data)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("training-mode rnn_dropout needs an explicit rng")
    _, b, d = x.shape
    keep = (rng.random((1, b, d)) >= rate).astype(x.dtype)
    return tape.mul(x, Tensor(keep / np.asarray(1.0 - rate, dtype=x.dtype)))


def weight_drop_mask(shape, rate, rng, dtype):
    """DropConnect mask over a weight matrix, entries in {0, 1/(1-rate)}."""
    keep = (rng.random(shape) >= rate).astype(dtype)
    return keep / np.asarray(1.0 - rate, dtype=dtype)


# ---------------------------------------------------------------------------
# layer norm with gain/bias


def layer_norm(x, gain, bias, eps=1e-5):
    return tape.add(tape.mul(tape.normalize(x, eps=eps), gain), bias)


# ---------------------------------------------------------------------------
# feed-forward boom block


class BoomCore(Module):
    """The two projections of the boom block: up to boom_dim, ReLU, back down.

    Dropout follows both linears. No residual or norm here; the wrappers
    (``FeedForward`` standalone, or a recurrent block sharing one residual)
    add their own.
    """

    def __init__(self, cfg: FeedForwardConfig, rng, dtype=np.float32):
        d, h = cfg.embed_dim, cfg.boom_dim
        self.cfg = cfg
        self.w1 = Parameter(tape.uniform_fan_in(rng, (d, h), dtype))
        self.b1 = Parameter(np.zeros(h, dtype=dtype))
        self.w2 = Parameter(tape.uniform_fan_in(rng, (h, d), dtype))
        self.b2 = Parameter(np.zeros(d, dtype=dtype))

    def __call__(self, x, training=False, rng=None):
        x = as_tensor(x)
        _check_sequence(x.data)
        if x.shape[-1] != self.cfg.embed_dim:
            raise ShapeError(f"feature dim {x.shape[-1]} != embed_dim {self.cfg.embed_dim}")
        inner = tape.relu(tape.add(tape.matmul(x, self.w1), self.b1))
        inner = dropout(inner, self.cfg.dropout_rate, training, rng)
        out = tape.add(tape.matmul(inner, self.w2), self.b2)
        return dropout(out, self.cfg.dropout_rate, training, rng)


class FeedForward(Module):
    """y = LayerNorm(x + Drop(W2·Drop(ReLU(W1·x + b1)) + b2))."""

    def __init__(self, cfg: FeedForwardConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.core = BoomCore(cfg, rng, dtype)
        self.gain = Parameter(np.ones(cfg.embed_dim, dtype=dtype))
        self.bias = Parameter(np.zeros(cfg.embed_dim, dtype=dtype))

    def __call__(self, x, training=False, rng=None):
        x = as_tensor(x)
        out = self.core(x, training=training, rng=rng)
        return layer_norm(tape.add(x, out), self.gain, self.bias)


def feed_forward_block(x, block: FeedForward, training=False, rng=None):
    return block(x, training=training, rng=rng)


# ---------------------------------------------------------------------------
# relative multi-head attention


def relative_encoding(length, dim, dtype=np.float32):
    """Sinusoidal codes for distances 0..length-1, shaped [length, dim]."""
    d = np.arange(length, dtype=np.float64)[:, None]
    j = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angles = d / np.power(10000.0, j / dim)
    enc = np.zeros((length, dim), dtype=np.float64)
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles[:, : dim // 2])
    return enc.astype(dtype)


class RelativeAttention(Module):
    """Causal windowed attention over (memory ‖ x) with relative positions.

    Scores combine a content term (q + u)·k and a position term (q + v)·r_d,
    where r_d is a projected sinusoidal code of the query-key distance d and
    u, v are learned per-head biases shared across positions. Positions
    outside [t - attn_length + 1, t] are masked out additively before the
    softmax, which zeroes their weight exactly.
    """

    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float32):
        d = cfg.embed_dim
        self.cfg = cfg
        self.dtype = dtype
        self.wq = Parameter(tape.uniform_fan_in(rng, (d, d), dtype))
        self.wk = Parameter(tape.uniform_fan_in(rng, (d, d), dtype))
        self.wv = Parameter(tape.uniform_fan_in(rng, (d, d), dtype))
        self.wr = Parameter(tape.uniform_fan_in(rng, (d, d), dtype))
        self.wo = Parameter(tape.uniform_fan_in(rng, (d, d), dtype))
        h, dh = cfg.num_heads, d // cfg.num_heads
        self.u = Parameter(np.zeros((h, dh), dtype=dtype))
        self.v = Parameter(np.zeros((h, dh), dtype=dtype))
        self.gain = Parameter(np.ones(d, dtype=dtype))
        self.bias = Parameter(np.zeros(d, dtype=dtype))

    def _split_heads(self, t, steps):
        # [S, B, D] -> [B, H, S, dh]
        h, dh = self.cfg.num_heads, self.cfg.embed_dim // self.cfg.num_heads
        b = t.shape[1]
        return tape.transpose(tape.reshape(t, (steps, b, h, dh)), (1, 2, 0, 3))

    def attend(self, x, memory=None, attn_length=None):
        """Attention context after the output projection, before dropout and
        the residual path. Returns (context [T,B,D], new_memory)."""
        x = as_tensor(x)
        _check_sequence(x.data)
        T, B, D = x.shape
        if D != self.cfg.embed_dim:
            raise ShapeError(f"feature dim {D} != embed_dim {self.cfg.embed_dim}")
        attn_length = self.cfg.attn_length if attn_length is None else attn_length
        if attn_length < 1:
            raise ConfigError(f"attn_length must be >= 1, got {attn_length}")

        if memory is None:
            memory = AttentionMemory.empty(B, D, x.dtype)
        elif not isinstance(memory, AttentionMemory):
            memory = AttentionMemory(np.asarray(memory, dtype=x.dtype))
        if memory.length and memory.data.shape[1:] != (B, D):
            raise ShapeError(
                f"memory shape {memory.data.shape} incompatible with input {x.shape}")

        M = memory.length
        S = M + T
        h, dh = self.cfg.num_heads, D // self.cfg.num_heads
        scale = 1.0 / np.sqrt(dh)

        full = tape.concat([Tensor(memory.data), x], axis=0) if M else x
        q = self._split_heads(tape.matmul(x, self.wq), T)        # [B,H,T,dh]
        k = self._split_heads(tape.matmul(full, self.wk), S)     # [B,H,S,dh]
        v = self._split_heads(tape.matmul(full, self.wv), S)

        # distances d = (M + t) - j, usable range [0, attn_length)
        L = min(attn_length, S)
        codes = relative_encoding(L, D, self.dtype)
        r = tape.matmul(Tensor(codes), self.wr)                  # [L, D]
        r = tape.transpose(tape.reshape(r, (L, h, dh)), (1, 2, 0))  # [H,dh,L]

        qu = tape.add(q, tape.reshape(self.u, (h, 1, dh)))
        qv = tape.add(q, tape.reshape(self.v, (h, 1, dh)))
        content = tape.matmul(qu, tape.transpose(k, (0, 1, 3, 2)))  # [B,H,T,S]
        position = tape.matmul(qv, r)                               # [B,H,T,L]

        t_idx = np.arange(T)[:, None]
        j_idx = np.arange(S)[None, :]
        dist = M + t_idx - j_idx                                    # [T,S]
        gather = np.clip(dist, 0, L - 1)
        position = tape.take_along_last(position, gather[None, None, :, :])

        window = (dist >= 0) & (dist < attn_length)                 # [T,S]
        if M:
            usable = np.concatenate(
                [memory.valid, np.ones((T, B), dtype=bool)], axis=0)  # [S,B]
        else:
            usable = np.ones((S, B), dtype=bool)
        allowed = window[None, :, :] & usable.T[:, None, :]         # [B,T,S]
        mask = np.where(allowed, 0.0, MASK_VALUE).astype(self.dtype)

        scores = tape.add(tape.mul(tape.add(content, position),
                                   np.asarray(scale, dtype=self.dtype)),
                          Tensor(mask[:, None, :, :]))
        weights = tape.softmax(scores, axis=-1)
        mixed = tape.matmul(weights, v)                             # [B,H,T,dh]
        mixed = tape.reshape(tape.transpose(mixed, (2, 0, 1, 3)), (T, B, D))
        context = tape.matmul(mixed, self.wo)

        if M:
            hist_data = np.concatenate([memory.data, x.data], axis=0)
            hist_valid = usable
        else:
            hist_data = x.data
            hist_valid = usable
        keep = min(attn_length - 1, S)
        if keep > 0:
            new_memory = AttentionMemory(hist_data[-keep:].copy(), hist_valid[-keep:].copy())
        else:
            new_memory = AttentionMemory.empty(B, D, x.dtype)
        return context, new_memory

    def __call__(self, x, memory=None, training=False, rng=None, attn_length=None):
        x = as_tensor(x)
        context, new_memory = self.attend(x, memory, attn_length=attn_length)
        context = dropout(context, self.cfg.dropout_rate, training, rng)
        y = layer_norm(tape.add(x, context), self.gain, self.bias)
        return y, new_memory


def relative_attention(x, memory, block: RelativeAttention, training=False, rng=None,
                       attn_length=None):
    return block(x, memory, training=training, rng=rng, attn_length=attn_length)


# ---------------------------------------------------------------------------
# quasi-recurrent layer


def qrnn_gates(x, cfg: QRNNConfig, weights, weight_masks=None):
    """Gate pre-activations through their nonlinearities.

    ``weights`` is (wz, wf, wo, bz, bf, bo) with each w shaped
    [conv_width, D, D]. With conv_width 2, step t mixes (x_{t-1}, x_t) and the
    t = 0 predecessor is zeros; with width 1 only x_t enters. ``weight_masks``
    (DropConnect) multiply the gate matrices elementwise before use.
    """
    x = as_tensor(x)
    _check_sequence(x.data)
    wz, wf, wo, bz, bf, bo = weights
    if cfg.conv_width not in (1, 2):
        raise ConfigError(f"conv_width must be 1 or 2, got {cfg.conv_width}")

    if weight_masks is not None:
        mz, mf, mo = weight_masks
        wz = tape.mul(wz, Tensor(np.asarray(mz, dtype=x.dtype)))
        wf = tape.mul(wf, Tensor(np.asarray(mf, dtype=x.dtype)))
        wo = tape.mul(wo, Tensor(np.asarray(mo, dtype=x.dtype)))

    def pre(w, b):
        # last tap is the current step; width 2 adds a zero-padded shift
        out = tape.add(tape.matmul(x, w[-1]), b)
        if cfg.conv_width == 2:
            zeros = Tensor(np.zeros((1,) + x.shape[1:], dtype=x.dtype))
            shifted = tape.concat([zeros, x[:-1]], axis=0)
            out = tape.add(out, tape.matmul(shifted, w[0]))
        return out

    z = tape.tanh(pre(wz, bz))
    f = tape.sigmoid(pre(wf, bf))
    o = tape.sigmoid(pre(wo, bo))
    return z, f, o


def linear_scan(a, b):
    """Inclusive scan of y_t = a_t * y_{t-1} + b_t over axis 0, y_0 = b_0.

    Recursive doubling: each pass folds in a window twice as wide, so the
    whole sequence resolves in ceil(log2 T) vectorized passes.
    """
    y = b.copy()
    coef = a.copy()
    t = y.shape[0]
    d = 1
    while d < t:
        y[d:] += coef[d:] * y[:-d]
        coef[d:] = coef[d:] * coef[:-d]
        d *= 2
    return y


def fo_pool(z, f, o, c0=None):
    """Forget-gate pooling: c_t = f_t·c_{t-1} + (1-f_t)·z_t, h_t = o_t·c_t.

    ``c0`` is the carried start cell (a ``QRNNState``, array, or None for
    zeros); it is a constant with respect to the tape. Returns the full
    hidden sequence and the final cell as a fresh ``QRNNState``.
    """
    z, f, o = as_tensor(z), as_tensor(f), as_tensor(o)
    if not (z.shape == f.shape == o.shape):
        raise ShapeError(f"z/f/o shapes differ: {z.shape} {f.shape} {o.shape}")
    _check_sequence(z.data)
    T, B, D = z.shape
    if isinstance(c0, QRNNState):
        start = c0.cell.astype(z.dtype, copy=False)
    elif c0 is None:
        start = np.zeros((B, D), dtype=z.dtype)
    else:
        start = np.asarray(c0, dtype=z.dtype)
    if start.shape != (B, D):
        raise ShapeError(f"c0 shape {start.shape} != {(B, D)}")

    fd, zd, od = f.data, z.data, o.data
    b = (1.0 - fd) * zd
    b[0] += fd[0] * start
    c = linear_scan(fd, b)
    h = od * c

    def backward(gh):
        go = gh * c
        u = gh * od
        # reverse recurrence dc_t = u_t + f_{t+1} * dc_{t+1} as a forward scan
        ur = u[::-1]
        coef = np.concatenate([np.zeros((1, B, D), dtype=fd.dtype), fd[::-1][:-1]], axis=0)
        dc = linear_scan(coef, ur)[::-1]
        c_prev = np.concatenate([start[None], c[:-1]], axis=0)
        gz = dc * (1.0 - fd)
        gf = dc * (c_prev - zd)
        return ((z, gz), (f, gf), (o, go))

    hidden = _node(h, (z, f, o), backward)
    return hidden, QRNNState(c[-1].copy(), fresh=False)


class QRNN(Module):
    """Gates, DropConnect, and fo-pooling in one layer."""

    def __init__(self, cfg: QRNNConfig, rng, dtype=np.float32):
        d, w = cfg.embed_dim, cfg.conv_width
        self.cfg = cfg
        self.wz = Parameter(tape.uniform_fan_in(rng, (w, d, d), dtype))
        self.wf = Parameter(tape.uniform_fan_in(rng, (w, d, d), dtype))
        self.wo = Parameter(tape.uniform_fan_in(rng, (w, d, d), dtype))
        self.bz = Parameter(np.zeros(d, dtype=dtype))
        self.bf = Parameter(np.zeros(d, dtype=dtype))
        self.bo = Parameter(np.zeros(d, dtype=dtype))

    def __call__(self, x, state=None, training=False, rng=None):
        x = as_tensor(x)
        if x.shape[-1] != self.cfg.embed_dim:
            raise ShapeError(f"feature dim {x.shape[-1]} != embed_dim {self.cfg.embed_dim}")
        masks = None
        p = self.cfg.weight_drop_rate
        if training and p > 0.0:
            if rng is None:
                raise ConfigError("training-mode weight drop needs an explicit rng")
            masks = tuple(weight_drop_mask(w.shape, p, rng, x.dtype)
                          for w in (self.wz.data, self.wf.data, self.wo.data))
        z, f, o = qrnn_gates(x, self.cfg,
                             (self.wz, self.wf, self.wo, self.bz, self.bf, self.bo),
                             weight_masks=masks)
        if state is not None and not self.cfg.carry_state:
            state = None
        h, new_state = fo_pool(z, f, o, state)
        return h, new_state
