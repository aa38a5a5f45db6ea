"""A tour of the four building blocks, one letter at a time.

Every architecture in this package is spelled with four letters:

    f   feed-forward "boom" block (expand, squash back down)
    a   multi-head attention with relative positions and carried memory
    q   quasi-recurrent layer (convolution gates, then a forget-gate scan)
    |   dropout applied to the whole hidden sequence

This script builds each block in isolation, pushes a small batch through,
and checks the properties the full model leans on: shape preservation,
causality, state handoff, and exact train/eval distinctions.
"""

import numpy as np

from hybridlm.blocks import (
    AttentionConfig,
    FeedForwardConfig,
    QRNNConfig,
    FeedForward,
    QRNN,
    RelativeAttention,
    fo_pool,
    rnn_dropout,
)
from hybridlm.tape import as_tensor

T, B, D = 12, 3, 16
rng = np.random.default_rng(0)
x = rng.normal(size=(T, B, D)).astype(np.float64)

print("input sequence:", x.shape, "(time, batch, channels)")

# f: the boom block expands to a wide hidden layer and squashes back.
print("\n-- f: feed-forward boom --")
boom = FeedForward(FeedForwardConfig(embed_dim=D, boom_dim=4 * D), rng, np.float64)
y = boom(as_tensor(x))
print("output:", y.data.shape, "(same shape; residual-friendly)")
print("position 3 depends only on position 3:")
x2 = x.copy()
x2[7] += 100.0  # poke a different position
y2 = boom(as_tensor(x2))
print("  change at t=7 leaves t=3 untouched:",
      np.array_equal(y.data[3], y2.data[3]))

# a: attention mixes positions, but only ever looks backwards.
print("\n-- a: relative multi-head attention --")
attn = RelativeAttention(AttentionConfig(embed_dim=D, num_heads=4, attn_length=8),
                         rng, np.float64)
y, memory = attn(as_tensor(x), None)
print("output:", y.data.shape, " new memory:", memory.data.shape)
y2, _ = attn(as_tensor(x2), None)
print("poke at t=7 changes t>=7 only:",
      np.array_equal(y.data[:7], y2.data[:7]),
      "and", not np.allclose(y.data[7:], y2.data[7:]))

# The memory hands context across windows: feeding the second half with
# the first half's memory matches one long pass over the whole sequence.
whole, _ = attn(as_tensor(x), None)
first, carried = attn(as_tensor(x[:6]), None)
second, _ = attn(as_tensor(x[6:]), carried)
stitched = np.concatenate([first.data, second.data], axis=0)
print("windowed pass == one long pass:",
      np.allclose(stitched, whole.data, atol=1e-12))

# q: convolution gates feed a forget-gate scan with a tiny carried cell.
# The first q of a full model convolves each position with its predecessor
# (width 2, zero predecessor at window starts); deeper ones use width 1,
# where carrying the cell makes windowing exact.
print("\n-- q: quasi-recurrent layer --")
qrnn = QRNN(QRNNConfig(embed_dim=D, conv_width=1), rng, np.float64)
y, state = qrnn(as_tensor(x), None)
print("output:", y.data.shape, " carried cell:", state.cell.shape)
first, carried = qrnn(as_tensor(x[:5]), None)
second, _ = qrnn(as_tensor(x[5:]), carried)
stitched = np.concatenate([first.data, second.data], axis=0)
print("stateful split == one pass:", np.allclose(stitched, y.data, atol=1e-12))

# The scan at its core: c_t = f_t * c_{t-1} + (1 - f_t) * z_t. With the
# forget gate pinned to zero the cell just copies the input.
z = as_tensor(rng.normal(size=(4, 2, 3)))
f = as_tensor(np.zeros((4, 2, 3)))
o = as_tensor(np.ones((4, 2, 3)))
c, _ = fo_pool(z, f, o)
print("fo-pool with f=0 copies its input:", np.allclose(c.data, z.data))

# |: one dropout mask per sequence, not per time step, so a dropped
# channel stays dropped for the whole window.
print("\n-- |: recurrent dropout --")
ones = as_tensor(np.ones((T, B, D)))
dropped = rnn_dropout(ones, 0.5, training=True, rng=np.random.default_rng(7))
mask_t0 = dropped.data[0]
print("mask constant across time:",
      all(np.array_equal(dropped.data[t], mask_t0) for t in range(T)))
print("kept channels rescaled to", dropped.data.max(), "(inverted scaling)")
print("evaluation mode is the identity:",
      np.array_equal(rnn_dropout(ones, 0.5, training=False, rng=None).data,
                     ones.data))
