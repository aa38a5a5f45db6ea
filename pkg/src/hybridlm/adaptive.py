"""Embedding and softmax factorized over frequency-ordered vocabulary clusters.

Vocabulary ids below the first cutoff (the frequent words) get full-width
embeddings; each later cluster's width shrinks by a fixed division factor and
a per-cluster linear projection maps back up to the model width. The softmax
mirrors the layout: a head distribution over frequent words plus one synthetic
token per tail cluster, then a softmax within the chosen cluster. Sharing the
tables and projections between the two directions ties input and output
representations.
"""

from __future__ import annotations

import numpy as np

from . import tape
from .errors import ConfigError, ShapeError
from .tape import Module, Parameter, Tensor


def cluster_boundaries(vocab_size, cutoffs):
    """Cutoffs turned into [lo, hi) spans; over-long cutoffs clamp to vocab."""
    if vocab_size < 1:
        raise ConfigError(f"vocab_size must be >= 1, got {vocab_size}")
    edges = []
    for c in cutoffs or ():
        if edges and c <= edges[-1]:
            raise ConfigError(f"cutoffs must be strictly increasing, got {cutoffs}")
        if c < vocab_size:
            edges.append(int(c))
    edges.append(vocab_size)
    spans = []
    lo = 0
    for hi in edges:
        if hi > lo:
            spans.append((lo, hi))
        lo = hi
    return spans


def cluster_dims(embed_dim, n_clusters, div_factor):
    if div_factor < 1:
        raise ConfigError(f"div_factor must be >= 1, got {div_factor}")
    return [max(1, embed_dim // div_factor ** k) for k in range(n_clusters)]


class FlatEmbedding(Module):
    """Single full-width lookup table."""

    def __init__(self, vocab_size, embed_dim, rng, dtype=np.float32):
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.table = Parameter(tape.uniform_rows(rng, (vocab_size, embed_dim), dtype))

    def __call__(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ShapeError(f"token id out of range [0, {self.vocab_size})")
        return tape.embedding(self.table, ids)


class AdaptiveEmbedding(Module):
    """Per-cluster tables at shrinking widths, projected to the model width."""

    def __init__(self, vocab_size, embed_dim, cutoffs, div_factor, rng, dtype=np.float32):
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.spans = cluster_boundaries(vocab_size, cutoffs)
        self.dims = cluster_dims(embed_dim, len(self.spans), div_factor)
        self.tables = [Parameter(tape.uniform_rows(rng, (hi - lo, d), dtype))
                       for (lo, hi), d in zip(self.spans, self.dims)]
        self.projections = [Parameter(tape.uniform_fan_in(rng, (d, embed_dim), dtype))
                            for d in self.dims]

    def __call__(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ShapeError(f"token id out of range [0, {self.vocab_size})")
        out = None
        for (lo, hi), table, proj in zip(self.spans, self.tables, self.projections):
            inside = (ids >= lo) & (ids < hi)
            local = np.where(inside, ids - lo, 0)
            looked = tape.matmul(tape.embedding(table, local), proj)
            mask = inside.astype(table.dtype)[..., None]
            piece = tape.mul(looked, Tensor(mask))
            out = piece if out is None else tape.add(out, piece)
        return out


class FlatSoftmax(Module):
    """Full-vocab softmax head; ``weight`` may alias an embedding table."""

    def __init__(self, vocab_size, embed_dim, rng, dtype=np.float32, weight=None):
        self.vocab_size = vocab_size
        self.weight = weight if weight is not None else Parameter(
            tape.uniform_rows(rng, (vocab_size, embed_dim), dtype))
        self.bias = Parameter(np.zeros(vocab_size, dtype=dtype))

    def _logits(self, hidden):
        return tape.add(tape.matmul(hidden, tape.transpose(self.weight, (1, 0))), self.bias)

    def full_log_probs(self, hidden):
        return tape.log_softmax(self._logits(hidden), axis=-1)

    def log_prob(self, hidden, targets):
        lp = self.full_log_probs(hidden)
        gathered = tape.take_along_last(lp, np.asarray(targets)[..., None])
        return tape.reshape(gathered, np.asarray(targets).shape)


class AdaptiveSoftmax(Module):
    """Two-level softmax over the cluster layout of ``AdaptiveEmbedding``.

    The head distribution covers frequent words plus one synthetic entry per
    tail cluster; a tail word's log-probability adds its cluster's head entry
    and its within-cluster softmax. Passing ``tables``/``projections`` from an
    embedding shares storage (weight tying); otherwise the head owns fresh
    ones of the same shapes.
    """

    def __init__(self, vocab_size, embed_dim, cutoffs, div_factor, rng,
                 dtype=np.float32, tables=None, projections=None):
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.spans = cluster_boundaries(vocab_size, cutoffs)
        self.dims = cluster_dims(embed_dim, len(self.spans), div_factor)
        if tables is None:
            tables = [Parameter(tape.uniform_rows(rng, (hi - lo, d), dtype))
                      for (lo, hi), d in zip(self.spans, self.dims)]
            projections = [Parameter(tape.uniform_fan_in(rng, (d, embed_dim), dtype))
                           for d in self.dims]
        if len(tables) != len(self.spans):
            raise ConfigError("shared tables do not match the cluster layout")
        self.tables = list(tables)
        self.projections = list(projections)
        n_tail = len(self.spans) - 1
        self.cluster_weight = (Parameter(tape.uniform_fan_in(rng, (embed_dim, n_tail), dtype))
                               if n_tail else None)

    def _cluster_logits(self, hidden, k):
        # project hidden down to the cluster width, then score against rows
        proj = tape.matmul(hidden, tape.transpose(self.projections[k], (1, 0)))
        return tape.matmul(proj, tape.transpose(self.tables[k], (1, 0)))

    def _head_log_probs(self, hidden):
        head = self._cluster_logits(hidden, 0)
        if self.cluster_weight is not None:
            head = tape.concat([head, tape.matmul(hidden, self.cluster_weight)], axis=-1)
        return tape.log_softmax(head, axis=-1)

    def full_log_probs(self, hidden):
        """[..., vocab] log-probabilities; exact flat softmax when 1 cluster."""
        head_lp = self._head_log_probs(hidden)
        c0 = self.spans[0][1]
        pieces = [head_lp[..., :c0] if len(self.spans) > 1 else head_lp]
        for k in range(1, len(self.spans)):
            tail_lp = tape.log_softmax(self._cluster_logits(hidden, k), axis=-1)
            gate = head_lp[..., c0 + k - 1 : c0 + k]
            pieces.append(tape.add(gate, tail_lp))
        return tape.concat(pieces, axis=-1) if len(pieces) > 1 else pieces[0]

    def log_prob(self, hidden, targets):
        """Target log-probabilities, shaped like ``targets``."""
        targets = np.asarray(targets)
        head_lp = self._head_log_probs(hidden)
        c0 = self.spans[0][1]
        in_head = targets < c0
        gathered = tape.reshape(
            tape.take_along_last(head_lp, np.where(in_head, targets, 0)[..., None]),
            targets.shape)
        out = tape.mul(gathered, Tensor(in_head.astype(head_lp.dtype)))
        for k in range(1, len(self.spans)):
            lo, hi = self.spans[k]
            inside = (targets >= lo) & (targets < hi)
            tail_lp = tape.log_softmax(self._cluster_logits(hidden, k), axis=-1)
            local = np.where(inside, targets - lo, 0)
            word = tape.reshape(tape.take_along_last(tail_lp, local[..., None]),
                                targets.shape)
            gate = tape.reshape(
                tape.take_along_last(head_lp, np.full_like(targets, c0 + k - 1)[..., None]),
                targets.shape)
            piece = tape.mul(tape.add(word, gate), Tensor(inside.astype(head_lp.dtype)))
            out = tape.add(out, piece)
        return out
