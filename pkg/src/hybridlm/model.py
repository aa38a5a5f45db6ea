"""Model assembly: embedding, sequential block network, softmax head.

``build_model`` turns a parsed architecture plus a ``ModelConfig`` into a
``LanguageModel``. Layer kinds map from tokens:

* leading ``|`` tokens (before any computation block) drop embedding lanes,
* interior ``|`` tokens drop hidden lanes at the standard rate,
* ``q`` directly followed by ``f`` (ignoring ``|``) fuses into one residual
  group — recurrence, lane dropout, boom projection — wrapped by a single
  residual connection and layer-norm,
* bare ``q`` runs without residual or norm,
* ``a`` and standalone ``f`` are the attention and feed-forward blocks.

The first recurrent layer in the network looks back one step through its
gate convolution (width 2); all later ones see only the current step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tape
from .adaptive import AdaptiveEmbedding, AdaptiveSoftmax, FlatEmbedding, FlatSoftmax
from .arch import ArchitectureSpec, parse_architecture
from .blocks import (
    AttentionConfig,
    AttentionMemory,
    BoomCore,
    FeedForward,
    FeedForwardConfig,
    QRNN,
    QRNNConfig,
    QRNNState,
    RelativeAttention,
    layer_norm,
    rnn_dropout,
)
from .errors import ConfigError, ShapeError
from .tape import Module, Parameter, Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 512
    boom_dim: int = 2048
    num_heads: int = 8
    adaptive_cutoffs: tuple = ()
    adaptive_div_factor: int = 4
    dropout: float = 0.0
    embedding_rnn_dropout: float = 0.0
    rnn_dropout: float = 0.0
    rnn_weight_dropout: float = 0.0
    bptt_len: int = 512
    train_attn_len: int = 768
    eval_attn_len: int = 2048
    tie_weights: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.bptt_len < 1 or self.train_attn_len < 1 or self.eval_attn_len < 1:
            raise ConfigError("bptt_len and attention lengths must be >= 1")
        cuts = tuple(self.adaptive_cutoffs)
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ConfigError(f"adaptive_cutoffs must be strictly increasing, got {cuts}")
        object.__setattr__(self, "adaptive_cutoffs", cuts)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def use_adaptive(self):
        """Clusters only help when the vocab extends past the first cutoff."""
        return bool(self.adaptive_cutoffs) and self.vocab_size > self.adaptive_cutoffs[0]


@dataclass
class ModelState:
    """Per-layer carried state, aligned with the model's layer list.

    Entries are ``QRNNState``, ``AttentionMemory``, or None; all are plain
    arrays, already cut off from any autodiff graph.
    """

    entries: list

    def reset_columns(self, flags):
        return ModelState([e.reset_columns(flags) if e is not None else None
                           for e in self.entries])


class DropLayer(Module):
    """A standalone ``|``: whole-lane dropout on the hidden sequence."""

    def __init__(self, rate):
        self.rate = rate

    def __call__(self, x, training=False, rng=None):
        return rnn_dropout(x, self.rate, training, rng)


class RecurrentBoom(Module):
    """A fused q..f residual group: one residual and norm around the pair."""

    def __init__(self, qrnn_cfg, ff_cfg, mid_drop_rate, rng, dtype=np.float32):
        self.qrnn = QRNN(qrnn_cfg, rng, dtype)
        self.mid_drop_rate = mid_drop_rate
        self.boom = BoomCore(ff_cfg, rng, dtype)
        self.gain = Parameter(np.ones(ff_cfg.embed_dim, dtype=dtype))
        self.bias = Parameter(np.zeros(ff_cfg.embed_dim, dtype=dtype))

    def __call__(self, x, state=None, training=False, rng=None):
        h, new_state = self.qrnn(x, state, training=training, rng=rng)
        if self.mid_drop_rate:
            h = rnn_dropout(h, self.mid_drop_rate, training, rng)
        out = self.boom(h, training=training, rng=rng)
        return layer_norm(tape.add(x, out), self.gain, self.bias), new_state


class LanguageModel(Module):
    def __init__(self, spec: ArchitectureSpec, cfg: ModelConfig, rng):
        dtype = cfg.np_dtype
        self.spec = spec
        self.cfg = cfg

        if cfg.use_adaptive:
            self.embedding = AdaptiveEmbedding(
                cfg.vocab_size, cfg.embed_dim, cfg.adaptive_cutoffs,
                cfg.adaptive_div_factor, rng, dtype)
        else:
            self.embedding = FlatEmbedding(cfg.vocab_size, cfg.embed_dim, rng, dtype)

        ff_cfg = FeedForwardConfig(cfg.embed_dim, cfg.boom_dim, cfg.dropout)
        attn_cfg = AttentionConfig(cfg.embed_dim, cfg.num_heads,
                                   cfg.train_attn_len, cfg.dropout)

        self.layers = []
        group_end = dict(spec.residual_groups)
        tokens = spec.tokens
        seen_block = False  # flips after the first a/q/f
        seen_q = False
        i = 0
        while i < len(tokens):
            tok = tokens[i]
            if tok == "|":
                rate = cfg.rnn_dropout if seen_block else cfg.embedding_rnn_dropout
                self.layers.append(DropLayer(rate))
                i += 1
                continue
            seen_block = True
            if tok == "a":
                self.layers.append(RelativeAttention(attn_cfg, rng, dtype))
                i += 1
            elif tok == "f":
                self.layers.append(FeedForward(ff_cfg, rng, dtype))
                i += 1
            elif tok == "q":
                width = 1 if seen_q else 2
                seen_q = True
                q_cfg = QRNNConfig(cfg.embed_dim, conv_width=width,
                                   weight_drop_rate=cfg.rnn_weight_dropout)
                if i in group_end:
                    end = group_end[i]
                    mid = cfg.rnn_dropout if end > i + 1 else 0.0
                    self.layers.append(RecurrentBoom(q_cfg, ff_cfg, mid, rng, dtype))
                    i = end + 1
                else:
                    self.layers.append(QRNN(q_cfg, rng, dtype))
                    i += 1
            else:
                raise ConfigError(f"unknown token {tok!r}")

        if cfg.use_adaptive:
            shared = (self.embedding.tables, self.embedding.projections) \
                if cfg.tie_weights else (None, None)
            self.head = AdaptiveSoftmax(
                cfg.vocab_size, cfg.embed_dim, cfg.adaptive_cutoffs,
                cfg.adaptive_div_factor, rng, dtype,
                tables=shared[0], projections=shared[1])
        else:
            weight = self.embedding.table if cfg.tie_weights else None
            self.head = FlatSoftmax(cfg.vocab_size, cfg.embed_dim, rng, dtype,
                                    weight=weight)

    # ------------------------------------------------------------------
    def initial_state(self, batch_size):
        dtype = self.cfg.np_dtype
        entries = []
        for layer in self.layers:
            if isinstance(layer, (QRNN, RecurrentBoom)):
                entries.append(QRNNState.zeros(batch_size, self.cfg.embed_dim, dtype))
            elif isinstance(layer, RelativeAttention):
                entries.append(AttentionMemory.empty(batch_size, self.cfg.embed_dim, dtype))
            else:
                entries.append(None)
        return ModelState(entries)

    def forward(self, tokens, state=None, targets=None, training=False, rng=None,
                attn_length=None, mem_len=None):
        """Next-token log-probabilities and the advanced carried state.

        With ``targets`` [T,B], returns their log-probabilities [T,B];
        without, the full [T,B,vocab] matrix. ``attn_length`` widens or
        narrows every attention window (evaluation uses a longer one than
        training); ``mem_len`` caps how much history the new state retains.
        """
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ShapeError(f"expected [T, B] token ids, got shape {tokens.shape}")
        if state is None:
            state = self.initial_state(tokens.shape[1])
        if len(state.entries) != len(self.layers):
            raise ShapeError("carried state does not match this model's layers")

        x = self.embedding(tokens)
        new_entries = []
        for layer, carried in zip(self.layers, state.entries):
            if isinstance(layer, (QRNN, RecurrentBoom)):
                x, entry = layer(x, carried, training=training, rng=rng)
            elif isinstance(layer, RelativeAttention):
                x, entry = layer(x, carried, training=training, rng=rng,
                                 attn_length=attn_length)
                if mem_len is not None:
                    entry = entry.trim(mem_len)
            else:
                x = layer(x, training=training, rng=rng)
                entry = None
            new_entries.append(entry)

        if targets is None:
            out = self.head.full_log_probs(x)
        else:
            targets = np.asarray(targets)
            if targets.shape != tokens.shape:
                raise ShapeError(f"targets shape {targets.shape} != tokens {tokens.shape}")
            if targets.size and (targets.min() < 0 or targets.max() >= self.cfg.vocab_size):
                raise ShapeError(f"target id out of range [0, {self.cfg.vocab_size})")
            out = self.head.log_prob(x, targets)
        return out, ModelState(new_entries)

    __call__ = forward


def build_model(spec, cfg: ModelConfig, seed_or_rng) -> LanguageModel:
    """Assemble a runnable model; a fixed seed gives bit-identical parameters."""
    if isinstance(spec, str):
        spec = parse_architecture(spec)
    rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
           else np.random.default_rng(seed_or_rng))
    return LanguageModel(spec, cfg, rng)


def count_params(model: LanguageModel, include_embeddings=True) -> int:
    """Scalar parameter count; shared storage counts once.

    With ``include_embeddings`` False, the embedding and the whole output
    head (tables, projections, biases) are left out, counting only the
    sequential network between them.
    """
    named = model.named_parameters()
    seen = set()
    total = 0
    for name, p in named.items():
        if not include_embeddings and (name.startswith("embedding.")
                                       or name.startswith("head.")):
            continue
        if id(p) in seen:
            continue
        seen.add(id(p))
        total += p.data.size
    return total
