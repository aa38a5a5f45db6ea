"""Corpus-level evaluation: BPC, perplexity, and bits per UTF-8 byte.

All three metrics share one numerator, the total negative log-likelihood of
the scored targets in nats; they differ only in the denominator and base.
BPC divides by token count and converts to bits, perplexity exponentiates
the per-token mean, and bits-per-byte divides by the encoded byte length of
the underlying text so differently tokenized runs stay comparable.

Evaluation walks the corpus in fixed windows with carried recurrent state
and attention memory, advancing a full window at a time. The attention
length may exceed the one used in training. Continuous corpora are scored
exhaustively: every token except each stream's first appears as a target
exactly once, with a ragged final window rather than a dropped remainder.
Article corpora score every within-article target under their loss masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import make_article_batches
from .errors import ConfigError

LN2 = math.log(2.0)


def _total_nll(log_probs):
    arr = np.asarray(log_probs, dtype=np.float64)
    if np.any(arr > 1e-9):
        raise ConfigError("log-probabilities must be <= 0")
    return -float(arr.sum())


def bpc(log_probs, n_tokens):
    """Mean negative log2-probability of the targets, in bits."""
    if n_tokens <= 0:
        raise ConfigError("bpc needs a positive token count")
    return _total_nll(log_probs) / (LN2 * n_tokens)


def perplexity(log_probs, n_tokens):
    """Exponentiated mean negative natural-log probability."""
    if n_tokens <= 0:
        raise ConfigError("perplexity needs a positive token count")
    return math.exp(_total_nll(log_probs) / n_tokens)


def bits_per_byte(total_nll_nats, utf8_bytes):
    """Total NLL in bits divided by the text's UTF-8 byte length."""
    if utf8_bytes <= 0:
        raise ConfigError("bits_per_byte needs a positive byte count")
    return total_nll_nats / (LN2 * utf8_bytes)


@dataclass(frozen=True)
class EvalReport:
    """Scored totals plus the three derived metrics."""

    total_nll_nats: float
    token_count: int
    utf8_byte_count: int
    bpc: float
    ppl: float
    bits_per_byte: float
    attn_length: int

    CSV_HEADER = "total_nll_nats,token_count,utf8_byte_count,bpc,ppl,bits_per_byte,attn_length"

    @classmethod
    def from_totals(cls, total_nll_nats, token_count, utf8_byte_count, attn_length):
        if token_count <= 0:
            raise ConfigError("report needs a positive token count")
        mean = total_nll_nats / token_count
        return cls(
            total_nll_nats=float(total_nll_nats),
            token_count=int(token_count),
            utf8_byte_count=int(utf8_byte_count),
            bpc=mean / LN2,
            ppl=math.exp(mean),
            bits_per_byte=(total_nll_nats / (LN2 * utf8_byte_count)
                           if utf8_byte_count > 0 else float("nan")),
            attn_length=int(attn_length),
        )

    def to_csv_row(self):
        return (f"{self.total_nll_nats:.10g},{self.token_count},"
                f"{self.utf8_byte_count},{self.bpc:.10g},{self.ppl:.10g},"
                f"{self.bits_per_byte:.10g},{self.attn_length}")

    def summary(self):
        return (f"tokens {self.token_count}  bpc {self.bpc:.4f}  "
                f"ppl {self.ppl:.4f}  bits/byte {self.bits_per_byte:.4f}  "
                f"attn {self.attn_length}")


def _pad_streams(ids, batch_size):
    """Cut ids into equal contiguous streams, padding only the tail."""
    n = len(ids)
    stream_len = math.ceil(n / batch_size)
    padded = np.zeros(stream_len * batch_size, dtype=ids.dtype)
    padded[:n] = ids
    return padded.reshape(batch_size, stream_len), stream_len


def _evaluate_streams(model, corpus, attn_length, batch_size, bptt_len,
                      collect):
    ids = corpus.ids
    if len(ids) < batch_size + 1:
        raise ConfigError(
            f"corpus of {len(ids)} tokens cannot fill {batch_size} streams")
    streams, stream_len = _pad_streams(ids, batch_size)
    state = model.initial_state(batch_size)
    mem_len = max(0, attn_length - 1)

    total = 0.0
    count = 0
    pieces = []
    for lo in range(0, stream_len - 1, bptt_len):
        hi = min(lo + bptt_len, stream_len - 1)
        inputs = streams[:, lo:hi].T
        targets = streams[:, lo + 1 : hi + 1].T
        # a target is real when its global index lands inside the corpus
        t_idx = np.arange(lo + 1, hi + 1)[:, None]
        global_idx = np.arange(batch_size)[None, :] * stream_len + t_idx
        mask = global_idx < len(ids)

        log_probs, state = model.forward(
            inputs, state, targets=targets, training=False,
            attn_length=attn_length, mem_len=mem_len)
        vals = log_probs.data
        total += -float(vals[mask].sum())
        count += int(mask.sum())
        if collect:
            for b in range(batch_size):
                pieces.append((b, lo, vals[:, b][mask[:, b]]))

    token_nll = None
    if collect:
        # stream-major order reproduces corpus order for a single stream
        pieces.sort(key=lambda p: (p[0], p[1]))
        token_nll = -np.concatenate([p[2] for p in pieces]) if pieces else np.empty(0)
    return total, count, token_nll


def _evaluate_articles(model, corpus, attn_length, batch_size, bptt_len,
                       collect):
    state = model.initial_state(batch_size)
    mem_len = max(0, attn_length - 1)
    total = 0.0
    count = 0
    pieces = []
    for batch in make_article_batches(corpus, batch_size, bptt_len):
        if batch.stream_reset.any():
            state = state.reset_columns(batch.stream_reset)
        log_probs, state = model.forward(
            batch.inputs, state, targets=batch.targets, training=False,
            attn_length=attn_length, mem_len=mem_len)
        mask = batch.loss_mask > 0
        total += -float(log_probs.data[mask].sum())
        count += int(mask.sum())
        if collect:
            pieces.append(-log_probs.data.T[mask.T])
    token_nll = np.concatenate(pieces) if collect and pieces else (
        np.empty(0) if collect else None)
    return total, count, token_nll


def evaluate(model, corpus, eval_attn_len=None, batch_size=1, bptt_len=None,
             collect_token_nll=False):
    """Score a whole corpus; returns an EvalReport.

    Pass ``collect_token_nll=True`` to also receive the per-target negative
    log-likelihoods as a flat array, one entry per scored token, for offline
    significance analysis; the return value becomes (report, array).
    """
    cfg = model.cfg
    attn = eval_attn_len if eval_attn_len is not None else cfg.eval_attn_len
    window = bptt_len if bptt_len is not None else cfg.bptt_len
    if attn < 1 or window < 1 or batch_size < 1:
        raise ConfigError("attention length, window, and batch size must be positive")

    if corpus.article_starts:
        total, count, token_nll = _evaluate_articles(
            model, corpus, attn, batch_size, window, collect_token_nll)
    else:
        total, count, token_nll = _evaluate_streams(
            model, corpus, attn, batch_size, window, collect_token_nll)
    if count == 0:
        raise ConfigError("corpus yields no scoreable targets")

    report = EvalReport.from_totals(total, count, corpus.utf8_bytes, attn)
    if collect_token_nll:
        return report, token_nll
    return report
