"""AdamW training with a one-cycle schedule and gradient accumulation.

The loop walks continuous stream batches (or article batches for word
corpora) with recurrent state and attention memory carried between windows
gradient-detached. One effective batch may be split column-wise into
micro-batches that accumulate gradients; the optimizer then takes exactly
one step per effective batch and the learning rate is frozen across the
micro-steps. Decayed weights follow the decoupled convention: the decay
term multiplies the parameter directly and never enters the moments.

Determinism is the default. Every dropout draw comes from a generator
seeded by (master seed, step, micro index), so an interrupted run resumed
from a checkpoint replays the identical sequence of batches, masks, and
updates, and its metric log continues the uninterrupted one bit for bit.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import AttentionMemory, QRNNState
from .checkpoint import (
    apply_parameters,
    load_arrays,
    pack_model_state,
    pack_parameters,
    save_arrays,
    unpack_model_state,
)
from .data import (
    StreamBatch,
    article_batch_count,
    make_article_batches,
    make_stream_batches,
    stream_batch_count,
)
from .errors import ConfigError, NumericalError
from .evaluation import LN2, evaluate
from .model import ModelState
from .tape import tsum

METRICS_HEADER = "step,lr,train_loss,train_bpc,valid_bpc,valid_ppl,tokens_per_sec"


@dataclass(frozen=True)
class OptimizerConfig:
    """AdamW plus schedule endpoints and the global-norm gradient clip."""

    peak_lr: float
    weight_decay: float = 0.0
    start_lr: float = 1e-7
    final_lr: float = 5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip: float = 0.25  # 0 disables

    def __post_init__(self):
        if not 0 < self.start_lr < self.peak_lr:
            raise ConfigError(
                f"need 0 < start_lr < peak_lr, got {self.start_lr} vs {self.peak_lr}")
        if not self.final_lr < self.peak_lr:
            raise ConfigError("final_lr must stay below peak_lr")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ConfigError(f"{name} must lie in [0, 1), got {b}")
        if self.epsilon <= 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("epsilon must be positive; decay and clip non-negative")


def one_cycle_lr(step, total_steps, start_lr, peak_lr, final_lr):
    """Cosine rise to the peak over the first third, cosine fall after.

    Both half-cycles use lr = b + (a - b) * (1 + cos(pi * u)) / 2 with u
    running 0 to 1, so the endpoints are hit exactly: start at step 0, peak
    at floor(total/3), final at total.
    """
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside schedule range [0, {total_steps}]")
    t3 = total_steps // 3
    if step <= t3 and t3 > 0:
        a, b = start_lr, peak_lr
        u = step / t3
    else:
        a, b = peak_lr, final_lr
        span = total_steps - t3
        u = (step - t3) / span if span > 0 else 1.0
    return b + (a - b) * (1 + math.cos(math.pi * u)) / 2


@dataclass
class TrainState:
    """Everything mutable the loop owns between effective batches."""

    step: int = 0
    adam_t: int = 0
    skipped: int = 0
    moments: dict = field(default_factory=dict)
    model_state: ModelState | None = None


def unique_named_parameters(model):
    """(name, param) pairs with shared storage listed once, first name wins."""
    out = []
    seen = set()
    for name, p in model.named_parameters().items():
        if id(p) not in seen:
            seen.add(id(p))
            out.append((name, p))
    return out


def init_moments(model):
    return {name: (np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in unique_named_parameters(model)}


def global_grad_norm(named):
    total = 0.0
    for _, p in named:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_gradients(named, max_norm):
    """Scale all gradients down to the given global norm; returns the norm."""
    norm = global_grad_norm(named)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, p in named:
            if p.grad is not None:
                p.grad *= scale
    return norm


def adamw_step(named, moments, lr, cfg, t):
    """One decoupled-decay Adam update; t is the 1-based application count.

    A non-finite gradient anywhere skips the whole update, leaving the
    parameters, moments, and counter untouched; the caller is told via the
    False return so it can report the skip.
    """
    for _, p in named:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return False
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in named:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m, v = moments[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay:
            # multiplicative form: zero-grad steps shrink by exactly 1 - lr*wd
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
    return True


# ---------------------------------------------------------------------------
# batch and state column splitting


def _slice_batch(batch, cols):
    return StreamBatch(
        batch.inputs[:, cols], batch.targets[:, cols], batch.stream_reset[cols],
        None if batch.loss_mask is None else batch.loss_mask[:, cols])


def _slice_state(state, cols):
    entries = []
    for e in state.entries:
        if isinstance(e, QRNNState):
            entries.append(QRNNState(e.cell[cols], fresh=e.fresh))
        elif isinstance(e, AttentionMemory):
            entries.append(AttentionMemory(e.data[:, cols], e.valid[:, cols]))
        else:
            entries.append(None)
    return ModelState(entries)


def _merge_states(states):
    merged = []
    for parts in zip(*(s.entries for s in states)):
        e = parts[0]
        if isinstance(e, QRNNState):
            merged.append(QRNNState(np.concatenate([p.cell for p in parts], axis=0),
                                    fresh=all(p.fresh for p in parts)))
        elif isinstance(e, AttentionMemory):
            merged.append(AttentionMemory(
                np.concatenate([p.data for p in parts], axis=1),
                np.concatenate([p.valid for p in parts], axis=1)))
        else:
            merged.append(None)
    return ModelState(merged)


def window_loss(model, batch, state, training=True, rng=None):
    """Summed next-token NLL over one window; returns (loss, count, state)."""
    if batch.stream_reset.any():
        state = state.reset_columns(batch.stream_reset)
    log_probs, new_state = model.forward(
        batch.inputs, state, targets=batch.targets, training=training, rng=rng)
    if batch.loss_mask is not None:
        loss = -tsum(log_probs * batch.loss_mask)
        count = int(batch.loss_mask.sum())
    else:
        loss = -tsum(log_probs)
        count = int(log_probs.data.size)
    return loss, count, new_state


def _micro_rng(seed, step, micro):
    return np.random.default_rng(np.random.SeedSequence([seed, step, micro]))


def accumulate_and_step(model, train_state, batch, opt_cfg, lr, *,
                        micro_batches=1, seed=0):
    """Run one effective batch as column-wise micro-batches and step once.

    Gradients from the micro-batches add up on the tape's leaves; dividing
    by the combined token count afterwards makes the result identical to a
    single pass over the full batch, so any micro split of the same columns
    produces the same update. Returns (mean loss in nats, step applied).
    """
    batch_width = batch.inputs.shape[1]
    if batch_width % micro_batches:
        raise ConfigError(
            f"micro_batches {micro_batches} must divide batch size {batch_width}")
    width = batch_width // micro_batches

    model.zero_grad()
    state = train_state.model_state
    loss_total = 0.0
    count_total = 0
    new_states = []
    for k in range(micro_batches):
        cols = slice(k * width, (k + 1) * width)
        rng = _micro_rng(seed, train_state.step, k)
        loss, count, new_state = window_loss(
            model, _slice_batch(batch, cols), _slice_state(state, cols),
            training=True, rng=rng)
        if not np.isfinite(loss.data):
            raise NumericalError(
                f"training loss became non-finite at step {train_state.step + 1}")
        loss.backward()
        loss_total += float(loss.data)
        count_total += count
        new_states.append(new_state)

    named = unique_named_parameters(model)
    for _, p in named:
        if p.grad is not None:
            p.grad /= count_total
    clip_gradients(named, opt_cfg.grad_clip)
    applied = adamw_step(named, train_state.moments, lr, opt_cfg,
                         train_state.adam_t + 1)
    train_state.model_state = _merge_states(new_states)
    train_state.step += 1
    if applied:
        train_state.adam_t += 1
    else:
        train_state.skipped += 1
    return loss_total / max(1, count_total), applied


# ---------------------------------------------------------------------------
# the loop


@dataclass(frozen=True)
class TrainConfig:
    """Loop shape: batching, cadence, and determinism knobs."""

    optimizer: OptimizerConfig
    batch_size: int = 64
    bptt_len: int = 512
    micro_batches: int = 1
    seed: int = 0
    log_every: int = 1
    val_every: int = 0  # 0 disables periodic validation
    val_batch_size: int = 1
    val_attn_len: int | None = None
    checkpoint_every: int = 0  # 0 means only at the end
    out_dir: str | None = None
    deterministic: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.bptt_len < 1:
            raise ConfigError("batch_size and bptt_len must be positive")
        if self.micro_batches < 1 or self.batch_size % self.micro_batches:
            raise ConfigError(
                f"micro_batches {self.micro_batches} must divide batch size "
                f"{self.batch_size}")
        if self.log_every < 1 or self.val_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("bad logging or checkpoint cadence")


@dataclass
class TrainResult:
    steps_completed: int
    log_rows: list
    checkpoint_path: str | None
    train_state: TrainState
    final_valid_bpc: float | None = None


def _window_source(corpus, batch_size, bptt_len):
    """A replayable per-epoch batch generator plus its length."""
    if corpus.article_starts:
        count = article_batch_count(corpus, batch_size, bptt_len)
        maker = lambda: make_article_batches(corpus, batch_size, bptt_len)
    else:
        count = stream_batch_count(len(corpus), batch_size, bptt_len)
        maker = lambda: make_stream_batches(corpus, batch_size, bptt_len)
    if count == 0:
        raise ConfigError("corpus too small for a single training window")
    return maker, count


def save_training_checkpoint(path, model, train_state, seed, extra_meta=None):
    arrays, aliases = pack_parameters(model)
    for name, (m, v) in train_state.moments.items():
        arrays[f"opt/{name}/m"] = m
        arrays[f"opt/{name}/v"] = v
    if train_state.model_state is not None:
        arrays.update(pack_model_state(train_state.model_state))
    meta = {"step": train_state.step, "adam_t": train_state.adam_t,
            "skipped": train_state.skipped, "seed": seed, "aliases": aliases}
    if extra_meta:
        meta.update(extra_meta)
    save_arrays(path, arrays, meta)


def load_training_checkpoint(path, model):
    """Restore parameters and return the TrainState stored at ``path``."""
    meta, arrays = load_arrays(path)
    apply_parameters(model, arrays, meta.get("aliases"))
    state = TrainState(step=meta["step"], adam_t=meta["adam_t"],
                       skipped=meta.get("skipped", 0))
    state.moments = {}
    for name, p in unique_named_parameters(model):
        m = arrays.get(f"opt/{name}/m")
        v = arrays.get(f"opt/{name}/v")
        if m is None or v is None:
            raise ConfigError(f"checkpoint lacks optimizer moments for {name}")
        state.moments[name] = (m, v)
    if any(k.startswith("state/") for k in arrays):
        state.model_state = unpack_model_state(model, arrays)
    return state, meta


def train(model, train_corpus, cfg, total_batch_steps, valid_corpus=None,
          resume_from=None, checkpoint_meta=None):
    """Run the loop until ``total_batch_steps`` effective batches are done.

    Resuming counts the checkpointed steps toward the total and replays the
    remaining schedule exactly; with ``cfg.out_dir`` set, the metrics CSV is
    appended so the finished file equals an uninterrupted run's. A NaN loss
    aborts with the last written checkpoint left in place.
    ``checkpoint_meta`` entries ride along in every checkpoint's header, for
    callers that store the model blueprint next to the weights.
    """
    opt = cfg.optimizer
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    ckpt_path = out_dir / "checkpoint.bin" if out_dir else None
    metrics_path = out_dir / "metrics.csv" if out_dir else None

    if resume_from is not None:
        state, meta = load_training_checkpoint(resume_from, model)
        if meta["seed"] != cfg.seed:
            raise ConfigError(
                f"checkpoint seed {meta['seed']} != configured seed {cfg.seed}")
    else:
        state = TrainState(moments=init_moments(model))
        state.model_state = model.initial_state(cfg.batch_size)
    if state.step > total_batch_steps:
        raise ConfigError(
            f"checkpoint already at step {state.step} > total {total_batch_steps}")

    log_rows = []
    metrics_file = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        resuming_log = resume_from is not None and metrics_path.exists()
        metrics_file = open(metrics_path, "a" if resuming_log else "w")
        if not resuming_log:
            metrics_file.write(METRICS_HEADER + "\n")

    last_valid_bpc = None
    try:
        if state.step == total_batch_steps:
            return TrainResult(state.step, log_rows,
                               str(ckpt_path) if ckpt_path and ckpt_path.exists()
                               else None, state)

        source, per_epoch = _window_source(train_corpus, cfg.batch_size, cfg.bptt_len)
        while state.step < total_batch_steps:
            offset = state.step % per_epoch
            for batch in itertools.islice(source(), offset, None):
                if state.step >= total_batch_steps:
                    break
                step_start = time.perf_counter()
                lr = one_cycle_lr(state.step, total_batch_steps,
                                  opt.start_lr, opt.peak_lr, opt.final_lr)
                loss, _ = accumulate_and_step(
                    model, state, batch, opt, lr,
                    micro_batches=cfg.micro_batches, seed=cfg.seed)
                elapsed = time.perf_counter() - step_start

                valid_bpc = valid_ppl = ""
                if (cfg.val_every and valid_corpus is not None
                        and state.step % cfg.val_every == 0):
                    report = evaluate(
                        model, valid_corpus,
                        eval_attn_len=cfg.val_attn_len,
                        batch_size=cfg.val_batch_size, bptt_len=cfg.bptt_len)
                    last_valid_bpc = report.bpc
                    valid_bpc = f"{report.bpc:.8f}"
                    valid_ppl = f"{report.ppl:.6g}"

                if state.step % cfg.log_every == 0:
                    tokens = batch.inputs.size
                    tps = 0.0 if cfg.deterministic else tokens / max(elapsed, 1e-9)
                    row = (f"{state.step},{lr:.10g},{loss:.8f},{loss / LN2:.8f},"
                           f"{valid_bpc},{valid_ppl},{tps:.1f}")
                    log_rows.append(row)
                    if metrics_file:
                        metrics_file.write(row + "\n")
                        metrics_file.flush()

                if (ckpt_path and cfg.checkpoint_every
                        and state.step % cfg.checkpoint_every == 0):
                    save_training_checkpoint(ckpt_path, model, state, cfg.seed,
                                             checkpoint_meta)

        if ckpt_path:
            save_training_checkpoint(ckpt_path, model, state, cfg.seed, checkpoint_meta)
    finally:
        if metrics_file:
            metrics_file.close()

    return TrainResult(state.step, log_rows,
                       str(ckpt_path) if ckpt_path else None, state,
                       final_valid_bpc=last_valid_bpc)
