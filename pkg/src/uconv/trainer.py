"""Toy-scale training: Adam with decoupled weight decay, warmup schedule, overfit loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .ctc import Vocabulary, combined_loss, ctc_loss_batch, feasible, greedy_decode
from .frontend import load_features, mask_augment
from .model import Encoder, EncoderConfig, SequenceBatch, build

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 2e-3
    warmup_steps: int = 100
    total_steps: int = 1000

    def __post_init__(self):
        if not 0 < self.warmup_steps <= self.total_steps:
            raise ValueError(f"need 0 < warmup_steps <= total_steps, got "
                             f"{self.warmup_steps}/{self.total_steps}")


def lr_at(step: int, schedule: ScheduleConfig) -> float:
    """Linear ramp to the peak at ``warmup_steps``, then inverse square-root decay."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    w = schedule.warmup_steps
    if step <= w:
        return schedule.peak_lr * step / w
    return schedule.peak_lr * math.sqrt(w / step)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    weight_decay: float = 1e-6
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState, lr: float) -> None:
    """One Adam update using each parameter's ``.grad``; weight decay is decoupled."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for p in params:
        key = p.name or id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - lr * (update + state.weight_decay * p.data)


# -- data -------------------------------------------------------------------------

@dataclass
class Utterance:
    features: np.ndarray  # [T, 80]
    labels: list
    uid: str = ""


def make_batches(utts, frame_budget: int, seed: int) -> list[list[int]]:
    """Sort by length, fill batches up to ``frame_budget`` padded frames, shuffle batch order."""
    order = sorted(range(len(utts)), key=lambda i: (len(utts[i].features), i))
    batches, cur, longest = [], [], 0
    for i in order:
        n = len(utts[i].features)
        if cur and max(longest, n) * (len(cur) + 1) > frame_budget:
            batches.append(cur)
            cur, longest = [], 0
        cur.append(i)
        longest = max(longest, n)
    if cur:
        batches.append(cur)
    np.random.default_rng(seed).shuffle(batches)
    return batches


def load_dataset(directory) -> tuple[list[Utterance], Vocabulary]:
    """``manifest.tsv`` lines are ``<audio or FEAT path>\\t<transcript path>``; ``vocab.txt`` alongside."""
    directory = Path(directory)
    manifest = directory / "manifest.tsv"
    if not manifest.is_file():
        raise FileNotFoundError(f"missing manifest: {manifest}")
    vocab = Vocabulary.load(directory / "vocab.txt")
    utts = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{manifest}:{lineno}: expected two tab-separated paths")
        feats_path, text_path = (directory / p.strip() for p in parts)
        text = text_path.read_text(encoding="utf-8")
        utts.append(Utterance(load_features(feats_path), vocab.encode(text), feats_path.stem))
    return utts, vocab


# -- loop ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    encoder: Encoder
    losses: list
    lrs: list
    dropped: list


def train_toy(config: EncoderConfig, dataset, steps: int, seed: int = 42,
              schedule: ScheduleConfig | None = None, frame_budget: int = 100_000,
              accumulate: int = 1, augment: bool = False, encoder: Encoder | None = None,
              log_every: int = 0) -> TrainResult:
    """Overfit ``dataset`` (a list of :class:`Utterance`) for ``steps`` optimizer steps."""
    encoder = encoder or build(config, seed)
    policy = config.policy
    keep, dropped = [], []
    for u in dataset:
        t_out = encoder.output_lengths([len(u.features)])[0]
        if feasible(t_out, u.labels):
            keep.append(u)
        else:
            dropped.append(u.uid)
    if dropped:
        log.warning("dropped %d infeasible utterance(s) at final reduction x%d: %s",
                    len(dropped), policy.final_reduction, ", ".join(map(str, dropped)))
    result = TrainResult(encoder, [], [], dropped)
    if steps == 0 or not keep:
        return result
    schedule = schedule or ScheduleConfig(warmup_steps=max(1, min(100, steps // 10)), total_steps=max(1, steps))
    state = AdamState()
    rng = np.random.default_rng(seed)
    params = encoder.parameters()
    batches = make_batches(keep, frame_budget, seed)
    cursor = 0
    for step in range(1, steps + 1):
        encoder.zero_grad()
        total = 0.0
        for _ in range(accumulate):
            idx = batches[cursor % len(batches)]
            cursor += 1
            feats = [keep[i].features for i in idx]
            if augment:
                feats = [mask_augment(f, int(rng.integers(2**31))) for f in feats]
            batch = SequenceBatch.from_list(feats)
            out = encoder.forward(batch, training=True, rng=rng)
            targets = [keep[i].labels for i in idx]
            final = ctc_loss_batch(out.final_logits, out.lengths, targets)
            inter = [ctc_loss_batch(h, out.lengths, targets) for h in out.intermediate_logits]
            loss = combined_loss(final, inter, config.ctc_lambda)
            if accumulate > 1:
                loss = loss * (1.0 / accumulate)
            nx.backward(loss)
            total += float(loss.data)
        lr = lr_at(step, schedule)
        adam_step(params, state, lr)
        result.losses.append(total)
        result.lrs.append(lr)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f lr %.2e", step, total, lr)
    return result


def decode_all(encoder: Encoder, dataset) -> list[list[int]]:
    with nx.no_grad():
        out = encoder.forward(SequenceBatch.from_list([u.features for u in dataset]))
    return [greedy_decode(out.final_logits.data[i, :n]) for i, n in enumerate(out.lengths)]
