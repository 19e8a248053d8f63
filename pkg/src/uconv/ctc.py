"""CTC objective, feasibility, loss blending and decoding.

Blank is label 0.  Everything runs in log space; probabilities are never
multiplied directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

BLANK = 0
NEG_INF = -np.inf


class InfeasibleError(ValueError):
    """Fewer output frames than the target needs."""


def min_frames(labels) -> int:
    """Frames needed to emit ``labels``: one per label plus a blank between repeats."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def feasible(t_out: int, labels) -> bool:
    return t_out >= min_frames(labels)


def _check_labels(labels, vocab_size: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 1 or labels.max() >= vocab_size):
        raise ValueError(f"labels must lie in [1, {vocab_size - 1}], got {labels.tolist()}")
    return labels


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward_backward(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Negative log-likelihood and its gradient w.r.t. unnormalised ``logits[T, V]``."""
    T, V = logits.shape
    labels = _check_labels(labels, V)
    if not feasible(T, labels):
        raise InfeasibleError(f"{T} frames cannot emit {len(labels)} labels "
                              f"(needs {min_frames(labels)})")
    logp = _log_softmax(logits.astype(np.float64))
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = labels
    S = len(ext)
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    emit = logp[:, ext]  # [T, S]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    if S > 1:
        beta[-1, -2] = emit[-1, -2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    log_total = alpha[-1, -1] if S == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    if not np.isfinite(log_total):
        raise InfeasibleError("no alignment has positive probability")

    # occupancy per (t, extended position); emission counted once
    occ = np.exp(alpha + beta - emit - log_total)
    post = np.zeros((T, V))
    for s in range(S):
        post[:, ext[s]] += occ[:, s]
    grad = np.exp(logp) - post
    # a probability cannot exceed 1; clamp the last-ulp rounding that says otherwise
    return max(float(-log_total), 0.0), grad


def ctc_loss_batch(logits: Tensor, lengths, targets) -> Tensor:
    """Mean over utterances of the per-utterance CTC loss; ``logits`` is ``[B, T, V]``."""
    B = logits.shape[0]
    lengths = np.asarray(lengths)
    losses = np.empty(B)
    grads = np.zeros(logits.shape, dtype=np.float64)
    for b in range(B):
        n = int(lengths[b])
        losses[b], grads[b, :n] = forward_backward(logits.data[b, :n], targets[b])
    out = np.asarray(losses.mean(), dtype=logits.dtype)

    def bw(g):
        nx._accum(logits, (g / B) * grads.astype(logits.dtype))

    return nx._make(out, (logits,), bw, "ctc_loss")


def ctc_loss(logits: Tensor, labels) -> Tensor:
    """Scalar CTC negative log-likelihood of ``labels`` under ``logits[T, V]``."""
    logits = nx.as_tensor(logits)
    return ctc_loss_batch(logits.reshape(1, *logits.shape), [logits.shape[0]], [labels])


def combined_loss(final_loss, intermediate_losses, ctc_lambda: float = 0.5):
    """(1 - lambda) * final + lambda * mean(intermediate); final alone if there are none."""
    if not 0.0 <= ctc_lambda <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {ctc_lambda}")
    if not intermediate_losses:
        return final_loss
    inter = intermediate_losses[0]
    for extra in intermediate_losses[1:]:
        inter = inter + extra
    return (1.0 - ctc_lambda) * final_loss + ctc_lambda * (inter * (1.0 / len(intermediate_losses)))


# -- decoding -----------------------------------------------------------------------

def _as_array(logits) -> np.ndarray:
    return logits.data if isinstance(logits, Tensor) else np.asarray(logits)


def collapse(path) -> list[int]:
    out, prev = [], None
    for k in path:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def greedy_decode(logits) -> list[int]:
    """Best path: per-frame argmax (lowest index wins ties), merge repeats, drop blanks."""
    return collapse(np.argmax(_as_array(logits), axis=-1))


@dataclass
class BeamHypothesis:
    prefix: tuple
    log_blank: float
    log_nonblank: float

    @property
    def score(self) -> float:
        return float(np.logaddexp(self.log_blank, self.log_nonblank))


def beam_search(logits, beam: int = 20) -> list[BeamHypothesis]:
    """CTC prefix beam search over per-frame log-softmax scores.

    Keeps the ``beam`` best prefixes per frame; ties are broken by
    lexicographic prefix order.  Returns hypotheses ranked best first.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    logp = _log_softmax(_as_array(logits).astype(np.float64))
    T, V = logp.shape
    beams = {(): [0.0, NEG_INF]}
    for t in range(T):
        row = logp[t]
        nxt: dict = {}

        def slot(p):
            s = nxt.get(p)
            if s is None:
                s = nxt[p] = [NEG_INF, NEG_INF]
            return s

        ext_scores, ext_keys = [], []
        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            s = slot(prefix)
            s[0] = np.logaddexp(s[0], total + row[BLANK])
            last = prefix[-1] if prefix else None
            if last is not None:
                s[1] = np.logaddexp(s[1], pnb + row[last])
            cand = total + row[1:]
            if last is not None:
                cand = cand.copy()
                cand[last - 1] = pb + row[last]
            ext_scores.append(cand)
            ext_keys.append(prefix)

        scores = np.stack(ext_scores)  # [n_beams, V-1]
        flat = scores.ravel()
        keep = min(beam, flat.size)
        # top `keep` extensions plus any extension that lands on an existing prefix
        chosen = set(np.argpartition(-flat, keep - 1)[:keep].tolist()) if keep else set()
        parent = {prefix: i for i, prefix in enumerate(ext_keys)}
        for prefix in beams:
            if prefix and prefix[:-1] in parent:
                chosen.add(parent[prefix[:-1]] * (V - 1) + prefix[-1] - 1)
        kth = np.partition(-flat, keep - 1)[keep - 1] if keep else np.inf
        tied = np.nonzero(-flat == kth)[0]
        chosen.update(tied.tolist())
        for idx in sorted(chosen):
            i, c = divmod(idx, V - 1)
            s = slot(ext_keys[i] + (c + 1,))
            s[1] = np.logaddexp(s[1], flat[idx])

        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = dict(ranked[:beam])

    hyps = [BeamHypothesis(p, float(b), float(nb)) for p, (b, nb) in beams.items()]
    hyps.sort(key=lambda h: (-h.score, h.prefix))
    return hyps


# -- vocabulary -----------------------------------------------------------------------

class Vocabulary:
    """One token per line; line n (1-based) is label n, label 0 is the blank."""

    def __init__(self, tokens):
        self.tokens = ["<blank>"] + list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens) if i}

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens[1:]), encoding="utf-8")

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        out = []
        for tok in text.split():
            if tok not in self.index:
                raise KeyError(f"token {tok!r} not in vocabulary")
            out.append(self.index[tok])
        return out

    def decode(self, labels) -> list[str]:
        return [self.tokens[i] for i in labels]

    def detokenize(self, labels) -> str:
        """Join tokens; ``▁`` word-boundary markers become spaces."""
        return "".join(self.decode(labels)).replace("▁", " ").strip()
