"""Temporal resolution machinery: policies, the x4 frontend, x2 down/upsampling, skips.

A reduction policy is a walk over reduction levels, e.g. ``x4-x8-x16-x8`` with
``3-3-3-3`` Conformer layers per level.  Levels start at 4 (the convolutional
frontend) and move by exactly one factor of two per transition.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .layers import Conv1d, Conv2d, Linear, Module, zero_padding
from .numerics import Tensor

DOWNSAMPLE_DIM = 512
DEFAULT_TOTAL_LAYERS = 12


class PolicyError(ValueError):
    def __init__(self, message: str, position: int | None = None):
        self.position = position
        where = f" (at position {position})" if position is not None else ""
        super().__init__(message + where)


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class ReductionPolicy:
    levels: tuple[int, ...]
    layers_per_level: tuple[int, ...]

    def __post_init__(self):
        validate(self.levels, self.layers_per_level)

    @property
    def reduction_depth(self) -> int:
        return max(self.levels)

    @property
    def final_reduction(self) -> int:
        return self.levels[-1]

    @property
    def num_layers(self) -> int:
        return sum(self.layers_per_level)

    def transitions(self) -> list[str]:
        """'down' or 'up' for each step between consecutive levels."""
        return ["down" if b > a else "up" for a, b in zip(self.levels, self.levels[1:])]

    def level_text(self) -> str:
        return "-".join(f"x{n}" for n in self.levels)

    def layers_text(self) -> str:
        return "-".join(str(n) for n in self.layers_per_level)

    def __str__(self):
        return f"{self.level_text()} / {self.layers_text()}"


def validate(levels, layers) -> None:
    if not levels:
        raise PolicyError("empty policy")
    for i, n in enumerate(levels):
        if n < 4 or n & (n - 1):
            raise PolicyError(f"level x{n} is not a power of two >= 4", i)
    if levels[0] != 4:
        raise PolicyError(f"first level must be x4, got x{levels[0]}", 0)
    for i, (a, b) in enumerate(zip(levels, levels[1:]), start=1):
        if b not in (2 * a, a // 2):
            raise PolicyError(f"transition x{a} -> x{b} is not a single factor of two", i)
    if len(layers) != len(levels):
        raise PolicyError(f"{len(levels)} levels but {len(layers)} layer counts")
    for i, n in enumerate(layers):
        if n < 0:
            raise PolicyError(f"negative layer count {n}", i)
    if sum(layers) < 1:
        raise PolicyError("policy has no Conformer layers")


def _shorthand_levels(depth: int, final: int) -> list[int]:
    levels = [4]
    while levels[-1] < depth:
        levels.append(levels[-1] * 2)
    while levels[-1] > final:
        levels.append(levels[-1] // 2)
    return levels


def split_layers(levels, total: int = DEFAULT_TOTAL_LAYERS) -> list[int]:
    """Spread ``total`` layers evenly; the remainder goes to the deepest levels first
    (ties broken left to right)."""
    n = len(levels)
    base, extra = divmod(total, n)
    counts = [base] * n
    order = sorted(range(n), key=lambda i: (-levels[i], i))
    for i in order[:extra]:
        counts[i] += 1
    return counts


def parse_policy(text: str, layers: str | None = None,
                 total_layers: int = DEFAULT_TOTAL_LAYERS) -> ReductionPolicy:
    """Parse ``"x4-x8-x16-x8"`` (+ ``"3-3-3-3"``) or the ``"D16-F8"`` shorthand.

    Without a layer string, layers are split by :func:`split_layers`.
    """
    text = text.strip()
    m = re.fullmatch(r"[Dd](\d+)-[Ff](\d+)", text)
    if m:
        depth, final = int(m.group(1)), int(m.group(2))
        for pos, n in enumerate((depth, final)):
            if n < 4 or n & (n - 1):
                raise PolicyError(f"level x{n} is not a power of two >= 4", pos)
        if final > depth:
            raise PolicyError(f"final reduction x{final} exceeds depth x{depth}", 1)
        levels = _shorthand_levels(depth, final)
    else:
        levels = []
        for pos, tok in enumerate(text.split("-")):
            m = re.fullmatch(r"[xX]?(\d+)", tok.strip())
            if not m:
                raise PolicyError(f"cannot parse level {tok!r}", pos)
            levels.append(int(m.group(1)))
    if layers is None:
        counts = split_layers(levels, total_layers)
    else:
        counts = []
        for pos, tok in enumerate(str(layers).strip().split("-")):
            if not tok.strip().isdigit():
                raise PolicyError(f"cannot parse layer count {tok!r}", pos)
            counts.append(int(tok))
    return ReductionPolicy(tuple(levels), tuple(counts))


# -- length arithmetic ------------------------------------------------------------

def ceil_half(n):
    if isinstance(n, (list, tuple)):
        n = np.asarray(n)
    return -(-n // 2)


def frontend_length(n):
    return ceil_half(ceil_half(n))


def stage_lengths(policy: ReductionPolicy, T: int) -> list[int]:
    """Length entering each Conformer stage; the last entry is also the output length."""
    if T < 1:
        raise DegenerateInputError(f"input length must be >= 1, got {T}")
    cur = frontend_length(T)
    out = [cur]
    by_level = {}
    for level, nxt, move in zip(policy.levels, policy.levels[1:], policy.transitions()):
        if move == "down":
            by_level[level] = cur
            cur = ceil_half(cur)
        else:
            cur = by_level.get(nxt, 2 * cur)
        if cur < 1:
            raise DegenerateInputError(f"stage length reached 0 for T={T}")
        out.append(cur)
    return out


# -- modules ---------------------------------------------------------------------

class FrontendX4(Module):
    """Two stride-2 3x3 conv2d layers with ReLU over time x frequency, then a linear map."""

    def __init__(self, n_mels: int, channels: int, attn_dim: int, rng: np.random.Generator):
        self.conv1 = Conv2d(1, channels, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(channels, channels, 3, rng, stride=2, padding=1)
        self.freq_out = frontend_length(n_mels)
        self.linear = Linear(channels * self.freq_out, attn_dim, rng)

    def __call__(self, feats: Tensor, lengths):
        B, T, F = feats.shape
        if T < 1:
            raise DegenerateInputError("empty feature sequence")
        x = zero_padding(feats, lengths).reshape(B, T, F, 1)
        x = nx.relu(self.conv1(x))
        lengths = ceil_half(lengths)
        x = _zero_frames4(x, lengths)
        x = nx.relu(self.conv2(x))
        lengths = ceil_half(lengths)
        B, T4, F4, C = x.shape
        x = self.linear(x.reshape(B, T4, F4 * C))
        return zero_padding(x, lengths), lengths


def _zero_frames4(x: Tensor, lengths) -> Tensor:
    mask = np.arange(x.shape[1])[None, :] >= np.asarray(lengths)[:, None]
    if not mask.any():
        return x
    return nx.masked_fill(x, mask[:, :, None, None], 0.0)


class DownsampleX2(Module):
    """conv1d k3/s1 to 512 channels, conv1d k3/s2, conv1d k1 back to the model dim."""

    def __init__(self, attn_dim: int, rng: np.random.Generator, hidden: int = DOWNSAMPLE_DIM):
        self.conv1 = Conv1d(attn_dim, hidden, 3, rng, stride=1, padding=1)
        self.conv2 = Conv1d(hidden, hidden, 3, rng, stride=2, padding=1)
        self.conv3 = Conv1d(hidden, attn_dim, 1, rng, stride=1, padding=0)

    def __call__(self, x: Tensor, lengths):
        if x.shape[1] < 1:
            raise DegenerateInputError("empty sequence")
        h = nx.relu(self.conv1(zero_padding(x, lengths)))
        h = nx.relu(self.conv2(zero_padding(h, lengths)))
        lengths = ceil_half(lengths)
        return zero_padding(self.conv3(h), lengths), lengths


def downsample_params(d: int, hidden: int = DOWNSAMPLE_DIM) -> int:
    return (d * hidden * 3 + hidden) + (hidden * hidden * 3 + hidden) + (hidden * d + d)


def frontend_params(n_mels: int, channels: int, d: int) -> int:
    return (9 * channels + channels) + (9 * channels * channels + channels) + \
        (channels * frontend_length(n_mels) * d + d)


def upsample_x2(x: Tensor) -> Tensor:
    """Nearest neighbour: output frame i copies input frame i // 2."""
    if x.shape[-2] < 1:
        raise DegenerateInputError("cannot upsample an empty sequence")
    return nx.repeat_frames(x, 2, axis=-2)


def skip_combine(upsampled: Tensor, skip: Tensor) -> Tensor:
    """Truncate the upsampled branch to the skip length and add."""
    tu, ts = upsampled.shape[-2], skip.shape[-2]
    if tu < ts or tu > ts + 1:
        raise ValueError(f"skip alignment error: upsampled length {tu} vs skip length {ts}")
    if tu != ts:
        upsampled = upsampled[..., :ts, :]
    return upsampled + skip
