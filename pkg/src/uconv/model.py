"""Encoder assembly, named presets, parameter counting and checkpoints."""

from __future__ import annotations

import dataclasses
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .layers import ConformerBlock, ConformerLayerConfig, Linear, Module, block_params, zero_padding
from .numerics import Parameter, Tensor
from .reduction import (DOWNSAMPLE_DIM, DegenerateInputError, DownsampleX2, FrontendX4,
                        ReductionPolicy, downsample_params, frontend_params, parse_policy,
                        skip_combine, stage_lengths, upsample_x2)

N_MELS = 80


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class EncoderConfig:
    policy: ReductionPolicy = field(default_factory=lambda: parse_policy("x4", "12"))
    layer: ConformerLayerConfig = field(default_factory=ConformerLayerConfig)
    vocab_size: int = 257  # 256 BPE units + blank
    intermediate_ctc: bool = False
    ctc_lambda: float = 0.5
    frontend_channels: int = 64
    downsample_dim: int = DOWNSAMPLE_DIM
    n_mels: int = N_MELS
    seed: int = 42

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if not 0.0 <= self.ctc_lambda <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.ctc_lambda}")

    def replace(self, **changes) -> "EncoderConfig":
        layer_keys = {f.name for f in dataclasses.fields(ConformerLayerConfig)}
        layer_changes = {k: changes.pop(k) for k in list(changes) if k in layer_keys}
        cfg = self
        if layer_changes:
            cfg = dataclasses.replace(cfg, layer=dataclasses.replace(cfg.layer, **layer_changes))
        return dataclasses.replace(cfg, **changes) if changes else cfg

    def to_text(self) -> str:
        L = self.layer
        rows = [
            ("policy", self.policy.level_text()),
            ("layers", self.policy.layers_text()),
            ("attn_dim", L.attn_dim),
            ("heads", L.heads),
            ("ffn_dim", L.ffn_dim),
            ("conv_kernel", L.conv_kernel),
            ("vocab_size", self.vocab_size),
            ("intermediate_ctc", "true" if self.intermediate_ctc else "false"),
            ("lambda", repr(float(self.ctc_lambda))),
            ("dropout", repr(float(L.dropout))),
            ("seed", self.seed),
            ("frontend_channels", self.frontend_channels),
            ("downsample_dim", self.downsample_dim),
            ("pos_enc", L.pos_enc),
        ]
        return "".join(f"{k}={v}\n" for k, v in rows)


def _preset(policy, layers, **kw) -> EncoderConfig:
    return EncoderConfig(policy=parse_policy(policy, layers)).replace(**kw)


_LARGE = dict(attn_dim=512, heads=8, ffn_dim=2048, conv_kernel=31, frontend_channels=512)

PRESETS = {
    "conformer-s": _preset("x4", "12"),
    "conv-conformer-v1": _preset("x4-x8", "2-10"),
    "conv-conformer-v2": _preset("x4-x8", "4-8"),
    "uconv-d8-f4": _preset("x4-x8-x4", "2-8-2"),
    "uconv-d16-f4": _preset("x4-x8-x16-x8-x4", "2-2-4-2-2"),
    "uconv-d16-f8-v1": _preset("x4-x8-x16-x8", "3-3-3-3"),
    "uconv-d16-f8-v2": _preset("x4-x8-x16-x8", "2-4-5-1"),
    "uconv-d32-f8": _preset("x4-x8-x16-x32-x16-x8", "2-2-2-2-2-2"),
    "conformer-l": _preset("x4", "12", **_LARGE),
    "uconv-l-d16-f8-v1": _preset("x4-x8-x16-x8", "3-3-3-3", **_LARGE),
    "toy": _preset("x4-x8-x16-x8", "1-1-1-1", attn_dim=64, heads=4, ffn_dim=128,
                   dropout=0.0, vocab_size=10),
}

# Parameter counts (millions) reported for the presets above.
REPORTED_PARAMS_M = {
    "conformer-s": 21.8,
    "conv-conformer-v1": 23.2,
    "conv-conformer-v2": 23.2,
    "uconv-d8-f4": 23.2,
    "uconv-d16-f4": 24.6,
    "uconv-d16-f8-v1": 24.6,
    "uconv-d16-f8-v2": 24.6,
    "uconv-d32-f8": 26.0,
    "conformer-l": 83.0,
    "uconv-l-d16-f8-v1": 87.3,
}

_INT_KEYS = {"attn_dim", "heads", "ffn_dim", "conv_kernel", "vocab_size", "seed",
             "frontend_channels", "downsample_dim"}
_FLOAT_KEYS = {"lambda": "ctc_lambda", "dropout": "dropout"}


def parse_config(text: str) -> EncoderConfig:
    """Parse ``key=value`` lines; ``preset=<name>`` (if present) supplies the defaults."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key in entries:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        entries[key] = (value, lineno)

    base = EncoderConfig()
    if "preset" in entries:
        name, lineno = entries.pop("preset")
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}", lineno)
        base = PRESETS[name]

    changes = {}
    policy_text, policy_line = entries.pop("policy", (None, None))
    layers_text, layers_line = entries.pop("layers", (None, None))
    if policy_text is not None or layers_text is not None:
        try:
            policy = parse_policy(policy_text or base.policy.level_text(),
                                  layers_text if layers_text is not None else
                                  (None if policy_text else base.policy.layers_text()))
        except ValueError as exc:
            raise ConfigError(str(exc), policy_line or layers_line) from exc
        changes["policy"] = policy

    for key, (value, lineno) in entries.items():
        try:
            if key in _INT_KEYS:
                changes[key] = int(value)
            elif key in _FLOAT_KEYS:
                changes[_FLOAT_KEYS[key]] = float(value)
            elif key == "intermediate_ctc":
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"not a boolean: {value!r}")
                changes[key] = value.lower() in ("true", "1", "yes")
            elif key == "pos_enc":
                changes[key] = value
            else:
                raise ConfigError(f"unknown key {key!r}", lineno)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno) from exc
    try:
        return base.replace(**changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(source: str) -> EncoderConfig:
    """A preset name or a path to a ``key=value`` config file."""
    if source in PRESETS:
        return PRESETS[source]
    return parse_config(Path(source).read_text(encoding="utf-8"))


# -- batches and outputs -------------------------------------------------------

@dataclass
class SequenceBatch:
    features: np.ndarray  # [B, T, F], zero padded
    lengths: np.ndarray  # [B]

    @classmethod
    def from_list(cls, feats, pad_to: int | None = None) -> "SequenceBatch":
        feats = [np.asarray(f) for f in feats]
        T = max(len(f) for f in feats)
        if pad_to is not None:
            T = max(T, pad_to)
        out = np.zeros((len(feats), T, feats[0].shape[1]), dtype=feats[0].dtype)
        for i, f in enumerate(feats):
            out[i, :len(f)] = f
        return cls(out, np.array([len(f) for f in feats], dtype=np.int64))


@dataclass
class EncoderOutput:
    final_logits: Tensor  # [B, T_out, V]
    lengths: np.ndarray
    intermediate_logits: list = field(default_factory=list)
    intermediate_levels: list = field(default_factory=list)


def align_for_interctc(stage_output: Tensor, stage_level: int, final_level: int,
                       length: int | None = None) -> Tensor:
    """Bring a stage output ``[..., Ts, d]`` to the final reduction level.

    Coarser stages are repeated (nearest neighbour), finer stages keep every
    second frame; the result is truncated to ``length`` when given.
    """
    x = stage_output
    level = stage_level
    while level > final_level:
        x = upsample_x2(x)
        level //= 2
    while level < final_level:
        x = x[..., ::2, :]
        level *= 2
    if length is not None:
        if x.shape[-2] < length:
            raise ValueError(f"aligned length {x.shape[-2]} shorter than target {length}")
        if x.shape[-2] != length:
            x = x[..., :length, :]
    return x


class _Timer:
    def __init__(self, profile, name):
        self.profile, self.name = profile, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        if self.profile is not None:
            self.profile[self.name] = self.profile.get(self.name, 0.0) + time.perf_counter() - self.t0


class Encoder(Module):
    def __init__(self, config: EncoderConfig, seed: int | None = None):
        seed = config.seed if seed is None else seed
        rng = np.random.default_rng(seed)
        cfg, d = config.layer, config.layer.attn_dim
        self.config = config
        self.frontend = FrontendX4(config.n_mels, config.frontend_channels, d, rng)
        self.stages = [[ConformerBlock(cfg, rng) for _ in range(n)]
                       for n in config.policy.layers_per_level]
        self.downsamplers = [DownsampleX2(d, rng, config.downsample_dim)
                             for move in config.policy.transitions() if move == "down"]
        self.output = Linear(d, config.vocab_size, rng)
        for name, p in self.named_parameters():
            p.name = name

    @property
    def dtype(self):
        return self.output.weight.dtype

    def to(self, dtype) -> "Encoder":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    def output_lengths(self, lengths) -> np.ndarray:
        return np.array([stage_lengths(self.config.policy, int(n))[-1] for n in lengths])

    def forward(self, batch: SequenceBatch, training: bool = False, rng=None,
                profile: dict | None = None) -> EncoderOutput:
        policy = self.config.policy
        if batch.features.shape[-1] != self.config.n_mels:
            raise ValueError(f"expected {self.config.n_mels}-dim features, got {batch.features.shape}")
        for i, n in enumerate(batch.lengths):
            try:
                stage_lengths(policy, int(n))
            except DegenerateInputError as exc:
                raise DegenerateInputError(f"utterance {i}: {exc}") from exc
        if training and rng is None:
            rng = np.random.default_rng(self.config.seed)

        with _Timer(profile, "frontend"):
            x, lengths = self.frontend(Tensor(batch.features.astype(self.dtype)), batch.lengths)
            if self.config.layer.pos_enc == "abs":
                x = x + nx.sinusoid_table(np.arange(x.shape[1]), x.shape[2], x.dtype)

        skips, stage_outputs = {}, []
        downs = iter(self.downsamplers)
        moves = policy.transitions()
        for i, level in enumerate(policy.levels):
            with _Timer(profile, f"stage{i}:x{level}"):
                for block in self.stages[i]:
                    x = block(x, lengths, training, rng)
            stage_outputs.append((level, x))
            if i == len(moves):
                break
            with _Timer(profile, f"{moves[i]}{i}:x{level}->x{policy.levels[i + 1]}"):
                if moves[i] == "down":
                    skips[level] = (x, lengths)
                    x, lengths = next(downs)(x, lengths)
                else:
                    skip, lengths = skips[policy.levels[i + 1]]
                    x = zero_padding(skip_combine(upsample_x2(x), skip), lengths)

        with _Timer(profile, "output"):
            out = EncoderOutput(self.output(x), np.asarray(lengths))
            if self.config.intermediate_ctc:
                t_out, final = x.shape[1], policy.final_reduction
                for level, h in stage_outputs[:-1]:
                    out.intermediate_logits.append(self.output(align_for_interctc(h, level, final, t_out)))
                    out.intermediate_levels.append(level)
        return out

    __call__ = forward


def build(config: EncoderConfig, seed: int | None = None) -> Encoder:
    return Encoder(config, seed)


def count_params(encoder: Module) -> int:
    return encoder.num_params()


def closed_form_params(config: EncoderConfig) -> int:
    """Parameter count from per-sublayer formulas, independent of the module tree."""
    d = config.layer.attn_dim
    n_down = sum(1 for m in config.policy.transitions() if m == "down")
    return (frontend_params(config.n_mels, config.frontend_channels, d)
            + config.policy.num_layers * block_params(config.layer)
            + n_down * downsample_params(d, config.downsample_dim)
            + d * config.vocab_size + config.vocab_size)


# -- checkpoints ------------------------------------------------------------------

MAGIC = b"UCNV"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def save(encoder: Encoder, path) -> None:
    params = list(encoder.named_parameters())
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, p in params:
        raw = name.encode("utf-8")
        code = 0 if p.data.dtype == np.float32 else 1
        arr = np.ascontiguousarray(p.data, dtype=_DTYPES[code])
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<B", code) + arr.tobytes())
    blob = encoder.config.to_text().encode("utf-8")
    chunks.append(struct.pack("<I", len(blob)) + blob)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path) -> Encoder:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a UCNV checkpoint")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        (code,) = r.unpack("<B")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for tensor {name!r}")
        dt = _DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    (n,) = r.unpack("<I")
    config = parse_config(r.take(n).decode("utf-8"))
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after checkpoint")

    encoder = Encoder(config)
    params = dict(encoder.named_parameters())
    for name in tensors:
        if name not in params:
            raise CheckpointError(f"unknown tensor name {name!r}")
    for name, p in params.items():
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name!r}")
        if tensors[name].shape != p.shape:
            raise CheckpointError(f"tensor {name!r} has shape {tensors[name].shape}, expected {p.shape}")
        p.data = tensors[name].copy()
        p.grad = np.zeros_like(p.data)
    return encoder


def parameter_vector(encoder: Module) -> np.ndarray:
    return np.concatenate([p.data.ravel() for p in encoder.parameters()])


__all__ = [
    "EncoderConfig", "Encoder", "EncoderOutput", "SequenceBatch", "PRESETS", "REPORTED_PARAMS_M",
    "ConfigError", "CheckpointError", "Parameter", "build", "count_params", "closed_form_params",
    "align_for_interctc", "parse_config", "load_config", "save", "load", "parameter_vector",
]
