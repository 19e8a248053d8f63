"""Property suites behind ``uconv check``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .ctc import beam_search, ctc_loss, feasible, forward_backward
from .layers import (ConformerBlock, ConformerLayerConfig, ConvModule, FeedForward, LayerNorm,
                     Linear, Conv1d, Conv2d, MultiHeadSelfAttention)
from .model import PRESETS, REPORTED_PARAMS_M, align_for_interctc, build, closed_form_params, count_params
from .numerics import Tensor
from .oracles import brute_force_best_labelling, brute_force_ctc_nll, numeric_gradient, relative_error
from .reduction import (DownsampleX2, FrontendX4, downsample_params, parse_policy, skip_combine,
                        stage_lengths, upsample_x2)

GRAD_TOL = 1e-4
CTC_TOL = 1e-9


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


# -- params ---------------------------------------------------------------------------

PARAM_TARGETS = ["conformer-s", "conv-conformer-v2", "uconv-d16-f8-v1", "uconv-d32-f8", "conformer-l"]


def params_suite() -> list[CheckResult]:
    out = []
    for name in PARAM_TARGETS:
        cfg = PRESETS[name]
        n = count_params(build(cfg))
        target = REPORTED_PARAMS_M[name] * 1e6
        dev = (n - target) / target
        out.append(CheckResult(f"params {name}", abs(dev) <= 0.05 and n == closed_form_params(cfg),
                               f"{n:,} vs {target / 1e6:.1f} M ({100 * dev:+.2f}%)"))
    n = downsample_params(280)
    dev = (n - 1.4e6) / 1.4e6
    out.append(CheckResult("params downsample_x2 block", abs(dev) <= 0.10,
                           f"{n:,} vs 1.4 M ({100 * dev:+.2f}%)"))
    return out


# -- lengths --------------------------------------------------------------------------

LENGTH_TABLE = {
    ("x4", "12"): [750],
    ("x4-x8", "4-8"): [750, 375],
    ("x4-x8-x16-x8", "3-3-3-3"): [750, 375, 188, 375],
    ("x4-x8-x16-x32-x16-x8", "2-2-2-2-2-2"): [750, 375, 188, 94, 188, 375],
}


def lengths_suite(seed: int = 0, trials: int = 1000) -> list[CheckResult]:
    out = []
    for (levels, layers), expected in LENGTH_TABLE.items():
        got = stage_lengths(parse_policy(levels, layers), 2998)
        out.append(CheckResult(f"stage lengths {levels} T=2998", got == expected, f"{got}"))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for (levels, layers) in LENGTH_TABLE:
        pol = parse_policy(levels, layers)
        for T in rng.integers(16, 6001, size=trials):
            worst = max(worst, abs(stage_lengths(pol, int(T))[-1] - T / pol.final_reduction))
    out.append(CheckResult(f"final length within 2 of T/F ({trials} random T per policy)", worst <= 2,
                           f"worst deviation {worst:.3f}"))
    return out


# -- oracle ---------------------------------------------------------------------------

def random_ctc_instance(rng, max_T=8, max_U=3, max_V=4):
    while True:
        T = int(rng.integers(1, max_T + 1))
        V = int(rng.integers(2, max_V + 1))
        U = int(rng.integers(0, max_U + 1))
        labels = rng.integers(1, V, size=U).tolist()
        if feasible(T, labels):
            return rng.standard_normal((T, V)) * rng.choice([0.5, 1.0, 3.0]), labels


def exhaustive_beam(T: int, V: int) -> int:
    """Beam wide enough to never prune: the number of label prefixes of length <= T."""
    return sum((V - 1) ** k for k in range(T + 1))


def oracle_suite(seed: int = 0, n_loss: int = 200, n_beam: int = 100) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_loss):
        logits, labels = random_ctc_instance(rng)
        nll, _ = forward_backward(logits, labels)
        worst = max(worst, abs(nll - brute_force_ctc_nll(logits, labels)))
    out = [CheckResult(f"ctc_loss vs enumeration ({n_loss} instances)", worst < CTC_TOL,
                       f"max abs diff {worst:.2e}")]
    misses = 0
    for _ in range(n_beam):
        T, V = int(rng.integers(1, 7)), int(rng.integers(2, 5))
        logits = rng.standard_normal((T, V)) * rng.choice([0.5, 1.0, 3.0])
        best, _ = brute_force_best_labelling(logits)
        top = beam_search(logits, exhaustive_beam(T, V))[0]
        misses += top.prefix != best
    out.append(CheckResult(f"beam top-1 vs exact best labelling ({n_beam} instances)", misses == 0,
                           f"{misses} mismatches"))
    return out


# -- gradients ------------------------------------------------------------------------

def _check_module(name, module, make_inputs, run, rng) -> CheckResult:
    """Compare taped gradients of sum(run(...) * w) with finite differences for all parameters and inputs."""
    inputs = make_inputs()
    with nx.no_grad():
        probe = run(module, *[Tensor(x) for x in inputs])
    w = rng.standard_normal(probe.shape)

    def loss_value():
        with nx.no_grad():
            return float((run(module, *[Tensor(x) for x in inputs]).data * w).sum())

    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    if module is not None:
        module.zero_grad()
    loss = (run(module, *tensors) * Tensor(w)).sum()
    nx.backward(loss)
    targets = [(t.grad, x) for t, x in zip(tensors, inputs)]
    if module is not None:
        targets += [(p.grad.copy(), p.data) for p in module.parameters()]
    # one flat vector per side: some entries (e.g. key biases under softmax) are exactly zero
    analytic = np.concatenate([a.ravel() for a, _ in targets])
    numeric = np.concatenate([numeric_gradient(loss_value, arr).ravel() for _, arr in targets])
    err = relative_error(analytic, numeric)
    return CheckResult(f"grad {name}", err < GRAD_TOL, f"rel err {err:.2e}")


def grad_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cfg = ConformerLayerConfig(attn_dim=8, heads=2, ffn_dim=12, conv_kernel=3, dropout=0.0)
    lengths = np.array([5, 3])

    def x(*shape):
        return lambda: [rng.standard_normal(shape)]

    def with_mask(m, t):
        return m(t, lengths)

    cases = [
        ("matmul", None, lambda: [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))],
         lambda m, a, b: nx.matmul(a, b)),
        ("linear", Linear(4, 3, rng), x(2, 5, 4), lambda m, t: m(t)),
        ("conv1d", Conv1d(3, 4, 3, rng, stride=2, padding=1), x(2, 6, 3), lambda m, t: m(t)),
        ("conv2d", Conv2d(2, 3, 3, rng, stride=2, padding=1), x(1, 5, 6, 2), lambda m, t: m(t)),
        ("layer_norm", LayerNorm(5), x(3, 5), lambda m, t: m(t)),
        ("softmax", None, x(3, 4), lambda m, t: nx.softmax(t)),
        ("log_softmax", None, x(3, 4), lambda m, t: nx.log_softmax(t)),
        ("swish", None, x(3, 4), lambda m, t: nx.swish(t)),
        ("glu", None, x(3, 4), lambda m, t: nx.glu(t)),
        ("relu", None, x(3, 4), lambda m, t: nx.relu(t)),
        ("ffn", FeedForward(cfg, rng), x(2, 5, 8), lambda m, t: m(t)),
        ("mhsa", MultiHeadSelfAttention(cfg, rng), x(2, 5, 8), with_mask),
        ("conv_module", ConvModule(cfg, rng), x(2, 5, 8), with_mask),
        ("conformer_block", ConformerBlock(cfg, rng), x(2, 5, 8), with_mask),
        ("frontend_x4", FrontendX4(8, 2, 4, rng), x(2, 6, 8), lambda m, t: m(t, [6, 4])[0]),
        ("downsample_x2", DownsampleX2(4, rng, hidden=5), x(2, 5, 4), lambda m, t: m(t, [5, 3])[0]),
        ("upsample_skip", None, lambda: [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 5, 4))],
         lambda m, a, b: skip_combine(upsample_x2(a), b)),
        ("align_for_interctc", None, x(2, 6, 3), lambda m, t: align_for_interctc(t, 4, 8, 3)),
    ]
    out = []
    for name, module, make, run in cases:
        # parameters were initialised small; perturb them so biases/gains are generic
        if module is not None:
            for p in module.parameters():
                p.data = p.data + 0.1 * rng.standard_normal(p.shape)
        out.append(_check_module(name, module, make, run, rng))

    def ctc_case():
        return [rng.standard_normal((5, 4))]

    out.append(_check_module("ctc_loss", None, ctc_case,
                             lambda m, t: _ctc_scalar(t, [1, 3, 3]), rng))
    return out


def _ctc_scalar(t, labels):
    return ctc_loss(t, labels).reshape(1)


SUITES = {
    "params": params_suite,
    "lengths": lengths_suite,
    "oracle": oracle_suite,
    "grad": grad_suite,
}

