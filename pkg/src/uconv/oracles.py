"""Independent reference computations used by the test suite and ``uconv check``.

Nothing here shares code with the paths it checks: CTC quantities come from
enumerating every frame-level path, gradients from central finite differences,
convolutions from explicit sliding windows.
"""

from __future__ import annotations

import numpy as np


def _all_paths(T: int, V: int) -> np.ndarray:
    """Every length-T sequence over V symbols, ``[V**T, T]``."""
    return np.stack(np.unravel_index(np.arange(V ** T), (V,) * T), axis=-1)


def _labelling_codes(paths: np.ndarray, V: int) -> np.ndarray:
    """Integer code of each path's collapsed labelling (base-V digits, labels >= 1)."""
    prev = np.concatenate([np.full((len(paths), 1), -1), paths[:, :-1]], axis=1)
    emit = (paths != 0) & (paths != prev)
    code = np.zeros(len(paths), dtype=np.int64)
    for t in range(paths.shape[1]):
        code = np.where(emit[:, t], code * V + paths[:, t], code)
    return code


def _code_of(labels, V: int) -> int:
    code = 0
    for k in labels:
        code = code * V + int(k)
    return code


def _decode_code(code: int, V: int) -> tuple:
    out = []
    while code:
        code, k = divmod(code, V)
        out.append(k)
    return tuple(reversed(out))


def _path_logprobs(logits: np.ndarray, paths: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return logp[np.arange(logits.shape[0])[None, :], paths].sum(axis=1)


def reachable_labellings(T: int, V: int) -> set:
    """Every labelling some length-T path collapses to (ignores probabilities)."""
    if T == 0:
        return {()}
    codes = np.unique(_labelling_codes(_all_paths(T, V), V))
    return {_decode_code(int(c), V) for c in codes}


def brute_force_ctc_nll(logits: np.ndarray, labels) -> float:
    """-log sum over all V**T paths collapsing to ``labels``."""
    T, V = logits.shape
    if T == 0:
        return 0.0 if len(labels) == 0 else float("inf")
    paths = _all_paths(T, V)
    lp = _path_logprobs(logits, paths)
    hit = _labelling_codes(paths, V) == _code_of(labels, V)
    if not hit.any():
        return float("inf")
    sel = lp[hit]
    m = sel.max()
    return float(-(m + np.log(np.exp(sel - m).sum())))


def brute_force_best_labelling(logits: np.ndarray) -> tuple[tuple, float]:
    """Most probable labelling (marginalised over paths) and its log probability.

    Ties go to the lexicographically smallest labelling.
    """
    T, V = logits.shape
    paths = _all_paths(T, V)
    lp = _path_logprobs(logits, paths)
    codes = _labelling_codes(paths, V)
    uniq, inv = np.unique(codes, return_inverse=True)
    m = lp.max()
    mass = np.bincount(inv, weights=np.exp(lp - m))
    scores = m + np.log(mass)
    best = scores.max()
    cands = sorted(_decode_code(int(c), V) for c in uniq[scores == best])
    return cands[0], float(best)


def labelling_logprob(logits: np.ndarray, labels) -> float:
    return -brute_force_ctc_nll(logits, labels)


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute disagreement relative to the gradient's own scale (max-norm)."""
    if analytic.size == 0:
        return 0.0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def naive_conv1d(x, kernel, bias, stride, padding):
    T, cin = x.shape
    k, _, cout = kernel.shape
    xp = np.zeros((T + 2 * padding, cin))
    xp[padding:padding + T] = x
    t_out = (T + 2 * padding - k) // stride + 1
    out = np.zeros((t_out, cout))
    for t in range(t_out):
        for o in range(cout):
            acc = bias[o]
            for j in range(k):
                for c in range(cin):
                    acc += xp[t * stride + j, c] * kernel[j, c, o]
            out[t, o] = acc
    return out


def naive_conv2d(x, kernel, bias, stride, padding):
    T, F, cin = x.shape
    k = kernel.shape[0]
    cout = kernel.shape[3]
    xp = np.zeros((T + 2 * padding, F + 2 * padding, cin))
    xp[padding:padding + T, padding:padding + F] = x
    t_out = (T + 2 * padding - k) // stride + 1
    f_out = (F + 2 * padding - k) // stride + 1
    out = np.zeros((t_out, f_out, cout))
    for t in range(t_out):
        for f in range(f_out):
            window = xp[t * stride:t * stride + k, f * stride:f * stride + k, :]
            for o in range(cout):
                out[t, f, o] = bias[o] + float((window * kernel[:, :, :, o]).sum())
    return out
