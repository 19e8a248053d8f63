import numpy as np
import pytest
from hypothesis import given, strategies as st

from uconv import numerics as nx
from uconv.numerics import Tensor
from uconv.reduction import (DegenerateInputError, DownsampleX2, FrontendX4, PolicyError,
                             ReductionPolicy, downsample_params, frontend_params, parse_policy,
                             skip_combine, split_layers, stage_lengths, upsample_x2)

POLICIES = ["x4", "x4-x8", "x4-x8-x4", "x4-x8-x16-x8", "x4-x8-x16-x8-x4", "x4-x8-x16-x32-x16-x8"]


def _ceil_half(n):
    return (n + 1) // 2


def test_parse_examples():
    p = parse_policy("x4-x8-x16-x8", "3-3-3-3")
    assert p.levels == (4, 8, 16, 8) and p.layers_per_level == (3, 3, 3, 3)
    assert p.reduction_depth == 16 and p.final_reduction == 8
    base = parse_policy("x4", "12")
    assert base == ReductionPolicy((4,), (12,))
    assert base.transitions() == []


@pytest.mark.parametrize("text,layers,pos", [
    ("x4-x16", "6-6", 1),
    ("x4-x8-x12", "4-4-4", 2),
    ("x8-x16", "6-6", 0),
    ("x4-x8", "4-4-4", None),
    ("x4-y8", "4-4", 1),
    ("x4-x8", "4-a", 1),
])
def test_parse_errors_carry_position(text, layers, pos):
    with pytest.raises(PolicyError) as err:
        parse_policy(text, layers)
    if pos is not None:
        assert err.value.position == pos


def test_shorthand_and_split():
    p = parse_policy("D16-F8")
    assert p.levels == (4, 8, 16, 8)
    assert p.layers_per_level == (3, 3, 3, 3)
    assert parse_policy("D32-F8").levels == (4, 8, 16, 32, 16, 8)
    # 12 over 5 levels: the two spare layers go to x16, then to the first x8
    assert parse_policy("D16-F4", total_layers=12).layers_per_level == (2, 3, 3, 2, 2)
    assert split_layers([4, 8, 16, 8], 14) == [3, 4, 4, 3]
    with pytest.raises(PolicyError):
        parse_policy("D8-F16")


def test_stage_length_table():
    assert stage_lengths(parse_policy("x4-x8-x16-x8", "3-3-3-3"), 2998) == [750, 375, 188, 375]
    assert stage_lengths(parse_policy("x4", "12"), 2998) == [750]
    assert stage_lengths(parse_policy("x4-x8-x16-x32-x16-x8", "2-2-2-2-2-2"), 2998) == \
        [750, 375, 188, 94, 188, 375]
    assert stage_lengths(parse_policy("x4", "1"), 4) == [1]
    with pytest.raises(DegenerateInputError):
        stage_lengths(parse_policy("x4", "1"), 0)


@pytest.mark.parametrize("text", POLICIES)
@given(T=st.integers(16, 6000))
def test_final_length_close_to_t_over_f(text, T):
    pol = parse_policy(text, "-".join(["1"] * len(text.split("-"))))
    assert abs(stage_lengths(pol, T)[-1] - T / pol.final_reduction) <= 2


@pytest.mark.parametrize("text", POLICIES)
@given(T=st.integers(1, 3000))
def test_stage_lengths_monotone_in_t(text, T):
    pol = parse_policy(text, "-".join(["1"] * len(text.split("-"))))
    a, b = stage_lengths(pol, T), stage_lengths(pol, T + 1)
    assert all(x <= y for x, y in zip(a, b))


def test_upsample_examples():
    x = Tensor(np.array([[1.0, 1.5], [2.0, 2.5]]))
    np.testing.assert_array_equal(upsample_x2(x).data, [[1, 1.5], [1, 1.5], [2, 2.5], [2, 2.5]])
    assert upsample_x2(Tensor(np.zeros((188, 3)))).shape == (376, 3)


@given(st.integers(1, 40), st.integers(1, 5))
def test_upsample_round_trip_and_no_new_values(T, d):
    x = np.random.default_rng(T * 7 + d).standard_normal((T, d))
    up = upsample_x2(Tensor(x)).data
    np.testing.assert_array_equal(up[::2], x)
    rows = {r.tobytes() for r in x}
    assert all(r.tobytes() in rows for r in up)


def test_skip_combine(rng):
    up = Tensor(rng.standard_normal((376, 4)))
    out = skip_combine(up, Tensor(np.zeros((375, 4))))
    assert out.shape == (375, 4)
    np.testing.assert_array_equal(out.data, up.data[:375])
    a, b = Tensor(rng.standard_normal((5, 2))), Tensor(rng.standard_normal((5, 2)))
    np.testing.assert_array_equal(skip_combine(a, b).data, skip_combine(b, a).data)
    for bad in (374, 377):
        with pytest.raises(ValueError, match="alignment"):
            skip_combine(Tensor(np.zeros((bad, 4))), Tensor(np.zeros((375, 4))))


def test_frontend_lengths_and_params(rng):
    fe = FrontendX4(80, 64, 280, rng)
    assert fe.num_params() == frontend_params(80, 64, 280)
    assert frontend_params(80, 64, 280) == 1 * 64 * 9 + 64 + 64 * 64 * 9 + 64 + 64 * 20 * 280 + 280
    small = FrontendX4(80, 4, 8, rng)
    x, lengths = small(Tensor(rng.standard_normal((2, 21, 80))), [21, 9])
    assert x.shape == (2, 6, 8)
    assert list(lengths) == [6, 3]
    x, lengths = small(Tensor(rng.standard_normal((1, 4, 80))), [4])
    assert x.shape == (1, 1, 8)


def test_downsample_block(rng):
    assert downsample_params(280) == 280 * 512 * 3 + 512 + 512 * 512 * 3 + 512 + 512 * 280 + 280
    assert abs(downsample_params(280) - 1.4e6) / 1.4e6 <= 0.10
    assert DownsampleX2(280, rng).num_params() == downsample_params(280)
    ds = DownsampleX2(6, rng, hidden=8)
    y, lengths = ds(Tensor(rng.standard_normal((3, 375, 6))), [375, 200, 1])
    assert y.shape == (3, 188, 6)
    assert list(lengths) == [188, 100, 1]
    y, lengths = ds(Tensor(rng.standard_normal((1, 1, 6))), [1])
    assert y.shape == (1, 1, 6)


@given(st.lists(st.integers(1, 30), min_size=1, max_size=4))
def test_downsample_halves_every_valid_length(lengths):
    rng = np.random.default_rng(0)
    ds = DownsampleX2(4, rng, hidden=4)
    T = max(lengths)
    _, out = ds(Tensor(rng.standard_normal((len(lengths), T, 4))), lengths)
    assert list(out) == [_ceil_half(n) for n in lengths]


def test_downsample_ignores_padding_content(rng):
    ds = DownsampleX2(4, rng, hidden=6)
    x = rng.standard_normal((1, 7, 4))
    padded = np.concatenate([x, rng.standard_normal((1, 5, 4))], axis=1)
    a, _ = ds(Tensor(x), [7])
    b, _ = ds(Tensor(padded), [7])
    np.testing.assert_allclose(b.data[:, :4], a.data, rtol=0, atol=1e-12)
