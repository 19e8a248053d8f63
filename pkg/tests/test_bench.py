import csv
import io

import numpy as np
import pytest
from threadpoolctl import threadpool_info

from uconv.bench import (CSV_COLUMNS, ConfigurationError, compare, single_thread, synthetic_utterance,
                         time_forward)
from uconv.frontend import AudioError
from uconv.model import PRESETS, build

TOY = PRESETS["toy"]


def test_synthetic_utterance():
    a, b = synthetic_utterance(30, 12, seed=3), synthetic_utterance(30, 12, seed=3)
    assert a.features.shape == (2998, 80)
    assert np.array_equal(a.features, b.features) and a.labels == b.labels
    assert all(1 <= k < 257 for k in a.labels)
    with pytest.raises(AudioError, match="too short"):
        synthetic_utterance(0)


def test_argument_checks():
    enc = build(TOY)
    with pytest.raises(ConfigurationError):
        time_forward(enc, 1.0, threads=2)
    with pytest.raises(ValueError):
        time_forward(enc, 1.0, repeats=4)
    with pytest.raises(ValueError):
        compare([("a", TOY)], 1.0, repeats=5)


def test_single_thread_is_enforced():
    with single_thread():
        assert all(p["num_threads"] == 1 for p in threadpool_info())


def test_entry_metadata_and_stage_breakdown():
    entry = time_forward(build(TOY), 30, repeats=5, name="toy")
    assert entry.frames == 2998 and entry.output_length == 375
    assert len(entry.times) == 5 and entry.median > 0
    assert set(entry.stage_times) >= {"frontend", "stage0:x4", "stage3:x8", "output"}
    assert abs(sum(entry.stage_times.values()) - entry.mean) <= 0.05 * entry.mean


def test_repeat_runs_are_stable():
    enc = build(PRESETS["uconv-d16-f8-v1"])
    a = time_forward(enc, 10, repeats=7, seed=1)
    b = time_forward(enc, 10, repeats=7, seed=1)
    assert abs(a.median - b.median) <= 0.10 * max(a.median, b.median)


def test_self_comparison_and_report_shape():
    cfg = PRESETS["uconv-d16-f8-v1"]
    report = compare([("base", cfg), ("same", cfg)], duration_s=10, repeats=5)
    assert report.delta_pct(report.baseline) == 0.0
    assert abs(report.delta_pct(report.entries[1])) < 10.0
    rows = list(csv.DictReader(io.StringIO(report.to_csv())))
    assert list(rows[0]) == CSV_COLUMNS
    assert [r["model"] for r in rows] == ["base", "same"]
    assert rows[0]["policy"] == "x4-x8-x16-x8" and rows[0]["layers"] == "3-3-3-3"
    assert rows[0]["params"] == "24601793"
    md = report.to_markdown().splitlines()
    assert md[0].startswith("| model | params |") and len(md) == 4
    again = compare([("base", cfg), ("same", cfg)], duration_s=1, repeats=5)
    assert _metadata(report) == _metadata(again)


def _metadata(report):
    return [{k: v for k, v in row.items() if not k.endswith(("_ms", "_pct"))} for row in report.rows()]


def test_attention_makes_baseline_superlinear():
    enc = build(PRESETS["conformer-s"])
    short = time_forward(enc, 15, repeats=5)
    long = time_forward(enc, 30, repeats=5)
    assert short.frames < 1500 < long.frames
    assert long.median / short.median > 2.0
