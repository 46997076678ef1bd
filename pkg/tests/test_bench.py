import csv

import numpy as np
import pytest

from social_mamba.bench import BENCH_COLUMNS, BenchResult, loglog_slope, run_scaling_benchmark, write_bench_csv


def test_slope_of_a_power_law():
    x = np.array([16, 64, 256, 1024])
    assert loglog_slope(x, 3.0 * x**1.5) == pytest.approx(1.5, abs=1e-12)


def test_small_benchmark_and_csv(tmp_path):
    result = run_scaling_benchmark(agent_counts=(4, 8, 16), reps=3, d_model=8, d_state=4, n_heads=2, n_steps=2)
    assert set(result.median_ms) == {"mamba", "mhsa"}
    assert all(len(v) == 3 and min(v) > 0 for v in result.median_ms.values())
    path = tmp_path / "b.csv"
    write_bench_csv(path, result)
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0]) == BENCH_COLUMNS
    assert len(rows) == 6
    assert {r["block"] for r in rows} == {"mamba", "mhsa"}


def test_rows_carry_the_fitted_slope():
    res = BenchResult([1, 10], {"a": [1.0, 100.0]})
    rows = list(res.rows())
    assert [r["N"] for r in rows] == [1, 10]
    assert rows[0]["slope"] == pytest.approx(2.0)


@pytest.mark.parametrize("kw", [{"reps": 2}, {"agent_counts": (64, 16)}, {"agent_counts": (16, 16)},
                                {"agent_counts": (0, 4)}])
def test_benchmark_argument_checks(kw):
    with pytest.raises(ValueError):
        run_scaling_benchmark(**kw)
