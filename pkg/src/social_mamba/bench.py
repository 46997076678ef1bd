"""Wall-time scaling of the agent-axis Mamba scan versus multi-head self-attention."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .baselines import MhsaBlock, MhsaConfig
from .fusion import GlobalAgentScan
from .ssm import MambaBlockConfig

BENCH_COLUMNS = ("block", "N", "median_ms", "slope")


@dataclass
class BenchResult:
    agent_counts: list[int]
    median_ms: dict[str, list[float]] = field(default_factory=dict)

    @property
    def slopes(self) -> dict[str, float]:
        return {b: loglog_slope(self.agent_counts, t) for b, t in self.median_ms.items()}

    def rows(self):
        slopes = self.slopes
        for block, times in self.median_ms.items():
            for n, t in zip(self.agent_counts, times):
                yield {"block": block, "N": n, "median_ms": t, "slope": slopes[block]}


def loglog_slope(x, y) -> float:
    """Least-squares slope of log(y) against log(x)."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def _median_ms(fn, reps: int) -> float:
    fn()  # warm-up, discarded
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def run_scaling_benchmark(agent_counts=(16, 64, 256, 1024), reps: int = 7, d_model: int = 32,
                          d_state: int = 16, n_heads: int = 4, n_steps: int = 4, seed: int = 0) -> BenchResult:
    """Forward-only timings over agent sequences of each length.

    The input is ``[1, N, n_steps, d_model]``: the Mamba path scans the N agents
    at each of ``n_steps`` time steps; the attention path attends over the same
    N-long sequences.
    """
    counts = [int(n) for n in agent_counts]
    if reps < 3:
        raise ValueError("reps must be >= 3")
    if counts != sorted(counts) or len(set(counts)) != len(counts) or counts[0] < 1:
        raise ValueError("agent_counts must be strictly ascending positive integers")
    rng = np.random.default_rng(seed)
    scan = GlobalAgentScan(d_model, rng, "mamba", MambaBlockConfig(d_model, d_state))
    mhsa = MhsaBlock(MhsaConfig(d_model, n_heads), rng)
    result = BenchResult(counts, {"mamba": [], "mhsa": []})
    with ad.no_grad():
        for n in counts:
            z = ad.constant(rng.standard_normal((1, n, n_steps, d_model)))
            seqs = ad.constant(np.ascontiguousarray(z.data[0].transpose(1, 0, 2)))  # [n_steps, N, d]
            result.median_ms["mamba"].append(_median_ms(lambda: scan(z), reps))
            result.median_ms["mhsa"].append(_median_ms(lambda: mhsa(seqs), reps))
    return result


def write_bench_csv(path, result: BenchResult):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for row in result.rows():
            w.writerow({**row, "median_ms": f"{row['median_ms']:.6f}", "slope": f"{row['slope']:.6f}"})
