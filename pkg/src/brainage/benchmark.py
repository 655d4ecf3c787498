"""Wall-clock scaling harness for the stem against full self-attention."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import Stem, StemConfig, flop_count, full_self_attention_reference
from .errors import ConfigError
from .numcore import DeterministicRng, no_grad

BENCH_COMPONENTS = ("stem", "full_self_attention")


@dataclass
class BenchConfig:
    n_values: tuple[int, ...] = (256, 512, 1024, 2048, 4096)
    repetitions: int = 3
    d_model: int = 64
    n_heads: int = 4
    stem_queries: int = 16
    ffn_hidden: int = 128
    stem_batch: int = 8
    seed: int = 0

    def validate(self) -> None:
        bad = [f for f in ("repetitions", "d_model", "n_heads", "stem_queries", "ffn_hidden", "stem_batch")
               if getattr(self, f) < 1]
        if len(self.n_values) < 2 or any(n < 1 for n in self.n_values):
            bad.append("n_values")
        if self.d_model % max(self.n_heads, 1):
            bad.append("n_heads")
        if bad:
            raise ConfigError(f"invalid bench config fields: {bad}", bad)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_values"] = list(self.n_values)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        d = dict(d)
        if "n_values" in d:
            d["n_values"] = tuple(int(n) for n in d["n_values"])
        return cls(**d)


@dataclass
class BenchRow:
    component: str
    n: int
    flops: int
    wall_ns: int


@dataclass
class BenchResult:
    rows: list[BenchRow] = field(default_factory=list)
    slopes: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "slopes": self.slopes}


def loglog_slope(n: Sequence[float], t: Sequence[float]) -> float:
    """Least-squares slope of log t against log n."""
    x = np.log(np.asarray(n, dtype=np.float64))
    y = np.log(np.asarray(t, dtype=np.float64))
    x = x - x.mean()
    return float(np.dot(x, y - y.mean()) / np.dot(x, x))


def _best_ns(fn, reps: int) -> int:
    best = math.inf
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        best = min(best, time.perf_counter_ns() - t0)
    return int(best)


def run_bench(config: BenchConfig, components: Sequence[str] = BENCH_COMPONENTS) -> BenchResult:
    """Time each component at every n (best of ``repetitions`` after one warm-up).

    The stem runs the library module on a batch of ``stem_batch`` token sets so
    that per-call interpreter overhead does not mask the linear term; its
    reported flops are per set.  Full attention runs the per-head numpy
    baseline on one set.
    """
    config.validate()
    rng = DeterministicRng(config.seed, "bench")
    d = config.d_model
    stem = Stem(StemConfig(config.stem_queries, d, config.n_heads, config.ffn_hidden), rng.substream("stem"))
    w = {k: rng.substream(k).normal(0.0, d ** -0.5, size=(d, d)) for k in ("q", "k", "v", "o")}
    result = BenchResult()
    for comp in components:
        for n in config.n_values:
            if comp == "stem":
                x = rng.substream(("x", n)).normal(size=(config.stem_batch, n, d))

                def call(x=x):
                    with no_grad():
                        stem(x)
                flops = flop_count("stem", n, d_model=d, m=config.stem_queries, ffn_hidden=config.ffn_hidden)
            elif comp == "full_self_attention":
                x = rng.substream(("x", n)).normal(size=(n, d))

                def call(x=x):
                    full_self_attention_reference(x, config.n_heads, w)
                flops = flop_count("full_self_attention", n, d_model=d)
            else:
                raise ConfigError(f"unknown bench component {comp!r}", ["components"])
            call()
            result.rows.append(BenchRow(comp, n, flops, _best_ns(call, config.repetitions)))
        pts = [(r.n, r.wall_ns) for r in result.rows if r.component == comp]
        result.slopes[comp] = loglog_slope([p[0] for p in pts], [p[1] for p in pts])
    return result


def write_bench_csv(result: BenchResult, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "n", "flops", "wall_ns"])
        for r in result.rows:
            w.writerow([r.component, r.n, r.flops, r.wall_ns])
