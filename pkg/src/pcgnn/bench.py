"""Memory and operation accounting plus wall-clock timing of single graph layers.

Memory is counted in floats of transient buffers that a layer allocates
through a :class:`MemoryCounter`; parameters and the shared input arrays are
excluded.  Benchmarks run in 32-bit floats with the BLAS pool pinned to one
thread.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .geometry import knn_graph, substream
from .io import atomic_write
from .kernels import FEATURE_ORDER, MemoryCounter, NeighborGraph
from .layers import LayerSpec, block_spec, make_layer

CSV_COLUMNS = (
    "case", "kind", "V", "E", "k", "d_in", "d_out", "mem_analytic", "mem_measured", "ops",
    "median_us", "p10_us", "p90_us", "speedup_vs_baseline", "mem_ratio_vs_baseline",
)

BENCH_DTYPE = np.float32


class TimerResolutionError(RuntimeError):
    pass


def bench_spec(kind: str, d_in: int, d_out: int, **kw) -> LayerSpec:
    """A one-layer spec of ``kind`` mapping ``d_in`` node features to ``d_out``."""
    if kind == "linmem-extractor":
        kw.setdefault("linmem_weights", "separate")
    if kind == "geo-extractor":
        kw.setdefault("features", FEATURE_ORDER)
    return block_spec(kind, d_in, d_out, **kw)


# -- accounting --------------------------------------------------------------


@dataclass(frozen=True)
class OpCount:
    mlp: int
    comparisons: int

    @property
    def total(self) -> int:
        return self.mlp + self.comparisons


def _mlp_macs(spec: LayerSpec) -> int:
    w = spec.mlp.widths
    return sum(a * b for a, b in zip(w[:-1], w[1:]))


def account_ops(spec: LayerSpec, V: int, k: int, d_in: int | None = None,
                d_out: int | None = None) -> OpCount:
    """Multiply-accumulates (counted twice) of the MLPs plus aggregation comparisons.

    Edge-path layers run their MLP on ``E = V * k`` messages, vertex-path
    layers on ``V`` nodes; both compare ``E * d_out`` values when reducing.
    """
    _check_sizes(spec, d_in, d_out)
    E = V * k
    rows = V if spec.vertex_path else E
    macs = rows * _mlp_macs(spec)
    if spec.linmem_weights == "separate":
        macs *= 2
    return OpCount(2 * macs, E * spec.out_width)


def analytic_memory(spec: LayerSpec, V: int, k: int) -> int:
    """Closed-form transient floats.

    Edge path: the message matrix plus every MLP layer output over ``E``
    rows (a lower bound on what any materialising implementation holds).
    Vertex path: a ceiling of ``3 V max(d_in, d_out)`` for simplified blocks
    and ``4 V d_out`` for the linear-memory extractor.
    """
    E = V * k
    if not spec.vertex_path:
        return E * spec.message_width + E * sum(spec.mlp.widths[1:])
    if spec.kind == "linmem-extractor":
        return 4 * V * spec.out_width
    return 3 * V * max(spec.in_features, spec.out_width, spec.mlp.in_width, *spec.mlp.widths[1:])


def _check_sizes(spec: LayerSpec, d_in, d_out) -> None:
    if d_in is not None and d_in != spec.in_features:
        raise ValueError(f"spec expects {spec.in_features} input features, got d_in={d_in}")
    if d_out is not None and d_out != spec.mlp.out_width:
        raise ValueError(f"spec produces {spec.mlp.out_width} features, got d_out={d_out}")


@dataclass
class _Inputs:
    graph: NeighborGraph
    P: np.ndarray
    X: np.ndarray


def bench_inputs(V: int, k: int, d_in: int, seed: int = 0) -> _Inputs:
    """Random cloud, its kNN graph and node features; identical for a given (V, k, d_in, seed)."""
    rng = substream(seed, f"bench-{V}-{k}-{d_in}")
    P = rng.normal(size=(V, 3))
    X = rng.normal(size=(V, d_in))
    return _Inputs(knn_graph(P, k), P.astype(BENCH_DTYPE), X.astype(BENCH_DTYPE))


def _layer(spec: LayerSpec, seed: int):
    return make_layer(spec, substream(seed, "bench-init"), "bench")


def measure_memory(spec: LayerSpec, inputs: _Inputs, seed: int = 0) -> int:
    """Peak transient floats of one inference call, read from the allocation counter."""
    layer = _layer(spec, seed)
    counter = MemoryCounter()
    out = layer.infer(inputs.graph, inputs.P, inputs.X, counter, BENCH_DTYPE)
    del out
    return int(round(counter.peak_floats(BENCH_DTYPE)))


def account_memory(spec: LayerSpec, V: int, k: int, d_in: int | None = None,
                   d_out: int | None = None, seed: int = 0) -> tuple[int, int]:
    """``(analytic floats, measured floats)`` for one layer at the given sizes."""
    _check_sizes(spec, d_in, d_out)
    return analytic_memory(spec, V, k), measure_memory(spec, bench_inputs(V, k, spec.in_features, seed), seed)


# -- timing ------------------------------------------------------------------


@dataclass(frozen=True)
class TimingStats:
    median_us: float
    p10_us: float
    p90_us: float
    samples_us: tuple[float, ...] = field(repr=False, default=())

    @classmethod
    def from_samples(cls, samples_us: Sequence[float]) -> "TimingStats":
        s = np.asarray(samples_us, dtype=np.float64)
        return cls(float(np.median(s)), float(np.percentile(s, 10)), float(np.percentile(s, 90)),
                   tuple(float(v) for v in s))


def time_kernel(spec: LayerSpec, V: int, k: int, repeats: int = 30, warmup: int = 3,
                seed: int = 0, inputs: _Inputs | None = None) -> TimingStats:
    """Wall-clock statistics of ``repeats`` inference calls after ``warmup`` discarded runs.

    Graph construction is outside the timed region.  BLAS is limited to one
    thread while timing.
    """
    if repeats < 30:
        raise ValueError("repeats must be at least 30")
    inputs = inputs or bench_inputs(V, k, spec.in_features, seed)
    layer = _layer(spec, seed)
    _ = inputs.graph.slots  # build cached slot tables before timing
    res = time.get_clock_info("perf_counter").resolution
    samples = []
    with threadpool_limits(limits=1):
        for i in range(warmup + repeats):
            t0 = time.perf_counter()
            layer.infer(inputs.graph, inputs.P, inputs.X, None, BENCH_DTYPE)
            dt = time.perf_counter() - t0
            if i >= warmup:
                samples.append(dt * 1e6)
    stats = TimingStats.from_samples(samples)
    if stats.median_us * 1e-6 < 100 * res:
        raise TimerResolutionError(f"median {stats.median_us:.3f}us is within 100x of the "
                                   f"timer resolution ({res * 1e6:.3f}us); enlarge the case")
    return stats


# -- cases and reports -------------------------------------------------------


@dataclass(frozen=True)
class BenchCase:
    name: str
    kind: str
    V: int
    k: int
    d_in: int
    d_out: int
    baseline: str | None = None
    options: tuple = ()

    def spec(self) -> LayerSpec:
        return bench_spec(self.kind, self.d_in, self.d_out, **dict(self.options))


@dataclass
class CaseResult:
    case: BenchCase
    E: int
    mem_analytic: int
    mem_measured: int
    ops: int
    timing: TimingStats | None


def _cases(V, k, d, kinds, baseline="edgeconv"):
    return [BenchCase(kind, kind, V, k, d, d, baseline if kind != baseline else None) for kind in kinds]


BENCH_PRESETS = {
    "memory-ratio": _cases(1024, 20, 128, ("edgeconv", "simple-conv")),
    "layers": _cases(1024, 20, 128, ("edgeconv", "geo-extractor", "simple-conv", "linmem-extractor")),
    "k-sweep": [BenchCase(f"{kind}-k{k}", kind, 1024, k, 64, 64, f"edgeconv-k{k}" if kind != "edgeconv" else None)
                for k in (4, 8, 16, 32) for kind in ("edgeconv", "simple-conv")],
}


def run_cases(cases: Sequence[BenchCase], repeats: int = 30, timing: bool = True,
              seed: int = 0) -> list[CaseResult]:
    if not cases:
        raise ValueError("at least one case is required")
    out = []
    for c in cases:
        spec = c.spec()
        inputs = bench_inputs(c.V, c.k, c.d_in, seed)
        mem = measure_memory(spec, inputs, seed)
        t = time_kernel(spec, c.V, c.k, repeats, seed=seed, inputs=inputs) if timing else None
        out.append(CaseResult(c, inputs.graph.E, analytic_memory(spec, c.V, c.k), mem,
                              account_ops(spec, c.V, c.k).total, t))
    return out


def report_rows(results: Sequence[CaseResult]) -> list[dict]:
    by_name = {r.case.name: r for r in results}
    rows = []
    for r in results:
        base = by_name.get(r.case.baseline) if r.case.baseline else r
        if r.case.baseline and base is None:
            raise ValueError(f"case {r.case.name!r} names unknown baseline {r.case.baseline!r}")
        t = r.timing
        speed = ""
        if t is not None and base.timing is not None:
            speed = f"{base.timing.median_us / t.median_us:.4f}"
        rows.append({
            "case": r.case.name, "kind": r.case.kind, "V": r.case.V, "E": r.E, "k": r.case.k,
            "d_in": r.case.d_in, "d_out": r.case.d_out,
            "mem_analytic": r.mem_analytic, "mem_measured": r.mem_measured, "ops": r.ops,
            "median_us": "" if t is None else f"{t.median_us:.1f}",
            "p10_us": "" if t is None else f"{t.p10_us:.1f}",
            "p90_us": "" if t is None else f"{t.p90_us:.1f}",
            "speedup_vs_baseline": speed,
            "mem_ratio_vs_baseline": f"{base.mem_measured / r.mem_measured:.4f}",
        })
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def rows_to_markdown(rows: Sequence[dict]) -> str:
    lines = ["| " + " | ".join(CSV_COLUMNS) + " |", "|" + "---|" * len(CSV_COLUMNS)]
    for row in rows:
        lines.append("| " + " | ".join(str(row[c]) for c in CSV_COLUMNS) + " |")
    return "\n".join(lines) + "\n"


def results_to_raw(results: Sequence[CaseResult]) -> dict:
    return {"cases": [
        {"case": asdict(r.case), "E": r.E, "mem_analytic": r.mem_analytic,
         "mem_measured": r.mem_measured, "ops": r.ops,
         "samples_us": None if r.timing is None else list(r.timing.samples_us)}
        for r in results
    ]}


def results_from_raw(doc: dict) -> list[CaseResult]:
    out = []
    for c in doc["cases"]:
        case = dict(c["case"])
        case["options"] = tuple(tuple(o) for o in case.get("options", ()))
        t = None if c["samples_us"] is None else TimingStats.from_samples(c["samples_us"])
        out.append(CaseResult(BenchCase(**case), c["E"], c["mem_analytic"], c["mem_measured"], c["ops"], t))
    return out


def emit_report(results: Sequence[CaseResult], out_dir, stem: str = "bench") -> dict[str, Path]:
    """Write ``<stem>.csv``, ``<stem>.md`` and the raw samples ``<stem>_raw.json``."""
    if not results:
        raise ValueError("at least one case is required")
    out_dir = Path(out_dir)
    rows = report_rows(results)
    paths = {"csv": out_dir / f"{stem}.csv", "md": out_dir / f"{stem}.md",
             "raw": out_dir / f"{stem}_raw.json"}
    atomic_write(paths["csv"], rows_to_csv(rows))
    atomic_write(paths["md"], rows_to_markdown(rows))
    atomic_write(paths["raw"], json.dumps(results_to_raw(results), indent=1, sort_keys=True))
    return paths
