"""Multiply-accumulate accounting and wall-clock forward benchmarks.

FLOPs are reported as MACs (one multiply-add counts once). Only conv and
affine layers are counted; batch-norm, activations and pooling count zero.
"""

from __future__ import annotations

import json
import statistics
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .models import BlockSpec, Model

FLOPS_CONVENTION = "FLOPs = MACs (multiply-accumulates) of conv and affine layers"


@dataclass
class LayerFlops:
    layer_id: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: int
    out_h: int
    out_w: int
    macs: int


@dataclass
class FlopsReport:
    layers: list[LayerFlops]
    baseline: list[LayerFlops] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def baseline_total(self) -> int:
        return sum(l.macs for l in self.baseline) if self.baseline else self.total

    @property
    def pruned_ratio(self) -> float:
        return 1.0 - self.total / self.baseline_total

    @property
    def theoretical_speedup(self) -> float:
        return self.baseline_total / self.total

    def to_dict(self) -> dict:
        base = {l.layer_id: l.macs for l in self.baseline} if self.baseline else {}
        return {
            "convention": FLOPS_CONVENTION,
            "baseline_total": self.baseline_total,
            "pruned_total": self.total,
            "pruned_ratio": self.pruned_ratio,
            "theoretical_speedup": self.theoretical_speedup,
            "layers": [dict(asdict(l), baseline_macs=base.get(l.layer_id, l.macs)) for l in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        base = {l.layer_id: l.macs for l in self.baseline} if self.baseline else {}
        rows = [("layer", "kind", "cin", "cout", "k", "out", "macs", "baseline", "reduction")]
        for l in self.layers:
            b = base.get(l.layer_id, l.macs)
            red = 1.0 - l.macs / b if b else 0.0
            rows.append((l.layer_id, l.kind, str(l.in_channels), str(l.out_channels), str(l.kernel),
                         f"{l.out_h}x{l.out_w}", str(l.macs), str(b), f"{red:.4f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = [f"# {FLOPS_CONVENTION}"]
        for r in rows:
            lines.append("  ".join(c.rjust(w) if i >= 2 else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))))
        lines.append(f"baseline total : {self.baseline_total:,d}")
        lines.append(f"pruned total   : {self.total:,d}")
        lines.append(f"pruned ratio   : {100 * self.pruned_ratio:.2f}%")
        lines.append(f"theoretical speedup : {self.theoretical_speedup:.3f}x")
        return "\n".join(lines)


def count_flops(model: Model, baseline: Model | None = None) -> FlopsReport:
    """Per-layer MACs for ``model``; with ``baseline`` the report carries both totals."""
    if model.input_shape is None:
        raise ConfigError("model input size is unresolved; pass input_shape when building")
    layers: list[LayerFlops] = []
    _, h, w = model.input_shape

    def conv(spec, h, w):
        wt = model.params[f"{spec.layer_id}.weight"]
        cout, cin, k, _ = wt.shape
        ho = (h + 2 * spec.pad - k) // spec.stride + 1
        wo = (w + 2 * spec.pad - k) // spec.stride + 1
        layers.append(LayerFlops(spec.layer_id, "conv", cin, cout, k, ho, wo, cout * cin * k * k * ho * wo))
        return ho, wo

    for item in model.items:
        if isinstance(item, BlockSpec):
            h0, w0 = h, w
            for spec in item.layers:
                if spec.kind == "conv":
                    h, w = conv(spec, h, w)
            for spec in item.shortcut or ():
                if spec.kind == "conv":
                    conv(spec, h0, w0)
        elif item.kind == "conv":
            h, w = conv(item, h, w)
        elif item.kind == "pool":
            h, w = h // 2, w // 2
        elif item.kind == "gap":
            h, w = 1, 1
        elif item.kind == "affine":
            wt = model.params[f"{item.layer_id}.weight"]
            dout, din = wt.shape
            layers.append(LayerFlops(item.layer_id, "affine", din, dout, 1, 1, 1, dout * din))
    report = FlopsReport(layers)
    if baseline is not None:
        report.baseline = count_flops(baseline).layers
    return report


def layerwise_reduction(p_i: float, p_next: float) -> float:
    """Fraction of a layer's MACs removed when its inputs lose ``p_i`` and outputs ``p_next``."""
    if not (0 <= p_i < 1 and 0 <= p_next < 1):
        raise ValueError("pruning rates must lie in [0, 1)")
    return 1.0 - (1.0 - p_next) * (1.0 - p_i)


def _thread_limit(threads: int | None):
    if threads is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def bench_forward(
    model: Model,
    input_shape=None,
    batch: int = 16,
    reps: int = 10,
    warmup: int = 2,
    threads: int | None = 1,
    seed: int = 0,
) -> dict:
    """Median wall-clock milliseconds of one eval-mode forward over ``reps`` runs."""
    if reps < 3:
        raise ValueError("reps must be >= 3")
    shape = tuple(input_shape or model.input_shape or ())
    if len(shape) != 3:
        raise ConfigError("benchmark needs an input shape (C, H, W)")
    x = np.random.default_rng(seed).standard_normal((batch, *shape)).astype(model.dtype)
    was_training = model.training
    model.eval()
    times = []
    try:
        with _thread_limit(threads):
            for _ in range(warmup):
                model(x)
            for _ in range(reps):
                t0 = time.perf_counter()
                model(x)
                times.append((time.perf_counter() - t0) * 1e3)
    finally:
        model.training = was_training
    return {
        "median_ms": statistics.median(times),
        "min_ms": min(times),
        "max_ms": max(times),
        "reps": reps,
        "batch": batch,
        "threads": threads,
    }


@dataclass
class SpeedupReport:
    baseline_ms: float
    pruned_ms: float
    realistic_speedup: float
    theoretical_speedup: float
    reps: int
    batch: int
    baseline_range_ms: tuple[float, float] = (0.0, 0.0)
    pruned_range_ms: tuple[float, float] = (0.0, 0.0)
    threads: int | None = 1

    @property
    def gap(self) -> float:
        return self.theoretical_speedup - self.realistic_speedup

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gap"] = self.gap
        return d

    def to_text(self) -> str:
        return "\n".join([
            f"batch={self.batch} reps={self.reps} threads={self.threads}",
            f"baseline time (ms)  : {self.baseline_ms:.2f}  [{self.baseline_range_ms[0]:.2f}, {self.baseline_range_ms[1]:.2f}]",
            f"pruned time (ms)    : {self.pruned_ms:.2f}  [{self.pruned_range_ms[0]:.2f}, {self.pruned_range_ms[1]:.2f}]",
            f"realistic speedup   : {self.realistic_speedup:.3f}x",
            f"theoretical speedup : {self.theoretical_speedup:.3f}x",
            f"gap (theo - real)   : {self.gap:.3f}",
        ])


def speedup_report(
    baseline: Model, pruned: Model, batch: int = 16, reps: int = 10, warmup: int = 2, threads: int | None = 1
) -> SpeedupReport:
    b = bench_forward(baseline, batch=batch, reps=reps, warmup=warmup, threads=threads)
    p = bench_forward(pruned, batch=batch, reps=reps, warmup=warmup, threads=threads)
    theo = count_flops(pruned, baseline).theoretical_speedup
    return SpeedupReport(
        b["median_ms"], p["median_ms"], b["median_ms"] / p["median_ms"], theo, reps, batch,
        (b["min_ms"], b["max_ms"]), (p["min_ms"], p["max_ms"]), threads,
    )
