"""Filter scoring, asymptotic rate schedules, soft/hard pruning and extraction."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    ConfigError,
    EpochRangeError,
    ExtractionError,
    LayerLookupError,
    NumericError,
    PolicyError,
    ScheduleError,
    SelectionError,
)
from .models import Model

MODES = ("hard", "soft", "asymptotic-soft")


@dataclass
class PruneConfig:
    """Pruning hyper-parameters.

    ``layer_filter`` is a predicate over layer ids, or a regular expression
    string matched with ``re.search`` (the JSON-friendly form).
    ``rounding`` controls how ``N * rate`` becomes a filter count.
    """

    mode: str = "asymptotic-soft"
    p: int = 2
    P_goal: float = 0.3
    P_min: float = 0.0
    D: float = 1 / 8
    epoch_max: int = 200
    interval: int = 1
    layer_filter: Callable[[str], bool] | str | None = None
    rounding: str = "ceil"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"prune mode must be one of {MODES}, got {self.mode!r}")
        if self.p not in (1, 2):
            raise ConfigError("norm order p must be 1 or 2")
        if self.mode == "soft":
            self.P_min = self.P_goal
        if not 0 <= self.P_min <= self.P_goal < 1:
            raise ConfigError(f"need 0 <= P_min <= P_goal < 1, got P_min={self.P_min}, P_goal={self.P_goal}")
        if not 0 < self.D < 1:
            raise ConfigError(f"D must lie in (0, 1), got {self.D}")
        if self.interval < 1 or self.epoch_max < 1:
            raise ConfigError("interval and epoch_max must be >= 1")
        if self.rounding not in ("ceil", "floor"):
            raise ConfigError("rounding must be 'ceil' or 'floor'")

    def selects(self, layer_id: str) -> bool:
        f = self.layer_filter
        if f is None:
            return True
        if isinstance(f, str):
            return re.search(f, layer_id) is not None
        return bool(f(layer_id))

    @classmethod
    def from_dict(cls, d: dict) -> "PruneConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown prune config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PruneSchedule:
    """``rate(epoch) = a * exp(-k * epoch) + b`` clamped to ``[P_min, P_goal]``."""

    a: float
    k: float
    b: float
    P_goal: float
    P_min: float
    D: float
    epoch_max: int

    def rate(self, epoch: int | float) -> float:
        return rate_at(self, epoch)


def solve_schedule(P_goal: float, P_min: float = 0.0, D: float = 1 / 8, epoch_max: int = 200) -> PruneSchedule:
    """Fit the exponential through (0, P_min), (D*E, 3/4 P_goal), (E, P_goal).

    Eliminating ``a`` and ``b`` leaves one equation in ``u = k*E``::

        (1 - exp(-u*D)) / (1 - exp(-u)) = (3/4 P_goal - P_min) / (P_goal - P_min)

    whose left side increases from D to 1, so it is bisected on (1e-6, 100).
    """
    if epoch_max < 1 or not 0 < D < 1 or not 0 <= P_min <= P_goal < 1:
        raise ScheduleError("invalid schedule parameters")
    if P_goal == P_min:
        return PruneSchedule(0.0, 0.0, P_goal, P_goal, P_min, D, epoch_max)
    mid = 0.75 * P_goal
    if mid <= P_min:
        raise ScheduleError(f"anchors inconsistent: 3/4 * P_goal = {mid} <= P_min = {P_min}")
    target = (mid - P_min) / (P_goal - P_min)

    def residual(u: float) -> float:
        return -math.expm1(-u * D) / -math.expm1(-u) - target

    lo, hi = 1e-6, 100.0
    r_lo, r_hi = residual(lo), residual(hi)
    if r_lo > 0 or r_hi < 0:
        raise NumericError(f"bisection bracket (1e-6, 100) does not contain a root (residuals {r_lo}, {r_hi})")
    u = 0.5 * (lo + hi)
    for _ in range(200):
        u = 0.5 * (lo + hi)
        r = residual(u)
        if abs(r) < 1e-12 or hi - lo < 1e-15:
            break
        if r < 0:
            lo = u
        else:
            hi = u
    a = (P_goal - P_min) / math.expm1(-u)
    b = P_min - a
    return PruneSchedule(a, u / epoch_max, b, P_goal, P_min, D, epoch_max)


def rate_at(schedule: PruneSchedule, epoch: int | float) -> float:
    if not 0 <= epoch <= schedule.epoch_max:
        raise EpochRangeError(f"epoch {epoch} outside [0, {schedule.epoch_max}]")
    r = schedule.a * math.exp(-schedule.k * epoch) + schedule.b
    return min(max(r, schedule.P_min), schedule.P_goal)


def num_to_prune(n: int, rate: float, rounding: str = "ceil") -> int:
    """Filters to zeroize in a layer of ``n`` filters; always leaves one alive."""
    if n < 1 or not 0 <= rate < 1:
        raise ValueError(f"need n >= 1 and 0 <= rate < 1, got n={n}, rate={rate}")
    x = n * rate
    # the tolerance keeps products like 10 * 0.3 = 3.0000000000000004 exact
    count = math.ceil(x - 1e-9) if rounding == "ceil" else math.floor(x + 1e-9)
    return max(0, min(count, n - 1))


def filter_norm(weight: np.ndarray, p: int = 2) -> np.ndarray:
    """Per-output-filter l_p norm of a conv weight ``[Cout, Cin, K, K]``."""
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    flat = np.abs(weight.reshape(weight.shape[0], -1).astype(np.float64))
    if p == 1:
        return flat.sum(axis=1)
    return np.sqrt((flat * flat).sum(axis=1))


def select_prune_set(norms: np.ndarray, count: int) -> list[int]:
    """Indices of the ``count`` smallest norms; ties prune the smaller index first."""
    norms = np.asarray(norms)
    if not 0 <= count <= norms.size:
        raise SelectionError(f"cannot select {count} of {norms.size} filters")
    order = np.argsort(norms, kind="stable")
    return sorted(int(i) for i in order[:count])


@dataclass
class MaskState:
    """Zeroized filter indices per layer at a given epoch."""

    epoch: int = 0
    layers: dict[str, list[int]] = field(default_factory=dict)

    def remaining(self, model: Model) -> dict[str, int]:
        """Remaining non-zero filter budget per pruned layer."""
        return {lid: model.width_of(lid) - len(idx) for lid, idx in self.layers.items()}

    def total_pruned(self) -> int:
        return sum(len(v) for v in self.layers.values())

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "layers": self.layers}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MaskState":
        d = json.loads(text)
        if set(d) != {"epoch", "layers"}:
            raise ConfigError("mask JSON must have exactly 'epoch' and 'layers'")
        return cls(int(d["epoch"]), {k: [int(i) for i in v] for k, v in d["layers"].items()})

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "MaskState":
        with open(path) as fh:
            return cls.from_json(fh.read())


def zeroize_filters(model: Model, layer_id: str, indices) -> list[int]:
    """Zero the selected output filters of a prunable conv and silence their BN channel.

    The filter rows and the following batch-norm ``gamma``/``beta`` become
    exactly zero, so the channel outputs zero in both train and eval mode.
    Optimizer state is not touched; momentum carried in the velocity buffers
    is what first moves a zeroized filter off zero during reconstruction.
    """
    if not model.has_layer(layer_id):
        raise LayerLookupError(f"unknown layer {layer_id!r}")
    sites = model.prune_sites()
    if layer_id not in sites:
        raise PolicyError(f"layer {layer_id!r} is not prunable")
    idx = sorted(int(i) for i in indices)
    if not idx:
        return idx
    width = model.width_of(layer_id)
    if idx[0] < 0 or idx[-1] >= width:
        raise SelectionError(f"indices {idx} out of range for {layer_id} with {width} filters")
    bn = sites[layer_id].bn
    model.params[f"{layer_id}.weight"][idx] = 0
    model.params[f"{bn}.gamma"][idx] = 0
    model.params[f"{bn}.beta"][idx] = 0
    model.touch()
    return idx


def prune_step(model: Model, config: PruneConfig, schedule: PruneSchedule, epoch: int) -> MaskState:
    """Score every selected prunable layer on current weights and zeroize a fresh set."""
    rate = rate_at(schedule, epoch)
    state = MaskState(epoch=epoch)
    for lid in model.prune_sites():
        if not config.selects(lid):
            continue
        w = model.params[f"{lid}.weight"]
        count = num_to_prune(w.shape[0], rate, config.rounding)
        chosen = select_prune_set(filter_norm(w, config.p), count)
        state.layers[lid] = zeroize_filters(model, lid, chosen)
    return state


@dataclass
class CompactModel:
    model: Model
    kept: dict[str, list[int]]  # conv id -> retained filter indices of the source model
    source_mask: MaskState

    @property
    def index_sets(self) -> dict[str, np.ndarray]:
        return self.model.index_sets


def extract_compact(model: Model, mask: MaskState, check_zero: bool = True) -> CompactModel:
    """Delete zeroized filters, their BN channels and the matching input slices downstream.

    Residual blocks whose second conv shrinks get an index set that maps the
    compact output channels back into the full-width residual sum.
    """
    sites = model.prune_sites()
    compact = model.copy()
    kept: dict[str, list[int]] = {}
    for lid, pruned in mask.layers.items():
        if lid not in sites:
            raise ExtractionError(f"mask names non-prunable or unknown layer {lid!r}")
        width = model.width_of(lid)
        pset = set(pruned)
        if any(i < 0 or i >= width for i in pset):
            raise ExtractionError(f"mask indices for {lid} out of range [0, {width})")
        if check_zero and pset:
            norms = filter_norm(model.params[f"{lid}.weight"][sorted(pset)])
            if np.any(norms != 0):
                raise ExtractionError(f"mask for {lid} names filters that are not zero")
        kept[lid] = [i for i in range(width) if i not in pset]

    p, b = compact.params, compact.buffers
    for lid, keep in kept.items():
        site = sites[lid]
        p[f"{lid}.weight"] = np.ascontiguousarray(p[f"{lid}.weight"][keep])
        for name in ("gamma", "beta"):
            p[f"{site.bn}.{name}"] = np.ascontiguousarray(p[f"{site.bn}.{name}"][keep])
        for name in ("running_mean", "running_var"):
            b[f"{site.bn}.{name}"] = np.ascontiguousarray(b[f"{site.bn}.{name}"][keep])
        if site.consumer == "conv":
            key = f"{site.target}.weight"
            p[key] = np.ascontiguousarray(p[key][:, keep])
        elif site.consumer == "affine":
            key = f"{site.target}.weight"
            p[key] = np.ascontiguousarray(p[key][:, keep])
        else:
            old = model.index_sets.get(site.target)
            if old is None:
                old = np.arange(model.width_of(lid))
            compact.index_sets[site.target] = np.asarray(old, dtype=np.int64)[keep]
    compact.touch()
    return CompactModel(compact, kept, mask)


def hard_prune(model: Model, config: PruneConfig) -> CompactModel:
    """One-shot selection at ``P_goal`` on the current weights, then immediate extraction."""
    state = MaskState(epoch=0)
    work = model.copy()
    for lid in work.prune_sites():
        if not config.selects(lid):
            continue
        w = work.params[f"{lid}.weight"]
        count = num_to_prune(w.shape[0], config.P_goal, config.rounding)
        chosen = select_prune_set(filter_norm(w, config.p), count)
        state.layers[lid] = zeroize_filters(work, lid, chosen)
    return extract_compact(work, state)
