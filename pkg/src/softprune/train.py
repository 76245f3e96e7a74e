"""Training loop with per-epoch soft pruning, metrics logging and final extraction."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint
from .data import Dataset, augment_batch, gen_synthetic, iterate_batches, load_cifar10
from .errors import ConfigError, ConsistencyError, DivergenceError
from .models import Model, accuracy, build_from_arch
from .pruning import (
    CompactModel,
    MaskState,
    PruneConfig,
    extract_compact,
    hard_prune,
    prune_step,
    rate_at,
    solve_schedule,
)

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "acc_before", "acc_after", "gap", "rate", "pruned_count", "wall_seconds"]


def default_lr_schedule(epochs: int, base_lr: float = 0.1) -> list[tuple[int, float]]:
    """``base_lr`` with x0.1 drops at 50% and 75% of training."""
    sched = [(0, base_lr)]
    for frac, scale in ((0.5, 0.1), (0.75, 0.01)):
        e = int(epochs * frac)
        if e > sched[-1][0]:
            sched.append((e, base_lr * scale))
    return sched


def scale_lr_schedule(schedule, factor: float) -> list[tuple[int, float]]:
    return [(int(e), lr * factor) for e, lr in schedule]


def lr_at(schedule, epoch_index: int) -> float:
    lr = schedule[0][1]
    for start, value in schedule:
        if epoch_index >= start:
            lr = value
    return lr


@dataclass
class TrainConfig:
    arch: dict
    dataset: dict
    epochs: int
    batch_size: int = 64
    lr_schedule: list | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    prune: PruneConfig | None = None
    init: str | dict = "scratch"
    eval_every: int = 1
    augment: bool = False
    log_timing: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs, batch_size and eval_every must be >= 1")
        if isinstance(self.prune, dict):
            d = dict(self.prune)
            d.setdefault("epoch_max", self.epochs)
            self.prune = PruneConfig.from_dict(d)
        if self.prune is not None and self.prune.epoch_max != self.epochs:
            raise ConfigError(f"prune.epoch_max ({self.prune.epoch_max}) must equal epochs ({self.epochs})")
        if self.init != "scratch" and not (isinstance(self.init, dict) and set(self.init) == {"checkpoint"}):
            raise ConfigError("init must be 'scratch' or {\"checkpoint\": path}")
        if self.lr_schedule is None:
            sched = default_lr_schedule(self.epochs)
            if self.init != "scratch":
                # fine-tuning from a trained model uses one tenth of the scratch rate
                sched = scale_lr_schedule(sched, 0.1)
            self.lr_schedule = sched
        self.lr_schedule = [(int(e), float(lr)) for e, lr in self.lr_schedule]
        starts = [e for e, _ in self.lr_schedule]
        if not starts or starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError("lr_schedule epochs must start at 0 and be strictly increasing")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"arch", "dataset", "epochs"} - set(d)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.prune is not None and callable(self.prune.layer_filter):
            d["prune"]["layer_filter"] = None
        return d


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    acc_before: float
    acc_after: float
    gap: float
    rate: float
    pruned_count: int
    wall_seconds: float

    def cells(self) -> list[str]:
        return [
            str(self.epoch),
            f"{self.train_loss:.6f}",
            f"{self.acc_before:.6f}",
            f"{self.acc_after:.6f}",
            f"{self.gap:.6f}",
            f"{self.rate:.6f}",
            str(self.pruned_count),
            f"{self.wall_seconds:.3f}",
        ]


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def write_metrics_csv(rows: list[MetricsRow], path: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(metrics_csv(rows))


def read_metrics_csv(path: str) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ConfigError(f"unexpected metrics header {header}")
        return [
            MetricsRow(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]), float(r[5]), int(r[6]), float(r[7]))
            for r in reader
        ]


@dataclass
class TrainResult:
    model: Model
    mask: MaskState
    compact: CompactModel
    metrics: list[MetricsRow]
    masks: list[MaskState] = field(default_factory=list)
    test_accuracy: float = float("nan")
    compact_accuracy: float = float("nan")

    @property
    def csv(self) -> str:
        return metrics_csv(self.metrics)


def load_datasets(spec: dict) -> tuple[Dataset, Dataset]:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "synthetic":
        allowed = {"classes", "n", "dim", "seed", "n_test", "noise"}
        if set(spec) - allowed:
            raise ConfigError(f"unknown synthetic dataset keys: {sorted(set(spec) - allowed)}")
        classes = int(spec.get("classes", 10))
        n = int(spec.get("n", 200))
        dim = int(spec.get("dim", 16))
        seed = int(spec.get("seed", 0))
        noise = float(spec.get("noise", 3.0))
        n_test = int(spec.get("n_test", max(1, n // 4)))
        return (
            gen_synthetic(classes, n, dim, seed, "train", noise),
            gen_synthetic(classes, n_test, dim, seed, "test", noise),
        )
    if kind == "cifar10":
        if set(spec) != {"path"}:
            raise ConfigError("cifar10 dataset needs exactly a 'path'")
        return load_cifar10(spec["path"], "train"), load_cifar10(spec["path"], "test")
    raise ConfigError(f"unknown dataset kind {kind!r}")


def train_epoch(
    model: Model,
    data: Dataset,
    batch_size: int,
    lr: float,
    momentum: float,
    weight_decay: float,
    velocity: dict,
    rng: np.random.Generator,
    augment: bool = False,
) -> float:
    """One pass of mini-batch SGD over ``data``; returns the mean loss."""
    model.train()
    total, seen = 0.0, 0
    for idx in iterate_batches(len(data), batch_size, rng):
        x = data.images[idx]
        if augment:
            x = augment_batch(x, rng)
        logits, cache = model.forward(x)
        loss, dlogits = T.softmax_cross_entropy(logits, data.labels[idx])
        grads = model.backward(cache, dlogits)
        T.sgd_update(model.params, grads, velocity, lr, momentum, weight_decay)
        model.touch()
        total += loss * len(idx)
        seen += len(idx)
    return total / seen


def _check_equivalence(masked: Model, compact: Model, x: np.ndarray) -> float:
    masked.eval()
    compact.eval()
    a, b = masked(x), compact(x)
    diff = float(np.max(np.abs(a - b))) if a.size else 0.0
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    if not diff <= 1e-5 * scale * 10:
        raise ConsistencyError(f"masked and compact logits differ by {diff}")
    return diff


def train(
    config: TrainConfig,
    datasets: tuple[Dataset, Dataset] | None = None,
    on_epoch: Callable[[MetricsRow], None] | None = None,
) -> TrainResult:
    """Train (and prune) per ``config``; returns the masked model, its mask and the compact model."""
    train_set, test_set = datasets or load_datasets(config.dataset)
    pc = config.prune

    if config.init == "scratch":
        model = build_from_arch(config.arch, train_set.image_shape, seed=config.seed)
    else:
        model, _ = load_checkpoint(config.init["checkpoint"])

    mask = MaskState(epoch=0)
    masks: list[MaskState] = []
    soft = pc is not None and pc.mode in ("soft", "asymptotic-soft")
    schedule = None
    if pc is not None and pc.mode == "hard":
        hp = hard_prune(model, pc)
        model, mask = hp.model, hp.source_mask
        masks.append(mask)
    elif soft:
        p_min = pc.P_goal if pc.mode == "soft" else pc.P_min
        schedule = solve_schedule(pc.P_goal, p_min, pc.D, pc.epoch_max)

    rng = np.random.default_rng(config.seed)
    velocity: dict[str, np.ndarray] = {}
    rows: list[MetricsRow] = []
    nan = float("nan")
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        lr = lr_at(config.lr_schedule, epoch - 1)
        loss = train_epoch(
            model, train_set, config.batch_size, lr, config.momentum, config.weight_decay,
            velocity, rng, config.augment,
        )
        if not math.isfinite(loss):
            raise DivergenceError(f"training loss became {loss} at epoch {epoch}")
        evaluate = epoch % config.eval_every == 0 or epoch == config.epochs
        acc_before = accuracy(model, test_set.images, test_set.labels) if evaluate else nan
        acc_after = acc_before
        pruned = 0
        if soft:
            rate = rate_at(schedule, epoch)
            if epoch % pc.interval == 0 or epoch == config.epochs:
                mask = prune_step(model, pc, schedule, epoch)
                masks.append(mask)
                pruned = mask.total_pruned()
                if evaluate and pruned:
                    acc_after = accuracy(model, test_set.images, test_set.labels)
        elif pc is not None:
            rate = pc.P_goal
        else:
            rate = 0.0
        wall = time.perf_counter() - t0 if config.log_timing else 0.0
        row = MetricsRow(epoch, loss, acc_before, acc_after, acc_after - acc_before, rate, pruned, wall)
        rows.append(row)
        log.info("epoch %d loss %.4f acc %.4f -> %.4f rate %.4f pruned %d", epoch, loss, acc_before, acc_after, rate, pruned)
        if on_epoch is not None:
            on_epoch(row)

    if soft:
        compact = extract_compact(model, mask)
        _check_equivalence(model, compact.model, test_set.images[:256])
    elif pc is not None:
        compact = CompactModel(model, {}, mask)
    else:
        mask = MaskState(epoch=config.epochs)
        compact = CompactModel(model, {}, mask)
    result = TrainResult(model, mask, compact, rows, masks)
    result.test_accuracy = accuracy(model, test_set.images, test_set.labels)
    result.compact_accuracy = accuracy(compact.model, test_set.images, test_set.labels)
    return result
