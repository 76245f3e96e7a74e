"""Plain and residual CNNs with a hand-written forward/backward interpreter.

A :class:`Model` is an ordered list of :class:`LayerSpec` and
:class:`BlockSpec` items plus flat name -> array maps for parameters and
batch-norm buffers. Channel counts at run time are read from the weight
arrays, so a compact (extracted) model is the same class with smaller
arrays and non-trivial residual index sets.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import CacheError, ConfigError, DimensionError, IndexSetError

LAYER_KINDS = ("conv", "batchnorm", "relu", "pool", "gap", "affine")


@dataclass
class LayerSpec:
    kind: str
    layer_id: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    prunable: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and min(self.in_channels, self.out_channels, self.kernel) < 1:
            raise ConfigError(f"conv {self.layer_id}: channels and kernel must be >= 1")


@dataclass
class BlockSpec:
    """Basic residual block: conv-bn-relu-conv-bn, merged with a shortcut then ReLU."""

    block_id: str
    layers: list[LayerSpec]
    shortcut: list[LayerSpec] | None = None  # [projection conv, bn] or identity
    width: int = 0  # nominal (unpruned) output width of the block

    def __post_init__(self):
        if self.shortcut is not None:
            proj = self.shortcut[0]
            if proj.prunable:
                raise ConfigError(f"projection shortcut {proj.layer_id} must not be prunable")
            if proj.out_channels != self.width:
                raise ConfigError(f"projection shortcut {proj.layer_id} must output the block width {self.width}")


@dataclass(frozen=True)
class PruneSite:
    """How a prunable conv couples to the rest of the graph."""

    conv: str
    bn: str
    consumer: str  # "conv", "merge" or "affine"
    target: str  # next conv id, block id, or head id


def residual_add(residual: np.ndarray, conv_out: np.ndarray, index_set: Sequence[int]) -> np.ndarray:
    """Add ``conv_out`` into the channels ``index_set`` of ``residual``.

    Channels of the residual not named in the index set pass through
    unchanged. With the full index range this is plain addition.
    """
    idx = np.asarray(index_set, dtype=np.int64)
    _check_index_set(idx, residual.shape[1], conv_out.shape[1])
    if residual.shape[0] != conv_out.shape[0] or residual.shape[2:] != conv_out.shape[2:]:
        raise DimensionError(f"residual_add: residual {residual.shape} vs conv output {conv_out.shape}")
    if idx.size == residual.shape[1]:
        return residual + conv_out
    out = residual.copy()
    out[:, idx] += conv_out
    return out


def residual_add_grad(dout: np.ndarray, index_set: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    idx = np.asarray(index_set, dtype=np.int64)
    if idx.size == dout.shape[1]:
        return dout, dout
    return dout, np.ascontiguousarray(dout[:, idx])


def _check_index_set(idx: np.ndarray, width: int, count: int) -> None:
    if idx.ndim != 1 or idx.size != count:
        raise IndexSetError(f"index set has {idx.size} entries but conv output has {count} channels")
    if idx.size and (idx[0] < 0 or idx[-1] >= width):
        raise IndexSetError(f"index set entries must lie in [0, {width}), got {idx.tolist()}")
    if idx.size > 1 and np.any(np.diff(idx) <= 0):
        raise IndexSetError("index set must be strictly increasing")


class Model:
    def __init__(self, arch: dict, items: list, input_shape: Sequence[int] | None, num_classes: int, dtype=np.float32):
        self.arch = dict(arch)
        self.items = items
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.index_sets: dict[str, np.ndarray] = {}
        self.training = True
        self.version = 0
        self._layers = {spec.layer_id: spec for spec in self.iter_layers()}
        if len(self._layers) != sum(1 for _ in self.iter_layers()):
            raise ConfigError("layer ids must be unique within a model")

    # -- structure -------------------------------------------------------

    def iter_layers(self) -> Iterator[LayerSpec]:
        for item in self.items:
            if isinstance(item, BlockSpec):
                yield from item.layers
                if item.shortcut:
                    yield from item.shortcut
            else:
                yield item

    def layer(self, layer_id: str) -> LayerSpec:
        return self._layers[layer_id]

    def has_layer(self, layer_id: str) -> bool:
        return layer_id in self._layers

    def blocks(self) -> list[BlockSpec]:
        return [it for it in self.items if isinstance(it, BlockSpec)]

    def prune_sites(self) -> dict[str, PruneSite]:
        """Prunable convs in graph order, with their BN and downstream consumer."""
        sites: dict[str, PruneSite] = {}
        flat: list[tuple[LayerSpec, str | None]] = []
        for item in self.items:
            if isinstance(item, BlockSpec):
                c1, b1, _, c2, b2 = item.layers
                if c1.prunable:
                    sites[c1.layer_id] = PruneSite(c1.layer_id, b1.layer_id, "conv", c2.layer_id)
                if c2.prunable:
                    sites[c2.layer_id] = PruneSite(c2.layer_id, b2.layer_id, "merge", item.block_id)
                flat.append((item, None))
            else:
                flat.append((item, item.kind))
        # plain chains: conv -> bn -> relu [-> pool] -> next conv or head
        for pos, (item, kind) in enumerate(flat):
            if kind != "conv" or not item.prunable:
                continue
            bn = flat[pos + 1][0]
            consumer = None
            for nxt, nkind in flat[pos + 2:]:
                if nkind in ("conv", "affine") or nkind is None:
                    consumer = (nxt, nkind)
                    break
            if consumer is None or consumer[1] is None or bn.kind != "batchnorm":
                raise ConfigError(f"conv {item.layer_id} has no prunable coupling")
            sites[item.layer_id] = PruneSite(
                item.layer_id, bn.layer_id, consumer[1], consumer[0].layer_id
            )
        order = [s.layer_id for s in self.iter_layers() if s.layer_id in sites]
        return {k: sites[k] for k in order}

    def conv_layers(self) -> list[LayerSpec]:
        return [s for s in self.iter_layers() if s.kind == "conv"]

    def width_of(self, conv_id: str) -> int:
        return self.params[f"{conv_id}.weight"].shape[0]

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- state -----------------------------------------------------------

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def touch(self) -> None:
        """Mark parameters as modified; outstanding forward caches become stale."""
        self.version += 1

    def copy(self) -> "Model":
        other = copy.copy(self)
        other.arch = copy.deepcopy(self.arch)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other.index_sets = {k: v.copy() for k, v in self.index_sets.items()}
        other.version = 0
        return other

    def astype(self, dtype) -> "Model":
        other = self.copy()
        other.dtype = np.dtype(dtype)
        other.params = {k: v.astype(dtype) for k, v in other.params.items()}
        other.buffers = {k: v.astype(dtype) for k, v in other.buffers.items()}
        return other

    # -- forward / backward ---------------------------------------------

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        if self.input_shape is not None and tuple(x.shape[1:]) != self.input_shape:
            first = next(self.iter_layers()).layer_id
            raise DimensionError(f"{first}: batch shape {x.shape} does not match model input {self.input_shape}")
        caches = []
        for item in self.items:
            if isinstance(item, BlockSpec):
                x, c = self._block_forward(item, x)
            else:
                x, c = self._layer_forward(item, x)
            caches.append(c)
        return x, {"model": id(self), "version": self.version, "caches": caches}

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        if cache.get("model") != id(self) or cache.get("version") != self.version:
            raise CacheError("forward cache is stale or belongs to another model")
        grads: dict[str, np.ndarray] = {}
        d = dlogits
        for item, c in zip(reversed(self.items), reversed(cache["caches"])):
            if isinstance(item, BlockSpec):
                d = self._block_backward(item, c, d, grads)
            else:
                d = self._layer_backward(item, c, d, grads)
        return grads

    def _layer_forward(self, spec: LayerSpec, x: np.ndarray):
        lid = spec.layer_id
        try:
            if spec.kind == "conv":
                w = self.params[f"{lid}.weight"]
                return T.conv2d(x, w, spec.stride, spec.pad), x
            if spec.kind == "batchnorm":
                out, (rm, rv), c = T.batchnorm(
                    x,
                    self.params[f"{lid}.gamma"],
                    self.params[f"{lid}.beta"],
                    self.buffers[f"{lid}.running_mean"],
                    self.buffers[f"{lid}.running_var"],
                    train=self.training,
                )
                if self.training:
                    self.buffers[f"{lid}.running_mean"] = rm
                    self.buffers[f"{lid}.running_var"] = rv
                return out, c
            if spec.kind == "relu":
                return T.relu(x), x
            if spec.kind == "pool":
                return T.avg_pool2(x), x.shape
            if spec.kind == "gap":
                return T.global_avg_pool(x), x.shape
            if spec.kind == "affine":
                return T.affine(x, self.params[f"{lid}.weight"], self.params[f"{lid}.bias"]), x
        except DimensionError as exc:
            raise DimensionError(f"{lid}: {exc}") from None
        raise ConfigError(f"unknown layer kind {spec.kind}")

    def _layer_backward(self, spec: LayerSpec, c, d: np.ndarray, grads: dict) -> np.ndarray:
        lid = spec.layer_id
        if spec.kind == "conv":
            dx, dw = T.conv2d_grad(c, self.params[f"{lid}.weight"], d, spec.stride, spec.pad)
            grads[f"{lid}.weight"] = dw
            return dx
        if spec.kind == "batchnorm":
            dx, dg, db = T.batchnorm_grad(c, d)
            grads[f"{lid}.gamma"] = dg
            grads[f"{lid}.beta"] = db
            return dx
        if spec.kind == "relu":
            return T.relu_grad(c, d)
        if spec.kind == "pool":
            return T.avg_pool2_grad(c, d)
        if spec.kind == "gap":
            return T.global_avg_pool_grad(c, d)
        if spec.kind == "affine":
            dx, dw, db = T.affine_grad(c, self.params[f"{lid}.weight"], d)
            grads[f"{lid}.weight"] = dw
            grads[f"{lid}.bias"] = db
            return dx
        raise ConfigError(f"unknown layer kind {spec.kind}")

    def _block_forward(self, block: BlockSpec, x: np.ndarray):
        h = x
        branch = []
        for spec in block.layers:
            h, c = self._layer_forward(spec, h)
            branch.append(c)
        r = x
        short = []
        for spec in block.shortcut or ():
            r, c = self._layer_forward(spec, r)
            short.append(c)
        idx = self.index_sets.get(block.block_id)
        if idx is None:
            idx = np.arange(h.shape[1])
        try:
            s = residual_add(r, h, idx)
        except (DimensionError, IndexSetError) as exc:
            raise type(exc)(f"{block.block_id}: {exc}") from None
        return T.relu(s), (branch, short, idx, s)

    def _block_backward(self, block: BlockSpec, c, d: np.ndarray, grads: dict) -> np.ndarray:
        branch, short, idx, s = c
        d = T.relu_grad(s, d)
        dr, dh = residual_add_grad(d, idx)
        for spec, lc in zip(reversed(block.layers), reversed(branch)):
            dh = self._layer_backward(spec, lc, dh, grads)
        for spec, lc in zip(reversed(block.shortcut or ()), reversed(short)):
            dr = self._layer_backward(spec, lc, dr, grads)
        return dh + dr

    # -- initialization --------------------------------------------------

    def init_params(self, seed: int = 0) -> "Model":
        """Kaiming fan-out normal convs, unit-gamma BN, small uniform head, zero bias."""
        rng = np.random.default_rng(seed)
        dt = self.dtype
        for spec in self.iter_layers():
            lid = spec.layer_id
            if spec.kind == "conv":
                k = spec.kernel
                std = np.sqrt(2.0 / (spec.out_channels * k * k))
                w = rng.normal(0.0, std, size=(spec.out_channels, spec.in_channels, k, k))
                self.params[f"{lid}.weight"] = w.astype(dt)
            elif spec.kind == "batchnorm":
                c = spec.out_channels
                self.params[f"{lid}.gamma"] = np.ones(c, dt)
                self.params[f"{lid}.beta"] = np.zeros(c, dt)
                self.buffers[f"{lid}.running_mean"] = np.zeros(c, dt)
                self.buffers[f"{lid}.running_var"] = np.ones(c, dt)
            elif spec.kind == "affine":
                bound = 1.0 / np.sqrt(spec.in_channels)
                w = rng.uniform(-bound, bound, size=(spec.out_channels, spec.in_channels))
                self.params[f"{lid}.weight"] = w.astype(dt)
                self.params[f"{lid}.bias"] = np.zeros(spec.out_channels, dt)
        self.touch()
        return self


def _conv(lid, cin, cout, k=3, stride=1, prunable=False):
    return LayerSpec("conv", lid, cin, cout, k, stride, (k - 1) // 2, prunable)


def _bn(lid, c):
    return LayerSpec("batchnorm", lid, c, c)


def build_plain_cnn(
    widths: Sequence[int],
    input_shape: Sequence[int] | None = (3, 32, 32),
    num_classes: int = 10,
    seed: int = 0,
    dtype=np.float32,
) -> Model:
    """VGG-style stack: conv3x3-BN-ReLU per width, 2x2 avg-pool between stages."""
    widths = list(widths)
    if not widths:
        raise ConfigError("plain CNN needs at least one width")
    cin = input_shape[0] if input_shape is not None else 3
    items: list = []
    for i, w in enumerate(widths):
        if i:
            items.append(LayerSpec("pool", f"pool{i - 1}"))
        items += [_conv(f"conv{i}", cin, w, prunable=True), _bn(f"bn{i}", w), LayerSpec("relu", f"relu{i}")]
        cin = w
    items += [LayerSpec("gap", "gap"), LayerSpec("affine", "fc", cin, num_classes)]
    arch = {"arch": "plain", "widths": widths, "classes": num_classes}
    return Model(arch, items, input_shape, num_classes, dtype).init_params(seed)


def build_resnet(
    n: int,
    stage_widths: Sequence[int] = (16, 32, 64),
    input_shape: Sequence[int] | None = (3, 32, 32),
    num_classes: int = 10,
    seed: int = 0,
    dtype=np.float32,
) -> Model:
    """CIFAR-style ResNet of depth 6n+2 built from basic blocks."""
    if n < 1:
        raise ConfigError("resnet needs n >= 1 blocks per stage")
    widths = list(stage_widths)
    if not widths:
        raise ConfigError("resnet needs at least one stage width")
    cin = input_shape[0] if input_shape is not None else 3
    items: list = [_conv("conv0", cin, widths[0]), _bn("bn0", widths[0]), LayerSpec("relu", "relu0")]
    cin = widths[0]
    for s, w in enumerate(widths):
        for b in range(n):
            stride = 2 if s > 0 and b == 0 else 1
            bid = f"s{s}b{b}"
            layers = [
                _conv(f"{bid}.conv1", cin, w, 3, stride, prunable=True),
                _bn(f"{bid}.bn1", w),
                LayerSpec("relu", f"{bid}.relu1"),
                _conv(f"{bid}.conv2", w, w, 3, 1, prunable=True),
                _bn(f"{bid}.bn2", w),
            ]
            shortcut = None
            if stride != 1 or cin != w:
                shortcut = [_conv(f"{bid}.proj", cin, w, 1, stride), _bn(f"{bid}.proj_bn", w)]
            items.append(BlockSpec(bid, layers, shortcut, w))
            cin = w
    items += [LayerSpec("gap", "gap"), LayerSpec("affine", "fc", cin, num_classes)]
    arch = {"arch": "resnet", "n": n, "widths": widths, "classes": num_classes}
    return Model(arch, items, input_shape, num_classes, dtype).init_params(seed)


def build_from_arch(
    arch: dict, input_shape: Sequence[int] | None = None, seed: int = 0, dtype=np.float32
) -> Model:
    """Build from a JSON-style description such as ``{"arch": "resnet", "n": 9, ...}``."""
    arch = dict(arch)
    kind = arch.get("arch")
    if input_shape is None and "input_shape" in arch:
        input_shape = arch["input_shape"]
    classes = int(arch.get("classes", 10))
    allowed = {"arch", "widths", "classes", "input_shape"} | ({"n"} if kind == "resnet" else set())
    unknown = set(arch) - allowed
    if unknown:
        raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
    if kind == "resnet":
        if "n" not in arch:
            raise ConfigError("resnet architecture needs 'n'")
        model = build_resnet(int(arch["n"]), arch.get("widths", [16, 32, 64]), input_shape, classes, seed, dtype)
    elif kind == "plain":
        if "widths" not in arch:
            raise ConfigError("plain architecture needs 'widths'")
        model = build_plain_cnn(arch["widths"], input_shape, classes, seed, dtype)
    else:
        raise ConfigError(f"unknown architecture {kind!r}")
    if "input_shape" in arch:
        model.arch["input_shape"] = list(arch["input_shape"])
    return model


def weighted_depth(model: Model) -> int:
    """Number of weighted layers on the main path (projection shortcuts excluded)."""
    return sum(
        1
        for s in model.iter_layers()
        if s.kind == "affine" or (s.kind == "conv" and not s.layer_id.endswith(".proj"))
    )


def predict(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class predictions; restores the previous mode."""
    was_training = model.training
    model.eval()
    try:
        out = [model(x[i:i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
    finally:
        model.training = was_training
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    return float((predict(model, x, batch_size) == y).mean())
