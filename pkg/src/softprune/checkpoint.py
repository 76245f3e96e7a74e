"""Checkpoints: a JSON manifest plus one little-endian float32 blob.

A checkpoint is a directory holding ``manifest.json``, ``params.bin`` and,
optionally, ``mask.json``. Tensor shapes in the manifest may be smaller
than the architecture's nominal widths (compact models); residual index
sets are stored alongside.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import FormatError
from .models import Model, build_from_arch
from .pruning import MaskState

FORMAT = "softprune-checkpoint/1"
MANIFEST = "manifest.json"
BLOB = "params.bin"
MASK = "mask.json"


def save_checkpoint(model: Model, path: str, mask: MaskState | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for kind, table in (("param", model.params), ("buffer", model.buffers)):
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name], dtype="<f4")
            entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
            chunks.append(arr.tobytes())
    manifest = {
        "format": FORMAT,
        "arch": model.arch,
        "input_shape": list(model.input_shape) if model.input_shape else None,
        "dtype": model.dtype.name,
        "index_sets": {k: [int(i) for i in v] for k, v in sorted(model.index_sets.items())},
        "tensors": entries,
    }
    with open(os.path.join(path, BLOB), "wb") as fh:
        fh.write(b"".join(chunks))
    with open(os.path.join(path, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1)
    mask_path = os.path.join(path, MASK)
    if mask is not None:
        mask.save(mask_path)
    elif os.path.exists(mask_path):
        os.remove(mask_path)


def load_checkpoint(path: str) -> tuple[Model, MaskState | None]:
    try:
        with open(os.path.join(path, MANIFEST)) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt manifest in {path}: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise FormatError(f"{path}: not a {FORMAT} manifest")
    try:
        entries = manifest["tensors"]
        sizes = [int(np.prod(e["shape"], dtype=np.int64)) for e in entries]
        arch = manifest["arch"]
        dtype = np.dtype(manifest.get("dtype", "float32"))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"corrupt manifest in {path}: {exc}") from None
    with open(os.path.join(path, BLOB), "rb") as fh:
        blob = fh.read()
    expected = 4 * sum(sizes)
    if len(blob) != expected:
        raise FormatError(f"{path}: blob has {len(blob)} bytes, manifest describes {expected}")

    model = build_from_arch(arch, manifest.get("input_shape"), dtype=dtype)
    known = set(model.params) | set(model.buffers)
    names = {e["name"] for e in entries}
    if names != known:
        raise FormatError(f"{path}: manifest tensors do not match architecture")
    params, buffers = {}, {}
    for e, size in zip(entries, sizes):
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=e["offset"]).reshape(e["shape"])
        (params if e["kind"] == "param" else buffers)[e["name"]] = arr.astype(dtype)
    model.params, model.buffers = params, buffers
    model.index_sets = {k: np.asarray(v, dtype=np.int64) for k, v in manifest.get("index_sets", {}).items()}
    model.touch()

    mask = None
    mask_path = os.path.join(path, MASK)
    if os.path.exists(mask_path):
        mask = MaskState.load(mask_path)
    return model, mask
