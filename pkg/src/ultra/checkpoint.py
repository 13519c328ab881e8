"""JSON checkpoints with 17-significant-digit floats, so save -> load -> save is byte-identical."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ParamStore
from .errors import CheckpointError

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    rng_state: int = 0
    meta_iter: int = 0
    config: dict = field(default_factory=dict)

    # -- grouping by network prefix ----------------------------------------------

    def group(self, prefix: str) -> ParamStore:
        """Parameters under ``prefix.``, with the prefix stripped, in stored order."""
        head = prefix + "."
        return {k[len(head):]: v for k, v in self.params.items() if k.startswith(head)}

    def subpolicies(self) -> list[ParamStore]:
        out = []
        while True:
            store = self.group(f"sub{len(out)}")
            if not store:
                return out
            out.append(store)


def pack(*, gen: ParamStore | None = None, master: ParamStore | None = None,
         subs: list[ParamStore] | None = None) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for prefix, store in (("gen", gen), ("master", master)):
        for k, v in (store or {}).items():
            params[f"{prefix}.{k}"] = v
    for i, store in enumerate(subs or []):
        for k, v in store.items():
            params[f"sub{i}.{k}"] = v
    return params


def _number(x: float) -> str:
    if not math.isfinite(x):
        raise CheckpointError(f"refusing to serialize non-finite value {x}")
    text = format(x, ".17g")
    # "-0" would come back as the integer 0 and lose its sign
    return text + ".0" if text.lstrip("-").isdigit() else text


def dumps(ckpt: Checkpoint) -> str:
    parts = []
    for name, arr in ckpt.params.items():
        arr = np.asarray(arr, dtype=np.float64)
        data = ",".join(_number(float(v)) for v in arr.ravel())
        shape = ",".join(str(d) for d in arr.shape)
        parts.append(f'{json.dumps(name)}:{{"shape":[{shape}],"data":[{data}]}}')
    return (
        f'{{"format_version":{FORMAT_VERSION},'
        f'"params":{{{",".join(parts)}}},'
        f'"rng_state":{int(ckpt.rng_state)},'
        f'"meta_iter":{int(ckpt.meta_iter)},'
        f'"config":{json.dumps(ckpt.config, sort_keys=True)}}}\n'
    )


def loads(text: str, source: str = "<string>") -> Checkpoint:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{source}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise CheckpointError(f"{source}: top level must be an object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: field 'format_version' is {version!r}, expected {FORMAT_VERSION}")
    raw = doc.get("params")
    if not isinstance(raw, dict):
        raise CheckpointError(f"{source}: field 'params' missing or not an object")
    params = {}
    for name, entry in raw.items():
        where = f"{source}: field 'params.{name}'"
        if not isinstance(entry, dict) or "shape" not in entry or "data" not in entry:
            raise CheckpointError(f"{where} needs 'shape' and 'data'")
        shape, data = entry["shape"], entry["data"]
        if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
            raise CheckpointError(f"{where}.shape is not a list of sizes")
        if not isinstance(data, list):
            raise CheckpointError(f"{where}.data is not a list")
        try:
            arr = np.array(data, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"{where}.data holds non-numbers") from exc
        if arr.ndim != 1 or arr.size != math.prod(shape):
            raise CheckpointError(f"{where}.data has {len(data)} values for shape {shape}")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{where}.data holds non-finite values")
        params[name] = arr.reshape(shape)
    for key in ("rng_state", "meta_iter"):
        if not isinstance(doc.get(key), int):
            raise CheckpointError(f"{source}: field {key!r} missing or not an integer")
    config = doc.get("config", {})
    if not isinstance(config, dict):
        raise CheckpointError(f"{source}: field 'config' is not an object")
    return Checkpoint(params, doc["rng_state"], doc["meta_iter"], config)


def save(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(ckpt))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> Checkpoint:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return loads(text, str(path))
