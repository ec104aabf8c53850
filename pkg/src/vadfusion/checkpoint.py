"""Checkpoint archives: a zip of named fp32 tensors plus key=value config.

Layout inside the zip:
    meta.txt      version=<str> and kind=<str> lines (version is mandatory)
    config.txt    key=value serialization of the model config
    tensors.tsv   one `name<TAB>dim0,dim1,...` line per tensor, in order
    tensors/<i>.bin  raw little-endian float32 payloads, same order
"""

from __future__ import annotations

import io
import zipfile
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = "1"


def config_to_kv(cfg) -> dict[str, str]:
    return {f.name: repr(getattr(cfg, f.name)) for f in fields(cfg)}


def config_from_kv(cls, kv: dict[str, str]):
    kwargs = {}
    for f in fields(cls):
        if f.name not in kv:
            continue
        raw = kv[f.name]
        if f.type in ("int", int):
            kwargs[f.name] = int(raw)
        elif f.type in ("float", float):
            kwargs[f.name] = float(raw)
        elif f.type in ("bool", bool):
            kwargs[f.name] = raw in ("True", "true", "1")
        else:
            kwargs[f.name] = raw.strip("'\"")
    return cls(**kwargs)


def state_to_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        name: tensor.detach().cpu().numpy().astype("<f4")
        for name, tensor in module.state_dict().items()
    }


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_kv: dict[str, str],
                    kind: str, version: str = FORMAT_VERSION) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.txt", f"version={version}\nkind={kind}\n")
        zf.writestr("config.txt",
                    "".join(f"{k}={v}\n" for k, v in sorted(config_kv.items())))
        index = io.StringIO()
        for i, (name, arr) in enumerate(tensors.items()):
            arr = np.asarray(arr, dtype="<f4", order="C")  # keeps 0-d shapes
            index.write(f"{name}\t{','.join(str(d) for d in arr.shape)}\n")
            zf.writestr(f"tensors/{i}.bin", arr.tobytes())
        zf.writestr("tensors.tsv", index.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str], str, str]:
    """Returns (tensors, config_kv, kind, version)."""
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        meta = {}
        for line in zf.read("meta.txt").decode().splitlines():
            if "=" in line:
                k, _, v = line.partition("=")
                meta[k] = v
        if "version" not in meta:
            raise ValueError(f"{path}: checkpoint missing mandatory version field")
        if meta["version"] != FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint version {meta['version']!r}"
            )
        config_kv = {}
        for line in zf.read("config.txt").decode().splitlines():
            if "=" in line:
                k, _, v = line.partition("=")
                config_kv[k] = v
        tensors = {}
        index_lines = zf.read("tensors.tsv").decode().splitlines()
        for i, line in enumerate(index_lines):
            name, _, shape_csv = line.partition("\t")
            shape = tuple(int(d) for d in shape_csv.split(",")) if shape_csv else ()
            raw = zf.read(f"tensors/{i}.bin")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return tensors, config_kv, meta.get("kind", ""), meta["version"]


def save_module(path, module: torch.nn.Module, cfg, kind: str) -> None:
    save_checkpoint(path, state_to_arrays(module), config_to_kv(cfg), kind)


def load_into_module(path, module: torch.nn.Module, expected_kind: str | None = None
                     ) -> dict[str, str]:
    tensors, config_kv, kind, _ = load_checkpoint(path)
    if expected_kind is not None and kind != expected_kind:
        raise ValueError(f"{path}: checkpoint kind {kind!r}, expected {expected_kind!r}")
    state = {name: torch.from_numpy(arr) for name, arr in tensors.items()}
    module.load_state_dict(state)
    return config_kv


def params_checksum(module: torch.nn.Module) -> str:
    """Stable digest of every parameter/buffer byte; used by freeze contracts."""
    import hashlib

    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
