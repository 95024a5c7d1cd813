"""Checkpoint files: a raw tensor blob plus a plain-text ``key=value`` manifest.

The blob is the concatenation of every tensor's little-endian bytes in
state-dict order; the manifest records each tensor's dtype, shape and byte
range, so saving the same parameters always produces the same bytes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .model import BackboneConfig, ReIDModel, ViewpointEstimator

FORMAT = "vcam-checkpoint-1"

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
}


class IncompatibleCheckpointError(RuntimeError):
    pass


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def save_state(path, state: dict[str, torch.Tensor], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"format={FORMAT}"]
    lines += [f"{k}={v}" for k, v in meta.items()]
    chunks, offset = [], 0
    for name, tensor in state.items():
        if tensor.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {tensor.dtype} for {name}")
        raw = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=_DTYPES[tensor.dtype]).tobytes()
        shape = ",".join(str(s) for s in tensor.shape)
        lines.append(f"tensor.{name}={_DTYPES[tensor.dtype]} {shape or '-'} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    lines.insert(1, f"blob_sha256={hashlib.sha256(blob).hexdigest()}")
    path.write_bytes(blob)
    manifest_path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    mpath = manifest_path(path)
    if not mpath.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {mpath}")
    meta = {}
    for line in mpath.read_text().splitlines():
        if line:
            k, v = line.split("=", 1)
            meta[k] = v
    if meta.get("format") != FORMAT:
        raise IncompatibleCheckpointError(f"{mpath}: unknown checkpoint format {meta.get('format')!r}")
    return meta


def load_state(path) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    path = Path(path)
    meta = read_manifest(path)
    blob = path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != meta["blob_sha256"]:
        raise IncompatibleCheckpointError(f"{path}: blob does not match its manifest hash")
    state, plain = {}, {}
    for k, v in meta.items():
        if not k.startswith("tensor."):
            plain[k] = v
            continue
        dtype, shape, offset, nbytes = v.split()
        dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
        arr = np.frombuffer(blob, dtype=dtype, count=int(nbytes) // np.dtype(dtype).itemsize,
                            offset=int(offset)).reshape(dims)
        state[k[len("tensor."):]] = torch.from_numpy(arr.copy())
    return state, plain


def save_checkpoint(model: ReIDModel, path, **meta) -> None:
    """Save a full re-ID model; ``meta`` (step, seed, ...) goes into the manifest."""
    header = {
        "kind": "reid_model",
        "config_fingerprint": model.config.fingerprint(),
        "config": json.dumps(asdict(model.config), sort_keys=True),
        "num_ids": model.num_ids,
    }
    header.update(meta)
    save_state(path, model.state_dict(), header)


def load_checkpoint(path, model: ReIDModel | None = None) -> tuple[ReIDModel, dict[str, str]]:
    """Restore a model saved by :func:`save_checkpoint`.

    With ``model`` given, its configuration must match the stored fingerprint
    and identity count; otherwise a fresh model is built from the manifest.
    """
    state, meta = load_state(path)
    if meta.get("kind") != "reid_model":
        raise IncompatibleCheckpointError(f"{path}: not a re-ID model checkpoint (kind={meta.get('kind')})")
    if model is None:
        config = BackboneConfig(**json.loads(meta["config"]))
        model = ReIDModel(config, int(meta["num_ids"]))
    else:
        if model.config.fingerprint() != meta["config_fingerprint"]:
            raise IncompatibleCheckpointError(
                f"{path}: config fingerprint {meta['config_fingerprint']} does not match "
                f"model config {model.config.fingerprint()}")
        if model.num_ids != int(meta["num_ids"]):
            raise IncompatibleCheckpointError(
                f"{path}: checkpoint has {meta['num_ids']} identities, model has {model.num_ids}")
    model.load_state_dict(state)
    return model, meta


def estimator_fingerprint(estimator: ViewpointEstimator) -> str:
    shapes = [(k, tuple(v.shape)) for k, v in estimator.state_dict().items()]
    blob = json.dumps([estimator.input_size, shapes]).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_estimator(estimator: ViewpointEstimator, path, **meta) -> None:
    header = {"kind": "viewpoint_estimator", "config_fingerprint": estimator_fingerprint(estimator)}
    header.update(meta)
    save_state(path, estimator.state_dict(), header)


def load_estimator(path, estimator: ViewpointEstimator) -> dict[str, str]:
    state, meta = load_state(path)
    if meta.get("kind") != "viewpoint_estimator":
        raise IncompatibleCheckpointError(f"{path}: not a viewpoint estimator checkpoint")
    if meta["config_fingerprint"] != estimator_fingerprint(estimator):
        raise IncompatibleCheckpointError(f"{path}: estimator architecture does not match")
    estimator.load_state_dict(state)
    return meta
