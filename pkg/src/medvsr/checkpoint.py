"""Versioned binary checkpoint container.

Layout::

    b"MEDVSRCK" | u32 format version | u64 manifest length | manifest JSON | payload

The manifest echoes the model config and run config, records the
iteration and the NumPy sampling RNG state, and lists every tensor with its
name, dtype, shape, byte offset and byte length inside the payload.  All
integers are little-endian; tensors are stored C-contiguous.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError
from .model import MedVSR, ModelConfig

MAGIC = b"MEDVSRCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: dict[str, torch.Tensor]
    optimizer: dict[str, torch.Tensor] = field(default_factory=dict)
    iteration: int = 0
    rng_state: dict | None = None
    run: dict = field(default_factory=dict)

    def build_model(self) -> MedVSR:
        model = MedVSR(self.config)
        model.load_state_dict(self.weights)
        return model


def _optimizer_tensors(model: MedVSR, optimizer) -> dict[str, torch.Tensor]:
    names = [n for n, _ in model.named_parameters()]
    state = optimizer.state_dict()["state"]
    out = {}
    for idx, name in enumerate(names):
        for key, value in sorted(state.get(idx, {}).items()):
            out[f"optim/{name}/{key}"] = torch.as_tensor(value)
    return out


def save_checkpoint(path, model: MedVSR, optimizer=None, iteration: int = 0,
                    rng: np.random.Generator | None = None, run: dict | None = None) -> Path:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        tensors.update(_optimizer_tensors(model, optimizer))
    tensors["rng/torch"] = torch.get_rng_state()
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy())
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="),
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "run": run or {},
        "iteration": int(iteration),
        "rng": rng.bit_generator.state if rng is not None else None,
        "optimizer": optimizer is not None,
        "tensors": entries,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)
    return path


def read_manifest(path) -> tuple[dict, int]:
    """Manifest dict and the byte offset at which the payload starts."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ContractError(f"{path}: truncated header")
        magic, version, n = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ContractError(f"{path}: not a checkpoint file")
        if version != FORMAT_VERSION:
            raise ContractError(f"{path}: unsupported format version {version}")
        manifest = json.loads(fh.read(n).decode("utf-8"))
    return manifest, _HEADER.size + n


def load_checkpoint(path) -> Checkpoint:
    manifest, start = read_manifest(path)
    data = Path(path).read_bytes()[start:]
    tensors = {}
    for e in manifest["tensors"]:
        raw = data[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    weights = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    optim = {k[len("optim/"):]: v for k, v in tensors.items() if k.startswith("optim/")}
    rng_state = {"numpy": manifest.get("rng"), "torch": tensors.get("rng/torch")}
    return Checkpoint(ModelConfig.from_dict(manifest["config"]), weights, optim,
                      manifest["iteration"], rng_state, manifest.get("run", {}))


def restore_optimizer(model: MedVSR, optimizer, ckpt: Checkpoint) -> None:
    """Load Adam moments saved by :func:`save_checkpoint` into ``optimizer``."""
    if not ckpt.optimizer:
        return
    current = optimizer.state_dict()
    state = {}
    for idx, (name, _) in enumerate(model.named_parameters()):
        entry = {key.rsplit("/", 1)[1]: t for key, t in ckpt.optimizer.items()
                 if key.rsplit("/", 1)[0] == name}
        if entry:
            state[idx] = entry
    optimizer.load_state_dict({"state": state, "param_groups": current["param_groups"]})


def restore_rng(ckpt: Checkpoint) -> np.random.Generator | None:
    if ckpt.rng_state and ckpt.rng_state.get("torch") is not None:
        torch.set_rng_state(ckpt.rng_state["torch"])
    if ckpt.rng_state and ckpt.rng_state.get("numpy"):
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state["numpy"]
        return rng
    return None


def payload_bytes(path) -> bytes:
    """The raw tensor payload (everything after the manifest)."""
    _, start = read_manifest(path)
    return Path(path).read_bytes()[start:]
