"""
Single-file model checkpoints.

File layout:
```
uint32 LE   header length H
H bytes     UTF-8 JSON header
...         little-endian float32 blobs, back to back
```

The header records the architecture (channels, samples, classes, layer
sizes), a tensor index (name, shape, byte offset, kind) covering every
parameter and buffer of the model, and the prototype bank (shape, offset,
eps, init tag).  Integer buffers such as ``num_batches_tracked`` are stored as
float32 and restored to their integer dtype.

Key functions: `save_checkpoint`, `load_checkpoint`, `checkpoint_hash`
"""

import hashlib
import json
import logging
import struct
from pathlib import Path

import torch

from rest_adapt.config import ModelConfig
from rest_adapt.eegpack.atomic_io import atomic_write_bytes, decode_f32, encode_f32
from rest_adapt.errors import PackLoadError
from rest_adapt.losses import PrototypeBank
from rest_adapt.nncore.model import DisentangledEEGNet

log = logging.getLogger("rest_adapt.nncore.checkpoint")

CHECKPOINT_FORMAT = "rest-adapt-checkpoint"
CHECKPOINT_VERSION = 1
_LEN = struct.Struct("<I")


def save_checkpoint(model: DisentangledEEGNet, bank: PrototypeBank, path: str | Path) -> Path:
    """
    Write `model` (parameters + running statistics) and `bank` to `path`.
    """
    blobs: list[bytes] = []
    index = []
    offset = 0
    for name, tensor in model.state_dict().items():
        array = tensor.detach().cpu().numpy()
        raw = encode_f32(array)
        index.append({
            "name": name,
            "shape": list(array.shape),
            "offset": offset,
            "kind": "float" if tensor.is_floating_point() else "int",
        })
        blobs.append(raw)
        offset += len(raw)
    proto = encode_f32(bank.prototypes.detach().cpu().numpy())
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": model.architecture(),
        "tensors": index,
        "prototypes": {
            "shape": list(bank.prototypes.shape),
            "offset": offset,
            "eps": bank.eps,
            "init": bank.init,
        },
    }
    blobs.append(proto)
    encoded = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    path = Path(path)
    atomic_write_bytes(path, _LEN.pack(len(encoded)) + encoded + b"".join(blobs))
    log.debug("Saved checkpoint with %d tensors to %s", len(index), path)
    return path


def _read_header(raw: bytes, path: Path) -> tuple[dict, memoryview]:
    if len(raw) < _LEN.size:
        raise PackLoadError(f"Checkpoint {path} is truncated", path=str(path))
    (length,) = _LEN.unpack_from(raw)
    try:
        header = json.loads(raw[_LEN.size:_LEN.size + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PackLoadError(f"Checkpoint {path} has an unreadable header: {exc}", path=str(path)) from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise PackLoadError(f"{path} is not a checkpoint file", path=str(path))
    return header, memoryview(raw)[_LEN.size + length:]


def _blob(body: memoryview, offset: int, shape: list[int], name: str, path: Path) -> torch.Tensor:
    count = 1
    for dim in shape:
        count *= dim
    try:
        array = decode_f32(bytes(body[offset:offset + 4 * count]), tuple(shape))
    except ValueError as exc:
        raise PackLoadError(f"Checkpoint {path}: tensor {name} is truncated: {exc}", path=str(path)) from exc
    return torch.from_numpy(array.copy())


def load_checkpoint(path: str | Path) -> tuple[DisentangledEEGNet, PrototypeBank]:
    """
    Rebuild the model (in eval mode) and the prototype bank stored at `path`.
    """
    path = Path(path)
    if not path.is_file():
        raise PackLoadError(f"Checkpoint not found: {path}", path=str(path))
    header, body = _read_header(path.read_bytes(), path)
    arch = header["architecture"]
    model = DisentangledEEGNet(arch["channels"], arch["samples"], arch["classes"], ModelConfig.model_validate(arch["model"]))
    reference = model.state_dict()
    state = {}
    for entry in header["tensors"]:
        tensor = _blob(body, entry["offset"], entry["shape"], entry["name"], path)
        if entry["kind"] == "int":
            tensor = tensor.round().to(reference[entry["name"]].dtype)
        state[entry["name"]] = tensor.reshape(entry["shape"])
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise PackLoadError(f"Checkpoint {path} does not match its architecture: {exc}", path=str(path)) from exc
    model.eval()
    proto = header["prototypes"]
    bank = PrototypeBank(prototypes=_blob(body, proto["offset"], proto["shape"], "prototypes", path), eps=proto["eps"], init=proto["init"])
    log.debug("Loaded checkpoint %s", path)
    return model, bank


def checkpoint_hash(path: str | Path) -> str:
    """
    SHA-256 of the checkpoint file, truncated to 16 hex characters.
    """
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
