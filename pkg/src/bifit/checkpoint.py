"""Self-describing binary checkpoints.

Layout (little-endian):

    magic  b"BFCK" | u32 format version | u64 training step
    u32 config length   | config JSON (utf-8)
    u32 rng blob length | rng JSON (utf-8)
    u32 tensor count
    per tensor: u32 name length | name utf-8 | u8 dtype code | u8 ndim
                | u64 * ndim dims | raw buffer

dtype codes: 0 float32, 1 float64, 2 int64, 3 uint8.
"""

from __future__ import annotations

import base64
import json
import struct

import numpy as np
import torch

from .config import RunConfig
from .errors import CheckpointError

MAGIC = b"BFCK"
VERSION = 1

_DTYPE_CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2, torch.uint8: 3}
_CODE_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.uint8}
_CODE_TORCH = {0: torch.float32, 1: torch.float64, 2: torch.int64, 3: torch.uint8}


def rng_state_blob(numpy_rng: np.random.Generator | None = None) -> bytes:
    """Capture torch (and optionally numpy) RNG state as a JSON blob."""
    state = {"torch": base64.b64encode(bytes(torch.get_rng_state().numpy())).decode()}
    if numpy_rng is not None:
        state["numpy"] = numpy_rng.bit_generator.state
    return json.dumps(state).encode()


def restore_rng_state(blob: bytes, numpy_rng: np.random.Generator | None = None) -> None:
    try:
        state = json.loads(blob.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad RNG blob: {exc}") from exc
    raw = base64.b64decode(state["torch"])
    torch.set_rng_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))
    if numpy_rng is not None and "numpy" in state:
        numpy_rng.bit_generator.state = state["numpy"]


def save_checkpoint(path: str, cfg: RunConfig, step: int,
                    tensors: dict[str, torch.Tensor], rng_blob: bytes = b"{}") -> None:
    config_json = json.dumps(cfg.to_dict()).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, step))
        fh.write(struct.pack("<I", len(config_json)))
        fh.write(config_json)
        fh.write(struct.pack("<I", len(rng_blob)))
        fh.write(rng_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors.items():
            data = tensor.detach().cpu().contiguous()
            if data.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"cannot store tensor {name!r} of dtype {data.dtype}")
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _DTYPE_CODES[data.dtype], data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.numpy().tobytes())


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str):
    """Read a checkpoint: (RunConfig, step, {name: tensor}, rng blob)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, step = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (config_len,) = r.unpack("<I")
    try:
        cfg = RunConfig.from_dict(json.loads(r.take(config_len).decode()))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad config blob: {exc}") from exc
    (rng_len,) = r.unpack("<I")
    rng_blob = r.take(rng_len)
    (count,) = r.unpack("<I")
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
        dims = r.unpack(f"<{ndim}Q") if ndim else ()
        numel = 1
        for d in dims:
            numel *= d
        raw = r.take(numel * np.dtype(_CODE_DTYPES[code]).itemsize)
        arr = np.frombuffer(raw, dtype=_CODE_DTYPES[code]).reshape(dims).copy()
        tensors[name] = torch.from_numpy(arr).to(_CODE_TORCH[code])
    return cfg, step, tensors, rng_blob
