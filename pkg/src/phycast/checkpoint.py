"""Single-file binary checkpoints.

Layout (all integers little-endian)::

    b"PHYCKPT1"
    u32 config length, config JSON (UTF-8)
    u32 parameter count
    per parameter, in the model's declared order:
        u16 name length, name (UTF-8), u8 rank, rank x u32 extents,
        float32 payload, row-major
"""

from __future__ import annotations

import struct

import numpy as np

from .config import RunConfig
from .model import PhyDNet

MAGIC = b"PHYCKPT1"


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: dict[str, np.ndarray], config_json: str) -> bytes:
    cfg = config_json.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], str]:
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic (at byte 0)")
    off = len(MAGIC)
    try:
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        config_json = buf[off : off + n].decode("utf-8")
        off += n
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        params = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + ln].decode("utf-8")
            off += ln
            rank = buf[off]
            shape = struct.unpack_from(f"<{rank}I", buf, off + 1)
            off += 1 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if off + 4 * size > len(buf):
                raise CheckpointError(f"truncated tensor {name!r} (at byte {off})")
            params[name] = np.frombuffer(buf, "<f4", size, off).reshape(shape).astype(np.float32)
            off += 4 * size
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint (at byte {off}): {exc}") from exc
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes (at byte {off})")
    return params, config_json


def save_checkpoint(path, model: PhyDNet, config: RunConfig) -> None:
    params = {name: p.data for name, p in model.parameters().items()}
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(params, config.to_json()))


def load_checkpoint(path) -> tuple[PhyDNet, RunConfig]:
    """Rebuild the model from the embedded config and restore its weights."""
    with open(path, "rb") as fh:
        params, config_json = decode_checkpoint(fh.read())
    config = RunConfig.from_json(config_json)
    model = PhyDNet(config.model, seed=config.train.seed, dtype=np.dtype(config.train.dtype))
    own = model.parameters()
    if list(own) != list(params):
        missing = sorted(set(own) ^ set(params))
        raise CheckpointError(f"parameter names do not match the config's model: {missing[:5]}")
    for name, value in params.items():
        if own[name].shape != value.shape:
            raise CheckpointError(f"{name}: stored shape {value.shape} vs model {own[name].shape}")
        own[name].data = value.astype(own[name].dtype)
    return model, config
