"""Audio file I/O and checkpoint serialization.

WAV support covers PCM16 and 32-bit float at a caller-expected sample rate;
no resampling is ever performed. Checkpoints are a flat binary container:

    magic "UXNT" | u16 version | u32 config block length | config text
    | u32 tensor count | per tensor (u16 name length, name, u8 rank,
    u32 extents..., little-endian float32 data) | u32 CRC-32 of everything
    before it

The format round-trips every parameter bit-exactly and is byte-deterministic.
"""

from __future__ import annotations

import dataclasses
import struct
import zlib

import numpy as np
from scipy.io import wavfile

from .model import ModelConfig, UXNetParams
from .tensor import Tensor

MAGIC = b"UXNT"
VERSION = 1


# -- wav -------------------------------------------------------------------

def wav_write(path, data: np.ndarray, sample_rate: int, pcm16: bool = False):
    """Write [C, T] (or [T]) samples in [-1, 1]; float32 by default."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float32))
    payload = data.T if data.shape[0] > 1 else data[0]
    if pcm16:
        clipped = np.clip(payload, -1.0, 32767.0 / 32768.0)
        payload = np.round(clipped * 32768.0).astype(np.int16)
    wavfile.write(path, sample_rate, payload)


def wav_read(path, expected_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Read a WAV file into ([C, T] float32 in [-1, 1], sample_rate)."""
    try:
        rate, data = wavfile.read(path)
    except Exception as exc:
        raise ValueError(f"malformed wav file {path}: {exc}") from exc
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} != expected {expected_rate}")
    if data.ndim == 1:
        data = data[:, None]
    if data.dtype == np.int16:
        out = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        out = data
    elif data.dtype == np.int32:
        out = data.astype(np.float32) / 2147483648.0
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return out.T.copy(), rate


# -- checkpoint ------------------------------------------------------------

def _encode_config(config: ModelConfig) -> bytes:
    lines = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name}={v}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _decode_config(blob: bytes) -> ModelConfig:
    kwargs = {}
    types = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, val = line.partition("=")
        if key not in types:
            raise ValueError(f"checkpoint config has unknown field {key!r}")
        if val in ("true", "false"):
            kwargs[key] = val == "true"
        else:
            kwargs[key] = int(val) if val.lstrip("-").isdigit() else val
    return ModelConfig(**kwargs)


def checkpoint_save(path, params: UXNetParams):
    parts = [MAGIC, struct.pack("<H", VERSION)]
    cfg = _encode_config(params.config)
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    parts.append(struct.pack("<I", len(params.tensors)))
    for name, t in params.tensors.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", len(t.shape)))
        for ext in t.shape:
            parts.append(struct.pack("<I", ext))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def checkpoint_load(path, config: ModelConfig | None = None) -> UXNetParams:
    """Load a checkpoint; if a config is given, every stored tensor must match
    the shape that config implies (errors name the offending tensor)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 2 + 4 or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    body, (stored_crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != stored_crc:
        raise ValueError(f"{path}: checksum mismatch, file is corrupt")
    off = 4
    (version,) = struct.unpack_from("<H", body, off)
    off += 2
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", body, off)
    off += 4
    stored_cfg = _decode_config(body[off:off + cfg_len])
    off += cfg_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        tensors[name] = Tensor(data.copy(), requires_grad=True)

    target_cfg = config or stored_cfg
    skeleton = UXNetParams.init(target_cfg, np.random.default_rng(0))
    expect = {k: v.shape for k, v in skeleton.tensors.items()}
    if set(tensors) != set(expect):
        missing = sorted(set(expect) - set(tensors)) + sorted(set(tensors) - set(expect))
        raise ValueError(f"{path}: tensor set mismatch for config, first: {missing[0]}")
    for name, t in tensors.items():
        if t.shape != expect[name]:
            raise ValueError(f"{path}: tensor {name!r} has shape {t.shape}, "
                             f"config implies {expect[name]}")
    return UXNetParams(target_cfg, tensors)
