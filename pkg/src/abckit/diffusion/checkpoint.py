"""ABCK checkpoint files.

Layout, all little-endian::

    b"ABCK" | u32 version | u32 channels, side, width, n_freqs, hidden
    | u32 T_train | u32 K | f64 beta_lo | f64 beta_hi
    | u32 n_params | f32[n_params] | u32 crc32(all preceding bytes)
"""

import struct
import zlib

import numpy as np

from ..errors import BadMagic, ChecksumMismatch, DataError, TruncatedFile
from .denoiser import Architecture, DenoiserParams
from .schedule import make_schedule

MAGIC = b"ABCK"
VERSION = 1
_HEAD = struct.Struct("<4s6I2I2dI")


def checkpoint_bytes(params, sched):
    a = params.arch
    head = _HEAD.pack(MAGIC, VERSION, a.channels, a.side, a.width, a.n_freqs, a.hidden,
                      sched.T_train, sched.K, sched.beta_lo, sched.beta_hi, a.n_params)
    body = head + params.flat.astype("<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, params, sched):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, sched))


def parse_checkpoint(raw, name="checkpoint"):
    if raw[:4] != MAGIC:
        raise BadMagic(f"{name}: not an ABCK checkpoint")
    if len(raw) < _HEAD.size + 4:
        raise TruncatedFile(f"{name}: header truncated")
    (_, version, C, side, width, n_freqs, hidden, T, K, lo, hi, n_params) = _HEAD.unpack(raw[:_HEAD.size])
    if version != VERSION:
        raise DataError(f"{name}: unsupported checkpoint version {version}")
    end = _HEAD.size + 4 * n_params
    if len(raw) != end + 4:
        raise TruncatedFile(f"{name}: expected {end + 4} bytes, found {len(raw)}")
    (crc,) = struct.unpack("<I", raw[end:end + 4])
    if zlib.crc32(raw[:end]) != crc:
        raise ChecksumMismatch(f"{name}: CRC32 mismatch")
    flat = np.frombuffer(raw, "<f4", n_params, _HEAD.size)
    params = DenoiserParams(Architecture(C, side, width, n_freqs, hidden), flat)
    return params, make_schedule(T, K, lo, hi)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), str(path))
