"""Deterministic byte encodings for protocol payloads.

Arrays travel as `ndim (u8) | dims (u32 each) | bit width (u8) | bit-packed
little-endian values`; values are packed at their declared bit width so the
wire cost of b-bit messages is ceil(count*b/8) bytes, matching the message
volumes of the OT family being modeled.
"""

from __future__ import annotations

import struct

import numpy as np


def encode_uint_array(arr: np.ndarray, bits: int) -> bytes:
    """Bit-pack an unsigned array; every value must fit in `bits` bits."""
    arr = np.ascontiguousarray(arr, dtype=np.uint64)
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<B", bits)
    flat = arr.ravel()
    if bits in (8, 16, 32, 64):
        body = flat.astype(f"<u{bits // 8}").tobytes()
    else:
        shifts = np.arange(bits, dtype=np.uint64)
        bit_rows = (flat[:, None] >> shifts) & np.uint64(1)
        body = np.packbits(bit_rows.astype(np.uint8), bitorder="little").tobytes()
    return head + body


def decode_uint_array(data: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<B", data, offset)
    offset += 1
    shape = struct.unpack_from(f"<{ndim}I", data, offset)
    offset += 4 * ndim
    (bits,) = struct.unpack_from("<B", data, offset)
    offset += 1
    count = 1
    for d in shape:
        count *= d
    if bits in (8, 16, 32, 64):
        nbytes = count * bits // 8
        flat = np.frombuffer(data, dtype=f"<u{bits // 8}", count=count, offset=offset)
        flat = flat.astype(np.uint64)
    else:
        nbytes = (count * bits + 7) // 8
        raw = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=offset)
        bit_rows = np.unpackbits(raw, bitorder="little", count=count * bits)
        bit_rows = bit_rows.reshape(count, bits).astype(np.uint64)
        shifts = np.arange(bits, dtype=np.uint64)
        flat = (bit_rows << shifts).sum(axis=1, dtype=np.uint64)
    return flat.reshape(shape), offset + nbytes


def encode_blobs(blobs: list[bytes]) -> bytes:
    out = struct.pack("<I", len(blobs))
    for b in blobs:
        out += struct.pack("<I", len(b)) + b
    return out


def decode_blobs(data: bytes, offset: int = 0) -> tuple[list[bytes], int]:
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    blobs = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", data, offset)
        offset += 4
        blobs.append(data[offset : offset + ln])
        offset += ln
    return blobs, offset
