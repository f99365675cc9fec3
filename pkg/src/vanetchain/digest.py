"""SHA-256 digests over a canonical, length-prefixed field encoding.

Every ledger block and model payload is hashed through :func:`encode_fields`,
so the byte layout here is part of the on-disk ledger format.  Each field is
written as ``tag (1 byte) | length (4 bytes, big-endian) | payload``:

=====  ==========================================
tag    payload
=====  ==========================================
``b``  raw bytes
``s``  UTF-8 text
``i``  signed 64-bit integer, big-endian
``f``  IEEE-754 binary64, little-endian
``l``  nested sequence, itself a field encoding
=====  ==========================================
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _encode_one(value) -> bytes:
    if isinstance(value, (bytes, bytearray)):
        tag, payload = b"b", bytes(value)
    elif isinstance(value, str):
        tag, payload = b"s", value.encode("utf-8")
    elif isinstance(value, (bool, np.bool_)):
        raise TypeError("booleans are not a canonical field type; use int")
    elif isinstance(value, (int, np.integer)):
        tag, payload = b"i", struct.pack(">q", int(value))
    elif isinstance(value, (float, np.floating)):
        tag, payload = b"f", struct.pack("<d", float(value))
    elif isinstance(value, (tuple, list)):
        tag, payload = b"l", encode_fields(*value)
    else:
        raise TypeError(f"cannot encode field of type {type(value).__name__}")
    return tag + struct.pack(">I", len(payload)) + payload


def encode_fields(*fields) -> bytes:
    return b"".join(_encode_one(f) for f in fields)


def decode_fields(data: bytes) -> list:
    """Inverse of :func:`encode_fields`.  Raises ``ValueError`` on malformed input."""
    out = []
    pos = 0
    n = len(data)
    while pos < n:
        if pos + 5 > n:
            raise ValueError("truncated field header")
        tag = data[pos:pos + 1]
        (length,) = struct.unpack(">I", data[pos + 1:pos + 5])
        start, pos = pos + 5, pos + 5 + length
        if pos > n:
            raise ValueError("truncated field payload")
        payload = data[start:pos]
        if tag == b"b":
            out.append(payload)
        elif tag == b"s":
            out.append(payload.decode("utf-8"))
        elif tag == b"i":
            if length != 8:
                raise ValueError("integer field must be 8 bytes")
            out.append(struct.unpack(">q", payload)[0])
        elif tag == b"f":
            if length != 8:
                raise ValueError("float field must be 8 bytes")
            out.append(struct.unpack("<d", payload)[0])
        elif tag == b"l":
            out.append(tuple(decode_fields(payload)))
        else:
            raise ValueError(f"unknown field tag {tag!r}")
    return out


def digest_fields(*fields) -> bytes:
    return sha256(encode_fields(*fields))


def pseudonym(vehicle_id: int, salt: bytes) -> str:
    """Salted hash of a vehicle identifier, hex encoded (orderable as text)."""
    return sha256(salt + struct.pack(">q", int(vehicle_id))).hex()
