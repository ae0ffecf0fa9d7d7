"""Named-tensor blob files.

Layout: an 8-byte little-endian length, a UTF-8 JSON manifest of that
length mapping each name to ``{"shape", "offset", "dtype"}``, then the raw
little-endian row-major payload. Offsets are relative to the payload start.
Scalars are stored as ``f32`` unless an array is float64, which is kept as
``f64`` so 64-bit runs round-trip exactly.
"""
import json
import struct

import numpy as np

from ..errors import FormatError, TruncationError

_CODES = {"f32": "<f4", "f64": "<f8"}


def write_blob(path, arrays):
    manifest = {}
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "f64" if arr.dtype == np.float64 else "f32"
        raw = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()
        manifest[name] = {"shape": list(arr.shape), "offset": offset, "dtype": code}
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(manifest, sort_keys=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in chunks:
            fh.write(raw)


def read_blob(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise TruncationError(f"{path}: blob header truncated")
    (hlen,) = struct.unpack_from("<Q", raw, 0)
    if 8 + hlen > len(raw):
        raise TruncationError(f"{path}: manifest claims {hlen} bytes, file has {len(raw) - 8}")
    try:
        manifest = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable blob manifest ({exc})") from None
    payload = memoryview(raw)[8 + hlen:]
    out = {}
    for name, info in manifest.items():
        code = _CODES.get(info.get("dtype", "f32"))
        if code is None:
            raise FormatError(f"{path}: unknown dtype for {name}")
        count = int(np.prod(info["shape"], dtype=np.int64))
        nbytes = count * np.dtype(code).itemsize
        start = info["offset"]
        if start + nbytes > len(payload):
            raise TruncationError(f"{path}: payload for {name} runs past end of file")
        arr = np.frombuffer(payload[start:start + nbytes], dtype=code).reshape(info["shape"])
        out[name] = arr.astype(arr.dtype.newbyteorder("="))
    return out
