"""The ``.rpk`` single-file container.

Layout::

    magic   b"RPK\\0"            4 bytes
    version uint32 LE            4 bytes
    hlen    uint64 LE            8 bytes
    hcrc    uint32 LE crc32 of header bytes
    header  UTF-8 JSON, hlen bytes
    payload raw little-endian row-major tensor bytes, back to back

The header holds the network description, a tensor directory (name, dtype,
shape, offset, length, crc32) and free-form metadata such as expansion
pathways, prune records and seeds.
"""

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContainerError
from .netgraph import Network, check_weights

MAGIC = b"RPK\x00"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sIQI")
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


@dataclass
class Container:
    network: Network
    weights: dict
    meta: dict = field(default_factory=dict)


def _encode_header(header):
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(net, weights, meta=None):
    """Serialize to bytes.  Output is a pure function of the inputs."""
    check_weights(net, weights)
    directory, chunks, offset = [], [], 0
    for name in sorted(weights):
        arr = np.asarray(weights[name])
        code = arr.dtype.newbyteorder("<").str
        if code not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        directory.append({"name": name, "dtype": code, "shape": list(arr.shape),
                          "offset": offset, "length": len(blob), "crc32": zlib.crc32(blob)})
        chunks.append(blob)
        offset += len(blob)
    header = _encode_header({"format_version": FORMAT_VERSION, "network": net.to_dict(),
                             "tensors": directory, "meta": meta or {}})
    preamble = _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header), zlib.crc32(header))
    return preamble + header + b"".join(chunks)


def loads(data):
    """Parse container bytes; any defect raises :class:`ContainerError`."""
    data = bytes(data)
    if len(data) < _PREAMBLE.size:
        raise ContainerError("file too short for an rpk preamble")
    magic, version, hlen, hcrc = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise ContainerError("not an rpk container (bad magic)")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported format version {version}")
    start = _PREAMBLE.size
    if start + hlen > len(data):
        raise ContainerError("header length exceeds file size")
    raw = data[start:start + hlen]
    if zlib.crc32(raw) != hcrc:
        raise ContainerError("header checksum mismatch")
    try:
        header = json.loads(raw.decode("utf-8"))
        net = Network.from_dict(header["network"])
        directory = header["tensors"]
        meta = header.get("meta", {})
        if not isinstance(meta, dict) or not isinstance(directory, list):
            raise ValueError("bad header structure")
    except ContainerError:
        raise
    except Exception as exc:  # malformed JSON or network description
        raise ContainerError(f"malformed header: {exc}") from None

    payload = data[start + hlen:]
    try:
        expected = sum(int(t["length"]) for t in directory)
    except Exception as exc:
        raise ContainerError(f"malformed tensor directory: {exc}") from None
    if expected != len(payload):
        raise ContainerError(
            f"payload length mismatch: directory declares {expected} bytes, found {len(payload)}")

    weights = {}
    for entry in directory:
        try:
            name = entry["name"]
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            off, length = int(entry["offset"]), int(entry["length"])
        except Exception as exc:
            raise ContainerError(f"malformed tensor entry: {exc}") from None
        if off < 0 or off + length > len(payload) or length != int(np.prod(shape)) * dtype.itemsize:
            raise ContainerError(f"payload length mismatch for tensor {name!r}")
        blob = payload[off:off + length]
        if zlib.crc32(blob) != entry.get("crc32"):
            raise ContainerError(f"checksum mismatch for tensor {name!r}")
        weights[name] = np.frombuffer(blob, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    try:
        check_weights(net, weights)
    except ValueError as exc:
        raise ContainerError(f"weights do not match network: {exc}") from None
    return Container(net, weights, meta)


def save(net, weights, path, meta=None):
    Path(path).write_bytes(dumps(net, weights, meta))


def read(path):
    """Load a full :class:`Container` (network, weights and metadata)."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from None
    return loads(data)


def load(path):
    c = read(path)
    return c.network, c.weights
