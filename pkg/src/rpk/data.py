"""Dataset ingestion: the IDX binary format and a synthetic blob-image task."""

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import IDXError

# type code -> big-endian numpy dtype
IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_IDX_CODES = {np.dtype(v).newbyteorder("=").str: k for k, v in IDX_TYPES.items()}


def parse_idx(data):
    data = bytes(data)
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] not in IDX_TYPES:
        raise IDXError("not an IDX file (bad magic number)")
    dtype = np.dtype(IDX_TYPES[data[2]])
    ndim = data[3]
    head = 4 + 4 * ndim
    if len(data) < head:
        raise IDXError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:head])
    count = int(np.prod(dims)) if dims else 1
    payload = data[head:]
    if len(payload) != count * dtype.itemsize:
        raise IDXError(f"truncated IDX payload: expected {count * dtype.itemsize} bytes, "
                       f"found {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def load_idx(path, labels_path=None):
    """Read an IDX file.

    Rank-3 image files come back as ``[N, 1, H, W]``.  With ``labels_path``
    the result is ``(images, labels)`` with images scaled to float32 (bytes
    divided by 255) and labels as int64.
    """
    arr = parse_idx(Path(path).read_bytes())
    if arr.ndim == 3:
        arr = arr[:, None]
    if labels_path is None:
        return arr
    labels = parse_idx(Path(labels_path).read_bytes())
    if labels.ndim != 1 or len(labels) != len(arr):
        raise IDXError(f"labels shape {labels.shape} does not match {len(arr)} images")
    scale = 255.0 if arr.dtype == np.uint8 else 1.0
    return (arr.astype(np.float32) / scale), labels.astype(np.int64)


def write_idx(path, arr):
    arr = np.asarray(arr)
    code = _IDX_CODES.get(arr.dtype.newbyteorder("=").str)
    if code is None:
        raise IDXError(f"dtype {arr.dtype} has no IDX encoding")
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(IDX_TYPES[code]).tobytes())


@dataclass
class SyntheticSpec:
    classes: int = 4
    n: int = 512
    shape: tuple = (3, 8, 8)
    noise: float = 0.5  # difficulty: per-pixel noise std relative to blob amplitude
    modes_per_class: int = 2
    blobs_per_mode: int = 2

    def to_dict(self):
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d


def _blob_prototypes(rng, spec):
    c, h, w = spec.shape
    yy, xx = np.mgrid[0:h, 0:w]
    protos = np.zeros((spec.classes, spec.modes_per_class, c, h, w))
    for k in range(spec.classes):
        for mode in range(spec.modes_per_class):
            for _ in range(spec.blobs_per_mode):
                ch = rng.integers(c)
                cy, cx = rng.uniform(0, h), rng.uniform(0, w)
                sigma = rng.uniform(0.8, 2.0)
                sign = rng.choice([-1.0, 1.0])
                protos[k, mode, ch] += sign * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2)
                                                     / (2 * sigma**2))
    return protos


def gen_synthetic(spec=None, seed=0, n=None, prototypes_seed=None):
    """Seeded, class-balanced Gaussian-blob image classification data.

    Every class is a mixture of ``modes_per_class`` blob patterns plus
    Gaussian pixel noise.  ``prototypes_seed`` fixes the task itself so that
    train and validation splits can be drawn from the same classes with
    different sample seeds.  Returns ``(x float32 [n, c, h, w], y int64)``.
    """
    spec = spec or SyntheticSpec()
    n = spec.n if n is None else n
    protos = _blob_prototypes(np.random.default_rng(seed if prototypes_seed is None
                                                    else prototypes_seed), spec)
    rng = np.random.default_rng([seed, 1])
    y = np.arange(n) % spec.classes
    rng.shuffle(y)
    modes = rng.integers(spec.modes_per_class, size=n)
    amp = rng.uniform(0.7, 1.3, size=(n, 1, 1, 1))
    x = amp * protos[y, modes] + spec.noise * rng.standard_normal((n, *spec.shape))
    return x.astype(np.float32), y.astype(np.int64)
