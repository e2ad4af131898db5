import json
import struct

import numpy as np
import pytest

from rpk import container
from rpk.errors import ContainerError
from rpk.netgraph import Conv2d, Flatten, Linear, Network, ReLU, init_weights


def random_model(rng, dtype=np.float32):
    c, n, out = (int(v) for v in rng.integers(1, 5, size=3))
    k = int(rng.choice([1, 3]))
    net = Network([Conv2d(c, n, k, padding=k // 2, bias=bool(rng.integers(2))), ReLU(),
                   Flatten(), Linear(n * 16, out)], (c, 4, 4), f"net{int(rng.integers(1000))}")
    w = {key: rng.standard_normal(v.shape).astype(dtype)
         for key, v in init_weights(net, rng, dtype).items()}
    return net, w


def test_empty_network_roundtrip(tmp_path):
    net = Network([], (3,), "empty")
    container.save(net, {}, tmp_path / "e.rpk")
    net2, w2 = container.load(tmp_path / "e.rpk")
    assert net2 == net and w2 == {}


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_random_roundtrip_bit_exact(tmp_path, dtype):
    rng = np.random.default_rng(0)
    net, w = random_model(rng, dtype)
    meta = {"seed": 7, "units": [{"a": 1}]}
    path = tmp_path / "m.rpk"
    container.save(net, w, path, meta)
    c = container.read(path)
    assert c.network == net and c.meta == meta
    for k in w:
        assert c.weights[k].dtype == w[k].dtype
        assert c.weights[k].tobytes() == w[k].tobytes()
    assert container.dumps(c.network, c.weights, c.meta) == path.read_bytes()


def test_payload_is_little_endian_row_major(tmp_path):
    net = Network([Linear(2, 2, bias=False)], (2,))
    w = {"layer0.weight": np.array([[1.0, 2.0], [3.0, 4.0]])}
    data = container.dumps(net, w)
    assert data.endswith(struct.pack("<4d", 1.0, 2.0, 3.0, 4.0))
    _, _, hlen, _ = struct.unpack_from("<4sIQI", data)
    header = json.loads(data[20:20 + hlen])
    assert header["tensors"][0] == {"name": "layer0.weight", "dtype": "<f8", "shape": [2, 2],
                                    "offset": 0, "length": 32,
                                    "crc32": header["tensors"][0]["crc32"]}


def test_truncated_payload():
    rng = np.random.default_rng(1)
    data = container.dumps(*random_model(rng))
    with pytest.raises(ContainerError, match="payload length mismatch"):
        container.loads(data[:-3])


def test_checksum_mismatch():
    rng = np.random.default_rng(2)
    data = bytearray(container.dumps(*random_model(rng)))
    data[-1] ^= 0xFF
    with pytest.raises(ContainerError, match="checksum mismatch"):
        container.loads(bytes(data))


def test_bad_magic_and_missing_file(tmp_path):
    with pytest.raises(ContainerError, match="magic"):
        container.loads(b"NOPE" + bytes(40))
    with pytest.raises(ContainerError):
        container.read(tmp_path / "missing.rpk")


def test_fuzz_roundtrip_and_corruption():
    rng = np.random.default_rng(3)
    for it in range(1000):
        dtype = np.float32 if it % 2 else np.float64
        net, w = random_model(rng, dtype)
        data = container.dumps(net, w, {"iter": it})
        c = container.loads(data)
        assert container.dumps(c.network, c.weights, c.meta) == data
        bad = bytearray(data)
        kind = it % 3
        if kind == 0:
            pos = int(rng.integers(len(bad)))
            bad[pos] ^= int(rng.integers(1, 256))
        elif kind == 1:
            bad = bad[:int(rng.integers(len(bad)))]
        else:
            pos = int(rng.integers(len(bad)))
            bad[pos:pos] = bytes(rng.integers(0, 256, size=int(rng.integers(1, 8)), dtype=np.uint8))
        with pytest.raises(ContainerError):
            container.loads(bytes(bad))
