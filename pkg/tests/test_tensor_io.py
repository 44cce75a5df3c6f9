import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arm_meter.tensor_io import (
    ActivationTrace,
    Dataset,
    FormatError,
    LayerTrace,
    decode_dataset,
    decode_trace,
    decode_weights,
    encode_dataset,
    encode_trace,
    encode_weights,
    read_dataset,
    read_trace,
    write_dataset,
    write_trace,
)


def make_trace(rng, n_layers=3, n_filters=2, n_samples=4, ids=("toy", "clean")):
    layers = [
        LayerTrace(f"layer{i}", rng.standard_normal((n_filters, n_samples)).astype(np.float32))
        for i in range(n_layers)
    ]
    return ActivationTrace(ids[0], ids[1], layers)


def test_single_value_trace_size_and_roundtrip(tmp_path):
    trace = ActivationTrace("", "", [LayerTrace("a", np.array([[0.5]], dtype=np.float32))])
    path = tmp_path / "t.atf"
    write_trace(trace, path)
    data = path.read_bytes()
    header = 4 + 2 + 2 + 4
    layer_header = 2 + 1 + 4 + 4
    assert len(data) == header + layer_header + 4
    assert data[-4:] == struct.pack("<f", 0.5)
    assert read_trace(path) == trace


def test_empty_trace_rejected():
    with pytest.raises(FormatError, match="empty trace"):
        ActivationTrace("m", "d", [])


def test_three_layer_roundtrip_bit_exact(tmp_path):
    trace = make_trace(np.random.default_rng(0))
    path = tmp_path / "t.atf"
    write_trace(trace, path)
    back = read_trace(path)
    assert back == trace
    assert back.model_id == "toy" and back.dataset_id == "clean"
    for a, b in zip(trace.layers, back.layers):
        assert a.values.tobytes() == b.values.tobytes()


@settings(max_examples=50, deadline=None)
@given(
    n_layers=st.integers(1, 4),
    n_filters=st.integers(1, 5),
    n_samples=st.integers(0, 6),
    seed=st.integers(0, 2**32 - 1),
    names=st.lists(st.text(max_size=8), min_size=4, max_size=4),
)
def test_trace_roundtrip_property(n_layers, n_filters, n_samples, seed, names):
    rng = np.random.default_rng(seed)
    layers = [
        LayerTrace(names[i], rng.standard_normal((n_filters, n_samples)).astype(np.float32))
        for i in range(n_layers)
    ]
    trace = ActivationTrace(names[0], names[1], layers)
    data = encode_trace(trace)
    back = decode_trace(data)
    assert back == trace
    assert encode_trace(back) == data


def test_wrong_magic():
    data = bytearray(encode_trace(make_trace(np.random.default_rng(1))))
    data[:4] = b"NOPE"
    with pytest.raises(FormatError, match="not an ATF file"):
        decode_trace(bytes(data))


def test_truncated_payload_errors_at_every_offset():
    data = encode_trace(make_trace(np.random.default_rng(2)))
    for cut in range(len(data)):
        with pytest.raises(FormatError):
            decode_trace(data[:cut])


def test_truncated_random_offset_mentions_truncated():
    data = encode_trace(make_trace(np.random.default_rng(3)))
    cut = int(np.random.default_rng(4).integers(20, len(data)))
    with pytest.raises(FormatError, match="truncated"):
        decode_trace(data[:cut])


def test_non_finite_value_rejected():
    trace = make_trace(np.random.default_rng(5), n_layers=1)
    data = bytearray(encode_trace(trace))
    data[-4:] = struct.pack("<f", float("nan"))
    with pytest.raises(FormatError, match="non-finite"):
        decode_trace(bytes(data))


def test_sample_count_mismatch_between_layers():
    with pytest.raises(FormatError):
        ActivationTrace(
            "m", "d", [LayerTrace("a", np.zeros((1, 3))), LayerTrace("b", np.zeros((1, 4)))]
        )


def test_huge_declared_length_does_not_allocate():
    data = b"ARMT" + struct.pack("<HHI", 1, 0, 1) + struct.pack("<H", 1) + b"x"
    data += struct.pack("<II", 2**31, 2**31)
    with pytest.raises(FormatError, match="truncated"):
        decode_trace(data)


# -- datasets ---------------------------------------------------------------


def small_dataset(rng, n=2, shape=(1, 4, 4), classes=3):
    return Dataset("d", rng.random((n,) + shape, dtype=np.float32), rng.integers(0, classes, n), classes)


def test_dataset_roundtrip(tmp_path):
    ds = small_dataset(np.random.default_rng(0))
    path = tmp_path / "d.armd"
    write_dataset(ds, path)
    back = read_dataset(path)
    assert back == ds
    assert back.images.tobytes() == ds.images.tobytes()
    assert back.name == "d"


def test_dataset_header_layout():
    ds = small_dataset(np.random.default_rng(0), n=2, shape=(1, 4, 4), classes=3)
    data = encode_dataset(ds)
    assert data[:4] == b"ARMD"
    assert struct.unpack("<HIIHHH", data[4:20]) == (1, 2, 3, 1, 4, 4)
    assert len(data) == 20 + 2 * 16 * 4 + 2 * 4


def test_pixel_out_of_range_in_file():
    ds = small_dataset(np.random.default_rng(0))
    data = bytearray(encode_dataset(ds))
    data[20:24] = struct.pack("<f", 1.5)
    with pytest.raises(FormatError, match="pixel out of range"):
        decode_dataset(bytes(data))


def test_label_out_of_range():
    with pytest.raises(FormatError, match="label out of range"):
        Dataset("d", np.zeros((1, 1, 2, 2)), [3], 3)


def test_dimension_mismatch():
    with pytest.raises(FormatError, match="dimension mismatch"):
        Dataset("d", np.zeros((2, 1, 2, 2)), [0], 3)


@settings(max_examples=50, deadline=None)
@given(
    n=st.integers(0, 5),
    c=st.integers(1, 3),
    h=st.integers(1, 5),
    w=st.integers(1, 5),
    classes=st.integers(1, 6),
    seed=st.integers(0, 2**32 - 1),
)
def test_dataset_roundtrip_property(n, c, h, w, classes, seed):
    rng = np.random.default_rng(seed)
    ds = Dataset("p", rng.random((n, c, h, w), dtype=np.float32), rng.integers(0, classes, n), classes)
    data = encode_dataset(ds)
    back = decode_dataset(data)
    assert back == ds
    assert encode_dataset(back) == data


def test_weights_roundtrip():
    flat = np.random.default_rng(0).standard_normal(17).astype(np.float32)
    assert np.array_equal(decode_weights(encode_weights(flat)), flat)
    with pytest.raises(FormatError):
        decode_weights(encode_weights(flat)[:-1])
