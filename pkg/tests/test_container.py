import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cmr import container
from cmr.assets import load_assets, save_assets


def _same(a, b):
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].dtype == b[k].dtype and a[k].shape == b[k].shape
        assert a[k].tobytes() == b[k].tobytes()


def test_round_trip_mixed_dtypes(tmp_path, rng):
    t = {"w": rng.normal(size=(3, 4)), "f": rng.normal(size=5).astype(np.float32),
         "i": np.arange(6).reshape(2, 3), "scalar": np.array(2.5), "empty": np.zeros((0, 3))}
    digest = container.save(tmp_path / "x.cmrk", t)
    _same(container.load(tmp_path / "x.cmrk"), t)
    assert digest == container.file_digest(tmp_path / "x.cmrk")


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5),
                  elements=st.floats(allow_nan=True, allow_infinity=True)))
def test_round_trip_bit_exact(a):
    _same(container.loads(container.dumps({"a": a})), {"a": a})


def test_bool_and_uint_stored_as_int64():
    out = container.loads(container.dumps({"b": np.array([True, False]), "u": np.array([3], np.uint8)}))
    assert out["b"].dtype == np.int64 and out["b"].tolist() == [1, 0]


def test_unsupported_dtype():
    with pytest.raises(TypeError):
        container.dumps({"c": np.array([1j])})


def test_bad_magic():
    buf = container.dumps({"a": np.ones(2)})
    with pytest.raises(container.ContainerFormatError):
        container.loads(b"XXXX" + buf[4:])


def test_version_mismatch():
    buf = bytearray(container.dumps({"a": np.ones(2)}))
    buf[4:8] = struct.pack("<I", container.VERSION + 1)
    with pytest.raises(container.ContainerVersionError):
        container.loads(bytes(buf))


@pytest.mark.parametrize("cut", [6, 12, 20, -1])
def test_truncation(cut):
    buf = container.dumps({"alpha": np.arange(10.0), "beta": np.ones((2, 2))})
    with pytest.raises(container.ContainerTruncatedError):
        container.loads(buf[:cut])


def test_trailing_bytes():
    with pytest.raises(container.ContainerFormatError):
        container.loads(container.dumps({"a": np.ones(1)}) + b"\0")


def test_errors_are_ioerrors():
    assert issubclass(container.ContainerTruncatedError, IOError)


def test_text_round_trip():
    s = "train.lr = 0.0003\nünïcode"
    assert container.decode_text(container.encode_text(s)) == s


def test_assets_round_trip(tmp_path, body, pair):
    save_assets(tmp_path / "m.cmrk", body, pair)
    b2, p2 = load_assets(tmp_path / "m.cmrk")
    np.testing.assert_array_equal(b2.template.vertices, body.template.vertices)
    np.testing.assert_array_equal(b2.template.faces, body.template.faces)
    np.testing.assert_array_equal(b2.shape_dirs, body.shape_dirs)
    np.testing.assert_array_equal(b2.joint_regressor.to_dense(), body.joint_regressor.to_dense())
    np.testing.assert_array_equal(p2.up.to_dense(), pair.up.to_dense())
    np.testing.assert_array_equal(p2.down.to_dense(), pair.down.to_dense())
    np.testing.assert_array_equal(p2.coarse_mesh.faces, pair.coarse_mesh.faces)
