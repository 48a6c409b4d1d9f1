import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthfuse.depth_io import (
    DepthMap,
    decode_depth,
    encode_depth,
    load_depth_csv,
    load_depth_pgm,
    load_label_pgm,
    load_ppm,
    save_depth_csv,
    save_depth_pgm,
    save_label_pgm,
    save_ppm,
)
from depthfuse.errors import DataError, ParseError, ShapeError


def test_depth_map_invariants():
    with pytest.raises(ShapeError):
        DepthMap(values=np.ones(4))
    with pytest.raises(DataError):
        DepthMap(values=np.array([[1.0, -0.5]]))
    dm = DepthMap(values=np.array([[1.0, 0.0]]), valid_mask=np.array([[True, False]]))
    assert dm.shape == (1, 2)


def test_encode_constant_map_is_128():
    enc = encode_depth(DepthMap(values=np.full((3, 3), 2.0)))
    assert np.all(enc.channels == 128)


def test_encode_range_endpoints():
    dm = DepthMap(values=np.array([[1.0, 2.0, 4.0]]))
    enc = encode_depth(dm)
    assert enc.channels[0, 0, 0] == 0
    assert enc.channels[0, 0, 2] == 255


def test_encode_geometric_midpoint():
    # d_min=1, d_max=e^2, d=e: code = round(255/2) = 128
    dm = DepthMap(values=np.array([[1.0, np.e, np.e**2]]))
    enc = encode_depth(dm)
    assert enc.channels[0, 0, 1] == 128


def test_encode_invalid_pixels_to_zero_and_channels_identical():
    values = np.array([[1.0, 3.0], [9.0, 1.0]])
    mask = np.array([[True, True], [True, False]])
    enc = encode_depth(DepthMap(values=values, valid_mask=mask))
    assert enc.channels[0, 1, 1] == 0
    assert np.array_equal(enc.channels[0], enc.channels[1])
    assert np.array_equal(enc.channels[0], enc.channels[2])


def test_encode_all_invalid_raises():
    dm = DepthMap(values=np.ones((2, 2)), valid_mask=np.zeros((2, 2), dtype=bool))
    with pytest.raises(DataError):
        encode_depth(dm)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.1, 100.0), min_size=2, max_size=30), st.integers(0, 10))
def test_encode_monotone(depths, seed):
    values = np.array(depths)[None, :]
    enc = encode_depth(DepthMap(values=values))
    codes = enc.channels[0, 0]
    order = np.argsort(values[0], kind="stable")
    assert np.all(np.diff(codes[order]) >= 0)


def test_encode_decode_roundtrip_half_step():
    rng = np.random.default_rng(0)
    values = rng.uniform(0.5, 8.0, size=(6, 6))
    dm = DepthMap(values=values)
    enc = encode_depth(dm)
    rec = decode_depth(enc.channels[0], enc.d_min, enc.d_max)
    log_step = (np.log(enc.d_max) - np.log(enc.d_min)) / 255.0
    assert np.max(np.abs(np.log(rec) - np.log(values))) <= 0.5 * log_step + 1e-12


def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    path = tmp_path / "img.ppm"
    save_ppm(path, img)
    assert np.array_equal(load_ppm(path), img)


def test_depth_pgm_millimeter_scaling(tmp_path):
    dm = DepthMap(values=np.array([[1.234]]))
    path = tmp_path / "d.pgm"
    save_depth_pgm(path, dm)
    blob = path.read_bytes()
    # 16-bit big-endian raster: 1.234 m -> 1234 mm
    assert blob.endswith((1234).to_bytes(2, "big"))
    loaded = load_depth_pgm(path)
    assert np.isclose(loaded.values[0, 0], 1.234)


def test_depth_pgm_roundtrip_with_invalid(tmp_path):
    values = np.array([[0.5, 2.0], [1.0, 3.0]])
    mask = np.array([[True, False], [True, True]])
    path = tmp_path / "d.pgm"
    save_depth_pgm(path, DepthMap(values=values, valid_mask=mask))
    loaded = load_depth_pgm(path)
    assert np.array_equal(loaded.valid_mask, mask)
    assert np.allclose(loaded.values[mask], values[mask], atol=5e-4)


def test_corrupt_magic_number(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
    with pytest.raises(ParseError) as err:
        load_ppm(path)
    assert err.value.offset == 0


def test_truncated_raster_reports_offset(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P5\n2 2\n65535\n\x00\x01")
    with pytest.raises(ParseError) as err:
        load_depth_pgm(path)
    assert err.value.offset is not None


def test_header_comment_handling(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n# a comment\n1 1\n255\n\x01\x02\x03")
    img = load_ppm(path)
    assert img.tolist() == [[[1, 2, 3]]]


def test_label_pgm_roundtrip(tmp_path):
    labels = np.array([[0, 1], [255, 3]])
    path = tmp_path / "l.pgm"
    save_label_pgm(path, labels)
    assert np.array_equal(load_label_pgm(path), labels)


def test_depth_csv_roundtrip(tmp_path):
    values = np.array([[0.7, 2.0], [1.0, 3.5]])
    mask = np.array([[True, False], [True, True]])
    path = tmp_path / "d.csv"
    save_depth_csv(path, DepthMap(values=values, valid_mask=mask))
    loaded = load_depth_csv(path, shape=(2, 2))
    assert np.array_equal(loaded.valid_mask, mask)
    assert np.array_equal(loaded.values[mask], values[mask])  # repr round-trip is exact


def test_depth_csv_bad_header(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("row,col,val\n0,0,1.0\n")
    with pytest.raises(ParseError):
        load_depth_csv(path)
