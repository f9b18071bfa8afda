import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from neuralprt.imageio import ImageFormatError, read_image, read_pfm, srgb_encode, tonemap, write_pfm, write_png


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_pfm_round_trip(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("pfm") / "a.pfm"
    write_pfm(p, img)
    assert np.array_equal(read_pfm(p), img)


def test_pfm_rows_bottom_to_top(tmp_path):
    img = np.zeros((2, 1, 3), np.float32)
    img[0] = 1.0  # top row
    write_pfm(tmp_path / "a.pfm", img)
    raw = (tmp_path / "a.pfm").read_bytes()
    body = np.frombuffer(raw[raw.index(b"-1.0\n") + 5:], "<f4")
    assert body.tolist() == [0, 0, 0, 1, 1, 1]


def test_pfm_rejects_garbage(tmp_path):
    (tmp_path / "x.pfm").write_bytes(b"P6\n1 1\n255\n\0\0\0")
    with pytest.raises(ImageFormatError):
        read_pfm(tmp_path / "x.pfm")
    (tmp_path / "y.pfm").write_bytes(b"PF\n4 4\n-1.0\n" + b"\0" * 12)
    with pytest.raises(ImageFormatError):
        read_pfm(tmp_path / "y.pfm")


def test_grey_pfm_expands_to_rgb(tmp_path):
    write_pfm(tmp_path / "g.pfm", np.full((3, 2), 0.5))
    assert read_pfm(tmp_path / "g.pfm").shape == (3, 2, 3)


def test_tonemap_range_and_monotone():
    x = np.linspace(0, 100, 1001)
    y = tonemap(x)
    assert y[0] == 0 and np.all(y <= 1)
    assert np.all(np.diff(y) > 0)
    # Reinhard(1) = 0.5 before sRGB encoding
    assert tonemap(np.array([1.0]))[0] == pytest.approx(srgb_encode(np.array([0.5]))[0])
    assert tonemap(np.array([-3.0]))[0] == 0.0


def test_srgb_known_values():
    assert srgb_encode(np.array([0.0, 1.0])).tolist() == pytest.approx([0.0, 1.0])
    assert srgb_encode(np.array([0.0031308]))[0] == pytest.approx(0.0031308 * 12.92)


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(0, 3, (5, 7, 3))
    write_png(tmp_path / "a.png", img)
    back = read_image(tmp_path / "a.png")
    assert np.max(np.abs(back - tonemap(img))) <= 0.5 / 255 + 1e-12
