import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from morewsss import pnm


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.integers(0, 65535)))
def test_pgm_round_trip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("p") / "a.pgm"
    pnm.write_pgm(path, arr)
    np.testing.assert_array_equal(pnm.read_pnm(path), arr)


def test_label_values_verbatim(tmp_path):
    m = np.array([[0, 1, 255], [3, 255, 0]])
    pnm.write_pgm(tmp_path / "m.pgm", m)
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n") and raw.endswith(bytes([0, 1, 255, 3, 255, 0]))


def test_ppm_scales_floats(tmp_path):
    rgb = np.array([[[0.0, 0.5, 1.0]]])
    pnm.write_ppm(tmp_path / "i.ppm", rgb)
    np.testing.assert_array_equal(pnm.read_pnm(tmp_path / "i.ppm"), [[[0, 128, 255]]])


def test_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError):
        pnm.write_pgm(tmp_path / "x.pgm", np.array([[-1]]))
    with pytest.raises(ValueError):
        pnm.write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))
