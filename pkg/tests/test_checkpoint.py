import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morewsss.checkpoint import Checkpoint, CheckpointFormatError, decode, encode, load_checkpoint, save_checkpoint


def sample_ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint({"b": rng.normal(size=(2, 3)), "a": np.array(1.5), "c": np.zeros((0, 4))},
                      step=42, seed=7, config_text="steps = 3\n")


def test_round_trip_and_stable_bytes(tmp_path):
    ck = sample_ckpt()
    save_checkpoint(ck, tmp_path / "x.more")
    back = load_checkpoint(tmp_path / "x.more")
    assert back.step == 42 and back.seed == 7 and back.config_text == "steps = 3\n"
    for k in ck.tensors:
        np.testing.assert_array_equal(back.tensors[k], ck.tensors[k])
    assert encode(back) == (tmp_path / "x.more").read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_layout_header():
    raw = encode(sample_ckpt())
    assert raw[:4] == b"MORE"
    version, count = struct.unpack("<II", raw[4:12])
    assert version == 1 and count == 6
    (n,) = struct.unpack("<I", raw[12:16])
    assert raw[16:16 + n] == b"__config__"


def test_every_truncation_is_rejected():
    raw = encode(sample_ckpt())
    for cut in range(len(raw)):
        with pytest.raises(CheckpointFormatError):
            decode(raw[:cut])


def test_bad_magic_version_and_trailing_bytes():
    raw = encode(sample_ckpt())
    with pytest.raises(CheckpointFormatError, match="magic"):
        decode(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointFormatError, match="version"):
        decode(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(CheckpointFormatError, match="trailing"):
        decode(raw + b"\0")


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.text("abcxyz./", min_size=1, max_size=8),
                       st.lists(st.floats(allow_nan=False), max_size=6), max_size=4),
       st.integers(0, 10**6), st.text(max_size=20))
def test_round_trip_property(tensors, step, text):
    tensors = {k: np.array(v, dtype=float) for k, v in tensors.items()}
    back = decode(encode(Checkpoint(tensors, step, 3, text)))
    assert back.step == step and back.config_text == text
    assert set(back.tensors) == set(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back.tensors[k], tensors[k])
