import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morewsss.synthdata import SynthConfig, class_shape, generate_sample, generate_split, hflip, stack


def test_same_seed_same_sample():
    a, b = generate_sample(11), generate_sample(11)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)


def test_single_shape_sample_has_one_label():
    s = generate_sample(3, SynthConfig(max_shapes=1))
    assert s.labels.sum() == 1
    assert set(np.unique(s.mask)) == {0, int(np.argmax(s.labels)) + 1}


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**9))
def test_labels_match_mask_and_image_range(seed):
    s = generate_sample(seed)
    present = {c for c in np.unique(s.mask) if c > 0}
    assert present == {c + 1 for c in np.flatnonzero(s.labels)}
    assert s.image.shape == (3, 64, 64) and s.image.min() >= 0 and s.image.max() <= 1


def test_area_fractions_over_1000_seeds():
    fracs = []
    for s in generate_split(0, 1000):
        for c in range(1, 4):
            n = int((s.mask == c).sum())
            if n:
                fracs.append(n / 64 ** 2)
    assert 0.04 <= min(fracs) and max(fracs) <= 0.40


def test_class_balance_over_1000():
    labels = np.stack([s.labels for s in generate_split(5000, 1000)])
    rates = labels.mean(axis=0)
    assert np.all((rates >= 0.4) & (rates <= 0.8))


def test_split_semantics():
    assert np.array_equal(generate_split(7, 1)[0].image, generate_sample(7).image)
    train = {s.image.tobytes() for s in generate_split(0, 50)}
    val = {s.image.tobytes() for s in generate_split(1_000_000, 50)}
    assert not train & val
    with pytest.raises(ValueError):
        generate_split(0, 0)


def test_hflip_mirrors_image_and_mask():
    s = generate_sample(2)
    f = hflip(s)
    np.testing.assert_array_equal(f.mask, s.mask[:, ::-1])
    np.testing.assert_array_equal(hflip(f).image, s.image)


def test_stack_shapes():
    images, masks, labels = stack(generate_split(0, 4))
    assert images.shape == (4, 3, 64, 64) and masks.shape == (4, 64, 64) and labels.shape == (4, 3)


def test_config_validation_and_shapes():
    with pytest.raises(ValueError):
        SynthConfig(num_classes=1)
    with pytest.raises(ValueError):
        SynthConfig(max_shapes=4)
    assert [class_shape(c) for c in (1, 2, 3, 4, 5)] == ["circle", "triangle", "square", "diamond", "circle"]
