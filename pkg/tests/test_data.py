import math

import numpy as np
import pytest

from resynth_ood import data
from resynth_ood.data import DatasetSpec, Jitter, generate_dataset, generate_image
from resynth_ood.errors import ConfigError, FormatError
from resynth_ood.rng import RngStream

SMALL = DatasetSpec(train_per_class=6, val_per_class=3, test_per_class=4, seed=5)


def test_generate_image_is_deterministic():
    a = generate_image("disk", RngStream(0))
    b = generate_image("disk", RngStream(0))
    np.testing.assert_array_equal(a, b)


def test_square_without_jitter_is_centred_and_symmetric():
    j = Jitter(scale=(0.35, 0.35), offset=0.0, rotation_deg=0.0, fg=(1.0, 1.0), bg=(0.0, 0.0))
    img = generate_image("square", RngStream(1), jitter=j)[0]
    np.testing.assert_allclose(img, img[::-1, :], atol=1e-12)
    np.testing.assert_allclose(img, img[:, ::-1], atol=1e-12)
    np.testing.assert_allclose(img, img.T, atol=1e-12)
    ys, xs = np.nonzero(img > 0.5)
    assert ys.min() + ys.max() == 15 and xs.min() + xs.max() == 15


def _disk_params(seed, side=16, jitter=Jitter()):
    # replays the draws generate_image makes for a disk
    g = RngStream(seed).generator
    half = side * g.uniform(*jitter.scale)
    margin = max(side / 2 - half, 0.0)
    cx = side / 2 + jitter.offset * margin * g.uniform(-1, 1)
    cy = side / 2 + jitter.offset * margin * g.uniform(-1, 1)
    return half, cx, cy


def test_disk_matches_brute_force_rasteriser():
    side = 16
    half, cx, cy = _disk_params(7)
    img = generate_image("disk", RngStream(7))[0]
    lo, hi = img.min(), img.max()
    cov = (img - lo) / (hi - lo)
    # oracle: a pixel is foreground when its centre lies within the radius
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    dist = np.hypot(xx - cx, yy - cy)
    oracle = dist <= half
    ours = cov >= 0.5
    # disagreements are only allowed on pixels straddling the boundary
    disagree = ours != oracle
    assert np.all(np.abs(dist[disagree] - half) < 0.5)
    # total coverage approximates the disk area
    assert abs(cov.sum() - math.pi * half**2) / (math.pi * half**2) < 0.03


@pytest.mark.parametrize("name", data.SHAPES)
def test_every_shape_in_range_and_sized(name):
    for k in range(40):
        img = generate_image(name, RngStream(k, (name,)))
        assert img.dtype == np.float32
        assert img.min() >= 0.0 and img.max() <= 1.0
        # bounding box of pixels at least a quarter covered: 30-80% of the frame
        cov = (img[0] - img[0].min()) / (img[0].max() - img[0].min())
        ys, xs = np.nonzero(cov >= 0.25)
        area = (np.ptp(ys) + 1) * (np.ptp(xs) + 1) / 256
        assert 0.3 <= area <= 0.8, (name, area)


def test_tiny_resolution_is_rejected():
    with pytest.raises(ConfigError, match="3 px"):
        generate_image("disk", RngStream(0), side=4)


def test_dataset_counts_and_splits():
    ds = generate_dataset(SMALL)
    for split in data.SPLITS:
        part = ds.select(split, data.IND)
        counts = np.bincount(part.labels, minlength=4)
        assert list(counts) == [SMALL.per_split(split)] * 4
    ood = ds.select("test", data.OOD)
    assert len(ood) == 2 * SMALL.test_per_class
    assert set(ood.labels) == {4, 5}
    assert not np.any((ds.dists == data.OOD) & (ds.splits != data.SPLITS.index("test")))


def test_dataset_is_bit_reproducible():
    a = data.dataset_to_bytes(generate_dataset(SMALL))
    b = data.dataset_to_bytes(generate_dataset(SMALL))
    assert a == b


def test_overlapping_classes_rejected():
    spec = DatasetSpec(ind_classes=("disk", "ring"), ood_classes=("ring",))
    with pytest.raises(ConfigError, match="overlap"):
        generate_dataset(spec)


def test_round_trip(tmp_path):
    ds = generate_dataset(SMALL)
    path = tmp_path / "d.bin"
    data.save_dataset(ds, path)
    assert data.load_dataset(path) == ds


def test_three_channel_round_trip(tmp_path):
    spec = DatasetSpec(channels=3, train_per_class=2, val_per_class=1, test_per_class=1)
    ds = generate_dataset(spec)
    assert ds.pixels.shape[1] == 3
    data.save_dataset(ds, tmp_path / "d.bin")
    assert data.load_dataset(tmp_path / "d.bin") == ds


def test_empty_file_rejected(tmp_path):
    (tmp_path / "e.bin").write_bytes(b"")
    with pytest.raises(FormatError, match="empty"):
        data.load_dataset(tmp_path / "e.bin")


def test_flipped_magic_rejected():
    raw = bytearray(data.dataset_to_bytes(generate_dataset(SMALL)))
    raw[0] ^= 0xFF
    with pytest.raises(FormatError, match="magic") as exc:
        data.dataset_from_bytes(bytes(raw))
    assert exc.value.offset == 0


def test_truncation_reports_offset():
    raw = data.dataset_to_bytes(generate_dataset(SMALL))
    with pytest.raises(FormatError, match="truncated") as exc:
        data.dataset_from_bytes(raw[:-10])
    assert exc.value.offset is not None and exc.value.offset < len(raw)


def test_spec_text_round_trip():
    spec = DatasetSpec(image_side=20, ood_classes=("star",), seed=99)
    assert DatasetSpec.from_text(spec.to_text()) == spec
