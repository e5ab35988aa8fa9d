import numpy as np
import pytest
import torch
from PIL import Image

from sdakd.data import degrade, fractions_for_counts, ingest, split, synthesize


def test_synthesize_shapes_and_range():
    data = synthesize(12, 64, seed=1)
    assert data.hr_images.shape == (12, 3, 64, 64)
    assert data.lr_images.shape == (12, 3, 16, 16)
    assert data.hr_images.abs().max() <= 1 and data.lr_images.abs().max() <= 1


def test_synthesize_default_corpus_size():
    data = synthesize(512, 64, seed=0)
    assert len(data) == 512


def test_synthesize_deterministic():
    a, b, c = synthesize(10, 32, seed=4), synthesize(10, 32, seed=4), synthesize(10, 32, seed=5)
    assert torch.equal(a.hr_images, b.hr_images)
    assert a.content_hash() == b.content_hash() != c.content_hash()


def test_synthesize_minimum_count():
    with pytest.raises(ValueError):
        synthesize(9, 32)


def test_degrade_shape_and_constants():
    hr = torch.full((2, 3, 64, 64), 0.3)
    lr = degrade(hr, 4)
    assert lr.shape == (2, 3, 16, 16)
    torch.testing.assert_close(lr, torch.full_like(lr, 0.3))
    assert degrade(hr[0], 4).shape == (3, 16, 16)


def test_degrade_roundtrip_shape():
    lr = torch.rand(1, 3, 8, 8) * 2 - 1
    up = torch.nn.functional.interpolate(lr, scale_factor=4, mode="nearest")
    assert degrade(up, 4).shape == lr.shape


def test_degrade_stays_in_range():
    hr = torch.where(torch.rand(1, 3, 32, 32) > 0.5, 1.0, -1.0)  # worst case for bicubic overshoot
    lr = degrade(hr, 2)
    assert lr.abs().max() <= 1


def test_degrade_rejects_indivisible():
    with pytest.raises(ValueError):
        degrade(torch.zeros(1, 3, 30, 30), 4)


def test_pairing_integrity():
    data = synthesize(10, 32, seed=2)
    for i in range(len(data)):
        assert torch.equal(data.lr_images[i], degrade(data.hr_images[i], data.scale))


def test_split_counts_from_paper_protocol():
    data = synthesize(300, 16, seed=0)
    s = split(data, (0.5, 0.25, 0.25), seed=1)
    assert (len(s.train), len(s.validation), len(s.test)) == (150, 75, 75)


def test_split_default_corpus():
    data = synthesize(640, 16, seed=0)
    s = split(data, fractions_for_counts(512, 64, 64), seed=0)
    assert (len(s.train), len(s.validation), len(s.test)) == (512, 64, 64)


def test_split_disjoint_cover_and_deterministic():
    data = synthesize(50, 16, seed=0)
    s1, s2 = split(data, (0.6, 0.2, 0.2), seed=7), split(data, (0.6, 0.2, 0.2), seed=7)
    assert s1 == s2
    tr, va, te = map(set, (s1.train, s1.validation, s1.test))
    assert not (tr & va or tr & te or va & te)
    assert tr | va | te == set(range(50))
    assert split(data, (0.6, 0.2, 0.2), seed=8) != s1


@pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.1), (1.0, 0.0, 0.0), (0.98, 0.01, 0.01)])
def test_split_rejects_bad_fractions(fractions):
    with pytest.raises(ValueError):
        split(synthesize(20, 16), fractions)


def test_subset_requires_split():
    with pytest.raises(ValueError):
        synthesize(10, 16).subset("train")


def _write_images(directory, n, size=40):
    rng = np.random.default_rng(0)
    for i in range(n):
        arr = rng.integers(0, 256, (size, size + 10, 3), dtype=np.uint8)
        Image.fromarray(arr).save(directory / f"img_{i:03d}.png")


def test_ingest_limit_and_order(tmp_path):
    _write_images(tmp_path, 14)
    data = ingest(tmp_path, hr_size=16, limit=10)
    assert len(data) == 10
    assert data.source["files"] == [f"img_{i:03d}.png" for i in range(10)]
    assert data.hr_images.shape == (10, 3, 16, 16)
    assert data.hr_images.min() >= -1 and data.hr_images.max() <= 1
    assert data.content_hash() == ingest(tmp_path, hr_size=16, limit=10).content_hash()


def test_ingest_skips_corrupt(tmp_path, caplog):
    _write_images(tmp_path, 12)
    (tmp_path / "img_000_bad.png").write_bytes(b"not an image")
    data = ingest(tmp_path, hr_size=16, limit=11)
    assert len(data) == 11
    assert "img_000_bad.png" not in data.source["files"]
    assert "skipping" in caplog.text


def test_ingest_too_few(tmp_path):
    _write_images(tmp_path, 5)
    with pytest.raises(ValueError):
        ingest(tmp_path, hr_size=16, limit=10)


def test_manifest(tmp_path):
    data = synthesize(10, 16, seed=3)
    split(data, (0.6, 0.2, 0.2), seed=0)
    data.write_manifest(tmp_path / "m.json")
    text = (tmp_path / "m.json").read_text()
    assert data.content_hash() in text and '"seed": 3' in text
