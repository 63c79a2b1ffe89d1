import json

import numpy as np
import pytest

from cloudfree import data
from cloudfree.data import ContainerError


def _files(path):
    return {name: (path / name).read_bytes() for name in (data.MANIFEST, data.BLOB)}


def test_generator_is_deterministic():
    a = data.gen_synthetic(seed=3, n=4, H=16, W=24, N=3, C=2)
    b = data.gen_synthetic(seed=3, n=4, H=16, W=24, N=3, C=2)
    for p, q in zip(a.pairs, b.pairs):
        assert p.id == q.id
        assert p.x.tobytes() == q.x.tobytes() and p.y0.tobytes() == q.y0.tobytes()
    c = data.gen_synthetic(seed=4, n=1, H=16, W=24, N=3, C=2)
    assert c.pairs[0].y0.tobytes() != a.pairs[0].y0.tobytes()


def test_generator_is_prefix_stable():
    small = data.gen_synthetic(seed=5, n=2, H=8, W=8)
    big = data.gen_synthetic(seed=5, n=5, H=8, W=8)
    for p, q in zip(small.pairs, big.pairs):
        assert np.array_equal(p.x, q.x)


def test_shapes_ranges_and_ids():
    ds = data.gen_synthetic(seed=0, n=3, H=16, W=16, N=2, C=4, split="test")
    assert ds.shape == (2, 4, 16, 16)
    assert [p.id for p in ds.pairs] == ["test-0-00000", "test-0-00001", "test-0-00002"]
    for p in ds.pairs:
        assert p.x.dtype == np.float32 and p.y0.shape == (1, 4, 16, 16)
        assert p.x.min() >= -1 and p.x.max() <= 1
        assert p.y0.min() >= -1 and p.y0.max() <= 1
    x, y = ds.stacked()
    assert x.shape == (3, 2, 4, 16, 16) and y.shape == (3, 4, 16, 16)


def test_zero_coverage_views_equal_truth():
    ds = data.gen_synthetic(seed=1, n=2, H=8, W=8, N=3, C=3, coverage=(0.0, 0.0))
    for p in ds.pairs:
        for view in p.x:
            assert np.array_equal(view, p.y0[0])


def test_coverage_within_band():
    ds = data.gen_synthetic(seed=2, n=100, H=32, W=32, N=3, C=3)
    cov = np.asarray(ds.extra["coverage"])
    assert cov.shape == (100, 3)
    assert cov.min() >= 0.05 and cov.max() <= 0.40


def test_clouds_are_brighter_than_ground():
    p = data.gen_synthetic(seed=6, n=1, H=32, W=32, N=3, C=3).pairs[0]
    assert (p.x - p.y0).mean() > 0


def test_generator_errors():
    for kw in (dict(n=0, H=8, W=8), dict(n=1, H=12, W=8), dict(n=1, H=8, W=0), dict(n=1, H=8, W=8, N=0)):
        with pytest.raises(ValueError):
            data.gen_synthetic(seed=0, **kw)


def test_sample_pair_validation():
    with pytest.raises(ValueError):
        data.SamplePair(np.zeros((2, 3, 8, 8)), np.zeros((1, 3, 8, 4)), "a")
    with pytest.raises(ValueError):
        data.SamplePair(np.zeros((2, 3, 8, 8)), np.zeros((2, 3, 8, 8)), "a")


# container


def test_save_load_save_is_bit_exact(tmp_path):
    ds = data.gen_synthetic(seed=9, n=3, H=8, W=16, N=2, C=3, split="val")
    data.save_dataset(ds, tmp_path / "a")
    back = data.load_dataset(tmp_path / "a")
    assert (back.seed, back.split, len(back)) == (9, "val", 3)
    for p, q in zip(ds.pairs, back.pairs):
        assert p.id == q.id and p.x.tobytes() == q.x.tobytes() and p.y0.tobytes() == q.y0.tobytes()
    data.save_dataset(back, tmp_path / "b")
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_manifest_fields(tmp_path):
    ds = data.gen_synthetic(seed=1, n=2, H=8, W=8, N=3, C=1)
    m = data.save_dataset(ds, tmp_path / "d")
    on_disk = json.loads((tmp_path / "d" / data.MANIFEST).read_text())
    assert on_disk == m
    for key in ("version", "count", "N", "C", "H", "W", "seed", "split", "samples", "sha256", "blob_bytes"):
        assert key in m
    offsets = [s["offset"] for s in m["samples"]]
    assert offsets == sorted(set(offsets)) and offsets[0] == 0


def test_record_encoding_is_little_endian():
    raw = data._encode_record(np.array([[1.0, -2.0]], dtype=np.float32))
    assert raw[:12] == bytes([2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0])
    assert raw[12:] == np.array([1.0, -2.0], dtype="<f4").tobytes()


def _saved(tmp_path):
    ds = data.gen_synthetic(seed=0, n=2, H=8, W=8, N=2, C=1)
    data.save_dataset(ds, tmp_path / "d")
    return tmp_path / "d"


def _edit_manifest(path, fn):
    m = json.loads((path / data.MANIFEST).read_text())
    fn(m)
    (path / data.MANIFEST).write_text(json.dumps(m))


def test_corrupted_header_fails(tmp_path):
    d = _saved(tmp_path)
    (d / data.MANIFEST).write_text('{"format": "cloudfree-tensors", "version": ')
    with pytest.raises(ContainerError):
        data.load_dataset(d)


def test_version_mismatch_fails(tmp_path):
    d = _saved(tmp_path)
    _edit_manifest(d, lambda m: m.update(version=99))
    with pytest.raises(ContainerError, match="version"):
        data.load_dataset(d)


def test_count_mismatch_fails(tmp_path):
    d = _saved(tmp_path)
    _edit_manifest(d, lambda m: m.update(count=3))
    with pytest.raises(ContainerError, match="count"):
        data.load_dataset(d)


def test_truncated_blob_fails(tmp_path):
    d = _saved(tmp_path)
    blob = (d / data.BLOB).read_bytes()
    (d / data.BLOB).write_bytes(blob[:-7])
    with pytest.raises(ContainerError):
        data.load_dataset(d)


def test_checksum_failure(tmp_path):
    d = _saved(tmp_path)
    blob = bytearray((d / data.BLOB).read_bytes())
    blob[40] ^= 0xFF
    (d / data.BLOB).write_bytes(bytes(blob))
    with pytest.raises(ContainerError, match="checksum"):
        data.load_dataset(d)


def test_non_increasing_offsets_fail(tmp_path):
    d = _saved(tmp_path)
    _edit_manifest(d, lambda m: m["samples"].reverse())
    with pytest.raises(ContainerError):
        data.load_dataset(d)


def test_missing_container(tmp_path):
    with pytest.raises(ContainerError):
        data.load_dataset(tmp_path / "nothing")


def test_overwrite_replaces_atomically(tmp_path):
    a = data.gen_synthetic(seed=0, n=1, H=8, W=8, N=1, C=1)
    b = data.gen_synthetic(seed=1, n=2, H=8, W=8, N=1, C=1)
    data.save_dataset(a, tmp_path / "d")
    data.save_dataset(b, tmp_path / "d")
    assert len(data.load_dataset(tmp_path / "d")) == 2
    assert sorted(p.name for p in tmp_path.iterdir()) == ["d"]


# scaling


def test_normalize_examples():
    assert data.normalize(5000, 0, 10000) == 0.0
    assert data.normalize(0, 0, 10000) == -1.0 and data.normalize(10000, 0, 10000) == 1.0
    assert data.normalize(12000, 0, 10000) == 1.0
    v = np.linspace(0, 10000, 17)
    np.testing.assert_allclose(data.denormalize(data.normalize(v, 0, 10000), 0, 10000), v, rtol=0, atol=1e-9)
    for fn in (data.normalize, data.denormalize):
        with pytest.raises(ValueError):
            fn(1.0, 5, 5)


def test_to_uint8_and_png():
    img = np.array([[[-1.0, 0.0], [1.0, 2.0]]] * 3)
    u = data.to_uint8(img)
    assert u.shape == (2, 2, 3)
    assert u[..., 0].tolist() == [[0, 128], [255, 255]]
    png = data.png_bytes(img)
    assert png[:8] == b"\x89PNG\r\n\x1a\n"
    from io import BytesIO

    from PIL import Image

    back = np.asarray(Image.open(BytesIO(png)))
    assert np.array_equal(back, u)
    gray = Image.open(BytesIO(data.png_bytes(img[:1])))
    assert gray.mode == "L"
