"""Synthetic dataset: generative law, file formats, normalization, splits."""

import os

import numpy as np
import pytest

from sfcnext import data


def test_age_law_is_monotone():
    ages = np.linspace(data.AGE_LO, data.AGE_HI, 50)
    thick = data.shell_thickness(ages)
    vent = data.ventricle_radius(ages)
    assert np.all(np.diff(thick) < 0)   # cortical shell thins with age
    assert np.all(np.diff(vent) > 0)    # ventricles grow with age
    assert thick.min() > 0
    assert vent.max() < 1.0


def test_synth_volume_deterministic_and_age_sensitive(rng):
    a = data.synth_volume(30.0, 0, (16, 16, 16), noise=0.0)
    b = data.synth_volume(30.0, 0, (16, 16, 16), noise=0.0)
    c = data.synth_volume(65.0, 0, (16, 16, 16), noise=0.0)
    np.testing.assert_array_equal(a, b)
    assert np.abs(a - c).max() > 0.05
    # corners lie outside the head ellipsoid
    assert a[0, 0, 0] == 0.0
    with pytest.raises(ValueError, match="rng"):
        data.synth_volume(30.0, 0, (16, 16, 16), rng=None, noise=0.1)


def test_sex_asymmetry_is_lateral():
    m = data.synth_volume(40.0, 1, (16, 16, 16), noise=0.0)
    f = data.synth_volume(40.0, 0, (16, 16, 16), noise=0.0)
    left = slice(0, 8)
    assert np.array_equal(m[:, :, left], f[:, :, left])
    assert not np.array_equal(m[:, :, 8:], f[:, :, 8:])


def test_generate_synthetic_validation(tmp_path):
    with pytest.raises(ValueError, match="at least 10"):
        data.generate_synthetic(5, (16, 16, 16), 0, str(tmp_path))
    with pytest.raises(ValueError, match="at least 16"):
        data.generate_synthetic(10, (8, 16, 16), 0, str(tmp_path))


def test_generate_is_reproducible(tmp_path):
    m1 = data.generate_synthetic(10, (16, 16, 16), 5, str(tmp_path / "a"))
    m2 = data.generate_synthetic(10, (16, 16, 16), 5, str(tmp_path / "b"))
    for r1, r2 in zip(m1.rows, m2.rows):
        assert (r1.id, r1.age, r1.sex, r1.site) == (r2.id, r2.age, r2.sex, r2.site)
    v1 = data.read_volume(os.path.join(m1.root, m1.rows[0].path))
    v2 = data.read_volume(os.path.join(m2.root, m2.rows[0].path))
    np.testing.assert_array_equal(v1, v2)


def test_age_cohort_statistics(tmp_path):
    man = data.generate_synthetic(500, (16, 16, 16), 0, str(tmp_path / "c"))
    ages = np.array([r.age for r in man.rows])
    assert ages.min() >= data.AGE_LO and ages.max() <= data.AGE_HI
    assert 33.0 < ages.mean() < 43.0
    assert 11.0 < ages.std() < 17.0


def test_volume_roundtrip(tmp_path, rng):
    vol = rng.standard_normal((5, 6, 7)).astype(np.float32)
    path = str(tmp_path / "v.vol")
    data.write_volume(path, vol)
    np.testing.assert_array_equal(data.read_volume(path), vol)


def test_volume_format_errors(tmp_path, rng):
    path = str(tmp_path / "v.vol")
    data.write_volume(path, rng.standard_normal((4, 4, 4)).astype(np.float32))
    raw = open(path, "rb").read()
    bad = str(tmp_path / "bad.vol")
    open(bad, "wb").write(b"NOPE" + raw[4:])
    with pytest.raises(data.BadMagicError):
        data.read_volume(bad)
    open(bad, "wb").write(raw[:30])
    with pytest.raises(data.TruncatedFileError):
        data.read_volume(bad)
    open(bad, "wb").write(raw[:10])
    with pytest.raises(data.TruncatedFileError):
        data.read_volume(bad)


def test_manifest_roundtrip_and_integrity(small_manifest, tmp_path):
    man = data.load_manifest(os.path.join(small_manifest.root, "manifest.csv"))
    assert [r.age for r in man.rows] == [r.age for r in small_manifest.rows]
    assert man.dims == small_manifest.dims

    lines = open(os.path.join(man.root, "manifest.csv")).read().splitlines()
    bad = tmp_path / "manifest.csv"
    # duplicate id
    bad.write_text("\n".join(lines + [lines[-1]]) + "\n")
    with pytest.raises(data.ManifestIntegrityError):
        data.load_manifest(str(bad))
    # count mismatch
    bad.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(data.ManifestIntegrityError, match="count"):
        data.load_manifest(str(bad))
    # missing metadata
    bad.write_text("\n".join(ln for ln in lines if not ln.startswith("# seed")) + "\n")
    with pytest.raises(data.ManifestIntegrityError, match="seed"):
        data.load_manifest(str(bad))
    # missing volume file
    bad.write_text("\n".join(lines).replace("sub-00000", "sub-99999") + "\n")
    with pytest.raises(data.ManifestIntegrityError, match="missing volume"):
        data.load_manifest(str(bad))


def test_normalize_volume_properties(rng):
    vol = data.synth_volume(45.0, 1, (16, 16, 16), rng=rng)
    norm = data.normalize_volume(vol)
    mask = vol != vol.flat[0]
    assert abs(norm[mask].mean()) < 1e-5
    assert abs(norm[mask].std() - 1.0) < 1e-4
    assert np.all(norm[~mask] == 0.0)
    # idempotent and invariant to affine rescaling of the input
    np.testing.assert_allclose(data.normalize_volume(norm), norm, atol=1e-6)
    np.testing.assert_allclose(data.normalize_volume(vol * 3.0 + 2.0), norm,
                               atol=1e-4)
    with pytest.raises(ValueError, match="constant"):
        data.normalize_volume(np.zeros((4, 4, 4), dtype=np.float32))


def test_split_fractions_and_determinism(small_manifest):
    spec = data.SplitSpec(repeat=2, seed=9)
    tr, va, te = data.split(small_manifest, spec)
    n = len(small_manifest.rows)
    assert len(tr) == int(0.8 * n)
    assert len(va) == int(0.1 * n)
    assert len(tr) + len(va) + len(te) == n
    assert not (set(tr) & set(va)) and not (set(tr) & set(te))
    tr2, _, _ = data.split(small_manifest, data.SplitSpec(repeat=2, seed=9))
    assert tr == tr2
    tr3, _, _ = data.split(small_manifest, data.SplitSpec(repeat=3, seed=9))
    assert tr != tr3
    with pytest.raises(ValueError):
        data.SplitSpec(fractions=(0.5, 0.2, 0.2))


def test_load_samples_normalizes(small_manifest):
    samples = data.load_samples(small_manifest, small_manifest.ids[:2])
    for s in samples:
        assert s.volume.shape == (1, 24, 24, 24)
        assert s.volume.dtype == np.float32
        mask = s.volume != 0.0
        assert abs(s.volume[mask].mean()) < 1e-4
