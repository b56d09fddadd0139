import numpy as np
import pytest
from scipy import stats

from dlif import synthdata as S
from dlif.tensor import dlif_io


def sample(ident=3, liveness="live", attack="none", style=S.Style(), seed=0, size=32):
    return S.generate_sample(ident, liveness, attack, style, np.random.default_rng(seed), size)


def small_spec(**kw):
    base = dict(n_domains=2, ids_per_domain=4, samples_per_id_per_liveness=4, image_size=16, seed=3)
    base.update(kw)
    return S.DatasetSpec(**base)


def test_sample_deterministic():
    st = S.Style(0.02, 1.1, 10.0, 0.3, 0.02)
    a = sample(5, "spoof", "moire", st, seed=9).image
    b = sample(5, "spoof", "moire", st, seed=9).image
    assert a.tobytes() == b.tobytes()
    assert a.shape == (3, 32, 32) and a.min() >= 0 and a.max() <= 1


def test_inconsistent_attack_rejected():
    for liv, att in (("live", "grid"), ("spoof", "none"), ("spoof", "laser"), ("alive", "none")):
        with pytest.raises(ValueError):
            sample(liveness=liv, attack=att)


def test_grid_difference_peaks_at_lattice_frequency():
    # noise-free style so both renders draw from the same rng positions up to the attack
    for seed in range(5):
        live = sample(seed, "live", "none", seed=seed).image
        spoof = sample(seed, "spoof", "grid", seed=seed).image
        diff = (spoof - live).mean(axis=0)
        mag = np.abs(np.fft.fft2(diff - diff.mean()))
        peak = np.unravel_index(np.argmax(mag), mag.shape)
        k = 32 // S.GRID_PERIOD
        assert peak in {(0, k), (k, 0), (0, 32 - k), (32 - k, 0)}


def test_brightness_shift_is_additive():
    img = lambda d: sample(style=S.Style(brightness=d), seed=4).image
    a, b = img(0.0), img(0.05)
    interior = (a > 0.01) & (a < 0.94)
    assert abs((b - a)[interior].mean() - 0.05) < 1e-12


def test_attacks_change_image():
    live = sample(seed=2).image
    for att in S.ATTACK_TYPES:
        assert np.abs(sample(liveness="spoof", attack=att, seed=2).image - live).mean() > 1e-3


def test_dataset_counts_and_files(tmp_path):
    rows = S.generate_dataset(small_spec(), tmp_path)
    assert len(rows) == 64
    assert len(list((tmp_path / "images").glob("*.dlif"))) == 64
    assert len((tmp_path / "manifest.csv").read_text().splitlines()) == 65
    assert (tmp_path / "images" / "000000.dlif").read_bytes()[:5] == b"DLIF1"


def test_dataset_rerun_identical(tmp_path):
    S.generate_dataset(small_spec(), tmp_path / "a")
    S.generate_dataset(small_spec(), tmp_path / "b")
    assert (tmp_path / "a/manifest.csv").read_bytes() == (tmp_path / "b/manifest.csv").read_bytes()
    for f in (tmp_path / "a/images").iterdir():
        assert f.read_bytes() == (tmp_path / "b/images" / f.name).read_bytes()


def test_manifest_roundtrip(tmp_path):
    rows = S.generate_dataset(small_spec(n_domains=1), tmp_path)
    assert S.read_manifest(tmp_path / "manifest.csv") == rows
    S.write_manifest(rows, tmp_path / "copy.csv")
    assert (tmp_path / "copy.csv").read_bytes() == (tmp_path / "manifest.csv").read_bytes()


def test_manifest_bad_header(tmp_path):
    (tmp_path / "m.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        S.read_manifest(tmp_path / "m.csv")


def test_labels_and_disjoint_ids(tmp_path):
    S.generate_dataset(small_spec(), tmp_path)
    ds = S.load_dataset(tmp_path)
    rows = ds.rows
    assert all((r.liveness == "live") == (r.attack_type == "none") for r in rows)
    ids = {t: {r.identity_id for r in rows if r.domain_tag == t} for t in (0, 1)}
    assert not ids[0] & ids[1]
    rep = S.factor_report(rows)
    assert rep["independent_by_count"] and rep["mutual_information"] == 0.0
    assert ds.images.shape == (64, 3, 16, 16)
    assert np.array_equal(ds.images[5], dlif_io.load(tmp_path / rows[5].path))


def test_factor_report_detects_dependence():
    rows = [S.ManifestRow("x", 0, "live", "none", 0, 0, 1, 0, 0, 0)] * 3 + \
        [S.ManifestRow("y", 1, "spoof", "grid", 0, 0, 1, 0, 0, 0)]
    rep = S.factor_report(rows)
    assert not rep["independent_by_count"] and rep["mutual_information"] > 0


def test_style_ranges_ks():
    spec = S.DatasetSpec(samples_per_id_per_liveness=20, seed=5)
    plan = S.plan_dataset(spec)
    for tag in spec.domain_tags:
        styles = [p[4] for p in plan if p[5] == tag]
        for key, (lo, hi) in spec.ranges_for(tag).items():
            vals = [getattr(s, key) for s in styles]
            assert stats.kstest(vals, "uniform", args=(lo, hi - lo)).pvalue > 0.01, (tag, key)


def test_spec_validation_and_mapping():
    with pytest.raises(ValueError):
        S.DatasetSpec(n_domains=0)
    with pytest.raises(ValueError):
        S.DatasetSpec(attack_mix={"laser": 1.0})
    with pytest.raises(ValueError):
        S.DatasetSpec(style_ranges={0: {"hue": (5.0, 1.0)}})
    with pytest.raises(ValueError, match="valid keys"):
        S.DatasetSpec.from_mapping({"bogus": "1"})
    spec = S.DatasetSpec.from_mapping({"n_domains": "2", "attack_mix": "grid:2,blur", "style.1.hue": "1,2"})
    assert spec.n_domains == 2 and spec.attack_mix == {"grid": 2.0, "blur": 1.0}
    assert spec.ranges_for(1)["hue"] == (1.0, 2.0)


def test_domain_shift_report(tmp_path):
    S.generate_dataset(small_spec(samples_per_id_per_liveness=6), tmp_path)
    rep = S.domain_shift_report(S.load_dataset(tmp_path), 0, 1)
    assert set(rep) >= {"accuracy_train_domain", "accuracy_test_domain", "degradation"}
    assert 0 <= rep["accuracy_test_domain"] <= 1


def _fake_dataset(n_domains=3, ids=12, per=8, size=8):
    rows, k = [], 0
    for d in range(n_domains):
        for i in range(d * ids, (d + 1) * ids):
            for liv in S.LIVENESS_NAMES:
                for _ in range(per):
                    rows.append(S.ManifestRow(f"{k}", i, liv, "none" if liv == "live" else "grid", d, 0, 1, 0, 0, 0))
                    k += 1
    images = np.random.default_rng(0).uniform(size=(len(rows), 3, size, size))
    return S.SyntheticDataset(None, rows, images)


def test_batch_shape_and_composition():
    ds = _fake_dataset()
    b = S.sample_batch(ds, np.random.default_rng(1), augment=S.AugmentConfig(), input_size=8)
    assert len(b) == 96 and b.images.shape == (96, 3, 8, 8)
    for d in range(3):
        ids, counts = np.unique(b.identity[b.domain == d], return_counts=True)
        assert ids.size == 4 and np.all(counts == 8)
    for i in np.unique(b.identity):
        assert np.sum(b.liveness[b.identity == i] == 0) == 4
        assert np.sum(b.liveness[b.identity == i] == 1) == 4


def test_batch_without_augment_is_exact():
    ds = _fake_dataset()
    b = S.sample_batch(ds, np.random.default_rng(2))
    assert np.array_equal(b.images, ds.images[b.indices])


def test_batch_id_selection_uniform():
    ds = _fake_dataset(size=4)
    rng = np.random.default_rng(3)
    n = 1000
    counts = np.zeros(36)
    for _ in range(n):
        b = S.sample_batch(ds, rng)
        counts[np.unique(b.identity)] += 1
    p = 4 / 12
    assert np.all(np.abs(counts - n * p) <= 5 * np.sqrt(n * p * (1 - p)))


def test_batch_falls_back_to_replacement(caplog):
    ds = _fake_dataset(n_domains=1, ids=4, per=2, size=4)
    b = S.sample_batch(ds, np.random.default_rng(4))
    assert len(b) == 32
    assert "with replacement" in caplog.text


def test_eligible_ids_restrict_batch():
    ds = _fake_dataset(size=4)
    b = S.sample_batch(ds, np.random.default_rng(5), eligible_ids=[0, 1, 2, 3, 12, 13, 14, 15])
    assert set(b.identity.tolist()) <= {0, 1, 2, 3, 12, 13, 14, 15}
    assert len(b) == 64


def test_augment_bounds_and_determinism():
    img = np.random.default_rng(6).uniform(size=(3, 32, 32))
    cfg = S.AugmentConfig()
    a = S.random_resized_crop_rotate(img, 32, cfg, np.random.default_rng(7))
    b = S.random_resized_crop_rotate(img, 32, cfg, np.random.default_rng(7))
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1
