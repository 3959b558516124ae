import itertools

import numpy as np
import pytest

from stageunlearn.core import BatchNotDivisibleError, DomainCountError, DomainSet, VolumeSample
from stageunlearn.data import (
    DEFAULT_DOMAIN_SPECS,
    SyntheticDomainSpec,
    assign_splits,
    balanced_batches,
    center_crop_or_pad,
    check_manifest,
    default_domain_specs,
    extract_patch,
    generate_synthetic,
    load_sample,
    preprocess_minimal,
    read_manifest,
    rescale_intensity,
    write_dataset,
)
from stageunlearn.metrics import label_components

# ---- preprocessing


def test_rescale_example():
    out = rescale_intensity(np.array([10.0, 20.0, 30.0]))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_already_normalised_is_identity():
    rng = np.random.default_rng(0)
    vol = rng.random((6, 7, 8))
    vol.flat[0], vol.flat[1] = 0.0, 1.0
    np.testing.assert_allclose(preprocess_minimal(vol, vol.shape), vol, atol=1e-7)


def test_constant_volume_rejected():
    with pytest.raises(ValueError):
        rescale_intensity(np.full((3, 3, 3), 5.0))


def test_center_crop_matches_index_oracle():
    rng = np.random.default_rng(1)
    vol = rng.random((20, 20, 20))
    out = center_crop_or_pad(vol, (16, 16, 16))
    for i, j, k in itertools.product(range(16), repeat=3):
        assert out[i, j, k] == vol[i + 2, j + 2, k + 2]


def test_pad_then_crop_round_trip():
    rng = np.random.default_rng(2)
    vol = rng.random((5, 8, 7))
    padded = center_crop_or_pad(vol, (9, 8, 12))
    assert padded.shape == (9, 8, 12)
    assert padded.sum() == pytest.approx(vol.sum())
    np.testing.assert_array_equal(center_crop_or_pad(padded, vol.shape), vol)


# ---- synthetic generator


def test_generator_is_deterministic():
    a = generate_synthetic(DEFAULT_DOMAIN_SPECS, 3, 16, seed=5)
    b = generate_synthetic(DEFAULT_DOMAIN_SPECS, 3, 16, seed=5)
    for x, y in zip(a, b):
        assert x.case_id == y.case_id
        np.testing.assert_array_equal(x.image, y.image)
        np.testing.assert_array_equal(x.label, y.label)


def test_noise_ordering_follows_spec():
    quiet = SyntheticDomainSpec("quiet", noise_sigma=0.01)
    loud = SyntheticDomainSpec("loud", noise_sigma=0.1)
    samples = generate_synthetic([quiet, loud], 5, 16, seed=0)
    var = {d: np.mean([s.image.var() for s in samples if s.domain == d]) for d in (0, 1)}
    assert var[0] < var[1]


def test_lesion_counts_match_across_domains():
    samples = generate_synthetic(DEFAULT_DOMAIN_SPECS, 50, 32, seed=0)
    counts = {
        d: np.mean([label_components(s.label).count for s in samples if s.domain == d]) for d in (0, 1)
    }
    assert abs(counts[0] - counts[1]) <= 1


def test_labels_binary_and_nonempty():
    for s in generate_synthetic(DEFAULT_DOMAIN_SPECS, 4, 24, seed=3):
        assert set(np.unique(s.label)) == {0, 1}
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_linear_probe_separates_default_domains():
    samples = generate_synthetic(DEFAULT_DOMAIN_SPECS, 50, 32, seed=11)
    X = np.array([[s.image.mean(), s.image.var()] for s in samples])
    y = np.array([s.domain for s in samples])
    A = np.c_[(X - X.mean(0)) / X.std(0), np.ones(len(X))]
    w, *_ = np.linalg.lstsq(A, 2.0 * y - 1.0, rcond=None)
    assert ((A @ w > 0) == y).mean() > 0.9


def test_degenerate_specs_rejected():
    with pytest.raises(ValueError):
        SyntheticDomainSpec("empty", lesion_count_range=(0, 0), lesion_radius_range=(0.0, 0.0))
    with pytest.raises(ValueError):
        generate_synthetic([SyntheticDomainSpec("a"), SyntheticDomainSpec("b")], 1, 16)
    with pytest.raises(DomainCountError):
        generate_synthetic([SyntheticDomainSpec("a")], 1, 16)


def test_default_specs_for_more_domains_are_distinct():
    specs = default_domain_specs(4)
    assert len({s.appearance() for s in specs}) == 4


# ---- manifest + files


def test_dataset_round_trip(tmp_path):
    samples = generate_synthetic(DEFAULT_DOMAIN_SPECS, 4, 16, seed=0)
    splits = assign_splits(samples, n_val=1, n_test=1)
    write_dataset(samples, tmp_path, ["scanner_a", "scanner_b"], splits)
    manifest = read_manifest(tmp_path / "manifest.csv")
    assert len(manifest) == 8
    assert len(manifest.split("train")) == 4
    domains = manifest.domain_set()
    check_manifest(manifest, domains, batch_size=4)
    by_id = {s.case_id: s for s in samples}
    for entry in manifest:
        loaded = load_sample(entry, domains)
        np.testing.assert_array_equal(loaded.image, by_id[entry.case_id].image)
        np.testing.assert_array_equal(loaded.label, by_id[entry.case_id].label)


def test_manifest_too_small_for_batch(tmp_path):
    samples = generate_synthetic(DEFAULT_DOMAIN_SPECS, 2, 16, seed=0)
    write_dataset(samples, tmp_path, ["scanner_a", "scanner_b"], assign_splits(samples, 0, 1))
    manifest = read_manifest(tmp_path / "manifest.csv")
    with pytest.raises(ValueError):
        check_manifest(manifest, manifest.domain_set(), batch_size=4)


# ---- balanced batches


def _items(sizes):
    return [(d, k) for d, n in enumerate(sizes) for k in range(n)]


@pytest.mark.parametrize("batch_size, sizes", [(8, (12, 12)), (6, (5, 9, 4))])
def test_per_domain_quota(batch_size, sizes):
    per = batch_size // len(sizes)
    for batch in balanced_batches(_items(sizes), batch_size, seed=0, n_batches=50, domain_of=lambda e: e[0]):
        counts = np.bincount([d for d, _ in batch], minlength=len(sizes))
        assert counts.tolist() == [per] * len(sizes)


def test_unequal_domains_cycle_smaller_one():
    batches = list(balanced_batches(_items((10, 4)), 4, seed=3, domain_of=lambda e: e[0]))
    assert len(batches) == 5  # one pass over the larger domain
    small = [k for b in batches for d, k in b if d == 1]
    assert len(small) == 10 and len(set(small)) == 4
    # each full cycle of the small domain is a permutation
    assert sorted(small[:4]) == [0, 1, 2, 3] and sorted(small[4:8]) == [0, 1, 2, 3]


def test_balance_over_1000_batches():
    seen = np.zeros(2, int)
    for batch in balanced_batches(_items((10, 4)), 4, seed=1, n_batches=1000, domain_of=lambda e: e[0]):
        counts = np.bincount([d for d, _ in batch], minlength=2)
        assert counts.tolist() == [2, 2]
        seen += counts
        assert abs(seen[0] - seen[1]) <= 2
    assert seen.tolist() == [2000, 2000]


def test_batch_errors():
    with pytest.raises(BatchNotDivisibleError):
        list(balanced_batches(_items((4, 4)), 3, seed=0, domain_of=lambda e: e[0]))
    with pytest.raises(ValueError):
        list(balanced_batches(_items((4,)), 2, seed=0, domain_of=lambda e: e[0], domains=[0, 1]))


def test_batches_seeded():
    a = list(balanced_batches(_items((6, 6)), 4, seed=9, domain_of=lambda e: e[0]))
    b = list(balanced_batches(_items((6, 6)), 4, seed=9, domain_of=lambda e: e[0]))
    c = list(balanced_batches(_items((6, 6)), 4, seed=10, domain_of=lambda e: e[0]))
    assert a == b and a != c


# ---- patches


def test_patch_extraction():
    rng = np.random.default_rng(0)
    label = np.zeros((20, 20, 20), np.uint8)
    label[15:17, 15:17, 15:17] = 1
    sample = VolumeSample(rng.random((20, 20, 20)).astype(np.float32), label, 0)
    for _ in range(10):
        p = extract_patch(sample, (8, 8, 8), rng, foreground_fraction=1.0)
        assert p.image.shape == p.label.shape == (8, 8, 8)
        assert p.label.any()
    small = extract_patch(VolumeSample(np.ones((4, 4, 4), np.float32), np.zeros((4, 4, 4), np.uint8), 0), (8, 8, 8), rng)
    assert small.image.shape == (8, 8, 8) and small.image.sum() == 64


def test_domain_set_sorted(tmp_path):
    samples = generate_synthetic(DEFAULT_DOMAIN_SPECS, 2, 16, seed=0)
    write_dataset(samples, tmp_path, ["scanner_a", "scanner_b"], assign_splits(samples, 0, 0))
    assert read_manifest(tmp_path / "manifest.csv").domain_set() == DomainSet(("scanner_a", "scanner_b"))
