"""Synthetic domains, IDX ingestion and the episode sampler."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from flatshot.data import (
    Domain,
    EpisodeProtocol,
    SyntheticSpec,
    check_disjoint_classes,
    gen_synthetic_domains,
    load_domain,
    load_idx,
    pool_domains,
    sample_episode,
    save_domain,
    stratified_split,
    with_label_noise,
    write_idx,
)
from flatshot.errors import (
    ConfigError,
    DataError,
    IdxCountMismatchError,
    IdxFormatError,
    IdxMagicError,
    IdxTruncatedError,
)


def test_synthetic_spec_json_round_trip():
    spec = SyntheticSpec(n_domains=3, classes_per_domain=4, samples_per_class=10, dim=8)
    assert SyntheticSpec.from_json(spec.to_json()) == spec
    with pytest.raises(ConfigError):
        SyntheticSpec(n_domains=8, classes_per_domain=2, samples_per_class=5, dim=8)


def test_generation_is_deterministic():
    spec = SyntheticSpec(n_domains=2, classes_per_domain=3, samples_per_class=7, dim=6)
    a = gen_synthetic_domains(spec, seed=5)
    b = gen_synthetic_domains(spec, seed=5)
    for da, db in zip(a, b):
        np.testing.assert_array_equal(da.samples, db.samples)
        np.testing.assert_array_equal(da.labels, db.labels)


def test_zero_shift_shared_layout_domains_match_up_to_relabeling():
    spec = SyntheticSpec(
        n_domains=2, classes_per_domain=3, samples_per_class=5, dim=6, delta=0.0
    )
    d0, d1 = gen_synthetic_domains(spec, seed=11)
    np.testing.assert_array_equal(d0.generator_spec.means, d1.generator_spec.means)
    np.testing.assert_array_equal(np.asarray(d1.class_ids) - 3, np.asarray(d0.class_ids))
    assert set(d0.class_ids).isdisjoint(d1.class_ids)


def test_tiny_sigma_pins_samples_to_class_means():
    spec = SyntheticSpec(
        n_domains=1, classes_per_domain=3, samples_per_class=4, dim=5, sigma=1e-9
    )
    (dom,) = gen_synthetic_domains(spec, seed=0)
    means = dom.generator_spec.means
    local = dom.local_labels()
    assert np.max(np.abs(dom.samples - means[local])) < 1e-6


def test_class_ids_globally_disjoint():
    spec = SyntheticSpec(n_domains=4, classes_per_domain=3, samples_per_class=4, dim=8)
    domains = gen_synthetic_domains(spec, seed=1)
    check_disjoint_classes(domains)  # must not raise
    with pytest.raises(DataError):
        check_disjoint_classes([domains[0], domains[0]])


def test_pool_domains_concatenates():
    spec = SyntheticSpec(n_domains=2, classes_per_domain=2, samples_per_class=3, dim=5)
    domains = gen_synthetic_domains(spec, seed=2)
    pooled = pool_domains(domains)
    assert pooled.n == sum(d.n for d in domains)
    assert pooled.n_classes == 4


def test_label_noise_flips_requested_fraction():
    spec = SyntheticSpec(n_domains=1, classes_per_domain=4, samples_per_class=50, dim=5)
    (dom,) = gen_synthetic_domains(spec, seed=3)
    noisy = with_label_noise(dom, 0.2, seed=0)
    flipped = np.mean(noisy.labels != dom.labels)
    assert flipped == pytest.approx(0.2, abs=1e-12)
    assert set(np.unique(noisy.labels)) <= set(dom.class_ids)


# -- IDX ----------------------------------------------------------------------


def _write_idx_pair(tmp_path, images, labels):
    img = tmp_path / "imgs.idx"
    lbl = tmp_path / "lbls.idx"
    n, rows, cols = images.shape
    img.write_bytes(struct.pack(">4I", 0x803, n, rows, cols) + images.tobytes())
    lbl.write_bytes(struct.pack(">2I", 0x801, n) + labels.tobytes())
    return img, lbl


def test_load_idx_minimal_pair(tmp_path):
    images = np.arange(18, dtype=np.uint8).reshape(2, 3, 3)
    labels = np.array([1, 0], dtype=np.uint8)
    img, lbl = _write_idx_pair(tmp_path, images, labels)
    dom = load_idx(img, lbl)
    assert dom.n == 2 and dom.dim == 9
    assert dom.samples.min() >= 0.0 and dom.samples.max() <= 1.0
    np.testing.assert_allclose(dom.samples[0], np.arange(9) / 255.0)


def test_load_idx_bad_magic_names_file(tmp_path):
    images = np.zeros((1, 2, 2), dtype=np.uint8)
    labels = np.zeros(1, dtype=np.uint8)
    img, lbl = _write_idx_pair(tmp_path, images, labels)
    img.write_bytes(struct.pack(">4I", 0x9999, 1, 2, 2) + images.tobytes())
    with pytest.raises(IdxMagicError, match="imgs.idx"):
        load_idx(img, lbl)


def test_load_idx_truncated_payload(tmp_path):
    images = np.zeros((2, 2, 2), dtype=np.uint8)
    labels = np.zeros(2, dtype=np.uint8)
    img, lbl = _write_idx_pair(tmp_path, images, labels)
    img.write_bytes(img.read_bytes()[:-3])
    with pytest.raises(IdxTruncatedError):
        load_idx(img, lbl)


def test_load_idx_count_mismatch(tmp_path):
    images = np.zeros((2, 2, 2), dtype=np.uint8)
    img, lbl = _write_idx_pair(tmp_path, images, np.zeros(2, dtype=np.uint8))
    lbl.write_bytes(struct.pack(">2I", 0x801, 3) + bytes(3))
    with pytest.raises(IdxCountMismatchError):
        load_idx(img, lbl)


def test_idx_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(4)
    images = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    labels = rng.integers(0, 7, size=5).astype(np.uint8)
    img, lbl = _write_idx_pair(tmp_path, images, labels)
    dom = load_idx(img, lbl)
    img2, lbl2 = tmp_path / "imgs2.idx", tmp_path / "lbls2.idx"
    write_idx(dom, img2, lbl2, rows=4, cols=3)
    assert img2.read_bytes() == img.read_bytes()
    assert lbl2.read_bytes() == lbl.read_bytes()


@settings(max_examples=60, deadline=None)
@given(
    pos=st.integers(0, 15),
    value=st.integers(0, 255),
    cut=st.integers(0, 16),
)
def test_idx_header_fuzz_raises_library_errors(tmp_path_factory, pos, value, cut):
    tmp_path = tmp_path_factory.mktemp("fuzz")
    images = np.zeros((2, 2, 2), dtype=np.uint8)
    labels = np.zeros(2, dtype=np.uint8)
    img, lbl = _write_idx_pair(tmp_path, images, labels)
    raw = bytearray(img.read_bytes())
    raw[pos] = value
    img.write_bytes(bytes(raw[: max(cut, 1)]) if cut < 16 else bytes(raw))
    try:
        load_idx(img, lbl)
    except (IdxFormatError, DataError):
        pass  # any structured rejection is fine; crashes are not


# -- Episodes -----------------------------------------------------------------


def _uniform_domain(n_classes=6, per_class=12, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), per_class)
    return Domain(name="d", samples=rng.normal(size=(labels.size, dim)), labels=labels)


def test_forced_partition_episode():
    dom = _uniform_domain(n_classes=2, per_class=2)
    protocol = EpisodeProtocol(min_way=2, max_way=2, min_shot=1, max_shot=1, query_per_class=1)
    ep = sample_episode(dom, protocol, 0)
    used = np.concatenate([ep.support_indices, ep.query_indices])
    assert sorted(used.tolist()) == list(range(dom.n))


def test_episode_determinism():
    dom = _uniform_domain()
    protocol = EpisodeProtocol(seed=42)
    a = sample_episode(dom, protocol, 17)
    b = sample_episode(dom, protocol, 17)
    np.testing.assert_array_equal(a.support.inputs, b.support.inputs)
    np.testing.assert_array_equal(a.query.labels, b.query.labels)
    c = sample_episode(dom, protocol, 18)
    assert not np.array_equal(a.support_indices, c.support_indices)


def test_way_distribution_uniform_chi_squared():
    dom = _uniform_domain(n_classes=8, per_class=10)
    protocol = EpisodeProtocol(min_way=2, max_way=5, seed=7)
    ways = [sample_episode(dom, protocol, t).way for t in range(1000)]
    counts = np.bincount(ways, minlength=6)[2:6]
    assert counts.sum() == 1000
    assert stats.chisquare(counts).pvalue > 0.01


def test_insufficient_classes_raises():
    dom = _uniform_domain(n_classes=2, per_class=3)
    protocol = EpisodeProtocol(min_way=3, max_way=4)
    with pytest.raises(DataError):
        sample_episode(dom, protocol, 0)


@settings(max_examples=40, deadline=None)
@given(task=st.integers(0, 10_000))
def test_property_episode_support_query_disjoint(task):
    dom = _uniform_domain(n_classes=5, per_class=9, seed=1)
    protocol = EpisodeProtocol(min_way=2, max_way=5, min_shot=1, max_shot=3, seed=3)
    ep = sample_episode(dom, protocol, task)
    assert set(ep.support_indices.tolist()).isdisjoint(ep.query_indices.tolist())
    assert set(np.unique(ep.query.labels)) <= set(np.unique(ep.support.labels))
    assert ep.way >= 2


def test_stratified_split_exact_halves():
    dom = _uniform_domain(n_classes=3, per_class=10)
    train_dom, test_dom = stratified_split(dom, 0.5, seed=0)
    for c in dom.class_ids:
        assert (train_dom.labels == c).sum() == 5
        assert (test_dom.labels == c).sum() == 5
    # union is exactly the original multiset of rows
    merged = np.concatenate([train_dom.samples, test_dom.samples])
    assert merged.shape == dom.samples.shape
    order_a = np.lexsort(merged.T)
    order_b = np.lexsort(dom.samples.T)
    np.testing.assert_array_equal(merged[order_a], dom.samples[order_b])


def test_stratified_split_deterministic():
    dom = _uniform_domain(seed=9)
    a1, b1 = stratified_split(dom, 0.3, seed=4)
    a2, b2 = stratified_split(dom, 0.3, seed=4)
    np.testing.assert_array_equal(a1.samples, a2.samples)
    np.testing.assert_array_equal(b1.labels, b2.labels)


def test_stratified_split_rejects_tiny_class():
    dom = Domain(name="t", samples=np.zeros((3, 2)), labels=np.array([0, 0, 1]))
    with pytest.raises(DataError):
        stratified_split(dom, 0.5, seed=0)


def test_domain_save_load_round_trip(tmp_path):
    spec = SyntheticSpec(n_domains=1, classes_per_domain=3, samples_per_class=4, dim=5)
    (dom,) = gen_synthetic_domains(spec, seed=6)
    path = tmp_path / "dom.npz"
    save_domain(dom, path)
    loaded = load_domain(path)
    np.testing.assert_array_equal(loaded.samples, dom.samples)
    np.testing.assert_array_equal(loaded.labels, dom.labels)
    assert loaded.class_ids == dom.class_ids
    np.testing.assert_array_equal(loaded.generator_spec.means, dom.generator_spec.means)
