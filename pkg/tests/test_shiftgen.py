import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gda import shiftgen as sg
from gda.schedule import derive_seed

SMALL = sg.SourceSpec(samples_per_class={"train": 10, "test": 25})


@pytest.fixture(scope="module")
def test_set():
    return sg.generate_source(SMALL, "test", 0)


def test_prototype_margin():
    assert sg.check_prototype_margin() > sg.PROTOTYPE_MARGIN
    with pytest.raises(AssertionError):
        sg.check_prototype_margin(margin=100.0)


def test_render_range_and_area():
    img = sg.render(0, 7.5, 7.5, 1.0)
    assert img.shape == (16, 16)
    assert img.min() >= -1 and img.max() <= 1
    # disk of radius 3.4 px covers about pi * 3.4^2 pixels
    assert ((img + 1) / 2).sum() == pytest.approx(np.pi * 3.4 ** 2, rel=0.03)


def test_generate_source_is_balanced_and_seeded(test_set):
    assert len(test_set) == 100
    assert np.bincount(test_set.labels).tolist() == [25] * 4
    assert test_set.ids[3] == "src-test-00003"
    again = sg.generate_source(SMALL, "test", 0)
    assert np.array_equal(again.images, test_set.images)
    other = sg.generate_source(SMALL, "test", 1)
    assert not np.array_equal(other.images, test_set.images)
    assert test_set.images.min() >= -1 and test_set.images.max() <= 1


def test_unknown_split_and_shift():
    with pytest.raises(ValueError):
        sg.generate_source(SMALL, "val", 0)
    with pytest.raises(ValueError):
        sg.ShiftSpec("fog", 3)
    with pytest.raises(ValueError):
        sg.ShiftSpec("contrast", 6)


def test_severity_tables_documented_values():
    assert set(sg.CORRUPTIONS) | set(sg.STYLES) == set(sg.SEVERITY_TABLES)
    assert len(sg.CORRUPTIONS) == 8
    for fam, table in sg.SEVERITY_TABLES.items():
        assert len(table) == 5, fam
    assert sg.ShiftSpec("gaussian_noise", 3).parameter == sg.SEVERITY_TABLES["gaussian_noise"][2]


def test_severity_parameters_monotone_in_strength():
    # every family is parameterised so that severity moves away from the identity monotonically
    decreasing = {"shot_noise_analog", "contrast"}
    for fam, table in sg.SEVERITY_TABLES.items():
        diffs = np.diff(table)
        assert np.all(diffs < 0) if fam in decreasing else np.all(diffs > 0), fam


@pytest.mark.parametrize("family", sorted(sg.SEVERITY_TABLES))
def test_apply_shift_range_and_determinism(family, test_set):
    shift = sg.ShiftSpec(family, 5)
    x = test_set.images[0]
    a = sg.apply_shift(x, shift, np.random.default_rng(4))
    b = sg.apply_shift(x, shift, np.random.default_rng(4))
    assert a.shape == x.shape and a.dtype == np.float32
    assert np.array_equal(a, b)
    assert a.min() >= -1 and a.max() <= 1
    assert not np.array_equal(a, x)


def test_box_kernel_is_normalised():
    for w in (1.0, 1.7, 2.0, 3.0, 4.4):
        k = sg._box_kernel(w)
        assert k.sum() == pytest.approx(1.0)
        assert np.allclose(k, k[::-1])
    assert np.allclose(sg._box_kernel(3.0), [1 / 3] * 3)


def test_label_preservation_proxy(test_set):
    for family in sg.SEVERITY_TABLES:
        for sev in (1, 2, 3):
            shift = sg.ShiftSpec(family, sev)
            shifted = sg.shift_dataset(test_set, shift, 0)
            assert sg.nearest_prototype_rate(shifted, test_set, shift, 0) >= 0.9, shift.name
    assert sg.nearest_prototype_rate(test_set.images, test_set) >= 0.9


def test_benchmark_manifest_counts_and_ids(test_set, tmp_path):
    shifts = [sg.ShiftSpec(f, 3) for f in sg.CORRUPTIONS]
    bench = sg.build_benchmark(test_set, shifts, 100, seed=0)
    assert len(bench.manifest) == 800
    assert len(bench.manifest.clean()) == 100
    assert len({e.sample_id for e in bench.manifest.entries}) == 900
    assert bench.groups()[("box_blur", 3)][7].sample_id == "box_blur-s3-0007"
    path = sg.save_benchmark(bench, tmp_path)
    back = sg.load_benchmark(path)
    assert back.manifest.entries == bench.manifest.entries
    e = bench.manifest.shifted()[123]
    assert np.array_equal(back.images[e.sample_id], bench.images[e.sample_id])
    clean = back.images[e.clean_id]
    idx = int(e.clean_id.split("-")[1])
    assert np.array_equal(clean, test_set.images[idx])
    assert e.label == test_set.labels[idx]


def test_benchmark_rejects_bad_requests(test_set):
    with pytest.raises(ValueError):
        sg.build_benchmark(test_set, [], 10, 0)
    with pytest.raises(ValueError):
        sg.build_benchmark(test_set, [sg.ShiftSpec("contrast", 1)], 101, 0)


def test_manifest_text_round_trip():
    m = sg.Manifest([sg.ManifestEntry("contrast-s3-0000", 2, "contrast", 3, 812, "clean-0000")])
    text = m.to_text()
    assert text.splitlines()[0] == sg.MANIFEST_HEADER
    assert "id=contrast-s3-0000 label=2 family=contrast severity=3" in text
    assert sg.Manifest.from_text(text).entries == m.entries
    with pytest.raises(ValueError):
        sg.Manifest.from_text("garbage\n")


def test_shift_dataset_seeds_per_sample(test_set):
    shift = sg.ShiftSpec("gaussian_noise", 3)
    full = sg.shift_dataset(test_set, shift, 0)
    part = sg.shift_dataset(test_set.subset(10), shift, 0)
    assert np.array_equal(full[:10], part)
    rng = np.random.default_rng(derive_seed(0, "shift", "gaussian_noise", 3, test_set.ids[5]))
    assert np.array_equal(full[5], sg.apply_shift(test_set.images[5], shift, rng))


def test_dataset_and_audit_persistence(test_set, tmp_path):
    sg.save_dataset(test_set, tmp_path / "source_test.gdac")
    back = sg.load_dataset(tmp_path / "source_test.gdac")
    assert back.ids == test_set.ids
    assert np.array_equal(back.labels, test_set.labels)
    sg.write_audit_sheet(tmp_path / "a.pgm", test_set.images[:12])
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n")


@settings(max_examples=25, deadline=None)
@given(family=st.sampled_from(sorted(sg.SEVERITY_TABLES)), sev=st.integers(1, 5), seed=st.integers(0, 10**6))
def test_apply_shift_always_in_range(family, sev, seed):
    x = sg.render(seed % 4, 7.5 + (seed % 5) - 2, 7.5, 1.0)[None]
    y = sg.apply_shift(x, sg.ShiftSpec(family, sev), np.random.default_rng(seed))
    assert np.isfinite(y).all() and y.min() >= -1 and y.max() <= 1
