import hashlib
import json
from dataclasses import replace

import numpy as np
import pytest

from drrspec.cohort import (ISOTOPE_SPACING, CohortFormatError, SynthConfig, _envelope_profile,
                            biomarker_bins, export_cohort, generate_cohort, import_cohort,
                            isotopic_envelope, peak_free_bins)


@pytest.fixture(scope="module")
def default_cohort():
    return generate_cohort(SynthConfig())


def small_config(**kw):
    base = dict(patients_per_class=4, spots_per_patient=(3, 5), n_bins=400, n_background=8)
    base.update(kw)
    return SynthConfig(**base, biomarkers=(((850.0, 0.3),), ((900.0, 0.3),)))


def marker_contrast(cohort, config):
    """Smallest, over biomarkers, peak class-mean difference in units of the
    within-group spread of peak-free bins."""
    free = peak_free_bins(config)
    resid = []
    for c in (0, 1):
        for lab in cohort.labs:
            block = cohort.X[(cohort.labels == c) & (cohort.lab_ids == lab)][:, free]
            resid.append(block - block.mean(axis=0))
    sd = np.concatenate(resid).std()
    diff = np.abs(cohort.X[cohort.labels == 0].mean(0) - cohort.X[cohort.labels == 1].mean(0))
    worst = min(diff[np.abs(cohort.mz - mass) < 1.0].max()
                for cls in config.biomarkers for mass, _ in cls)
    return worst / sd


def test_default_cohort_shape(default_cohort):
    co = default_cohort
    assert co.n == 2000
    assert co.labs == ("A", "B")
    for lab in co.labs:
        pats = co.patients(lab)
        assert len(pats) == 40
        for p in pats:
            k = np.count_nonzero((co.patient_ids == p) & (co.lab_ids == lab))
            assert 20 <= k <= 40
    assert len(set(co.sample_ids)) == len(co)
    labels = co.patient_labels()
    assert sum(labels.values()) == 20
    np.testing.assert_allclose(co.X.sum(axis=1), 1.0, rtol=1e-12)
    assert np.all(co.X >= 0)


def test_biomarker_contrast(default_cohort):
    # The default is tuned for the confounded experiment and sits below 5x;
    # lowering the additive noise clears it.
    assert marker_contrast(default_cohort, SynthConfig()) == pytest.approx(2.83, abs=0.05)
    quiet = SynthConfig(noise_level=0.015)
    assert marker_contrast(generate_cohort(quiet), quiet) >= 5.0


def test_biomarker_bins_show_class_difference(default_cohort):
    co = default_cohort
    bm = biomarker_bins(SynthConfig())
    m0, m1 = co.X[co.labels == 0].mean(0), co.X[co.labels == 1].mean(0)
    assert np.all(m0[bm[0]] > m1[bm[0]])
    assert np.all(m1[bm[1]] > m0[bm[1]])


def _baseline_shift(co, free):
    # class-0 minus class-1 mean intensity over peak-free bins, per lab
    return [co.X[(co.labels == 0) & (co.lab_ids == lab)][:, free].mean()
            - co.X[(co.labels == 1) & (co.lab_ids == lab)][:, free].mean() for lab in co.labs]


def test_confounder_reverses_across_labs():
    cfg = small_config(confounder_strength=0.8, baseline_coupling=0.5)
    a, b = _baseline_shift(generate_cohort(cfg), peak_free_bins(cfg))
    assert a > 0 > b


def test_zero_confounder_treats_classes_alike():
    cfg = SynthConfig(patients_per_class=3, spots_per_patient=(2, 2), n_bins=400, n_background=8,
                      biomarkers=(((850.0, 0.3),), ((900.0, 0.3),)), cross_level=1.0,
                      confounder_strength=0.0, noise_level=0.0, patient_sd=0.0, spot_sd=0.0,
                      baseline_jitter=0.0, lab_peak_scale=(1.0, 1.0))
    co = generate_cohort(cfg)
    # every spectrum is identical: classes differ only through the (absent) confounder
    np.testing.assert_allclose(co.X, np.broadcast_to(co.X[0], co.X.shape), rtol=1e-12)
    strong = replace(cfg, confounder_strength=1.0)
    strong.validate()
    co2 = generate_cohort(strong)
    assert not np.allclose(co2.X[co2.labels == 0][0], co2.X[co2.labels == 1][0])


def test_same_seed_same_bytes(tmp_path):
    cfg = small_config(seed=3)
    for d in ("a", "b"):
        export_cohort(generate_cohort(cfg), tmp_path / d)
    for name in ("meta.json", "intensities.csv"):
        h = [hashlib.sha256((tmp_path / d / name).read_bytes()).hexdigest() for d in "ab"]
        assert h[0] == h[1]
    other = generate_cohort(small_config(seed=4))
    assert not np.array_equal(other.X, generate_cohort(cfg).X)


def test_isotopic_envelope():
    peaks = isotopic_envelope(1000.0, 1.0, decay=0.5)
    np.testing.assert_allclose([a for _, a in peaks], [1.0, 0.5, 0.25, 0.125])
    np.testing.assert_allclose([m for m, _ in peaks],
                               1000.0 + ISOTOPE_SPACING * np.arange(4))
    with pytest.raises(ValueError):
        isotopic_envelope(1000.0, 1.0, n_peaks=6)


def test_envelope_integral():
    cfg = SynthConfig()
    mz = np.arange(990.0, 1020.0, 0.001)
    prof = _envelope_profile(mz, 1000.0, cfg)
    area = prof.sum() * 0.001
    expected = sum(cfg.envelope_decay ** k for k in range(cfg.envelope_peaks)) \
        * cfg.peak_width * np.sqrt(2 * np.pi)
    assert area == pytest.approx(expected, rel=1e-9)


@pytest.mark.parametrize("bad", [dict(confounder_strength=1.5), dict(patients_per_class=0),
                                 dict(spots_per_patient=(5, 2)), dict(noise_level=-1.0),
                                 dict(expression_rate=0.2), dict(patient_sd=-0.1),
                                 dict(biomarkers=(((100.0, 1.0),), ((900.0, 1.0),)))])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad)
    with pytest.raises(ValueError, match="unknown"):
        SynthConfig.from_mapping({"sead": 1})


def test_round_trip(tmp_path):
    co = generate_cohort(small_config())
    export_cohort(co, tmp_path / "c")
    assert import_cohort(tmp_path / "c").equals(co)


def _exported(tmp_path):
    co = generate_cohort(small_config())
    export_cohort(co, tmp_path / "c")
    return tmp_path / "c"


def test_short_row_rejected(tmp_path):
    d = _exported(tmp_path)
    lines = (d / "intensities.csv").read_text().splitlines()
    sid = lines[2].split(",")[0]
    lines[2] = ",".join(lines[2].split(",")[:-1])
    (d / "intensities.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(CohortFormatError, match=sid):
        import_cohort(d)


def test_missing_patient_id_rejected(tmp_path):
    d = _exported(tmp_path)
    meta = json.loads((d / "meta.json").read_text())
    sid = next(iter(meta["records"]))
    del meta["records"][sid]["patient_id"]
    (d / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(CohortFormatError, match="patient_id"):
        import_cohort(d)


def test_other_format_errors(tmp_path):
    with pytest.raises(CohortFormatError, match="meta.json"):
        import_cohort(tmp_path)
    d = _exported(tmp_path)
    text = (d / "intensities.csv").read_text().splitlines()
    parts = text[1].split(",")
    parts[3] = "abc"
    text[1] = ",".join(parts)
    (d / "intensities.csv").write_text("\n".join(text) + "\n")
    with pytest.raises(CohortFormatError, match="line 2"):
        import_cohort(d)


def test_overcrowded_layout_rejected():
    with pytest.raises(ValueError, match="cannot place"):
        generate_cohort(SynthConfig(n_bins=400, n_background=60,
                                    biomarkers=(((850.0, 0.3),), ((900.0, 0.3),))))
