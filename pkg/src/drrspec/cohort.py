"""Synthetic two-lab, two-class MALDI-like cohorts and their on-disk format.

Every patient is measured in both labs (as when the same tissue microarrays
are measured twice). A spot spectrum is the sum of class biomarker peptides,
shared background peptides, a smooth lab-specific baseline and truncated
Gaussian noise, followed by TIC normalization. The confounder couples the
baseline amplitude to the class within each lab, with opposite sign in the
second lab.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .model import tic_normalize

ISOTOPE_SPACING = 1.00335
LABS = ("A", "B")
META_NAME = "meta.json"
INTENSITIES_NAME = "intensities.csv"


class CohortFormatError(ValueError):
    """A cohort directory is malformed."""


def isotopic_envelope(mass, amplitude, decay=0.5, n_peaks=4):
    """Peaks ``(mass + k * 1.00335, amplitude * decay**k)`` for ``k < n_peaks``."""
    if not 3 <= n_peaks <= 5:
        raise ValueError("an envelope has 3 to 5 peaks")
    return [(mass + k * ISOTOPE_SPACING, amplitude * decay ** k) for k in range(n_peaks)]


@dataclass
class SynthConfig:
    seed: int = 0
    patients_per_class: int = 20
    spots_per_patient: tuple = (20, 40)
    n_bins: int = 2000
    mz_start: float = 800.0
    mz_step: float = 0.6
    class_names: tuple = ("class0", "class1")
    # (mass Da, mean peak height) per class
    biomarkers: tuple = (
        ((912.4, 0.3), (1105.6, 0.3), (1460.7, 0.3), (1821.9, 0.3)),
        ((981.5, 0.3), (1198.7, 0.3), (1570.8, 0.3), (1745.9, 0.3)),
    )
    # biomarker height in the other class, relative to its own class
    cross_level: float = 0.1
    # probability that a patient expresses its own class's biomarker set; the
    # other class's set is expressed with the complementary probability
    expression_rate: float = 1.0
    n_background: int = 40
    background_height: tuple = (0.3, 2.0)
    envelope_decay: float = 0.6
    envelope_peaks: int = 4
    peak_width: float = 0.25  # Gaussian sigma, Da
    patient_sd: float = 0.5  # log-normal sd of patient-level peptide abundance
    spot_sd: float = 0.4  # log-normal sd of spot-level peptide abundance
    background_sd_scale: float = 0.3  # background peptide variability relative to biomarkers
    # per lab: (amplitude at mz_start, exponential decay constant in Da)
    baselines: tuple = ((0.5, 1000.0), (0.5, 1000.0))
    baseline_coupling: float = 0.17  # relative amplitude shift at confounder strength 1
    baseline_jitter: float = 0.01  # log-normal sd of spot baseline amplitude
    confounder_strength: float = 0.8
    lab_peak_scale: tuple = (1.0, 0.9)
    lab_mz_shift: tuple = (0.0, 0.0)  # per-lab calibration offset of every peak, Da
    noise_level: float = 0.06

    def __post_init__(self):
        self.spots_per_patient = tuple(self.spots_per_patient)
        self.class_names = tuple(self.class_names)
        self.biomarkers = tuple(tuple(tuple(p) for p in cls) for cls in self.biomarkers)
        self.background_height = tuple(self.background_height)
        self.baselines = tuple(tuple(b) for b in self.baselines)
        self.lab_peak_scale = tuple(self.lab_peak_scale)
        self.lab_mz_shift = tuple(self.lab_mz_shift)
        self.validate()

    @property
    def mz_stop(self):
        return self.mz_start + self.mz_step * (self.n_bins - 1)

    def validate(self):
        if not 0.0 <= self.confounder_strength <= 1.0:
            raise ValueError("confounder_strength must lie in [0, 1]")
        if self.patients_per_class < 1:
            raise ValueError("patients_per_class must be >= 1")
        lo, hi = self.spots_per_patient
        if not 1 <= lo <= hi:
            raise ValueError("spots_per_patient must be (lo, hi) with 1 <= lo <= hi")
        if self.n_bins < 2 or self.mz_step <= 0:
            raise ValueError("need n_bins >= 2 and mz_step > 0")
        if len(self.class_names) != 2 or len(self.biomarkers) != 2:
            raise ValueError("exactly two classes are supported")
        if len(self.baselines) != 2 or len(self.lab_peak_scale) != 2 \
                or len(self.lab_mz_shift) != 2:
            raise ValueError("exactly two labs are supported")
        span = (self.envelope_peaks - 1) * ISOTOPE_SPACING
        for cls in self.biomarkers:
            for mass, height in cls:
                if not (self.mz_start <= mass and mass + span <= self.mz_stop):
                    raise ValueError(f"biomarker at {mass} Da lies outside the m/z range")
                if height < 0:
                    raise ValueError("biomarker heights must be non-negative")
        if self.noise_level < 0 or self.peak_width <= 0:
            raise ValueError("need noise_level >= 0 and peak_width > 0")
        if not 0.5 <= self.expression_rate <= 1.0:
            raise ValueError("expression_rate must lie in [0.5, 1]")
        if min(self.patient_sd, self.spot_sd, self.baseline_jitter, self.background_sd_scale) < 0:
            raise ValueError("variability parameters must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_mapping(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synthesis config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Cohort:
    X: np.ndarray  # (N, n) spectra
    labels: np.ndarray
    patient_ids: np.ndarray
    lab_ids: np.ndarray
    sample_ids: np.ndarray
    mz_start: float = 800.0
    mz_step: float = 0.6
    class_names: tuple = ("class0", "class1")

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.patient_ids = np.asarray(self.patient_ids, dtype=object)
        self.lab_ids = np.asarray(self.lab_ids, dtype=object)
        self.sample_ids = np.asarray(self.sample_ids, dtype=object)
        self.class_names = tuple(self.class_names)
        N = self.X.shape[0]
        for name in ("labels", "patient_ids", "lab_ids", "sample_ids"):
            if getattr(self, name).shape != (N,):
                raise ValueError(f"{name} must have one entry per spectrum")

    @property
    def n(self):
        return self.X.shape[1]

    def __len__(self):
        return self.X.shape[0]

    @property
    def mz(self):
        return self.mz_start + self.mz_step * np.arange(self.n)

    @property
    def labs(self):
        return tuple(sorted(set(self.lab_ids)))

    def subset(self, mask):
        mask = np.asarray(mask)
        return Cohort(self.X[mask], self.labels[mask], self.patient_ids[mask],
                      self.lab_ids[mask], self.sample_ids[mask], self.mz_start,
                      self.mz_step, self.class_names)

    def select(self, lab=None, patients=None):
        mask = np.ones(len(self), dtype=bool)
        if lab is not None:
            mask &= self.lab_ids == lab
        if patients is not None:
            mask &= np.isin(self.patient_ids, list(patients))
        return self.subset(mask)

    def patients(self, lab=None):
        ids = self.patient_ids if lab is None else self.patient_ids[self.lab_ids == lab]
        return sorted(set(ids))

    def patient_labels(self):
        """Map patient id -> label; raises if a patient has two labels."""
        out = {}
        for p, y in zip(self.patient_ids, self.labels):
            if out.setdefault(p, int(y)) != int(y):
                raise ValueError(f"patient {p} carries more than one label")
        return out

    def equals(self, other):
        return (np.array_equal(self.X, other.X)
                and np.array_equal(self.labels, other.labels)
                and list(self.patient_ids) == list(other.patient_ids)
                and list(self.lab_ids) == list(other.lab_ids)
                and list(self.sample_ids) == list(other.sample_ids)
                and self.mz_start == other.mz_start and self.mz_step == other.mz_step
                and self.class_names == other.class_names)


# ---------------------------------------------------------------- generation


def _envelope_profile(mz, mass, config, shift=0.0):
    prof = np.zeros_like(mz)
    for pos, amp in isotopic_envelope(mass, 1.0, config.envelope_decay, config.envelope_peaks):
        prof += amp * np.exp(-0.5 * ((mz - pos - shift) / config.peak_width) ** 2)
    return prof


def peptide_layout(config):
    """Biomarker and background peptide masses/heights implied by ``config``.

    Returns ``(masses, heights, owner)``; ``owner`` is the class of a
    biomarker or -1 for background peptides.
    """
    masses, heights, owner = [], [], []
    for c, cls in enumerate(config.biomarkers):
        for mass, h in cls:
            masses.append(mass)
            heights.append(h)
            owner.append(c)
    rng = np.random.default_rng([config.seed, 7919])
    span = (config.envelope_peaks - 1) * ISOTOPE_SPACING
    taken = list(masses)
    want = len(masses) + config.n_background
    tries = 0
    while len(masses) < want:
        tries += 1
        if tries > 1000 * want:
            raise ValueError(f"cannot place {config.n_background} background peptides without "
                             f"overlap in {config.mz_start:g}-{config.mz_stop:g} Da")
        m = rng.uniform(config.mz_start + 5.0, config.mz_stop - span - 5.0)
        # keep background envelopes clear of every other envelope
        if all(abs(m - t) > span + 3.0 for t in taken):
            masses.append(m)
            heights.append(rng.uniform(*config.background_height))
            owner.append(-1)
            taken.append(m)
    return np.array(masses), np.array(heights), np.array(owner)


def biomarker_bins(config, radius=None):
    """Boolean mask per class of the bins covered by that class's biomarkers."""
    mz = config.mz_start + config.mz_step * np.arange(config.n_bins)
    radius = 2.5 * config.peak_width if radius is None else radius
    out = np.zeros((2, config.n_bins), dtype=bool)
    for c, cls in enumerate(config.biomarkers):
        for mass, _ in cls:
            for pos, _ in isotopic_envelope(mass, 1.0, config.envelope_decay, config.envelope_peaks):
                out[c] |= np.abs(mz - pos) <= radius
    return out


def peak_free_bins(config, margin=3.0):
    """Bins farther than ``margin`` peak widths from every peptide peak."""
    mz = config.mz_start + config.mz_step * np.arange(config.n_bins)
    masses, _, _ = peptide_layout(config)
    free = np.ones(config.n_bins, dtype=bool)
    for mass in masses:
        for pos, _ in isotopic_envelope(mass, 1.0, config.envelope_decay, config.envelope_peaks):
            free &= np.abs(mz - pos) > margin * config.peak_width
    return free


def generate_cohort(config):
    """Generate both labs' spectra; a pure function of ``config``."""
    config.validate()
    mz = config.mz_start + config.mz_step * np.arange(config.n_bins)
    masses, heights, owner = peptide_layout(config)
    templates = [np.stack([_envelope_profile(mz, m, config, shift) for m in masses])
                 for shift in config.lab_mz_shift]
    baselines = np.stack([amp * np.exp(-(mz - config.mz_start) / decay)
                          for amp, decay in config.baselines])

    sd_scale = np.where(owner == -1, config.background_sd_scale, 1.0)
    prng = np.random.default_rng([config.seed, 104729])
    patients = []  # (pid, label, log abundance factors)
    for c in range(2):
        for k in range(config.patients_per_class):
            pid = f"P{c}{k:03d}"
            logf = prng.normal(0.0, 1.0, size=masses.size) * config.patient_sd * sd_scale
            # a flipped draw means the patient deviates from its class's pattern
            flip = prng.random(2) >= config.expression_rate
            expressed = (np.arange(2) == c) ^ flip
            level = np.where(owner == -1, 1.0,
                             np.where(expressed[np.maximum(owner, 0)], 1.0, config.cross_level))
            patients.append((pid, c, heights * level * np.exp(logf)))

    X, labels, pids, labs, sids = [], [], [], [], []
    lo, hi = config.spots_per_patient
    s = config.confounder_strength * config.baseline_coupling
    for li, lab in enumerate(LABS):
        # lab A: class 0 carries the higher baseline; lab B: reversed
        sign = (1.0, -1.0) if li == 0 else (-1.0, 1.0)
        for pi, (pid, c, abundance) in enumerate(patients):
            rng = np.random.default_rng([config.seed, li, pi])
            n_spots = int(rng.integers(lo, hi + 1))
            amps = abundance * np.exp(rng.normal(0.0, 1.0, size=(n_spots, masses.size))
                                      * config.spot_sd * sd_scale)
            amps *= config.lab_peak_scale[li]
            base = (1.0 + sign[c] * s) * np.exp(rng.normal(0.0, config.baseline_jitter, size=n_spots))
            spectra = amps @ templates[li] + base[:, None] * baselines[li]
            spectra += rng.normal(0.0, config.noise_level, size=spectra.shape)
            np.maximum(spectra, 0.0, out=spectra)
            X.append(tic_normalize(spectra))
            labels.extend([c] * n_spots)
            pids.extend([pid] * n_spots)
            labs.extend([lab] * n_spots)
            sids.extend(f"{lab}-{pid}-{k:03d}" for k in range(n_spots))
    return Cohort(np.concatenate(X), labels, pids, labs, sids, config.mz_start,
                  config.mz_step, config.class_names)


# ---------------------------------------------------------------- disk format


def export_cohort(cohort, path):
    """Write ``meta.json`` and ``intensities.csv`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records = {str(s): {"patient_id": str(p), "lab_id": str(lab), "label": int(y)}
               for s, p, lab, y in zip(cohort.sample_ids, cohort.patient_ids,
                                       cohort.lab_ids, cohort.labels)}
    meta = {
        "mz_start": cohort.mz_start,
        "mz_step": cohort.mz_step,
        "n": cohort.n,
        "class_names": list(cohort.class_names),
        "records": records,
    }
    (path / META_NAME).write_text(json.dumps(meta, indent=1))
    with open(path / INTENSITIES_NAME, "w") as fh:
        fh.write("sample_id," + ",".join(str(i) for i in range(cohort.n)) + "\n")
        for sid, row in zip(cohort.sample_ids, cohort.X):
            fh.write(str(sid) + "," + ",".join(map(repr, row.tolist())) + "\n")


def import_cohort(path):
    """Read a cohort directory written by :func:`export_cohort`."""
    path = Path(path)
    try:
        meta = json.loads((path / META_NAME).read_text())
    except FileNotFoundError as exc:
        raise CohortFormatError(f"{path}: missing {META_NAME}") from exc
    except json.JSONDecodeError as exc:
        raise CohortFormatError(f"{path / META_NAME}: invalid JSON ({exc})") from exc
    for key in ("mz_start", "mz_step", "n", "class_names", "records"):
        if key not in meta:
            raise CohortFormatError(f"{META_NAME}: missing key {key!r}")
    n = int(meta["n"])
    records = meta["records"]
    for sid, rec in records.items():
        for key in ("patient_id", "lab_id", "label"):
            if key not in rec:
                raise CohortFormatError(f"record {sid!r}: missing {key!r}")
    rows = {}
    try:
        fh = open(path / INTENSITIES_NAME)
    except FileNotFoundError as exc:
        raise CohortFormatError(f"{path}: missing {INTENSITIES_NAME}") from exc
    with fh:
        header = fh.readline().rstrip("\n").split(",")
        if not header or header[0] != "sample_id" or len(header) != n + 1:
            raise CohortFormatError(f"{INTENSITIES_NAME}: header must be sample_id plus {n} columns")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != n + 1:
                raise CohortFormatError(f"{INTENSITIES_NAME} line {lineno} (sample {parts[0]!r}): "
                                        f"{len(parts) - 1} values, expected {n}")
            try:
                rows[parts[0]] = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise CohortFormatError(f"{INTENSITIES_NAME} line {lineno} "
                                        f"(sample {parts[0]!r}): {exc}") from exc
    missing = [s for s in records if s not in rows]
    if missing:
        raise CohortFormatError(f"record {missing[0]!r} has no intensity row")
    extra = [s for s in rows if s not in records]
    if extra:
        raise CohortFormatError(f"intensity row {extra[0]!r} has no metadata record")
    sids = list(records)
    cohort = Cohort(np.array([rows[s] for s in sids], dtype=np.float64).reshape(len(sids), n),
                    [records[s]["label"] for s in sids],
                    [records[s]["patient_id"] for s in sids],
                    [records[s]["lab_id"] for s in sids], sids,
                    float(meta["mz_start"]), float(meta["mz_step"]), tuple(meta["class_names"]))
    try:
        cohort.patient_labels()
    except ValueError as exc:
        raise CohortFormatError(str(exc)) from exc
    return cohort
