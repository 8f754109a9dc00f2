"""Synthetic EMT/COM cohorts standing in for the clinical acquisitions.

EMT: a breathing sinusoid whose rate and amplitude are redrawn every breath,
plus a slow baseline drift. COM: one noisy copy of the EMT per camera head,
with AR(1) noise whose scale depends on the head and the scan quarter.
"""

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InvalidParameter, InvalidSignal
from .rng import CounterRNG, splitmix_at
from .signal_core import DT, count_breathing_cycles, moving_average, pearson_r, quarter_bounds

FORMAT_VERSION = 1
CYCLE_THRESHOLD = 175
BASELINE_R_THRESHOLD = 0.35
CSV_HEADER = ("index", "emt", "com", "com_h1", "com_h2")

DEFAULT_HEAD_QUARTER_MULT = ((1.0, 0.8, 0.8, 1.3), (1.3, 0.8, 0.8, 1.0))


@dataclass(frozen=True)
class BreathingParams:
    rate_mean: float = 14.0  # breaths/min
    rate_jitter: float = 1.0  # breaths/min, per-breath std
    amp_mean: float = 5.0  # mm
    amp_jitter: float = 0.75  # mm, per-breath std
    drift_sigma: float = 0.05  # mm per step
    duration_samples: int = 6400
    dt: float = DT
    # Patient-to-patient spread, applied by generate_cohort only.
    patient_rate_sd: float = 2.0  # breaths/min
    patient_amp_sd: float = 0.2  # log-scale std of a per-patient amplitude factor
    # Faster breathing is shallower: patient amplitude *= (reference_rate / rate) ** exponent.
    reference_rate: float = 15.0  # breaths/min
    amp_rate_exponent: float = 0.5

    def validate(self):
        if not 6.0 <= self.rate_mean <= 40.0:
            raise InvalidParameter(f"rate_mean {self.rate_mean} outside [6, 40] breaths/min")
        if self.amp_mean <= 0:
            raise InvalidParameter("amp_mean must be positive")
        if min(self.rate_jitter, self.amp_jitter, self.drift_sigma) < 0:
            raise InvalidParameter("jitter and drift scales must be non-negative")
        if min(self.patient_rate_sd, self.patient_amp_sd, self.amp_rate_exponent) < 0:
            raise InvalidParameter("patient spread and rate coupling must be non-negative")
        if self.reference_rate <= 0:
            raise InvalidParameter("reference_rate must be positive")
        if self.duration_samples < 3 or self.dt <= 0:
            raise InvalidParameter("duration_samples must be >= 3 and dt positive")


@dataclass(frozen=True)
class NoiseModel:
    sigma_base: float = 9.0  # mm
    ar_rho: float = 0.5
    head_quarter_mult: tuple = DEFAULT_HEAD_QUARTER_MULT

    def validate(self):
        if self.sigma_base < 0:
            raise InvalidParameter("sigma_base must be non-negative")
        if not 0.0 <= self.ar_rho < 1.0:
            raise InvalidParameter(f"ar_rho {self.ar_rho} outside [0, 1)")
        mult = np.asarray(self.head_quarter_mult, dtype=float)
        if mult.shape != (2, 4) or np.any(mult <= 0):
            raise InvalidParameter("head_quarter_mult must be 2x4 positive multipliers")


@dataclass
class AcquisitionRecord:
    patient_id: str
    emt: np.ndarray
    com_combined: np.ndarray
    com_head1: np.ndarray
    com_head2: np.ndarray
    seed: int
    breathing_cycles: int
    baseline_r: float
    difficult: bool
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_signals(cls, patient_id, emt, com_head1, com_head2, seed=0, meta=None):
        """Build a record, deriving the combined COM and the difficulty labels."""
        emt = np.asarray(emt, dtype=np.float64)
        h1 = np.asarray(com_head1, dtype=np.float64)
        h2 = np.asarray(com_head2, dtype=np.float64)
        if not (emt.shape == h1.shape == h2.shape) or emt.ndim != 1:
            raise InvalidSignal("EMT and head signals must be equal-length 1D arrays")
        combined = (h1 + h2) / 2.0
        cycles = count_breathing_cycles(emt)
        r = pearson_r(combined, emt)
        return cls(patient_id, emt, combined, h1, h2, int(seed), cycles, r,
                   is_difficult(cycles, r), dict(meta or {}))


def is_difficult(breathing_cycles, baseline_r):
    return bool(breathing_cycles > CYCLE_THRESHOLD or baseline_r < BASELINE_R_THRESHOLD)


def _quantize(x):
    # Snap to the 9-significant-digit grid used on disk so CSV round trips are exact.
    return np.array([float(f"{v:.9g}") for v in x])


def generate_emt(p, seed):
    p.validate()
    rng = CounterRNG(seed)
    n = p.duration_samples
    max_breaths = int(math.ceil(n * p.dt * 36.0 / 60.0)) + 2
    rates = np.clip(rng.child("rate").normal(max_breaths, p.rate_mean, p.rate_jitter), 6.0, 36.0)
    amps = np.maximum(rng.child("amp").normal(max_breaths, p.amp_mean, p.amp_jitter), 0.0)

    out = np.empty(n)
    phase = 0.0
    breath = 0
    two_pi = 2.0 * math.pi
    step = two_pi * p.dt / 60.0
    for t in range(n):
        out[t] = amps[breath] * math.sin(phase)
        phase += step * rates[breath]
        if phase >= two_pi:
            phase -= two_pi
            breath += 1

    if p.drift_sigma > 0:
        walk = np.cumsum(rng.child("drift").normal(n, 0.0, p.drift_sigma))
        walk = moving_average(walk, min(51, n if n % 2 else n - 1))
        out += walk - walk.mean()
    return out - out.mean()


def ar1_noise(rng, n, rho):
    white = rng.normal(n)
    eps = np.empty(n)
    scale = math.sqrt(1.0 - rho * rho)
    eps[0] = white[0]
    for t in range(1, n):
        eps[t] = rho * eps[t - 1] + scale * white[t]
    return eps


def quarter_sigma(n, noise, head):
    """Per-sample noise scale for ``head`` (0 or 1)."""
    sigma = np.empty(n)
    mult = noise.head_quarter_mult[head]
    for q, (lo, hi) in enumerate(quarter_bounds(n)):
        sigma[lo:hi] = noise.sigma_base * mult[q]
    return sigma


def generate_com_heads(emt, noise, seed):
    noise.validate()
    e = np.asarray(emt, dtype=np.float64)
    if e.size % 4:
        raise InvalidParameter(f"EMT length {e.size} is not divisible by 4")
    rng = CounterRNG(seed)
    heads = []
    for h in (0, 1):
        eps = ar1_noise(rng.child(f"head{h + 1}"), e.size, noise.ar_rho)
        com = e + quarter_sigma(e.size, noise, h) * eps
        heads.append(com - com.mean())
    return heads[0], heads[1]


def patient_seed(master_seed, index):
    return splitmix_at(int(master_seed), index)


def _patient_params(p, noise, seed, hard):
    rng = CounterRNG(seed).child("patient")
    rate_mean = p.rate_mean * (1.5 if hard else 1.0)
    rate_mean += p.patient_rate_sd * rng.normal(1)[0]
    rate_mean = float(np.clip(rate_mean, 6.0, 36.0))
    amp_factor = math.exp(p.patient_amp_sd * rng.normal(1)[0])
    amp_factor *= (p.reference_rate / rate_mean) ** p.amp_rate_exponent
    pp = replace(p, rate_mean=rate_mean, amp_mean=p.amp_mean * amp_factor,
                 amp_jitter=p.amp_jitter * amp_factor, patient_rate_sd=0.0, patient_amp_sd=0.0)
    nn = replace(noise, sigma_base=noise.sigma_base * (2.0 if hard else 1.0))
    return pp, nn


def generate_record(patient_id, p, noise, seed, hard=False):
    pp, nn = _patient_params(p, noise, seed, hard)
    rng = CounterRNG(seed)
    emt = _quantize(generate_emt(pp, rng.child("emt").key))
    h1, h2 = generate_com_heads(emt, nn, rng.child("com").key)
    meta = {"rate_mean": pp.rate_mean, "amp_mean": pp.amp_mean,
            "sigma_base": nn.sigma_base, "hard_draw": bool(hard)}
    return AcquisitionRecord.from_signals(patient_id, emt, _quantize(h1), _quantize(h2), seed, meta)


def generate_cohort(n_patients, p=None, noise=None, difficult_frac=0.0, master_seed=0, rate_means=None):
    """Generate ``n_patients`` records; patient i uses SplitMix64 output i of ``master_seed``.

    The first ``round(difficult_frac * n)`` patients in a seeded order are drawn with
    a 50% higher breathing rate and doubled COM noise. Difficulty labels are
    computed from the realized signals regardless of how a patient was drawn.
    ``rate_means`` (cycled over patients) replaces ``p.rate_mean`` per patient,
    e.g. ``(12, 24)`` for a bimodal-rate cohort.
    """
    p = p or BreathingParams()
    noise = noise or NoiseModel()
    if n_patients < 1:
        raise InvalidParameter("n_patients must be >= 1")
    if not 0.0 <= difficult_frac <= 1.0:
        raise InvalidParameter("difficult_frac must lie in [0, 1]")
    p.validate()
    noise.validate()
    n_hard = int(round(difficult_frac * n_patients))
    hard = np.zeros(n_patients, dtype=bool)
    hard[CounterRNG(master_seed).child("hard").permutation(n_patients)[:n_hard]] = True
    width = max(3, len(str(n_patients - 1)))
    records = []
    for i in range(n_patients):
        pi = p if rate_means is None else replace(p, rate_mean=float(rate_means[i % len(rate_means)]))
        records.append(generate_record(f"P{i:0{width}d}", pi, noise, patient_seed(master_seed, i), bool(hard[i])))
    return records


# -- on-disk cohort format --------------------------------------------------

def _atomic_write_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def record_csv_text(rec):
    lines = [",".join(CSV_HEADER)]
    for i, row in enumerate(zip(rec.emt, rec.com_combined, rec.com_head1, rec.com_head2)):
        lines.append(f"{i}," + ",".join(f"{v:.9g}" for v in row))
    return "\n".join(lines) + "\n"


def params_to_dict(p, noise):
    d = {"breathing": asdict(p), "noise": asdict(noise)}
    d["noise"]["head_quarter_mult"] = [list(r) for r in noise.head_quarter_mult]
    return d


def params_from_dict(d):
    p = BreathingParams(**d.get("breathing", {}))
    nd = dict(d.get("noise", {}))
    if "head_quarter_mult" in nd:
        nd["head_quarter_mult"] = tuple(tuple(float(v) for v in r) for r in nd["head_quarter_mult"])
    return p, NoiseModel(**nd)


def write_cohort(records, out_dir, p=None, noise=None, master_seed=None, difficult_frac=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    patients = []
    for rec in records:
        fname = f"{rec.patient_id}.csv"
        _atomic_write_text(out / fname, record_csv_text(rec))
        patients.append({
            "patient_id": rec.patient_id, "file": fname, "seed": rec.seed,
            "breathing_cycles": rec.breathing_cycles, "baseline_r": rec.baseline_r,
            "difficult": rec.difficult, "meta": rec.meta,
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "master_seed": master_seed,
        "difficult_frac": difficult_frac,
        "params": params_to_dict(p or BreathingParams(), noise or NoiseModel()),
        "patients": patients,
    }
    _atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out / "manifest.json"


def read_record_csv(path, patient_id, seed=0, meta=None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise InvalidSignal(f"{path}: unexpected header {header}")
        rows = np.array([[float(v) for v in row[1:]] for row in reader])
    # The combined column is re-derived from the heads so the mean identity holds exactly.
    return AcquisitionRecord.from_signals(patient_id, rows[:, 0], rows[:, 2], rows[:, 3], seed, meta)


def read_cohort(cohort_dir):
    root = Path(cohort_dir)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise InvalidSignal(f"unsupported cohort format_version {manifest.get('format_version')}")
    return [read_record_csv(root / e["file"], e["patient_id"], e["seed"], e.get("meta"))
            for e in manifest["patients"]]
