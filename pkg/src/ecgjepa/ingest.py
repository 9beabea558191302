"""ECG record loading, preprocessing, and the weighted mixture sampler.

Preprocessing standardizes heterogeneous sources into one canonical form:
(1) linear interpolation of NaNs, (2) resampling to 500 Hz, (3) per-database
mean/std normalization, (4) clipping to +/-5 standard deviations,
(5) random 10 s crop (shorter records rejected). Baseline wander is removed
for the databases known to need it before statistics are applied.

On disk one record is a ``.ecg`` file (raw little-endian float32, lead-major
[leads x T]) plus a JSON sidecar with metadata; a text manifest lists record
paths with their database id, and a stats file holds one ``db mean std``
line per database.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import median_filter

__all__ = [
    "DATABASES",
    "TABLE_RATIOS",
    "EcgRecord",
    "DatabaseStats",
    "RecordRejected",
    "interpolate_nans",
    "resample_500hz",
    "normalize_and_clip",
    "crop_10s",
    "remove_baseline_wander",
    "preprocess_record",
    "compute_stats",
    "save_stats",
    "load_stats",
    "MixtureSampler",
    "sample_batch",
    "synth_ecg",
    "write_record",
    "read_record",
    "write_manifest",
    "read_manifest",
    "RecordStore",
    "import_csv",
]

TARGET_RATE = 500
TARGET_SECONDS = 10
TARGET_SAMPLES = TARGET_RATE * TARGET_SECONDS
LEADS = 12

# The ten pre-training sources plus the synthetic stand-in. Ratios are the
# published per-database sampling weights; they are renormalized by the
# sampler (as printed they sum to 0.990625).
TABLE_RATIOS = {
    "MIMIC-IV-ECG": 0.7,
    "CODE-15": 0.1,
    "PTB-XL": 0.05,
    "Chapman-Shaoxing": 0.01875,
    "CPSC": 0.025,
    "CPSC-Extra": 0.0125,
    "Georgia": 0.0375,
    "Ningbo": 0.028125,
    "PTB": 0.009375,
    "St-Petersburg": 0.009375,
}
DATABASES = tuple(TABLE_RATIOS) + ("SYNTHETIC",)
BASELINE_WANDER_DATABASES = ("CODE-15", "St-Petersburg")


class RecordRejected(Exception):
    """Record cannot be made conformant; carries a diagnostic reason."""


@dataclass
class EcgRecord:
    """A multi-lead waveform with sampling-rate and provenance metadata."""

    samples: np.ndarray  # [leads, T]
    sampling_rate: float
    database_id: str
    record_id: str
    labels: np.ndarray | None = None
    fold: str | None = None

    @property
    def leads(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class DatabaseStats:
    """Global scalar mean/std of one database's samples (std > 0)."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"database std must be positive, got {self.std}")


# ---------------------------------------------------------------------------
# preprocessing steps


def interpolate_nans(rec: EcgRecord) -> EcgRecord:
    """Replace NaN runs by linear interpolation between the nearest finite
    neighbors; leading/trailing NaNs copy the nearest finite value. A lead
    with no finite value rejects the record."""
    if not np.isnan(rec.samples).any():
        return rec
    samples = rec.samples.astype(np.float64, copy=True)
    idx = np.arange(samples.shape[1])
    for lead in range(samples.shape[0]):
        row = samples[lead]
        finite = np.isfinite(row)
        if not finite.any():
            raise RecordRejected(f"record {rec.record_id}: lead {lead} is all-NaN")
        if not finite.all():
            samples[lead] = np.interp(idx, idx[finite], row[finite])
    return replace(rec, samples=samples.astype(rec.samples.dtype, copy=False))


def resample_500hz(rec: EcgRecord) -> EcgRecord:
    """Resample to 500 Hz by linear interpolation; identity at 500 Hz."""
    if rec.sampling_rate <= 0:
        raise ValueError(f"sampling rate must be positive, got {rec.sampling_rate}")
    if rec.sampling_rate == TARGET_RATE:
        return rec
    t = rec.samples.shape[1]
    out_len = round(t * TARGET_RATE / rec.sampling_rate)
    src_t = np.arange(t) / rec.sampling_rate
    dst_t = np.arange(out_len) / TARGET_RATE
    out = np.stack([np.interp(dst_t, src_t, row) for row in rec.samples])
    return replace(rec, samples=out.astype(rec.samples.dtype, copy=False), sampling_rate=float(TARGET_RATE))


def normalize_and_clip(rec: EcgRecord, stats: dict[str, DatabaseStats]) -> EcgRecord:
    """x <- (x - mean)/std using the record's database stats, then clamp to
    [-5, 5] (five standard deviations)."""
    if rec.database_id not in stats:
        raise KeyError(f"no stats for database {rec.database_id!r}")
    s = stats[rec.database_id]
    out = np.clip((rec.samples - s.mean) / s.std, -5.0, 5.0)
    return replace(rec, samples=out)


def crop_10s(rec: EcgRecord, rng: np.random.Generator) -> EcgRecord | None:
    """Random 10 s crop at 500 Hz; returns None (reject) for shorter records."""
    if rec.sampling_rate != TARGET_RATE:
        raise ValueError("crop_10s expects a 500 Hz record")
    t = rec.samples.shape[1]
    if t < TARGET_SAMPLES:
        return None
    offset = int(rng.integers(t - TARGET_SAMPLES + 1))
    return replace(rec, samples=rec.samples[:, offset : offset + TARGET_SAMPLES].copy())


def remove_baseline_wander(rec: EcgRecord) -> EcgRecord:
    """Subtract a two-stage moving-median baseline (200 ms then 600 ms
    windows), removing drift below roughly 0.5 Hz while leaving the QRS
    band intact."""
    if rec.sampling_rate != TARGET_RATE:
        raise ValueError("remove_baseline_wander expects a 500 Hz record")
    w1 = int(0.2 * TARGET_RATE) | 1  # odd windows keep the filter centered
    w2 = int(0.6 * TARGET_RATE) | 1
    baseline = median_filter(rec.samples, size=(1, w1), mode="reflect")
    baseline = median_filter(baseline, size=(1, w2), mode="reflect")
    return replace(rec, samples=rec.samples - baseline)


def preprocess_record(
    rec: EcgRecord,
    stats: dict[str, DatabaseStats],
    rng: np.random.Generator,
) -> EcgRecord | None:
    """Full pipeline to a conformant record, or None if rejected.

    Raises RecordRejected for records that are structurally unusable
    (all-NaN lead); returns None for the ordinary too-short rejection.
    """
    rec = interpolate_nans(rec)
    rec = resample_500hz(rec)
    if rec.database_id in BASELINE_WANDER_DATABASES:
        rec = remove_baseline_wander(rec)
    rec = normalize_and_clip(rec, stats)
    return crop_10s(rec, rng)


def compute_stats(records) -> dict[str, DatabaseStats]:
    """Global scalar mean/std per database over all leads and records.

    Records should already be NaN-free, resampled, and wander-filtered
    where applicable (the state normalization sees during the pipeline).
    """
    sums: dict[str, list] = {}
    for rec in records:
        acc = sums.setdefault(rec.database_id, [0.0, 0.0, 0])
        x = rec.samples.astype(np.float64)
        acc[0] += x.sum()
        acc[1] += (x * x).sum()
        acc[2] += x.size
    out = {}
    for db, (s, sq, n) in sums.items():
        mean = s / n
        var = max(sq / n - mean * mean, 0.0)
        out[db] = DatabaseStats(mean=mean, std=math.sqrt(var))
    return out


def save_stats(stats: dict[str, DatabaseStats], path) -> None:
    lines = [f"{db} {s.mean:.17g} {s.std:.17g}" for db, s in sorted(stats.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def load_stats(path) -> dict[str, DatabaseStats]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        db, mean, std = line.split()
        out[db] = DatabaseStats(mean=float(mean), std=float(std))
    return out


# ---------------------------------------------------------------------------
# mixture sampling


class MixtureSampler:
    """Draws records database-first using normalized mixture weights.

    Default weights follow the published per-database sampling ratios for
    the known sources; databases outside that table (SYNTHETIC) weigh in at
    their record-count share. Weights are renormalized to sum to 1 over the
    databases actually present.
    """

    def __init__(self, store: "RecordStore", rng: np.random.Generator, weights: dict[str, float] | None = None):
        dbs = store.databases()
        if not dbs:
            raise ValueError("record store is empty")
        if weights is None:
            total = sum(store.count(db) for db in dbs)
            weights = {db: TABLE_RATIOS.get(db, store.count(db) / total) for db in dbs}
        for db, w in weights.items():
            if w > 0 and store.count(db) == 0:
                raise ValueError(f"database {db!r} has positive weight but no records")
        self.store = store
        self.databases = sorted(db for db, w in weights.items() if w > 0)
        raw = np.array([weights[db] for db in self.databases], dtype=np.float64)
        self.weights = raw / raw.sum()
        self.rng = rng

    def state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def sample_batch(sampler: MixtureSampler, size: int) -> list[EcgRecord]:
    """Each slot independently draws a database by weight, then a record
    uniformly within it."""
    db_idx = sampler.rng.choice(len(sampler.databases), size=size, p=sampler.weights)
    out = []
    for i in db_idx:
        db = sampler.databases[i]
        j = int(sampler.rng.integers(sampler.store.count(db)))
        out.append(sampler.store.get(db, j))
    return out


# ---------------------------------------------------------------------------
# synthetic generator

# Fixed per-lead projection of the common beat waveform; roughly the
# magnitude spread of limb vs precordial leads.
_LEAD_GAINS = 0.4 + 1.1 * np.sin(np.pi * (np.arange(LEADS) + 1.5) / (LEADS + 2))

# (amplitude, offset from beat center in s, width in s) per bump:
# P, Q, R, S, T.
_BEAT_BUMPS = (
    (0.15, -0.16, 0.025),
    (-0.12, -0.022, 0.010),
    (1.0, 0.0, 0.011),
    (-0.25, 0.022, 0.010),
    (0.40, 0.30, 0.055),
)


def _class_factor(class_id: int, salt: float) -> float:
    # Deterministic per-class value in [0, 1), spread by the golden ratio.
    return ((class_id + 1) * salt) % 1.0


def synth_ecg(
    rng: np.random.Generator,
    seconds: float = 10.0,
    leads: int = LEADS,
    class_id: int | None = None,
    sampling_rate: float = TARGET_RATE,
    record_id: str = "synthetic",
) -> EcgRecord:
    """Quasi-periodic 12-lead waveform: Gaussian-bump beats at 50-100 bpm
    plus noise and slow drift. A class_id deterministically perturbs heart
    rate and T-wave morphology so downstream classification is learnable.
    """
    if seconds <= 0:
        raise ValueError("seconds must be positive")
    n = round(seconds * sampling_rate)
    t = np.arange(n) / sampling_rate

    if class_id is None:
        hr = rng.uniform(50.0, 100.0)
        t_gain = 1.0
        t_shift = 0.0
    else:
        u = _class_factor(class_id, 0.6180339887498949)
        v = _class_factor(class_id, 0.7548776662466927)
        hr = 52.0 + 38.0 * u + rng.uniform(-2.5, 2.5)
        t_gain = 0.45 + 1.3 * v
        t_shift = 0.04 * (v - 0.5)

    period = 60.0 / hr
    first = rng.uniform(0.0, period)
    centers = np.arange(first - period, seconds + period, period)
    centers = centers + rng.normal(0.0, 0.01 * period, size=centers.shape)

    wave = np.zeros(n)
    for amp, off, width in _BEAT_BUMPS:
        if off > 0.1:  # the late bump is the T wave; apply class morphology
            amp = amp * t_gain
            off = off + t_shift
        d = t[None, :] - (centers[:, None] + off)
        wave += amp * np.exp(-0.5 * (d / width) ** 2).sum(axis=0)

    gains = _LEAD_GAINS[:leads] * (1.0 + rng.normal(0.0, 0.05, size=leads))
    samples = gains[:, None] * wave[None, :]
    samples = samples + rng.normal(0.0, 0.03, size=(leads, n))
    drift_f = rng.uniform(0.05, 0.3)
    drift_a = rng.uniform(0.0, 0.15)
    drift_phi = rng.uniform(0.0, 2 * np.pi)
    samples = samples + drift_a * np.sin(2 * np.pi * drift_f * t + drift_phi)[None, :]

    return EcgRecord(
        samples=samples.astype(np.float32),
        sampling_rate=float(sampling_rate),
        database_id="SYNTHETIC",
        record_id=record_id,
    )


# ---------------------------------------------------------------------------
# on-disk format


def write_record(rec: EcgRecord, path) -> Path:
    """Write ``<path>.ecg`` (raw <f4 lead-major) plus a JSON sidecar."""
    path = Path(path)
    ecg = path.with_suffix(".ecg")
    ecg.write_bytes(np.ascontiguousarray(rec.samples, dtype="<f4").tobytes())
    meta = {
        "record_id": rec.record_id,
        "database_id": rec.database_id,
        "sampling_rate": rec.sampling_rate,
        "leads": rec.leads,
    }
    if rec.labels is not None:
        meta["labels"] = [int(v) for v in rec.labels]
    if rec.fold is not None:
        meta["fold"] = rec.fold
    ecg.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return ecg


def read_record(path) -> EcgRecord:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    leads = int(meta["leads"])
    if raw.size % leads != 0:
        raise ValueError(f"{path}: payload size {raw.size} not divisible by {leads} leads")
    samples = raw.reshape(leads, -1).copy()
    labels = meta.get("labels")
    return EcgRecord(
        samples=samples,
        sampling_rate=float(meta["sampling_rate"]),
        database_id=meta["database_id"],
        record_id=meta["record_id"],
        labels=None if labels is None else np.asarray(labels, dtype=np.float32),
        fold=meta.get("fold"),
    )


def write_manifest(entries: list[tuple[str, str]], path) -> None:
    """Manifest lines: ``<relative path>\\t<database_id>``."""
    lines = [f"{p}\t{db}" for p, db in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[tuple[Path, str]]:
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rel, db = line.split("\t")
        out.append(((path.parent / rel).resolve(), db))
    return out


@dataclass
class RecordStore:
    """Manifest-backed record collection with an in-memory cache."""

    by_db: dict[str, list[Path]]
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_manifest(cls, path) -> "RecordStore":
        by_db: dict[str, list[Path]] = {}
        for p, db in read_manifest(path):
            by_db.setdefault(db, []).append(p)
        if not by_db:
            raise ValueError(f"manifest {path} lists no records")
        return cls(by_db=by_db)

    def databases(self) -> list[str]:
        return sorted(self.by_db)

    def count(self, db: str) -> int:
        return len(self.by_db.get(db, ()))

    def get(self, db: str, index: int) -> EcgRecord:
        key = (db, index)
        rec = self._cache.get(key)
        if rec is None:
            rec = read_record(self.by_db[db][index])
            self._cache[key] = rec
        return rec

    def all_records(self):
        for db in self.databases():
            for i in range(self.count(db)):
                yield self.get(db, i)


def import_csv(path, rate: float, database_id: str, record_id: str | None = None) -> EcgRecord:
    """Read one record from CSV: header row, one lead per column."""
    path = Path(path)
    with path.open(newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[float(v) if v.strip() else float("nan") for v in row] for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: no sample rows")
    samples = np.asarray(rows, dtype=np.float32).T
    if samples.shape[0] != len(header):
        raise ValueError(f"{path}: ragged rows")
    return EcgRecord(
        samples=samples,
        sampling_rate=float(rate),
        database_id=database_id,
        record_id=record_id or path.stem,
    )
