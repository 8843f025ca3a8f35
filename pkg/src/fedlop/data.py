"""Grade records, feature encoding, class binning, partitioning and synthetic data."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

N_CLASSES = 5
GRADE_EDGES = (60.0, 70.0, 80.0, 90.0)


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class GradeRecord:
    student_id: str
    course_id: str
    prior_grades: tuple[float | None, ...]
    student_features: tuple[float, ...]
    course_features: tuple[float, ...]
    target_grade: float


@dataclass(frozen=True)
class FeatureSchema:
    """Fixed course-slot list plus static (min, max) ranges for every attribute."""

    n_slots: int
    student_ranges: tuple[tuple[float, float], ...]
    course_ranges: tuple[tuple[float, float], ...]
    class_count: int = N_CLASSES

    def __post_init__(self):
        if self.n_slots < 1 or not self.student_ranges or not self.course_ranges:
            raise SchemaError("schema needs at least one slot, student and course feature")
        for lo, hi in (*self.student_ranges, *self.course_ranges):
            if not lo < hi:
                raise SchemaError(f"feature range needs min < max, got ({lo}, {hi})")

    @property
    def dim_fstar(self) -> int:
        return self.n_slots

    @property
    def dim_fprime(self) -> int:
        return len(self.student_ranges) + len(self.course_ranges)

    def columns(self) -> list[str]:
        return (["student_id", "course_id", "grade"]
                + [f"g_{i + 1}" for i in range(self.n_slots)]
                + [f"s_{i + 1}" for i in range(len(self.student_ranges))]
                + [f"c_{i + 1}" for i in range(len(self.course_ranges))])

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(int(d["n_slots"]),
                   tuple(tuple(map(float, r)) for r in d["student_ranges"]),
                   tuple(tuple(map(float, r)) for r in d["course_ranges"]))

    def to_dict(self) -> dict:
        return {"n_slots": self.n_slots,
                "student_ranges": [list(r) for r in self.student_ranges],
                "course_ranges": [list(r) for r in self.course_ranges]}

    @classmethod
    def unit(cls, n_slots: int = 12, n_student: int = 5, n_course: int = 10) -> "FeatureSchema":
        return cls(n_slots, ((0.0, 1.0),) * n_student, ((0.0, 1.0),) * n_course)


@dataclass
class EncodedSet:
    """Column-stacked encoded samples. ``f_prime`` is student then course features."""

    f_star: np.ndarray
    f_prime: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        # unpacks as the (f_star, f_prime, labels) batch triple used by the model
        return iter((self.f_star, self.f_prime, self.labels))

    def subset(self, idx) -> "EncodedSet":
        idx = np.asarray(idx, dtype=np.intp)
        return EncodedSet(self.f_star[idx], self.f_prime[idx], self.labels[idx])

    @classmethod
    def concat(cls, parts: Sequence["EncodedSet"]) -> "EncodedSet":
        return cls(np.vstack([p.f_star for p in parts]), np.vstack([p.f_prime for p in parts]),
                   np.concatenate([p.labels for p in parts]))

    def class_counts(self, n_classes: int = N_CLASSES) -> np.ndarray:
        return np.bincount(self.labels, minlength=n_classes)


def bin_grade(grade: float) -> int:
    """[0,60) [60,70) [70,80) [80,90) [90,100] -> 0..4."""
    g = float(grade)
    if not 0.0 <= g <= 100.0 or math.isnan(g):
        raise ValueError(f"grade {grade!r} outside [0, 100]")
    return sum(g >= e for e in GRADE_EDGES)


@dataclass
class EncodeStats:
    clamped: int = 0


def _minmax(v: float, lo: float, hi: float, stats: EncodeStats | None) -> float:
    x = (v - lo) / (hi - lo)
    if x < 0.0 or x > 1.0:
        if stats is not None:
            stats.clamped += 1
        x = min(max(x, 0.0), 1.0)
    return x


def encode_record(rec: GradeRecord, schema: FeatureSchema,
                  stats: EncodeStats | None = None) -> tuple[np.ndarray, int]:
    """Normalised feature vector (grades, student, course) and class label."""
    if (len(rec.prior_grades) != schema.n_slots
            or len(rec.student_features) != len(schema.student_ranges)
            or len(rec.course_features) != len(schema.course_ranges)):
        raise SchemaError(f"record {rec.student_id}/{rec.course_id} does not match the schema")
    g = [0.0 if v is None else _minmax(v, 0.0, 100.0, stats) for v in rec.prior_grades]
    s = [_minmax(v, lo, hi, stats) for v, (lo, hi) in zip(rec.student_features, schema.student_ranges)]
    c = [_minmax(v, lo, hi, stats) for v, (lo, hi) in zip(rec.course_features, schema.course_ranges)]
    return np.array(g + s + c, dtype=np.float64), bin_grade(rec.target_grade)


def mpp_split(x: np.ndarray, schema: FeatureSchema, enabled: bool = True):
    """Split encoded features into shareable grades and private attributes.

    With ``enabled=False`` the full vector is returned unsplit.
    """
    x = np.asarray(x)
    if not enabled:
        return x
    k = schema.n_slots
    return x[..., :k], x[..., k:]


def encode_dataset(records: Sequence[GradeRecord], schema: FeatureSchema) -> EncodedSet:
    stats = EncodeStats()
    rows, labels = [], []
    for rec in records:
        x, y = encode_record(rec, schema, stats)
        rows.append(x)
        labels.append(y)
    if stats.clamped:
        log.warning("%d feature values outside schema range were clamped", stats.clamped)
    width = schema.n_slots + schema.dim_fprime
    X = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    fs, fp = mpp_split(X, schema)
    return EncodedSet(np.ascontiguousarray(fs), np.ascontiguousarray(fp),
                      np.array(labels, dtype=np.int64))


def _deal(labels: np.ndarray, m: int, rng: np.random.Generator, n_classes: int) -> list[list[int]]:
    buckets: list[list[int]] = [[] for _ in range(m)]
    pos = 0
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            log.warning("class %d is absent from the dataset", c)
            continue
        for j in rng.permutation(idx):
            buckets[pos % m].append(int(j))
            pos += 1
    return [sorted(b) for b in buckets]


def partition_clients(dataset: EncodedSet, m: int, rng: np.random.Generator,
                      n_classes: int = N_CLASSES) -> list[EncodedSet]:
    """Stratified partition: each class shuffled and dealt round-robin.

    The dealing offset carries over from one class to the next, which keeps the
    client sizes within one sample of each other.
    """
    if m < 1 or m > len(dataset):
        raise ValueError(f"cannot split {len(dataset)} samples over {m} clients")
    return [dataset.subset(b) for b in _deal(dataset.labels, m, rng, n_classes)]


def train_test_split(dataset: EncodedSet, ratio: float, rng: np.random.Generator,
                     n_classes: int = N_CLASSES) -> tuple[EncodedSet, EncodedSet]:
    """Per-class split with round(ratio * n_c) samples of each class in train."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    train, test = [], []
    for c in range(n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        if idx.size < 2:
            log.warning("class %d has fewer than 2 samples; all go to train", c)
            cut = idx.size
        else:
            cut = int(math.floor(ratio * idx.size + 0.5))
        train.extend(idx[:cut].tolist())
        test.extend(idx[cut:].tolist())
    if not test:
        log.warning("train/test split left the test set empty")
    return dataset.subset(sorted(train)), dataset.subset(sorted(test))


# ---------------------------------------------------------------------------
# synthetic grade records

@dataclass
class SyntheticConfig:
    """Generator knobs. Defaults were calibrated with grade-class marginals aimed at
    the 4/16/23/34/23 % profile of real engineering-major records."""

    n_students: int = 3000
    n_slots: int = 12
    n_student_features: int = 5
    n_course_features: int = 10
    ability_low: float = 0.8
    ability_high: float = 1.3
    difficulty_low: float = 0.0
    difficulty_high: float = 1.0
    noise_scale: float = 0.03
    feature_noise: float = 0.01
    label_shift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_students, self.n_slots, self.n_student_features, self.n_course_features) < 1:
            raise ValueError("sizes must be positive")
        if self.noise_scale < 0 or self.feature_noise < 0:
            raise ValueError("noise scales must be >= 0")
        if not 0.0 <= self.label_shift <= 1.0:
            raise ValueError("label_shift must lie in [0, 1]")

    def schema(self) -> FeatureSchema:
        return FeatureSchema.unit(self.n_slots, self.n_student_features, self.n_course_features)


def _truncated_normal(rng, mean, sd, size, lo=0.0, hi=1.0):
    # redraw out-of-range entries; a zero sd degenerates to the (clipped) mean
    if sd == 0:
        return np.full(size, min(max(mean, lo), hi))
    out = rng.normal(mean, sd, size)
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.normal(mean, sd, int(bad.sum()))
        bad = (out < lo) | (out > hi)
    return out


class _World:
    """Latent abilities, difficulties and the attribute maps that expose them."""

    def __init__(self, cfg: SyntheticConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.difficulty = rng.uniform(cfg.difficulty_low, cfg.difficulty_high, cfg.n_slots)
        # course attributes: fixed random affine views of the difficulty
        self.course_gain = rng.uniform(0.5, 1.0, cfg.n_course_features) * rng.choice([-1, 1], cfg.n_course_features)
        self.course_base = rng.uniform(0.2, 0.8, cfg.n_course_features)
        self.student_gain = rng.uniform(0.5, 1.0, cfg.n_student_features) * rng.choice([-1, 1], cfg.n_student_features)
        self.student_base = rng.uniform(0.2, 0.8, cfg.n_student_features)

    def students(self, n: int, first_id: int):
        cfg, rng = self.cfg, self.rng
        ability = rng.uniform(cfg.ability_low, cfg.ability_high, n)
        eps = _truncated_normal(rng, 0.5, cfg.noise_scale, (n, cfg.n_slots))
        grades = np.clip(100.0 * (0.55 * ability[:, None] + 0.30 * (1.0 - self.difficulty[None, :])
                                  + 0.15 * eps), 0.0, 100.0)
        a_c = (ability - 0.5 * (cfg.ability_low + cfg.ability_high)) / max(cfg.ability_high - cfg.ability_low, 1e-12)
        feats = (self.student_base[None, :] + 0.4 * self.student_gain[None, :] * a_c[:, None]
                 + rng.normal(0.0, cfg.feature_noise, (n, cfg.n_student_features)))
        feats = np.clip(feats, 0.0, 1.0)
        ids = [f"S{first_id + i:06d}" for i in range(n)]
        return ids, ability, grades, feats

    def course_features(self, slot: int) -> np.ndarray:
        cfg = self.cfg
        span = max(cfg.difficulty_high - cfg.difficulty_low, 1e-12)
        d_c = (self.difficulty[slot] - 0.5 * (cfg.difficulty_low + cfg.difficulty_high)) / span
        f = (self.course_base + 0.4 * self.course_gain * d_c
             + self.rng.normal(0.0, cfg.feature_noise, cfg.n_course_features))
        return np.clip(f, 0.0, 1.0)


def _records_from(world: _World, ids, grades, feats) -> list[GradeRecord]:
    cfg = world.cfg
    out = []
    for sid, g_row, s_row in zip(ids, grades, feats):
        for t in range(cfg.n_slots):
            prior = tuple(None if j == t else float(g_row[j]) for j in range(cfg.n_slots))
            out.append(GradeRecord(sid, f"C{t + 1:02d}", prior, tuple(map(float, s_row)),
                                   tuple(map(float, world.course_features(t))), float(g_row[t])))
    return out


def generate_synthetic(cfg: SyntheticConfig, n_records: int | None = None) -> list[GradeRecord]:
    """Seeded synthetic records.

    Each student gets a latent ability and every course slot a difficulty;
    a record targets one slot of one student with that slot's grade hidden
    (encoded as missing). Student and course attributes are noisy functions
    of ability and difficulty.
    """
    rng = np.random.default_rng(cfg.seed)
    world = _World(cfg, rng)
    ids, _, grades, feats = world.students(cfg.n_students, 0)
    records = _records_from(world, ids, grades, feats)
    order = rng.permutation(len(records))
    records = [records[i] for i in order]
    if n_records is not None:
        if n_records > len(records):
            raise ValueError(f"{n_records} records requested, config yields {len(records)}")
        records = records[:n_records]
    return records


def client_class_profile(client: int, n_clients: int, shift: float,
                         base: np.ndarray) -> np.ndarray:
    """Class mix of one client: the base profile pulled toward a client-specific class."""
    favoured = np.zeros(len(base))
    favoured[client % len(base)] = 1.0
    p = (1.0 - shift) * base + shift * favoured
    return p / p.sum()


def generate_client_records(cfg: SyntheticConfig, n_clients: int,
                            samples_per_client: int) -> list[list[GradeRecord]]:
    """Raw records for each client.

    Without label shift a pool of ``n_clients * samples_per_client`` records is
    dealt by stratified partition. With label shift each client draws its own
    class mix (see client_class_profile) from a common pool, without
    replacement inside a client.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    if cfg.label_shift == 0.0:
        total = n_clients * samples_per_client
        need = math.ceil(total / cfg.n_slots)
        pool = generate_synthetic(replace(cfg, n_students=need), total)
        labels = np.array([bin_grade(r.target_grade) for r in pool])
        return [[pool[i] for i in b] for b in _deal(labels, n_clients, rng, N_CLASSES)]

    profiles = [client_class_profile(c, n_clients, cfg.label_shift, _BASE_PROFILE) for c in range(n_clients)]
    counts = [_largest_remainder(p, samples_per_client) for p in profiles]
    need = np.max(np.array(counts), axis=0)
    # grow the pool until every class bucket covers the largest per-client demand
    n_students = cfg.n_students
    while True:
        pool = generate_synthetic(replace(cfg, n_students=n_students))
        labels = np.array([bin_grade(r.target_grade) for r in pool])
        have = np.bincount(labels, minlength=N_CLASSES)
        if np.all(have >= need):
            break
        ratio = float(np.max(need / np.maximum(have, 1)))
        n_students = int(math.ceil(n_students * min(max(ratio * 1.1, 1.2), 50.0)))
    buckets = [np.flatnonzero(labels == c) for c in range(N_CLASSES)]
    out = []
    for cnt in counts:
        idx = np.concatenate([rng.choice(buckets[c], size=int(k), replace=False)
                              for c, k in enumerate(cnt) if k > 0])
        out.append([pool[i] for i in np.sort(idx)])
    return out


def generate_client_datasets(cfg: SyntheticConfig, n_clients: int,
                             samples_per_client: int) -> list[EncodedSet]:
    schema = cfg.schema()
    return [encode_dataset(r, schema) for r in generate_client_records(cfg, n_clients, samples_per_client)]


# class marginals of the institutional records the generator imitates
_BASE_PROFILE = np.array([0.040, 0.159, 0.231, 0.337, 0.230])


def _largest_remainder(p: np.ndarray, total: int) -> np.ndarray:
    raw = p * total
    base = np.floor(raw).astype(int)
    rest = total - base.sum()
    base[np.argsort(-(raw - base), kind="stable")[:rest]] += 1
    return base


# ---------------------------------------------------------------------------
# CSV ingestion

@dataclass
class LoadReport:
    skipped_non_numeric: int = 0
    skipped_lines: list[int] = field(default_factory=list)


def _cell(v: str) -> float | None:
    v = v.strip()
    return None if v == "" else float(v)


def load_csv(path, schema: FeatureSchema, report: LoadReport | None = None) -> list[GradeRecord]:
    """Read grade records; rows with non-numeric target grades are skipped."""
    report = report if report is not None else LoadReport()
    cols = schema.columns()
    k, ns = schema.n_slots, len(schema.student_ranges)
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for c in cols:
            if c not in header:
                raise SchemaError(f"{path}: missing column {c!r}")
        for row in reader:
            line = reader.line_num
            try:
                grade = float(row["grade"])
            except (TypeError, ValueError):
                report.skipped_non_numeric += 1
                continue
            try:
                vals = [_cell(row[c]) for c in cols[3:]]
                if any(v is None for v in vals[k:]):
                    raise ValueError("attribute cell is empty")
                if not 0.0 <= grade <= 100.0:
                    raise ValueError(f"grade {grade} outside [0, 100]")
                rec = GradeRecord(row["student_id"], row["course_id"], tuple(vals[:k]),
                                  tuple(vals[k:k + ns]), tuple(vals[k + ns:]), grade)
            except (TypeError, ValueError) as exc:
                log.warning("%s:%d skipped (%s)", path, line, exc)
                report.skipped_lines.append(line)
                continue
            out.append(rec)
    return out


def write_csv(path, records: Sequence[GradeRecord], schema: FeatureSchema) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.columns())
        for r in records:
            w.writerow([r.student_id, r.course_id, repr(r.target_grade)]
                       + ["" if g is None else repr(g) for g in r.prior_grades]
                       + [repr(v) for v in r.student_features]
                       + [repr(v) for v in r.course_features])
