"""Synthetic ordinal-severity data, portable files, splits, pair samplers.

The generator plants severity on a line in a 2-d latent space (severity s
sits at s * severity_gap along a fixed direction, plus isotropic noise)
and lifts it to feature space through a fixed random tanh mixing layer.
Subjects group samples; all downstream splitting is subject-disjoint.

Samplers are pure functions of (dataset, arguments, seed); every random
draw comes from a freshly seeded stream in a documented order, so pair
lists and splits are reproducible bit-for-bit.
"""

from __future__ import annotations

import csv
import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .rng import Xoshiro256, derive_seed

# Fixed mixing-layer scales; class geometry is tuned through GenConfig
# (severity_gap, noise_sigma), not through these.
_MIX_WEIGHT_SCALE = 0.3
_MIX_OFFSET_SCALE = 0.3
_LATENT_DIM = 2

_CPDS_MAGIC = b"CPDS"
_CPDS_VERSION = 1
_REJECT_CAP = 1000


class DatasetFormatError(ValueError):
    """A dataset file violates the .cpds layout."""


@dataclass
class Dataset:
    """Columnar sample store: one row per sample."""

    features: np.ndarray  # [N, D] float32
    severities: np.ndarray  # [N] uint8, 0 = normal
    subject_ids: np.ndarray  # [N] uint32
    max_severity: int  # labels range over 0..max_severity
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.severities = np.asarray(self.severities, dtype=np.uint8)
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.uint32)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        n = self.features.shape[0]
        if self.severities.shape != (n,) or self.subject_ids.shape != (n,):
            raise ValueError("features, severities, subject_ids must have equal length")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature values")
        if self.max_severity < 1:
            raise ValueError(f"max_severity must be >= 1, got {self.max_severity}")
        if n and int(self.severities.max()) > self.max_severity:
            raise ValueError(
                f"severity {int(self.severities.max())} exceeds max_severity {self.max_severity}"
            )

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.max_severity + 1

    def normal_indices(self) -> np.ndarray:
        return np.flatnonzero(self.severities == 0)

    def abnormal_indices(self) -> np.ndarray:
        return np.flatnonzero(self.severities > 0)

    def subjects(self) -> np.ndarray:
        return np.unique(self.subject_ids)


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Field-by-field equality over the portable fields (meta is not persisted)."""
    return (
        a.max_severity == b.max_severity
        and a.features.shape == b.features.shape
        and np.array_equal(a.features, b.features)
        and np.array_equal(a.severities, b.severities)
        and np.array_equal(a.subject_ids, b.subject_ids)
    )


@dataclass(frozen=True)
class GenConfig:
    input_dim: int = 32
    max_severity: int = 5
    subjects_per_class: int = 10
    samples_per_subject: tuple[int, int] = (8, 12)
    severity_gap: float = 1.0
    noise_sigma: float = 0.42
    seed: int = 2

    def __post_init__(self):
        lo, hi = self.samples_per_subject
        if self.input_dim < 1 or self.max_severity < 1 or self.subjects_per_class < 1:
            raise ValueError("input_dim, max_severity, subjects_per_class must be >= 1")
        if self.max_severity > 255:
            raise ValueError("max_severity must fit in one byte")
        if not 1 <= lo <= hi:
            raise ValueError(f"samples_per_subject range invalid: {lo}..{hi}")
        if self.severity_gap <= 0.0:
            raise ValueError("severity_gap must be positive")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")

    def canonical_lines(self) -> list[str]:
        lo, hi = self.samples_per_subject
        pairs = {
            "input_dim": str(self.input_dim),
            "max_severity": str(self.max_severity),
            "noise_sigma": repr(self.noise_sigma),
            "samples_per_subject_max": str(hi),
            "samples_per_subject_min": str(lo),
            "seed": str(self.seed),
            "severity_gap": repr(self.severity_gap),
            "subjects_per_class": str(self.subjects_per_class),
        }
        return [f"{k} = {v}" for k, v in sorted(pairs.items())]


def generate_synthetic(cfg: GenConfig, return_latents: bool = False):
    """Build a dataset from a seeded stream.

    Draw order is part of the format: mixing matrix M (row-major), offset
    b, then for each severity class, each subject, a sample count followed
    by two gaussians per sample. Every severity level 0..max_severity is
    populated by construction.
    """
    rng = Xoshiro256(derive_seed(cfg.seed, "gen"))
    d = cfg.input_dim
    mix = np.empty((d, _LATENT_DIM), dtype=np.float64)
    for i in range(d):
        for j in range(_LATENT_DIM):
            mix[i, j] = rng.gauss() * _MIX_WEIGHT_SCALE
    offset = np.empty(d, dtype=np.float64)
    for i in range(d):
        offset[i] = rng.gauss() * _MIX_OFFSET_SCALE

    latents: list[np.ndarray] = []
    severities: list[int] = []
    subject_ids: list[int] = []
    lo, hi = cfg.samples_per_subject
    subject = 0
    for severity in range(cfg.max_severity + 1):
        for _ in range(cfg.subjects_per_class):
            count = rng.int_range(lo, hi)
            for _ in range(count):
                eps0 = rng.gauss() * cfg.noise_sigma
                eps1 = rng.gauss() * cfg.noise_sigma
                latents.append(
                    np.array([severity * cfg.severity_gap + eps0, eps1], dtype=np.float64)
                )
                severities.append(severity)
                subject_ids.append(subject)
            subject += 1

    latent_arr = np.stack(latents)
    features = np.tanh(latent_arr @ mix.T + offset).astype(np.float32)
    digest = hashlib.sha256("\n".join(cfg.canonical_lines()).encode()).hexdigest()[:16]
    ds = Dataset(
        features=features,
        severities=np.array(severities, dtype=np.uint8),
        subject_ids=np.array(subject_ids, dtype=np.uint32),
        max_severity=cfg.max_severity,
        meta={"generator": "synthetic", "config_hash": digest, "seed": str(cfg.seed)},
    )
    if return_latents:
        return ds, latent_arr
    return ds


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.70
    val_frac: float = 0.15
    test_frac: float = 0.15
    seed: int = 2

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f < 0 for f in fracs):
            raise ValueError("split fractions must be >= 0")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")


@dataclass
class DataSplits:
    train: Dataset
    val: Dataset
    test: Dataset


def _subset(ds: Dataset, subject_set: set[int]) -> Dataset:
    mask = np.isin(ds.subject_ids, sorted(subject_set))
    return Dataset(
        features=ds.features[mask].copy(),
        severities=ds.severities[mask].copy(),
        subject_ids=ds.subject_ids[mask].copy(),
        max_severity=ds.max_severity,
        meta=dict(ds.meta),
    )


def split_by_subject(ds: Dataset, spec: SplitSpec) -> DataSplits:
    """Subject-disjoint partition: floor(train), floor(val), remainder test.

    Any nonempty split must contain at least one normal sample (anchors
    are undefined without one); empty splits are fine.
    """
    subjects = [int(s) for s in ds.subjects()]
    if len(subjects) < 3:
        raise ValueError(f"need >= 3 subjects to split, got {len(subjects)}")
    rng = Xoshiro256(derive_seed(spec.seed, "split"))
    rng.shuffle(subjects)
    n = len(subjects)
    n_train = int(n * spec.train_frac)
    n_val = int(n * spec.val_frac)
    parts = {
        "train": set(subjects[:n_train]),
        "val": set(subjects[n_train : n_train + n_val]),
        "test": set(subjects[n_train + n_val :]),
    }
    out: dict[str, Dataset] = {}
    for name, subject_set in parts.items():
        sub = _subset(ds, subject_set)
        if sub.n_samples > 0 and sub.normal_indices().size == 0:
            raise ValueError(f"{name} split has no normal (severity 0) samples")
        out[name] = sub
    return DataSplits(train=out["train"], val=out["val"], test=out["test"])


@dataclass(frozen=True)
class AnchorConfig:
    n_reference_vectors: int = 10
    resample_per_pair: bool = True

    def __post_init__(self):
        if self.n_reference_vectors < 1:
            raise ValueError("n_reference_vectors must be >= 1")


@dataclass(frozen=True)
class ContrastivePairs:
    """Index pairs into a dataset plus the binary same-class label."""

    first: np.ndarray
    second: np.ndarray
    same_class: np.ndarray  # uint8, 1 = positive pair

    def __len__(self) -> int:
        return self.first.shape[0]


@dataclass(frozen=True)
class PreferencePairs:
    """Severity-ordered index pairs plus per-pair anchor sample indices."""

    preferred: np.ndarray  # lower severity
    dispreferred: np.ndarray  # higher severity
    anchor_indices: np.ndarray  # [count, n] indices into the normal class

    def __len__(self) -> int:
        return self.preferred.shape[0]


def sample_contrastive_pairs(ds: Dataset, count: int, mode: str, seed: int) -> ContrastivePairs:
    """Sample `count` index pairs with replacement, positives/negatives 50/50
    in expectation.

    mode 'binary' groups all severities >= 1 into one abnormal class;
    mode 'multiclass' keeps each severity level as its own class. Per
    pair the draw order is: coin for same/different, then the class
    choice(s), then one member index per side.
    """
    if mode not in ("binary", "multiclass"):
        raise ValueError(f"mode must be 'binary' or 'multiclass', got {mode!r}")
    if count < 0:
        raise ValueError("count must be >= 0")
    if mode == "binary":
        groups = [ds.normal_indices(), ds.abnormal_indices()]
        names = ["normal", "abnormal"]
    else:
        groups = [np.flatnonzero(ds.severities == s) for s in range(ds.n_classes)]
        names = [f"severity {s}" for s in range(ds.n_classes)]
    for name, g in zip(names, groups):
        if g.size == 0:
            raise ValueError(f"cannot sample pairs: class '{name}' is empty")

    rng = Xoshiro256(seed)
    n_groups = len(groups)
    first = np.empty(count, dtype=np.int64)
    second = np.empty(count, dtype=np.int64)
    same = np.empty(count, dtype=np.uint8)
    for k in range(count):
        positive = rng.uniform() < 0.5
        if positive:
            g = groups[rng.below(n_groups)]
            first[k] = g[rng.below(g.size)]
            second[k] = g[rng.below(g.size)]
            same[k] = 1
        else:
            ga = rng.below(n_groups)
            gb = ga
            attempts = 0
            while gb == ga:
                gb = rng.below(n_groups)
                attempts += 1
                if attempts > _REJECT_CAP:
                    raise RuntimeError("could not draw two distinct classes")
            first[k] = groups[ga][rng.below(groups[ga].size)]
            second[k] = groups[gb][rng.below(groups[gb].size)]
            same[k] = 0
    return ContrastivePairs(first=first, second=second, same_class=same)


def sample_preference_pairs(
    ds: Dataset, count: int, anchors: AnchorConfig, seed: int
) -> PreferencePairs:
    """Sample abnormal pairs with strictly different severities.

    Per pair: two abnormal draws with rejection on equal severity (capped),
    ordered so preferred = lower severity, then n anchor indices sampled
    without replacement from the normal class (or once up front when
    resample_per_pair is off).
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    abnormal = ds.abnormal_indices()
    normal = ds.normal_indices()
    levels = np.unique(ds.severities[abnormal])
    if levels.size < 2:
        raise ValueError(f"need >= 2 distinct abnormal severity levels, got {levels.size}")
    if normal.size == 0:
        raise ValueError("no normal samples to draw anchors from")
    n_ref = anchors.n_reference_vectors
    if n_ref > normal.size:
        raise ValueError(f"n_reference_vectors {n_ref} exceeds {normal.size} normal samples")

    rng = Xoshiro256(seed)
    shared_anchor = None
    if not anchors.resample_per_pair:
        shared_anchor = np.array(rng.sample(normal.tolist(), n_ref), dtype=np.int64)

    pref = np.empty(count, dtype=np.int64)
    disp = np.empty(count, dtype=np.int64)
    anchor_idx = np.empty((count, n_ref), dtype=np.int64)
    sev = ds.severities
    for k in range(count):
        a = abnormal[rng.below(abnormal.size)]
        b = abnormal[rng.below(abnormal.size)]
        attempts = 0
        while sev[a] == sev[b]:
            b = abnormal[rng.below(abnormal.size)]
            attempts += 1
            if attempts > _REJECT_CAP:
                raise RuntimeError(
                    f"gave up after {_REJECT_CAP} redraws for unequal severities"
                )
        if sev[a] <= sev[b]:
            pref[k], disp[k] = a, b
        else:
            pref[k], disp[k] = b, a
        if shared_anchor is None:
            anchor_idx[k] = rng.sample(normal.tolist(), n_ref)
        else:
            anchor_idx[k] = shared_anchor
    return PreferencePairs(preferred=pref, dispreferred=disp, anchor_indices=anchor_idx)


def compute_anchor(normal_embeddings: Tensor) -> Tensor:
    """Arithmetic mean across rows, kept in-graph: [n, C] -> [1, C].

    Implemented as a constant averaging matmul so gradients flow back
    into the reference embeddings.
    """
    n = normal_embeddings.shape[0]
    if n == 0:
        raise ValueError("cannot build an anchor from zero reference vectors")
    avg = Tensor(np.full((1, n), 1.0 / n, dtype=np.float32))
    return avg @ normal_embeddings


def compute_anchor_batch(anchor_embeddings: Tensor, batch: int, n_ref: int) -> Tensor:
    """Per-pair anchors: [batch*n_ref, C] stacked rows -> [batch, C] means.

    Row block k (rows k*n_ref..(k+1)*n_ref-1) holds pair k's reference
    embeddings; a constant block-diagonal averaging matrix collapses each
    block in a single in-graph matmul.
    """
    if anchor_embeddings.shape[0] != batch * n_ref:
        raise ValueError(
            f"expected {batch * n_ref} stacked anchor rows, got {anchor_embeddings.shape[0]}"
        )
    blocks = np.kron(
        np.eye(batch, dtype=np.float32),
        np.full((1, n_ref), 1.0 / n_ref, dtype=np.float32),
    )
    return Tensor(blocks) @ anchor_embeddings


def dataset_digest(ds: Dataset) -> str:
    """SHA-256 over the canonical binary serialization."""
    buf = io.BytesIO()
    _write_dataset(buf, ds)
    return hashlib.sha256(buf.getvalue()).hexdigest()


def _write_dataset(fh, ds: Dataset) -> None:
    if ds.n_samples == 0:
        raise ValueError("refusing to save an empty dataset")
    fh.write(_CPDS_MAGIC)
    fh.write(struct.pack("<IIIQ", _CPDS_VERSION, ds.n_features, ds.max_severity, ds.n_samples))
    rec = struct.Struct(f"<IB{ds.n_features}f")
    for i in range(ds.n_samples):
        fh.write(
            rec.pack(
                int(ds.subject_ids[i]),
                int(ds.severities[i]),
                *ds.features[i].tolist(),
            )
        )


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        _write_dataset(fh, ds)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DatasetFormatError(f"truncated file while reading {what}")
    return data


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != _CPDS_MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}, expected {_CPDS_MAGIC!r}")
        version, dim, max_sev, count = struct.unpack("<IIIQ", _read_exact(fh, 20, "header"))
        if version != _CPDS_VERSION:
            raise DatasetFormatError(f"unsupported version {version}")
        if dim < 1 or max_sev < 1:
            raise DatasetFormatError(f"invalid header: D={dim} K={max_sev}")
        rec = struct.Struct(f"<IB{dim}f")
        features = np.empty((count, dim), dtype=np.float32)
        severities = np.empty(count, dtype=np.uint8)
        subjects = np.empty(count, dtype=np.uint32)
        for i in range(count):
            fields = rec.unpack(_read_exact(fh, rec.size, f"sample {i}"))
            subjects[i] = fields[0]
            if fields[1] > max_sev:
                raise DatasetFormatError(
                    f"sample {i}: severity {fields[1]} exceeds header max {max_sev}"
                )
            severities[i] = fields[1]
            features[i] = fields[2:]
        if fh.read(1):
            raise DatasetFormatError("trailing bytes after the declared sample count")
    return Dataset(
        features=features, severities=severities, subject_ids=subjects, max_severity=max_sev
    )


def export_csv(ds: Dataset, path) -> None:
    """Write `subject_id,severity,f0..f{D-1}`; %.9g keeps float32 exact."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["subject_id", "severity"] + [f"f{i}" for i in range(ds.n_features)]
        )
        for i in range(ds.n_samples):
            writer.writerow(
                [int(ds.subject_ids[i]), int(ds.severities[i])]
                + ["%.9g" % v for v in ds.features[i].tolist()]
            )


def import_csv(path, max_severity: int | None = None) -> Dataset:
    """Read the export schema back; feature columns keep file order.

    `max_severity` validates labels when given, otherwise the observed
    maximum is used.
    """
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError("empty file: no header row") from None
        if len(header) < 3 or header[0] != "subject_id" or header[1] != "severity":
            raise DatasetFormatError(
                "header must start with subject_id,severity followed by feature columns"
            )
        dim = len(header) - 2
        subjects: list[int] = []
        severities: list[int] = []
        rows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DatasetFormatError(
                    f"row {line_no}: expected {len(header)} cells, got {len(row)}"
                )
            try:
                subjects.append(int(row[0]))
                severities.append(int(row[1]))
                rows.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise DatasetFormatError(f"row {line_no}: non-numeric cell ({exc})") from None
            if severities[-1] < 0:
                raise DatasetFormatError(f"row {line_no}: negative severity")
            if max_severity is not None and severities[-1] > max_severity:
                raise DatasetFormatError(
                    f"row {line_no}: severity {severities[-1]} out of range 0..{max_severity}"
                )
    if not rows:
        raise DatasetFormatError("no data rows")
    limit = max_severity if max_severity is not None else max(max(severities), 1)
    return Dataset(
        features=np.array(rows, dtype=np.float32),
        severities=np.array(severities, dtype=np.uint8),
        subject_ids=np.array(subjects, dtype=np.uint32),
        max_severity=limit,
    )
