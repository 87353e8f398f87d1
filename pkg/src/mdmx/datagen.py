"""Synthetic blob datasets with controlled in-distribution and out-of-distribution label noise.

Every sample carries a hidden ground-truth annotation (true label and noise
kind). Training code only ever receives :meth:`NoisyDataset.training_view`,
which drops the annotation; evaluation code reads it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLEAN, ID_NOISE, OOD = 0, 1, 2
KIND_NAMES = ("clean", "id_noise", "ood")
NO_LABEL = -1

ID_MODES = ("symmetric", "asymmetric")
OOD_SOURCES = ("uniform_ring", "shifted_blobs")


class DatasetFormatError(ValueError):
    """Raised for malformed or invalid dataset files."""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


@dataclass(frozen=True)
class NoiseSpec:
    r_in: float = 0.4
    r_out: float = 0.2
    id_mode: str = "symmetric"
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.r_in <= 1.0 and 0.0 <= self.r_out <= 1.0):
            raise ValueError("noise rates must lie in [0, 1]")
        if self.r_in + self.r_out > 1.0 + 1e-12:
            raise ValueError("r_in + r_out must not exceed 1")
        if self.id_mode not in ID_MODES:
            raise ValueError(f"unknown id noise mode {self.id_mode!r}")


@dataclass(frozen=True)
class CleanDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    radius: float = 0.0  # blob arrangement radius R; 0 when unknown

    def __post_init__(self):
        _check_features_labels(self.features, self.labels, self.n_classes)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class GroundTruth:
    true_label: np.ndarray  # NO_LABEL for OOD samples
    kind: np.ndarray  # int codes CLEAN / ID_NOISE / OOD

    def __post_init__(self):
        if self.true_label.shape != self.kind.shape:
            raise ValueError("true_label and kind must have equal length")
        if np.any((self.kind == OOD) != (self.true_label == NO_LABEL)):
            raise ValueError("kind == ood must coincide with true_label == none")

    def mask(self, kind: int) -> np.ndarray:
        return self.kind == kind

    def counts(self) -> dict[str, int]:
        return {name: int(np.sum(self.kind == code)) for code, name in enumerate(KIND_NAMES)}


@dataclass(frozen=True)
class TrainingData:
    """What a training routine is allowed to see: inputs and given labels."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class NoisyDataset:
    features: np.ndarray
    given_labels: np.ndarray
    n_classes: int
    truth: GroundTruth | None = None  # None when the sidecar is unavailable
    radius: float = 0.0

    def __post_init__(self):
        _check_features_labels(self.features, self.given_labels, self.n_classes, require_all_classes=False)
        t = self.truth
        if t is None:
            return
        if t.kind.shape[0] != self.features.shape[0]:
            raise ValueError("ground truth length does not match dataset")
        clean = t.kind == CLEAN
        noisy = t.kind == ID_NOISE
        if np.any(self.given_labels[clean] != t.true_label[clean]):
            raise ValueError("clean samples must carry their true label")
        if np.any(self.given_labels[noisy] == t.true_label[noisy]):
            raise ValueError("id_noise samples must carry a wrong label")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def training_view(self) -> TrainingData:
        return TrainingData(self.features, self.given_labels, self.n_classes)

    def __eq__(self, other):
        if not isinstance(other, NoisyDataset):
            return NotImplemented
        same = (
            self.n_classes == other.n_classes
            and self.radius == other.radius
            and _bits_equal(self.features, other.features)
            and np.array_equal(self.given_labels, other.given_labels)
        )
        if not same or (self.truth is None) != (other.truth is None):
            return False
        if self.truth is None:
            return True
        return np.array_equal(self.truth.true_label, other.truth.true_label) and np.array_equal(
            self.truth.kind, other.truth.kind
        )


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def _check_features_labels(features, labels, n_classes, require_all_classes=True):
    if features.ndim != 2 or labels.ndim != 1 or features.shape[0] != labels.shape[0]:
        raise ValueError(f"features {features.shape} and labels {labels.shape} do not align")
    if not np.all(np.isfinite(features)):
        raise ValueError("features must be finite")
    if n_classes < 1 or np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    if require_all_classes and np.any(np.bincount(labels, minlength=n_classes) == 0):
        raise ValueError("every class needs at least one sample")


def noise_count(rate: float, n: int) -> int:
    """Round-half-up count of ``rate * n``."""
    return int(math.floor(rate * n + 0.5))


def class_centers(n_classes: int, dim: int, radius: float) -> np.ndarray:
    """Centers evenly spaced on a circle of ``radius`` in the first two coordinates."""
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    centers = np.zeros((n_classes, dim))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def make_blobs(n_per_class: int, n_classes: int, dim: int, spread: float, seed: int) -> CleanDataset:
    """Isotropic Gaussian blobs, one per class, centered on a circle of radius ``4 * spread``.

    Rows are shuffled with the same generator, so the output is a pure function
    of the arguments.
    """
    if n_per_class < 1 or n_classes < 2 or dim < 2:
        raise ValueError("need n_per_class >= 1, n_classes >= 2, dim >= 2")
    if not (math.isfinite(spread) and spread > 0):
        raise ValueError(f"spread must be positive and finite, got {spread}")
    rng = np.random.default_rng(seed)
    radius = 4.0 * spread
    centers = class_centers(n_classes, dim, radius)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    noise = rng.standard_normal((labels.shape[0], dim))
    features = centers[labels] + spread * noise
    order = rng.permutation(labels.shape[0])
    return CleanDataset(features[order], labels[order], n_classes, radius)


def as_noisy(ds: CleanDataset) -> NoisyDataset:
    """Wrap a clean dataset with an all-clean ground truth."""
    truth = GroundTruth(ds.labels.copy(), np.full(len(ds), CLEAN, dtype=np.int64))
    return NoisyDataset(ds.features.copy(), ds.labels.copy(), ds.n_classes, truth, ds.radius)


def inject_id_noise(ds: CleanDataset | NoisyDataset, r_in: float, mode: str = "symmetric", seed: int = 0) -> NoisyDataset:
    """Flip exactly ``round(r_in * N)`` labels chosen uniformly without replacement.

    symmetric: the new label is uniform over the other ``C - 1`` classes.
    asymmetric: class ``c`` becomes ``(c + 1) mod C``.
    """
    if not 0.0 <= r_in <= 1.0:
        raise ValueError(f"r_in must lie in [0, 1], got {r_in}")
    if mode not in ID_MODES:
        raise ValueError(f"unknown id noise mode {mode!r}")
    if isinstance(ds, CleanDataset):
        ds = as_noisy(ds)
    if ds.truth is None:
        raise ValueError("noise injection needs ground truth")
    n, c = len(ds), ds.n_classes
    n_flip = noise_count(r_in, n)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=n_flip, replace=False))
    given = ds.given_labels.copy()
    if mode == "symmetric":
        given[idx] = (given[idx] + rng.integers(1, c, size=n_flip)) % c
    else:
        given[idx] = (given[idx] + 1) % c
    kind = ds.truth.kind.copy()
    kind[idx] = ID_NOISE
    truth = GroundTruth(ds.truth.true_label.copy(), kind)
    return NoisyDataset(ds.features.copy(), given, c, truth, ds.radius)


def sample_ood(n: int, dim: int, radius: float, source: str, rng: np.random.Generator, n_classes: int = 4) -> np.ndarray:
    """Draw ``n`` points that belong to no class.

    uniform_ring: uniform over the shell ``2R <= |x| <= 3R`` (volume-uniform radius).
    shifted_blobs: Gaussian blobs of std ``R/4`` at radius ``2.5R``, rotated half a
    step away from the class centers.
    """
    if source == "uniform_ring":
        direction = rng.standard_normal((n, dim))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        lo, hi = (2.0 * radius) ** dim, (3.0 * radius) ** dim
        r = rng.uniform(lo, hi, size=n) ** (1.0 / dim)
        pts = direction * r[:, None]
        # guard the closed interval against the last-ulp error of the power
        norms = np.linalg.norm(pts, axis=1)
        pts *= (np.clip(norms, 2.0 * radius, 3.0 * radius) / norms)[:, None]
        return pts
    if source == "shifted_blobs":
        angles = 2.0 * np.pi * (np.arange(n_classes) + 0.5) / n_classes
        centers = np.zeros((n_classes, dim))
        centers[:, 0] = 2.5 * radius * np.cos(angles)
        centers[:, 1] = 2.5 * radius * np.sin(angles)
        which = rng.integers(0, n_classes, size=n)
        return centers[which] + (radius / 4.0) * rng.standard_normal((n, dim))
    raise ValueError(f"unknown ood source {source!r}")


def inject_ood_noise(ds: NoisyDataset, r_out: float, ood_source: str = "uniform_ring", seed: int = 0) -> NoisyDataset:
    """Replace the features of ``round(r_out * N)`` non-flipped samples with OOD draws.

    Given labels are kept unchanged, so the replaced samples carry a
    meaningless label; the dataset size does not change.
    """
    if not 0.0 <= r_out <= 1.0:
        raise ValueError(f"r_out must lie in [0, 1], got {r_out}")
    if ood_source not in OOD_SOURCES:
        raise ValueError(f"unknown ood source {ood_source!r}")
    if ds.truth is None:
        raise ValueError("noise injection needs ground truth")
    if ds.radius <= 0:
        raise ValueError("dataset has no blob radius; cannot place OOD samples")
    n = len(ds)
    n_out = noise_count(r_out, n)
    candidates = np.flatnonzero(ds.truth.kind == CLEAN)
    if n_out > candidates.shape[0]:
        raise ValueError(f"need {n_out} clean indices for OOD replacement, only {candidates.shape[0]} available")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(candidates, size=n_out, replace=False))
    features = ds.features.copy()
    features[idx] = sample_ood(n_out, ds.dim, ds.radius, ood_source, rng, ds.n_classes)
    kind = ds.truth.kind.copy()
    true_label = ds.truth.true_label.copy()
    kind[idx] = OOD
    true_label[idx] = NO_LABEL
    return NoisyDataset(features, ds.given_labels.copy(), ds.n_classes, GroundTruth(true_label, kind), ds.radius)


def make_noisy(
    n_per_class: int,
    n_classes: int,
    dim: int,
    spread: float,
    r_in: float,
    r_out: float,
    id_mode: str = "symmetric",
    ood_source: str = "uniform_ring",
    seed: int = 0,
) -> NoisyDataset:
    """Blobs followed by ID flips and then OOD replacement, each with its own derived seed."""
    from ._rng import derive_seed

    if r_in + r_out > 1.0 + 1e-12:
        raise ValueError("r_in + r_out must not exceed 1")
    clean = make_blobs(n_per_class, n_classes, dim, spread, derive_seed(seed, 1))
    noisy = inject_id_noise(clean, r_in, id_mode, derive_seed(seed, 2))
    return inject_ood_noise(noisy, r_out, ood_source, derive_seed(seed, 3))


# ---------------------------------------------------------------------------
# CSV persistence


def truth_path(path) -> Path:
    path = Path(path)
    stem = path.name[:-4] if path.name.endswith(".csv") else path.name
    return path.with_name(stem + ".truth.csv")


def _fmt(x: float) -> str:
    return "%.17g" % x


def save_dataset(ds: NoisyDataset | CleanDataset, path) -> None:
    """Write ``<name>.csv`` and, if ground truth is known, ``<name>.truth.csv``."""
    if isinstance(ds, CleanDataset):
        ds = as_noisy(ds)
    path = Path(path)
    d = ds.dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# mdmx-dataset n_classes={ds.n_classes} radius={_fmt(ds.radius)}\n")
        fh.write(",".join([f"feat_{j}" for j in range(d)] + ["label"]) + "\n")
        for row, label in zip(ds.features, ds.given_labels):
            fh.write(",".join(_fmt(v) for v in row) + f",{int(label)}\n")
    tpath = truth_path(path)
    if ds.truth is None:
        tpath.unlink(missing_ok=True)
        return
    with open(tpath, "w", newline="", encoding="utf-8") as fh:
        fh.write("true_label,kind\n")
        for lab, kind in zip(ds.truth.true_label, ds.truth.kind):
            fh.write(f"{int(lab)},{KIND_NAMES[kind]}\n")


def _parse_meta(path, line: str) -> tuple[int, float]:
    parts = line[1:].split()
    if not parts or parts[0] != "mdmx-dataset":
        raise DatasetFormatError(path, 1, "missing '# mdmx-dataset' metadata line")
    meta = {}
    for item in parts[1:]:
        key, sep, value = item.partition("=")
        if not sep:
            raise DatasetFormatError(path, 1, f"bad metadata item {item!r}")
        meta[key] = value
    try:
        return int(meta["n_classes"]), float(meta.get("radius", "0"))
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(path, 1, f"bad metadata: {exc}") from None


def load_dataset(path) -> NoisyDataset:
    """Inverse of :func:`save_dataset`; truth is ``None`` if the sidecar is missing."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 2:
        raise DatasetFormatError(path, len(lines) + 1, "truncated file: missing header")
    n_classes, radius = _parse_meta(path, lines[0])
    header = lines[1].split(",")
    d = len(header) - 1
    if d < 1 or header != [f"feat_{j}" for j in range(d)] + ["label"]:
        raise DatasetFormatError(path, 2, f"unexpected header {lines[1]!r}")
    features = np.empty((len(lines) - 2, d))
    labels = np.empty(len(lines) - 2, dtype=np.int64)
    for i, line in enumerate(lines[2:]):
        lineno = i + 3
        cells = line.split(",")
        if len(cells) != d + 1:
            raise DatasetFormatError(path, lineno, f"expected {d + 1} fields, got {len(cells)}")
        try:
            features[i] = [float(c) for c in cells[:d]]
            labels[i] = int(cells[d])
        except ValueError as exc:
            raise DatasetFormatError(path, lineno, str(exc)) from None
        if not np.all(np.isfinite(features[i])):
            raise DatasetFormatError(path, lineno, "non-finite feature value")
        if not 0 <= labels[i] < n_classes:
            raise DatasetFormatError(path, lineno, f"label {labels[i]} outside [0, {n_classes})")
    truth = _load_truth(truth_path(path), len(labels))
    try:
        return NoisyDataset(features, labels, n_classes, truth, radius)
    except ValueError as exc:
        raise DatasetFormatError(path, 0, str(exc)) from None


def _load_truth(path: Path, n: int) -> GroundTruth | None:
    if not path.exists():
        return None
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["true_label", "kind"]:
        raise DatasetFormatError(path, 1, "expected header 'true_label,kind'")
    if len(rows) - 1 != n:
        raise DatasetFormatError(path, len(rows), f"expected {n} truth rows, got {len(rows) - 1}")
    true_label = np.empty(n, dtype=np.int64)
    kind = np.empty(n, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        if len(row) != 2 or row[1] not in KIND_NAMES:
            raise DatasetFormatError(path, i + 2, f"bad truth row {row!r}")
        try:
            true_label[i] = int(row[0])
        except ValueError:
            raise DatasetFormatError(path, i + 2, f"bad true_label {row[0]!r}") from None
        kind[i] = KIND_NAMES.index(row[1])
    try:
        return GroundTruth(true_label, kind)
    except ValueError as exc:
        raise DatasetFormatError(path, 0, str(exc)) from None
