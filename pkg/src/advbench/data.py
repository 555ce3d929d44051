"""Synthetic multi-label image datasets, label co-occurrence tables, file IO.

Images are 1-channel, values in [0, 1]. Each label has a fixed spatial
signature (a Gaussian blob at its own center, modulated by a sinusoidal
texture); a sample is the sum of its positive labels' signatures over a smooth
random background, plus Gaussian pixel noise.

Label states follow the CheXpert coding on disk: ``1`` positive, ``0``
negative, ``-1`` uncertain, empty cell for missing.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_LABELS = 18

DEFAULT_LABEL_NAMES = (
    "Atelectasis",
    "Consolidation",
    "Infiltration",
    "Pneumothorax",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Effusion",
    "Pneumonia",
    "Pleural_Thickening",
    "Cardiomegaly",
    "Nodule",
    "Mass",
    "Hernia",
    "Lung_Lesion",
    "Fracture",
    "Lung_Opacity",
    "Enlarged_Cardiomediastinum",
)

DATASET_MAGIC = b"XRDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class DatasetFormatError(ValueError):
    """A dataset or labels file is malformed."""


class LabelState(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    UNCERTAIN = -1
    MISSING = -2


# ranking view: positive > uncertain > negative; missing ranks as negative but is masked
_RANK_VALUE = {LabelState.POSITIVE: 1.0, LabelState.UNCERTAIN: 0.5, LabelState.NEGATIVE: 0.0, LabelState.MISSING: 0.0}


@dataclass(frozen=True)
class LabelSpace:
    names: tuple = DEFAULT_LABEL_NAMES

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        object.__setattr__(self, "names", names)
        if len(names) != N_LABELS:
            raise ValueError(f"label space needs exactly {N_LABELS} names, got {len(names)}")
        if len(set(names)) != len(names):
            raise ValueError("label names must be unique")
        for n in names:
            if not n or any(ch in n for ch in ',\n"'):
                raise ValueError(f"label name {n!r} is not CSV-safe")

    def __len__(self):
        return len(self.names)


def ranking_view(labels: np.ndarray) -> np.ndarray:
    """Map label states (..., 18) to floats: positive 1, uncertain 0.5, else 0."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape, dtype=np.float64)
    out[labels == LabelState.POSITIVE] = 1.0
    out[labels == LabelState.UNCERTAIN] = 0.5
    return out


def available_mask(labels: np.ndarray) -> np.ndarray:
    """True where the label is annotated at all (anything but MISSING)."""
    return np.asarray(labels) != LabelState.MISSING


def training_mask(labels: np.ndarray) -> np.ndarray:
    """True where the label is a definite POSITIVE or NEGATIVE."""
    labels = np.asarray(labels)
    return (labels == LabelState.POSITIVE) | (labels == LabelState.NEGATIVE)


@dataclass(frozen=True)
class GroundTruthVector:
    values: tuple

    def __post_init__(self):
        vals = tuple(LabelState(int(v)) for v in self.values)
        object.__setattr__(self, "values", vals)
        if len(vals) != N_LABELS:
            raise ValueError(f"ground truth needs {N_LABELS} entries, got {len(vals)}")
        if all(v == LabelState.MISSING for v in vals):
            raise ValueError("ground truth needs at least one non-missing entry")

    @property
    def ranking_view(self) -> np.ndarray:
        return np.array([_RANK_VALUE[v] for v in self.values])

    @property
    def mask(self) -> np.ndarray:
        return np.array([v != LabelState.MISSING for v in self.values])

    def as_array(self) -> np.ndarray:
        return np.array([int(v) for v in self.values], dtype=np.int8)


@dataclass(eq=False)
class MultiLabelDataset:
    images: np.ndarray
    labels: np.ndarray
    label_space: LabelSpace = field(default_factory=LabelSpace)
    generation_seed: int | None = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int8)
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"images must be (N, 1, H, W), got {self.images.shape}")
        n = self.images.shape[0]
        if n < 1:
            raise ValueError("dataset must contain at least one sample")
        if self.labels.shape != (n, N_LABELS):
            raise ValueError(f"labels must be ({n}, {N_LABELS}), got {self.labels.shape}")
        if not np.isin(self.labels, [s.value for s in LabelState]).all():
            raise ValueError("labels contain unknown state codes")
        if not (np.isfinite(self.images).all() and self.images.min() >= 0.0 and self.images.max() <= 1.0):
            raise ValueError("pixel values must be finite and within [0, 1]")

    def __len__(self):
        return self.images.shape[0]

    def __eq__(self, other):
        if not isinstance(other, MultiLabelDataset):
            return NotImplemented
        return (
            self.label_space == other.label_space
            and self.images.shape == other.images.shape
            and self.images.tobytes() == other.images.tobytes()
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def image_hw(self):
        return self.images.shape[2], self.images.shape[3]

    @property
    def dataset_id(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()[:12]

    def ranking_view(self) -> np.ndarray:
        return ranking_view(self.labels)

    def available_mask(self) -> np.ndarray:
        return available_mask(self.labels)

    def training_mask(self) -> np.ndarray:
        return training_mask(self.labels)

    def truth(self, i: int) -> GroundTruthVector:
        return GroundTruthVector(tuple(self.labels[i]))

    def subset(self, indices) -> "MultiLabelDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return MultiLabelDataset(self.images[idx], self.labels[idx], self.label_space, self.generation_seed)


# ---------------------------------------------------------------- generation


@dataclass
class GenerationConfig:
    n_samples: int
    affinity: np.ndarray
    noise_sigma: float = 0.04
    seed: int = 0
    label_space: LabelSpace = field(default_factory=LabelSpace)
    prior: np.ndarray | None = None
    amplitude: float = 0.04
    texture_amplitude: float = 0.02
    texture_width: float = 10.0
    background_amplitude: float = 0.05
    image_size: int = 32
    p_missing: float = 0.1
    p_uncertain: float = 0.05


def _validate_affinity(affinity, m=N_LABELS):
    a = np.asarray(affinity, dtype=np.float64)
    if a.shape != (m, m):
        raise ValueError(f"affinity must be {m}x{m}, got {a.shape}")
    if not np.array_equal(a, a.T):
        raise ValueError("affinity matrix must be symmetric")
    if np.any(np.diag(a) != 0):
        raise ValueError("affinity matrix must have a zero diagonal")
    if a.min() < 0 or a.max() > 1:
        raise ValueError("affinity entries must lie in [0, 1]")
    return a


def label_signatures(
    image_size: int = 32, amplitude: float = 0.04, texture_amplitude: float = 0.0, texture_width: float = 10.0
) -> np.ndarray:
    """Fixed (18, H, W) per-label signatures on a 6x3 grid of centers.

    Each signature is a Gaussian blob plus a sinusoidal texture under a wider
    Gaussian envelope sharing the blob's center. Texture frequencies are
    distinct integer (kx, ky) pairs, so different labels' textures are close
    to orthogonal.
    """
    h = w = image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cols, rows = 6, 3
    sig = np.empty((N_LABELS, h, w))
    blob_sigma = image_size / 12.0
    for j in range(N_LABELS):
        cx = (j % cols + 0.5) * w / cols
        cy = (j // cols + 0.5) * h / rows
        r2 = (xx - cx) ** 2 + (yy - cy) ** 2
        blob = np.exp(-r2 / (2 * blob_sigma**2))
        kx, ky = 3 + j % 6, 1 + 2 * (j // 6)
        texture = np.sin(2 * np.pi * (kx * xx + ky * yy) / image_size + j)
        envelope = np.exp(-r2 / (2 * texture_width**2))
        sig[j] = amplitude * blob + texture_amplitude * envelope * texture
    return sig


def resolve_prior(prior, m=N_LABELS) -> np.ndarray:
    if prior is None or (isinstance(prior, str) and prior == "uniform"):
        return np.full(m, 1.0 / m)
    if isinstance(prior, str):
        if prior == "skewed":
            p = 0.85 ** np.arange(m)
            return p / p.sum()
        raise ValueError(f"unknown prior {prior!r}")
    p = np.asarray(prior, dtype=np.float64)
    if p.shape != (m,) or p.min() < 0 or p.sum() <= 0:
        raise ValueError("prior must be 18 non-negative weights with positive sum")
    return p / p.sum()


def _draw_labels(rng, prior, affinity):
    count = int(rng.integers(1, 4))
    drawn = [int(rng.choice(N_LABELS, p=prior))]
    while len(drawn) < count:
        weights = affinity[drawn].sum(axis=0)
        weights[drawn] = 0.0
        total = weights.sum()
        if total <= 0:
            break
        drawn.append(int(rng.choice(N_LABELS, p=weights / total)))
    return drawn


def generate_dataset(config: GenerationConfig) -> MultiLabelDataset:
    if config.n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    affinity = _validate_affinity(config.affinity)
    prior = resolve_prior(config.prior)
    rng = np.random.default_rng(config.seed)
    n, size = config.n_samples, config.image_size
    signatures = label_signatures(size, config.amplitude, config.texture_amplitude, config.texture_width)

    positives = np.zeros((n, N_LABELS), dtype=bool)
    for i in range(n):
        positives[i, _draw_labels(rng, prior, affinity)] = True

    # smooth background: offset plus one low-frequency cosine per axis
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    bg_params = rng.uniform(size=(n, 5))
    offset = 0.2 + 0.15 * bg_params[:, 0]
    amp_x = config.background_amplitude * bg_params[:, 1]
    amp_y = config.background_amplitude * bg_params[:, 2]
    phase_x = 2 * np.pi * bg_params[:, 3]
    phase_y = 2 * np.pi * bg_params[:, 4]
    background = (
        offset[:, None, None]
        + amp_x[:, None, None] * np.cos(np.pi * xx[None] + phase_x[:, None, None])
        + amp_y[:, None, None] * np.cos(np.pi * yy[None] + phase_y[:, None, None])
    )
    images = background + np.tensordot(positives.astype(np.float64), signatures, axes=(1, 0))
    images += config.noise_sigma * rng.standard_normal((n, size, size))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)[:, None]

    labels = np.where(positives, LabelState.POSITIVE, LabelState.NEGATIVE).astype(np.int8)
    flip = rng.uniform(size=(n, N_LABELS))
    labels[(~positives) & (flip < config.p_missing)] = LabelState.MISSING
    labels[positives & (flip < config.p_uncertain)] = LabelState.UNCERTAIN
    return MultiLabelDataset(images, labels, config.label_space, config.seed)


def make_affinity(kind: str, seed: int = 0, m: int = N_LABELS) -> np.ndarray:
    """Named co-occurrence structures: 'block', 'chain', 'random', 'none'."""
    a = np.zeros((m, m))
    if kind == "none":
        return a
    if kind == "block":
        for start in range(0, m, 3):
            a[start : start + 3, start : start + 3] = 0.98
        a[np.arange(m), np.arange(m)] = 0.0
        return a + 0.02 * (1 - np.eye(m))
    if kind == "chain":
        i = np.arange(m - 1)
        a[i, i + 1] = a[i + 1, i] = 0.98
        return a + 0.02 * (1 - np.eye(m))
    if kind == "random":
        rng = np.random.default_rng(seed)
        upper = np.triu(rng.uniform(size=(m, m)) * (rng.uniform(size=(m, m)) < 0.25), 1)
        return upper + upper.T
    raise ValueError(f"unknown affinity kind {kind!r}")


# ---------------------------------------------------------------- co-occurrence


@dataclass(frozen=True, eq=False)
class CoOccurrenceTables:
    raw_counts: np.ndarray
    inverse_normalized: np.ndarray
    label_space: LabelSpace = field(default_factory=LabelSpace)

    @classmethod
    def from_dataset(cls, dataset: MultiLabelDataset) -> "CoOccurrenceTables":
        raw = co_occurrence_counts(dataset)
        return cls(raw, inverse_normalize(raw), dataset.label_space)

    def target(self, label: int) -> np.ndarray:
        """Row C(label): the improbable-label vector used as an attack target."""
        return self.inverse_normalized[label]


def co_occurrence_counts(dataset: MultiLabelDataset) -> np.ndarray:
    pos = (dataset.labels == LabelState.POSITIVE).astype(np.int64)
    return pos.T @ pos


def inverse_normalize(raw_counts) -> np.ndarray:
    """Row-normalized inverse co-occurrence: 1 - count / row max, zero diagonal.

    Rows whose off-diagonal counts are all zero become all ones off the diagonal.
    """
    raw = np.asarray(raw_counts, dtype=np.float64)
    m = raw.shape[0]
    if raw.shape != (m, m) or not np.array_equal(raw, raw.T) or raw.min() < 0:
        raise ValueError("raw counts must be a square, symmetric, non-negative matrix")
    off = raw.copy()
    np.fill_diagonal(off, 0.0)
    row_max = off.max(axis=1)
    c = np.ones((m, m))
    nz = row_max > 0
    c[nz] = 1.0 - off[nz] / row_max[nz, None]
    np.fill_diagonal(c, 0.0)
    return c


def label_frequency_weights(dataset: MultiLabelDataset) -> np.ndarray:
    """Per-label loss weights, larger for rarer positives, normalized to mean 1."""
    labels = dataset.labels
    annotated = (labels != LabelState.MISSING).sum(axis=0).astype(np.float64)
    positive = (labels == LabelState.POSITIVE).sum(axis=0).astype(np.float64)
    w = annotated / (positive + 1.0)
    if w.sum() <= 0:
        return np.ones(N_LABELS)
    return w / w.mean()


# ---------------------------------------------------------------- file IO


def _labels_path(path) -> Path:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix == ".xrds" else path
    return stem.parent / (stem.name + ".labels.csv")


def save_dataset(dataset: MultiLabelDataset, path) -> Path:
    """Write ``path`` (binary images) and the companion ``<name>.labels.csv``."""
    path = Path(path)
    n, _, h, w = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, h, w))
        fh.write(dataset.images.astype("<f4").tobytes())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", *dataset.label_space.names])
    for i, row in enumerate(dataset.labels):
        writer.writerow([i, *("" if v == LabelState.MISSING else int(v) for v in row)])
    _labels_path(path).write_text(buf.getvalue())
    return path


def _parse_label_cell(cell, row, col):
    if cell == "":
        return LabelState.MISSING
    if cell in ("1", "0", "-1"):
        return int(cell)
    raise DatasetFormatError(f"labels row {row}, column {col}: invalid cell {cell!r}")


def load_dataset(path) -> MultiLabelDataset:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header, file ends at offset {len(blob)}")
    magic, version, n, h, w = _HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version} at offset 4")
    if n < 1:
        raise DatasetFormatError(f"{path}: sample count {n} at offset 8 must be >= 1")
    if h < 1 or w < 1:
        raise DatasetFormatError(f"{path}: invalid image size {h}x{w} at offset 12")
    expected = _HEADER.size + 4 * n * h * w
    if len(blob) < expected:
        raise DatasetFormatError(f"{path}: truncated pixel data, expected {expected} bytes, file ends at offset {len(blob)}")
    if len(blob) > expected:
        raise DatasetFormatError(f"{path}: unexpected trailing data at offset {expected}")
    images = np.frombuffer(blob, dtype="<f4", count=n * h * w, offset=_HEADER.size).astype(np.float32).reshape(n, 1, h, w)

    labels_file = _labels_path(path)
    with open(labels_file, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "id" or len(rows[0]) != N_LABELS + 1:
        raise DatasetFormatError(f"{labels_file}: header must be 'id' followed by {N_LABELS} label names")
    space = LabelSpace(tuple(rows[0][1:]))
    body = rows[1:]
    if len(body) != n:
        raise DatasetFormatError(f"{labels_file}: {len(body)} label rows for {n} images")
    labels = np.empty((n, N_LABELS), dtype=np.int8)
    for r, row in enumerate(body):
        if len(row) != N_LABELS + 1 or row[0] != str(r):
            raise DatasetFormatError(f"{labels_file}: malformed row {r + 1}")
        labels[r] = [_parse_label_cell(c, r + 1, k + 1) for k, c in enumerate(row[1:])]
    return MultiLabelDataset(images, labels, space)


def save_matrix_csv(matrix, label_space: LabelSpace, path) -> Path:
    """18x18 matrix with label names as header row and first column."""
    matrix = np.asarray(matrix)
    integral = np.issubdtype(matrix.dtype, np.integer)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["", *label_space.names])
    for name, row in zip(label_space.names, matrix):
        writer.writerow([name, *(int(v) if integral else repr(float(v)) for v in row)])
    Path(path).write_text(buf.getvalue())
    return Path(path)


def load_matrix_csv(path):
    """Return (matrix, label_space). Integer-valued files load as int64."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) != N_LABELS + 1 or len(rows[0]) != N_LABELS + 1:
        raise DatasetFormatError(f"{path}: expected a {N_LABELS}x{N_LABELS} matrix with header row and column")
    space = LabelSpace(tuple(rows[0][1:]))
    cells = [r[1:] for r in rows[1:]]
    if [r[0] for r in rows[1:]] != list(space.names):
        raise DatasetFormatError(f"{path}: row labels do not match header")
    try:
        if all("." not in c and "e" not in c.lower() for r in cells for c in r):
            return np.array(cells, dtype=np.int64), space
        return np.array(cells, dtype=np.float64), space
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: non-numeric cell ({exc})") from None
