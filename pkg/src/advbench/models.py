"""Small 18-logit multi-label classifiers: definition, training, persistence.

Two architectures are available:

* ``mlp-small``: flatten -> dense 256 -> relu -> dense 18
* ``cnn-small``: conv3x3x8 -> relu -> maxpool2 -> conv3x3x16 -> relu -> maxpool2
  -> dense 64 -> relu -> dense 18

Training minimizes a label-masked, frequency-weighted BCE with SGD + momentum.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from advbench import tensor as T
from advbench.data import N_LABELS, LabelState, MultiLabelDataset, label_frequency_weights, training_mask

logger = logging.getLogger(__name__)

ARCHITECTURES = ("mlp-small", "cnn-small")
MODEL_MAGIC = b"XRMW"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """A model file is malformed or does not match the expected architecture."""


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "cnn-small"
    input_hw: tuple = (32, 32)
    seed: int = 0
    # pixel standardization (x - mean) / std; fitted by train() when unset
    input_mean: float | None = None
    input_std: float | None = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; choose from {ARCHITECTURES}")
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        if (self.input_mean is None) != (self.input_std is None):
            raise ValueError("input_mean and input_std must be set together")
        if self.input_std is not None and not self.input_std > 0:
            raise ValueError("input_std must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 are required")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must be in [0, 1) and weight_decay >= 0")


def parameter_shapes(config: ModelConfig):
    """Ordered (name, shape, fan_in) triples for an architecture."""
    h, w = config.input_hw
    if config.architecture == "mlp-small":
        return [
            ("fc1.weight", (h * w, 256), h * w),
            ("fc1.bias", (256,), h * w),
            ("fc2.weight", (256, N_LABELS), 256),
            ("fc2.bias", (N_LABELS,), 256),
        ]
    h2, w2 = ((h - 2) // 2 - 2) // 2, ((w - 2) // 2 - 2) // 2
    if h2 < 1 or w2 < 1:
        raise ValueError(f"input {config.input_hw} too small for cnn-small")
    flat = 16 * h2 * w2
    return [
        ("conv1.weight", (8, 1, 3, 3), 9),
        ("conv1.bias", (8,), 9),
        ("conv2.weight", (16, 8, 3, 3), 72),
        ("conv2.bias", (16,), 72),
        ("fc1.weight", (flat, 64), flat),
        ("fc1.bias", (64,), flat),
        ("fc2.weight", (64, N_LABELS), 64),
        ("fc2.bias", (N_LABELS,), 64),
    ]


@dataclass(eq=False)
class Model:
    config: ModelConfig
    parameters: dict
    thresholds: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = {name: shape for name, shape, _ in parameter_shapes(self.config)}
        found = {k: tuple(np.shape(v)) for k, v in self.parameters.items()}
        if found != expected:
            raise ModelFormatError(f"parameter shapes for {self.config.architecture}: expected {expected}, found {found}")
        self.parameters = {k: np.ascontiguousarray(self.parameters[k], dtype=np.float32) for k in expected}
        if self.thresholds is not None:
            th = np.asarray(self.thresholds, dtype=np.float64)
            if th.shape != (N_LABELS,) or not ((th > 0) & (th < 1)).all():
                raise ValueError("thresholds must be 18 values strictly inside (0, 1)")
            self.thresholds = th

    @property
    def architecture(self):
        return self.config.architecture

    @property
    def model_id(self) -> str:
        h = hashlib.sha256(self.config.architecture.encode())
        for name in self.parameters:
            h.update(name.encode())
            h.update(self.parameters[name].tobytes())
        return h.hexdigest()[:12]

    def forward(self, x: T.Tensor, params: dict | None = None) -> T.Tensor:
        """Logits (N, 18) for images x (N, 1, H, W)."""
        if params is None:
            params = {k: T.Tensor(v) for k, v in self.parameters.items()}
        n = x.shape[0]
        if tuple(x.shape[1:]) != (1, *self.config.input_hw):
            raise T.ShapeError(f"model expects (N, 1, {self.config.input_hw[0]}, {self.config.input_hw[1]}), got {x.shape}")
        if self.config.input_mean is not None:
            x = T.mul(T.sub(x, self.config.input_mean), 1.0 / self.config.input_std)
        if self.config.architecture == "mlp-small":
            h = T.reshape(x, (n, x.size // n))
            h = T.relu(T.bias_add(T.matmul(h, params["fc1.weight"]), params["fc1.bias"]))
            return T.bias_add(T.matmul(h, params["fc2.weight"]), params["fc2.bias"])
        h = T.maxpool2x2(T.relu(T.bias_add(T.conv2d(x, params["conv1.weight"]), params["conv1.bias"])))
        h = T.maxpool2x2(T.relu(T.bias_add(T.conv2d(h, params["conv2.weight"]), params["conv2.bias"])))
        h = T.reshape(h, (n, h.size // n))
        h = T.relu(T.bias_add(T.matmul(h, params["fc1.weight"]), params["fc1.bias"]))
        return T.bias_add(T.matmul(h, params["fc2.weight"]), params["fc2.bias"])

    def logits(self, images, batch_size: int = 512) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        out = [self.forward(T.Tensor(images[i : i + batch_size])).data for i in range(0, len(images), batch_size)]
        return np.concatenate(out, axis=0)


def init_model(config: ModelConfig) -> Model:
    """He-uniform weights from a generator seeded by ``config.seed``; zero biases."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape, fan_in in parameter_shapes(config):
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return Model(config, params)


# ---------------------------------------------------------------- loss


def _bce_with_logits(z, t):
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))


def masked_weighted_bce(logits, truth, weights) -> float:
    """Weighted BCE over labels that are definitely positive or negative.

    ``truth`` is a label-state vector (or GroundTruthVector); uncertain and
    missing labels carry zero weight.
    """
    states = truth.as_array() if hasattr(truth, "as_array") else np.asarray(truth)
    weights = np.asarray(weights, dtype=np.float64)
    if (weights <= 0).any():
        raise ValueError("label weights must be positive")
    m = training_mask(states).astype(np.float64)
    denom = (weights * m).sum()
    if denom == 0:
        raise ValueError("all labels are masked; loss is undefined")
    t = (states == LabelState.POSITIVE).astype(np.float64)
    return float((weights * m * _bce_with_logits(logits, t)).sum() / denom)


def _batch_loss_weights(labels, weights):
    """Per-entry coefficients so that sum(A * bce) is the batch mean of per-sample losses."""
    m = training_mask(labels).astype(np.float64) * weights[None, :]
    denom = m.sum(axis=1, keepdims=True)
    valid = denom[:, 0] > 0
    a = np.zeros_like(m)
    a[valid] = m[valid] / denom[valid]
    n_valid = int(valid.sum())
    return (a / n_valid if n_valid else a), n_valid


def masked_weighted_bce_tensor(logits: T.Tensor, labels, weights) -> T.Tensor:
    """Batch mean of :func:`masked_weighted_bce` as a differentiable scalar."""
    coef, n_valid = _batch_loss_weights(np.asarray(labels), np.asarray(weights, dtype=np.float64))
    if n_valid == 0:
        raise ValueError("every sample in the batch has all labels masked")
    t = (np.asarray(labels) == LabelState.POSITIVE).astype(np.float64)
    per_entry = T.sub(T.softplus(logits), T.mul(T.Tensor(t), logits))
    return T.sum(T.mul(T.Tensor(coef), per_entry))


# ---------------------------------------------------------------- training


def train(model: Model, dataset: MultiLabelDataset, config: TrainConfig, weights=None) -> Model:
    """SGD with momentum on the masked weighted BCE; returns a new Model.

    The epoch-mean loss curve is stored in ``provenance["curve"]``.
    """
    if tuple(dataset.image_hw) != tuple(model.config.input_hw):
        raise T.ShapeError(f"dataset images {dataset.image_hw} do not match model input {model.config.input_hw}")
    if config.batch_size > len(dataset):
        raise ValueError(f"batch_size {config.batch_size} exceeds dataset size {len(dataset)}")
    weights = label_frequency_weights(dataset) if weights is None else np.asarray(weights, dtype=np.float64)
    if model.config.input_mean is None:
        pixels = dataset.images.astype(np.float64)
        std = float(pixels.std())
        model = Model(
            replace(model.config, input_mean=float(pixels.mean()), input_std=std if std > 0 else 1.0),
            model.parameters,
            model.thresholds,
            model.provenance,
        )
    params = {k: v.copy() for k, v in model.parameters.items()}
    velocity = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    curve = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            leaves = {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}
            try:
                logits = model.forward(T.Tensor(dataset.images[idx]), leaves)
                loss = masked_weighted_bce_tensor(logits, dataset.labels[idx], weights)
                loss.backward()
            except T.NonFiniteError as exc:
                raise TrainingDivergedError(f"training diverged in epoch {epoch}: {exc}") from None
            for k, leaf in leaves.items():
                g = leaf.grad.astype(np.float64)
                if config.weight_decay:
                    g = g + config.weight_decay * params[k]
                velocity[k] = config.momentum * velocity[k] + g
                params[k] = (params[k] - config.learning_rate * velocity[k]).astype(np.float32)
            total += loss.item() * len(idx)
            seen += len(idx)
        mean_loss = total / seen
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(f"training diverged in epoch {epoch}: loss {mean_loss}")
        curve.append((epoch, mean_loss))
        logger.info("epoch %d loss %.5f", epoch, mean_loss)
    provenance = {
        "dataset_id": dataset.dataset_id,
        "epochs": config.epochs,
        "train_seed": config.seed,
        "batch_size": config.batch_size,
        "learning_rate": config.learning_rate,
        "momentum": config.momentum,
        "weight_decay": config.weight_decay,
        "curve": [[e, l] for e, l in curve],
    }
    return Model(model.config, params, model.thresholds, provenance)


# ---------------------------------------------------------------- prediction


_P_LO = np.finfo(np.float64).tiny
_P_HI = np.nextafter(1.0, 0.0)


def predict_probabilities(model: Model, images, batch_size: int = 512) -> np.ndarray:
    """Sigmoid of the logits as float64, kept strictly inside (0, 1)."""
    z = model.logits(images, batch_size).astype(np.float64)
    return np.clip(T._sigmoid_np(z), _P_LO, _P_HI)


def _youden_candidates(scores):
    u = np.unique(scores)
    return (u[:-1] + u[1:]) / 2.0


def _pick(thresholds, j):
    best = j.max()
    tied = thresholds[j == best]
    dist = np.abs(tied - 0.5)
    return float(tied[dist == dist.min()].min())


def youden_threshold(scores, is_positive) -> float:
    """Threshold maximizing TPR - FPR over midpoints of distinct scores; ties go toward 0.5.

    Predictions count as positive when score >= threshold. Returns 0.5 when
    either class is empty or all scores coincide.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_positive = np.asarray(is_positive, dtype=bool)
    n_pos, n_neg = int(is_positive.sum()), int((~is_positive).sum())
    if n_pos == 0 or n_neg == 0:
        return 0.5
    cand = _youden_candidates(scores)
    if cand.size == 0:
        return 0.5
    pos_sorted = np.sort(scores[is_positive])
    neg_sorted = np.sort(scores[~is_positive])
    tp = n_pos - np.searchsorted(pos_sorted, cand, side="left")
    fp = n_neg - np.searchsorted(neg_sorted, cand, side="left")
    # J scaled by n_pos * n_neg stays integral, so ties compare exactly
    j = tp.astype(np.int64) * n_neg - fp.astype(np.int64) * n_pos
    return _pick(cand, j)


def thresholds_from_probabilities(probs, labels) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    out = np.full(N_LABELS, 0.5)
    for i in range(N_LABELS):
        keep = training_mask(labels[:, i])
        out[i] = youden_threshold(probs[keep, i], labels[keep, i] == LabelState.POSITIVE)
    return out


def calibrate_thresholds(model: Model, validation: MultiLabelDataset) -> np.ndarray:
    """Per-label Youden-optimal thresholds on validation predictions."""
    return thresholds_from_probabilities(predict_probabilities(model, validation.images), validation.labels)


# ---------------------------------------------------------------- persistence


def save_model(model: Model, path) -> Path:
    manifest, offset, blocks = [], 0, []
    for name, arr in model.parameters.items():
        data = arr.astype("<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blocks.append(data)
        offset += len(data)
    header = {
        "architecture": model.config.architecture,
        "input_hw": list(model.config.input_hw),
        "seed": model.config.seed,
        "input_mean": model.config.input_mean,
        "input_std": model.config.input_std,
        "thresholds": None if model.thresholds is None else [float(t) for t in model.thresholds],
        "provenance": model.provenance,
        "parameters": manifest,
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, len(text)))
        fh.write(text)
        for b in blocks:
            fh.write(b)
    return path


def load_model(path, architecture: str | None = None) -> Model:
    """Read a model file; if ``architecture`` is given the file must match it."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 12:
        raise ModelFormatError(f"{path}: truncated header, file ends at offset {len(blob)}")
    if blob[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic {blob[:4]!r} at offset 0")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version} at offset 4")
    if len(blob) < 12 + hlen:
        raise ModelFormatError(f"{path}: truncated header text, expected {hlen} bytes at offset 12")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable header ({exc})") from None
    found = {p["name"]: tuple(p["shape"]) for p in header["parameters"]}
    arch = header["architecture"]
    if architecture is not None and architecture != arch:
        expected_cfg = ModelConfig(architecture, tuple(header["input_hw"]))
        expected = {n: s for n, s, _ in parameter_shapes(expected_cfg)}
        raise ModelFormatError(f"{path}: expected {architecture} parameter shapes {expected}, found {arch} shapes {found}")
    config = ModelConfig(arch, tuple(header["input_hw"]), int(header["seed"]), header.get("input_mean"), header.get("input_std"))
    base = 12 + hlen
    params = {}
    for p in header["parameters"]:
        count = int(np.prod(p["shape"]))
        start = base + p["offset"]
        if start + 4 * count > len(blob):
            raise ModelFormatError(f"{path}: truncated parameter block {p['name']} at offset {start}")
        params[p["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=start).astype(np.float32).reshape(p["shape"])
    end = base + sum(4 * int(np.prod(p["shape"])) for p in header["parameters"])
    if end != len(blob):
        raise ModelFormatError(f"{path}: unexpected trailing data at offset {end}")
    th = header.get("thresholds")
    return Model(config, params, None if th is None else np.array(th, dtype=np.float64), header.get("provenance", {}))
