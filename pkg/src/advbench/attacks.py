"""L-infinity attacks on multi-label classifiers.

* :func:`fgsm` - one signed-gradient ascent step on BCE against the ground truth.
* :func:`pgd_untargeted` - iterated ascent with projection onto the eps-ball.
* :func:`pgd_targeted_risk` - iterated descent toward the improbable-label
  vector C(y*) of the clean prediction y*.

Every iterate is clipped to [0, 1] and then projected onto the eps-ball around
the clean input; sign(0) is 0.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from advbench import tensor as T
from advbench.data import (
    N_LABELS,
    CoOccurrenceTables,
    LabelSpace,
    MultiLabelDataset,
    available_mask,
    load_dataset,
    ranking_view,
    save_dataset,
)
from advbench.metrics import attack_loss_value

LOSS_KINDS = ("mse", "bce", "ol")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 1
    alpha: float | None = None
    loss_kind: str = "bce"
    targeted: bool = False
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", self.loss_kind.lower())
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss_kind!r}; choose from {LOSS_KINDS}")
        if self.alpha is not None and self.alpha <= 0 and self.steps > 1:
            raise ValueError("alpha must be > 0 when steps > 1")

    @property
    def step_size(self) -> float:
        return self.alpha if self.alpha is not None else self.epsilon * 2.5 / self.steps


@dataclass(eq=False)
class AdversarialBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    linf: np.ndarray
    config: AttackConfig
    source_model: str
    attack: str = "pgd"
    targets: np.ndarray | None = field(default=None, repr=False)


def attack_loss(kind: str, logits, target, mask) -> float:
    """MSE / BCE / OL for one 18-logit vector; see :mod:`advbench.metrics`."""
    return attack_loss_value(kind, logits, target, mask)


# pair p = (i, j), i != j, has +1 at row i and -1 at row j
_PAIRS = np.array([(i, j) for i in range(N_LABELS) for j in range(N_LABELS) if i != j])
_PAIR_DIFF = np.zeros((N_LABELS, len(_PAIRS)))
_PAIR_DIFF[_PAIRS[:, 0], np.arange(len(_PAIRS))] = 1.0
_PAIR_DIFF[_PAIRS[:, 1], np.arange(len(_PAIRS))] = -1.0


def _ordered_pair_weights(target, mask):
    ti, tj = target[:, _PAIRS[:, 0]], target[:, _PAIRS[:, 1]]
    valid = (ti > tj) & mask[:, _PAIRS[:, 0]] & mask[:, _PAIRS[:, 1]]
    counts = valid.sum(axis=1)
    if (counts == 0).any():
        bad = int(np.flatnonzero(counts == 0)[0])
        raise AttackError(f"OL loss undefined for input {bad}: no ordered target pairs")
    return valid / counts[:, None]


def attack_loss_tensor(kind: str, logits: T.Tensor, target, mask) -> T.Tensor:
    """Sum over the batch of per-input attack losses (differentiable).

    Summing keeps each input's gradient independent of the rest of the batch.
    """
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise AttackError("attack loss needs at least one unmasked label per input")
    if kind == "ol":
        weights = _ordered_pair_weights(target, mask)
        diffs = T.matmul(logits, T.Tensor(_PAIR_DIFF))
        return T.sum(T.mul(T.Tensor(weights), T.relu(T.sub(1.0, diffs))))
    coef = mask / counts
    if kind == "mse":
        d = T.sub(T.sigmoid(logits), T.Tensor(target))
        return T.sum(T.mul(T.Tensor(coef), T.mul(d, d)))
    if kind == "bce":
        per = T.sub(T.softplus(logits), T.mul(T.Tensor(target), logits))
        return T.sum(T.mul(T.Tensor(coef), per))
    raise ValueError(f"unknown loss {kind!r}")


def input_gradient(model, x, target, mask, kind):
    """(loss value, d loss / d x) for a batch of inputs; parameters stay constant."""
    params = {k: T.Tensor(v) for k, v in model.parameters.items()}
    graph = T.Graph(lambda x: attack_loss_tensor(kind, model.forward(x, params), target, mask), ["x"])
    loss = graph.forward(x=x)
    return loss.item(), graph.backward()["x"].data


def _check_inputs(x, epsilon):
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 4:
        raise ValueError(f"inputs must be (N, 1, H, W), got {x.shape}")
    if not np.isfinite(x).all() or x.min() < 0 or x.max() > 1:
        raise ValueError("inputs must be finite and within [0, 1]")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    return x


def _linf(adv, x):
    return np.abs(adv.astype(np.float64) - x.astype(np.float64)).reshape(len(x), -1).max(axis=1)


def fgsm(model, x, truth, epsilon: float, batch_size: int = 256) -> AdversarialBatch:
    """x* = clip(x + eps * sign(grad_x BCE(M(x), truth))) with truth as label states."""
    x = _check_inputs(x, epsilon)
    truth = np.asarray(truth)
    target, mask = ranking_view(truth), available_mask(truth)
    eps = np.float32(epsilon)
    adv = np.empty_like(x)
    for s in range(0, len(x), batch_size):
        sl = slice(s, s + batch_size)
        try:
            _, g = input_gradient(model, x[sl], target[sl], mask[sl], "bce")
        except T.NonFiniteError as exc:
            raise AttackError(f"fgsm: non-finite gradient ({exc})") from None
        adv[sl] = np.clip(x[sl] + eps * np.sign(g), 0.0, 1.0)
    cfg = AttackConfig(float(epsilon), 1, float(epsilon), "bce", False, False, 0)
    return AdversarialBatch(x, adv, _linf(adv, x), cfg, model.model_id, "fgsm")


def _iterate(model, x, target, mask, config, direction, index_offset, batch_size):
    eps = np.float32(config.epsilon)
    alpha = np.float32(config.step_size)
    adv = np.empty_like(x)
    for s in range(0, len(x), batch_size):
        sl = slice(s, s + batch_size)
        x0 = x[sl]
        lo, hi = x0 - eps, x0 + eps
        xt = x0.copy()
        if config.random_start:
            for k in range(len(x0)):
                rng = np.random.default_rng([config.seed, index_offset + s + k])
                noise = rng.uniform(-config.epsilon, config.epsilon, size=x0[k].shape).astype(np.float32)
                xt[k] = np.clip(np.clip(x0[k] + noise, 0.0, 1.0), lo[k], hi[k])
        for step in range(config.steps):
            try:
                _, g = input_gradient(model, xt, target[sl], mask[sl], config.loss_kind)
            except T.NonFiniteError as exc:
                raise AttackError(f"non-finite loss at step {step}: {exc}") from None
            xt = np.clip(np.clip(xt + direction * alpha * np.sign(g), 0.0, 1.0), lo, hi)
        adv[sl] = xt
    return adv


def pgd_untargeted(model, x, truth, config: AttackConfig, index_offset: int = 0, batch_size: int = 256) -> AdversarialBatch:
    """Maximize the attack loss against the ground-truth ranking view (missing labels masked)."""
    if config.targeted:
        raise ValueError("pgd_untargeted needs config.targeted = False")
    x = _check_inputs(x, config.epsilon)
    truth = np.asarray(truth)
    adv = _iterate(model, x, ranking_view(truth), available_mask(truth), config, 1.0, index_offset, batch_size)
    return AdversarialBatch(x, adv, _linf(adv, x), config, model.model_id, "pgd")


def risk_targets(model, x, cooc, batch_size: int = 512):
    """(y*, C(y*)): clean argmax label per input (ties -> lowest index) and its target row."""
    c = cooc.inverse_normalized if isinstance(cooc, CoOccurrenceTables) else np.asarray(cooc, dtype=np.float64)
    top = np.argmax(model.logits(x, batch_size), axis=1)
    return top, c[top]


def pgd_targeted_risk(model, x, cooc, config: AttackConfig, index_offset: int = 0, batch_size: int = 256) -> AdversarialBatch:
    """Descend the attack loss toward C(y*), y* fixed from the clean input."""
    if not config.targeted:
        raise ValueError("pgd_targeted_risk needs config.targeted = True")
    x = _check_inputs(x, config.epsilon)
    _, target = risk_targets(model, x, cooc)
    mask = np.ones(target.shape, dtype=bool)
    adv = _iterate(model, x, target, mask, config, -1.0, index_offset, batch_size)
    return AdversarialBatch(x, adv, _linf(adv, x), config, model.model_id, "pgd-risk", targets=target)


def run_attack(model, x, truth, config: AttackConfig, cooc=None, index_offset: int = 0) -> AdversarialBatch:
    """Dispatch on ``config.targeted``."""
    if config.targeted:
        if cooc is None:
            raise ValueError("targeted attack needs a co-occurrence matrix")
        return pgd_targeted_risk(model, x, cooc, config, index_offset)
    return pgd_untargeted(model, x, truth, config, index_offset)


# ---------------------------------------------------------------- persistence


def _manifest_path(path) -> Path:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix == ".xrds" else path
    return stem.parent / (stem.name + ".manifest.txt")


def save_adversarial(batch: AdversarialBatch, labels, path, label_space: LabelSpace | None = None) -> Path:
    """Adversarial images as a dataset file plus a text manifest with per-input L-inf norms."""
    ds = MultiLabelDataset(batch.adversarials, labels, label_space or LabelSpace())
    save_dataset(ds, path)
    buf = io.StringIO()
    buf.write("# advbench adversarial manifest v1\n")
    buf.write(f"attack: {batch.attack}\n")
    buf.write(f"source_model: {batch.source_model}\n")
    for key, value in asdict(batch.config).items():
        buf.write(f"{key}: {value!r}\n" if isinstance(value, float) else f"{key}: {value}\n")
    buf.write(f"step_size: {batch.config.step_size!r}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "linf"])
    for i, v in enumerate(batch.linf):
        writer.writerow([i, repr(float(v))])
    _manifest_path(path).write_text(buf.getvalue())
    return Path(path)


def load_adversarial(path):
    """Return (dataset of adversarial images, manifest dict, per-input L-inf norms)."""
    ds = load_dataset(path)
    meta, norms = {}, []
    lines = _manifest_path(path).read_text().splitlines()
    it = iter(lines)
    for line in it:
        if line.startswith("#"):
            continue
        if line == "index,linf":
            break
        key, _, value = line.partition(": ")
        meta[key] = value
    for line in it:
        norms.append(float(line.split(",")[1]))
    return ds, meta, np.array(norms)
