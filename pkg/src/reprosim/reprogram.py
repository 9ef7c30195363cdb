"""Adversarial program, label-group scoring, focal loss, white-box attack.

The program is a frame-shaped universal perturbation: free parameters
``weights`` squashed through tanh and multiplied by a binary ``mask`` that
is zero over the embedded target image. Because tanh(0) = 0 and the mask is
binary, tanh(weights * mask) == tanh(weights) * mask exactly, so the
perturbed input always stays inside [-1, 1].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .data import LabeledDataset, PaddingSpec, pad_batch
from .errors import ConfigError, InvariantError, NumericError, ShapeError
from .fileio import load_weights, save_weights
from .models import Classifier, classifier_scorer


@dataclass(frozen=True)
class LabelMapping:
    """Disjoint groups of source labels, one group per target label."""

    groups: tuple

    def __post_init__(self):
        groups = tuple(tuple(int(v) for v in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        if not groups:
            raise ConfigError("mapping needs at least one group")
        size = len(groups[0])
        seen = set()
        for g in groups:
            if len(g) != size or size == 0:
                raise ConfigError("all groups must have the same positive size")
            if seen & set(g):
                raise ConfigError("groups must be pairwise disjoint")
            seen.update(g)

    @property
    def num_targets(self) -> int:
        return len(self.groups)

    @property
    def group_size(self) -> int:
        return len(self.groups[0])

    @classmethod
    def consecutive_blocks(cls, num_targets: int, group_size: int, num_source: int) -> "LabelMapping":
        """Assign source labels 0..t*|K|-1 to targets in consecutive blocks."""
        if num_targets * group_size > num_source:
            raise ConfigError(
                f"{num_targets} groups of {group_size} exceed {num_source} source labels"
            )
        groups = tuple(
            tuple(range(t * group_size, (t + 1) * group_size)) for t in range(num_targets)
        )
        return cls(groups)

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["target_label", "source_label"])
            for t, group in enumerate(self.groups):
                for s in group:
                    writer.writerow([t, s])

    @classmethod
    def load_csv(cls, path) -> "LabelMapping":
        by_target: dict = {}
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != ["target_label", "source_label"]:
                raise ConfigError(f"unexpected mapping header {header}")
            for row in reader:
                by_target.setdefault(int(row[0]), []).append(int(row[1]))
        groups = tuple(tuple(by_target[t]) for t in sorted(by_target))
        return cls(groups)


class AdversarialProgram:
    """Program parameters plus the binary support mask."""

    def __init__(self, weights: np.ndarray, mask: np.ndarray):
        self.weights = nk.as_tensor(weights)
        self.mask = nk.as_tensor(mask)
        if self.weights.shape != self.mask.shape:
            raise ShapeError("weights and mask shapes differ")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise InvariantError("mask must be binary")

    @classmethod
    def zeros(cls, mask: np.ndarray) -> "AdversarialProgram":
        return cls(np.zeros_like(np.asarray(mask, dtype=np.float64)), mask)

    @classmethod
    def random_init(cls, mask: np.ndarray, rng: np.random.Generator, scale: float = 0.01):
        mask = np.asarray(mask, dtype=np.float64)
        return cls(rng.uniform(-scale, scale, size=mask.shape), mask)

    def copy(self) -> "AdversarialProgram":
        return AdversarialProgram(self.weights.copy(), self.mask)

    def delta(self) -> np.ndarray:
        return program_delta(self)


def program_delta(prog: AdversarialProgram) -> np.ndarray:
    """tanh(weights) * mask, recomputed from the current parameters."""
    if not np.isin(prog.mask, (0.0, 1.0)).all():
        raise InvariantError("mask must be binary")
    return np.tanh(prog.weights) * prog.mask


def apply_program(x_target: np.ndarray, prog: AdversarialProgram, spec: PaddingSpec) -> np.ndarray:
    """Zero-pad the target sample and add the program perturbation."""
    return apply_program_batch(np.asarray(x_target, dtype=np.float64)[None], prog, spec)[0]


def apply_program_batch(xs: np.ndarray, prog: AdversarialProgram, spec: PaddingSpec) -> np.ndarray:
    padded = pad_batch(xs, spec)
    if padded.shape[1:] != prog.weights.shape:
        raise ShapeError(f"program shape {prog.weights.shape} does not match frame {padded.shape[1:]}")
    return padded + program_delta(prog)[None]


def mapping_score(scores: np.ndarray, mapping: LabelMapping, target_label: int) -> float:
    """Mean confidence over the source-label group mapped to ``target_label``."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ShapeError("mapping_score takes a single score vector")
    if not 0 <= target_label < mapping.num_targets:
        raise ConfigError(f"target label {target_label} out of range")
    return float(scores[list(mapping.groups[target_label])].mean())


def mapping_score_matrix(scores: np.ndarray, mapping: LabelMapping) -> np.ndarray:
    """(n, t) matrix of group-mean confidences for a batch of score rows."""
    scores = np.asarray(scores, dtype=np.float64)
    cols = [scores[:, list(g)].mean(axis=1) for g in mapping.groups]
    return np.stack(cols, axis=1)


def focal_loss(p: float, gamma: float = 2.0) -> float:
    """-(1-p)^gamma * ln(p) with p clamped to [1e-12, 1]."""
    if gamma < 0 or not np.isfinite(gamma):
        raise ConfigError("focusing exponent must be finite and non-negative")
    p = np.asarray(p, dtype=np.float64)
    if np.any(p > 1.0):
        raise ConfigError("confidence above 1 passed to focal loss")
    p = np.clip(p, 1e-12, 1.0)
    out = -((1.0 - p) ** gamma) * np.log(p)
    return float(out) if out.ndim == 0 else out


def focal_loss_grad(p: np.ndarray, gamma: float = 2.0) -> np.ndarray:
    """d/dp of the focal loss, with the same clamp as :func:`focal_loss`."""
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-12, 1.0)
    return gamma * (1.0 - p) ** (gamma - 1.0) * np.log(p) - (1.0 - p) ** gamma / p


def _as_scorer(model):
    if isinstance(model, Classifier):
        return classifier_scorer(model)
    if callable(model):
        return model
    raise ConfigError("expected a Classifier or a scoring callable")


def batch_losses(prog, xs, ys, mapping, scorer, spec: PaddingSpec, gamma: float = 2.0) -> np.ndarray:
    """Per-sample focal losses of programmed inputs under the scorer."""
    scorer = _as_scorer(scorer)
    programmed = apply_program_batch(xs, prog, spec)
    scores = scorer(programmed)
    mapped = mapping_score_matrix(scores, mapping)
    p = mapped[np.arange(len(ys)), np.asarray(ys)]
    return np.asarray(focal_loss(p, gamma))


def reprogram_loss(prog, ds_or_samples, mapping, scorer, spec: PaddingSpec, gamma: float = 2.0, labels=None) -> float:
    """Mean focal loss over a batch of target samples."""
    if isinstance(ds_or_samples, LabeledDataset):
        xs, ys = ds_or_samples.samples, ds_or_samples.labels
    else:
        xs, ys = ds_or_samples, labels
    if len(xs) == 0:
        raise ConfigError("loss over an empty batch is undefined")
    return float(batch_losses(prog, xs, ys, mapping, scorer, spec, gamma).mean())


def reprogram_accuracy(prog, ds: LabeledDataset, mapping: LabelMapping, scorer, spec: PaddingSpec) -> float:
    """Fraction of samples whose best mapped score hits the true target label."""
    if len(ds) == 0:
        raise ConfigError("accuracy over an empty dataset is undefined")
    scorer = _as_scorer(scorer)
    programmed = apply_program_batch(ds.samples, prog, spec)
    mapped = mapping_score_matrix(scorer(programmed), mapping)
    return float((mapped.argmax(axis=1) == ds.labels).mean())


def input_loss_grads(clf: Classifier, programmed: np.ndarray, ys, mapping: LabelMapping, gamma: float):
    """White-box per-sample loss and input gradients for programmed inputs.

    Returns (losses (n,), input_grads (n, *input_dims)); gradients flow
    through softmax, group averaging, and the focal loss.
    """
    probs = clf.scores(programmed)
    mapped = mapping_score_matrix(probs, mapping)
    ys = np.asarray(ys)
    n = len(ys)
    p = mapped[np.arange(n), ys]
    losses = np.asarray(focal_loss(p, gamma))
    dp = focal_loss_grad(p, gamma)
    dscores = np.zeros_like(probs)
    group_size = mapping.group_size
    for t, group in enumerate(mapping.groups):
        rows = np.flatnonzero(ys == t)
        if len(rows):
            dscores[np.ix_(rows, list(group))] = (dp[rows] / group_size)[:, None]
    _, input_grads = nk.net_grad(clf.net, programmed, dscores)
    return losses, input_grads


def grad_to_weights(input_grad: np.ndarray, prog: AdversarialProgram) -> np.ndarray:
    """Chain an input-space gradient through delta = tanh(weights) * mask."""
    t = np.tanh(prog.weights)
    return input_grad * prog.mask * (1.0 - t * t)


def whitebox_reprogram(
    clf: Classifier,
    train_ds: LabeledDataset,
    mapping: LabelMapping,
    spec: PaddingSpec,
    step_size: float = 0.05,
    epochs: int = 10,
    batch_size: int = 32,
    seed: int = 0,
    gamma: float = 2.0,
    raw_update: bool = False,
    init_weights: np.ndarray | None = None,
):
    """Gradient-descent reprogramming with full model access.

    Per epoch: shuffle, iterate batches, average per-sample input gradients,
    step the program weights, re-derive the perturbation; at epoch end the
    loss over the whole training set decides the best program kept. With
    ``raw_update`` the input-space gradient is applied to the weights as-is
    instead of being chained through the tanh/mask reparameterization.

    Returns (best program, loss curve) where curve[i] = (epoch, loss) and
    epoch 0 is the initial program.
    """
    if len(train_ds) == 0:
        raise ConfigError("cannot reprogram with an empty training set")
    if batch_size < 1 or epochs < 0:
        raise ConfigError("batch size must be >= 1 and epochs >= 0")
    init_rng = np.random.default_rng(np.random.SeedSequence((seed, 10)))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((seed, 11)))

    mask = spec.mask()
    if init_weights is None:
        prog = AdversarialProgram.random_init(mask, init_rng)
    else:
        prog = AdversarialProgram(np.asarray(init_weights, dtype=np.float64).copy(), mask)

    scorer = classifier_scorer(clf)
    loss = reprogram_loss(prog, train_ds, mapping, scorer, spec, gamma)
    best_prog, best_loss = prog.copy(), loss
    curve = [(0, loss)]

    xs, ys = train_ds.samples, train_ds.labels
    n = len(train_ds)
    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(n)
        for b in range(n // batch_size):
            batch = order[b * batch_size : (b + 1) * batch_size]
            programmed = apply_program_batch(xs[batch], prog, spec)
            _, input_grads = input_loss_grads(clf, programmed, ys[batch], mapping, gamma)
            g = input_grads.mean(axis=0)
            step = g if raw_update else grad_to_weights(g, prog)
            prog = AdversarialProgram(prog.weights - step_size * step, prog.mask)
        loss = reprogram_loss(prog, train_ds, mapping, scorer, spec, gamma)
        if not np.isfinite(loss):
            raise NumericError(f"reprogramming loss diverged at epoch {epoch}")
        curve.append((epoch, loss))
        if loss < best_loss:
            best_loss = loss
            best_prog = prog.copy()
    return best_prog, curve


def save_program(path, prog: AdversarialProgram):
    save_weights(path, [("W", prog.weights), ("M", prog.mask)])


def load_program(path) -> AdversarialProgram:
    tensors = load_weights(path)
    try:
        return AdversarialProgram(tensors["W"], tensors["M"])
    except KeyError as e:
        raise ConfigError(f"program file lacks tensor {e}")
