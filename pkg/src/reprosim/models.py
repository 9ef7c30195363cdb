"""Source-domain classifiers and the query interface the attacker sees.

Every black-box evaluation flows through :class:`QueryChannel`, which
counts queries per account, forwards each query to an optional observer
(the stateful detector), and refuses accounts the observer has banned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .data import LabeledDataset
from .errors import BlockedAccountError, ConfigError, NumericError, ShapeError, TrainingError
from .fileio import load_weights, save_weights


@dataclass
class TrainingMeta:
    seed: int
    epochs: int
    holdout_accuracy: float


@dataclass
class ClassifierConfig:
    hidden: tuple = (512,)
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    holdout_fraction: float = 0.2


class Classifier:
    """A trained feedforward net with softmax output."""

    def __init__(self, net: nk.FeedforwardNet, num_classes: int, meta: TrainingMeta | None = None):
        if not net.is_classifier:
            raise ShapeError("classifier net must end in softmax")
        if net.output_dims != (num_classes,):
            raise ShapeError(f"net outputs {net.output_dims}, expected ({num_classes},)")
        self.net = net
        self.num_classes = num_classes
        self.input_dims = net.input_dims
        self.meta = meta

    def scores(self, x: np.ndarray) -> np.ndarray:
        return nk.net_forward(self.net, x)


def build_classifier_net(input_dims, num_classes: int, hidden, rng: np.random.Generator) -> nk.FeedforwardNet:
    """flatten -> affine(h) -> relu (per hidden width) -> affine(s) -> softmax."""
    layers = []
    dims = tuple(input_dims)
    for width in hidden:
        layers.append(nk.Affine.init(dims, int(width), rng))
        dims = layers[-1].output_dims
        layers.append(nk.Relu(dims))
    layers.append(nk.Affine.init(dims, num_classes, rng))
    layers.append(nk.Softmax((num_classes,)))
    return nk.FeedforwardNet(layers, input_dims)


def _cross_entropy_grads(probs: np.ndarray, labels: np.ndarray):
    """Mean CE loss over the batch and d(loss)/d(probs)."""
    n = probs.shape[0]
    p_true = np.clip(probs[np.arange(n), labels], 1e-12, None)
    loss = float(-np.log(p_true).mean())
    grad = np.zeros_like(probs)
    grad[np.arange(n), labels] = -1.0 / (p_true * n)
    return loss, grad


def train_source_classifier(ds: LabeledDataset, config: ClassifierConfig, seed: int) -> Classifier:
    """Train a classifier on the source domain; deterministic per seed.

    A seeded holdout split provides the reported accuracy. Raises
    TrainingError if the loss goes non-finite.
    """
    clf, _ = train_source_classifier_with_log(ds, config, seed)
    return clf


def train_source_classifier_with_log(ds: LabeledDataset, config: ClassifierConfig, seed: int):
    """As :func:`train_source_classifier`, also returning the per-epoch log.

    Log rows are (epoch, mean training loss, holdout accuracy).
    """
    if len(ds) == 0:
        raise ConfigError("cannot train on an empty dataset")
    init_rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))

    num_classes = ds.num_classes
    net = build_classifier_net(ds.sample_dims, num_classes, config.hidden, init_rng)

    n_holdout = int(round(config.holdout_fraction * len(ds)))
    perm = shuffle_rng.permutation(len(ds))
    holdout_idx, train_idx = perm[:n_holdout], perm[n_holdout:]
    if len(train_idx) == 0:
        raise ConfigError("holdout fraction leaves no training samples")
    train_x, train_y = ds.samples[train_idx], ds.labels[train_idx]
    holdout = ds.subset(holdout_idx) if n_holdout else ds.subset(train_idx)

    state = nk.RmspropState(config.learning_rate)
    log = []
    holdout_acc = 0.0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_x))
        losses = []
        try:
            for start in range(0, len(order) - config.batch_size + 1, config.batch_size):
                batch = order[start : start + config.batch_size]
                xs, ys = train_x[batch], train_y[batch]
                probs = net.forward(xs)
                loss, dprobs = _cross_entropy_grads(probs, ys)
                if not np.isfinite(loss):
                    raise TrainingError(f"classifier loss diverged at epoch {epoch}")
                grads, _ = nk.net_grad(net, xs, dprobs)
                state, new_params = nk.rmsprop_step(state, net.params(), grads)
                net.set_params(new_params)
                losses.append(loss)
        except TrainingError:
            raise
        except NumericError as err:
            raise TrainingError(f"classifier training diverged at epoch {epoch}: {err}") from err
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        clf_tmp = Classifier(net, num_classes)
        holdout_acc = accuracy(clf_tmp, holdout)
        log.append((epoch, epoch_loss, holdout_acc))

    meta = TrainingMeta(seed=seed, epochs=config.epochs, holdout_accuracy=holdout_acc)
    return Classifier(net, num_classes, meta), log


def accuracy(clf: Classifier, ds: LabeledDataset) -> float:
    """Fraction of argmax-correct predictions; empty datasets are an error."""
    if len(ds) == 0:
        raise ConfigError("accuracy over an empty dataset is undefined")
    if ds.labels.max() >= clf.num_classes:
        raise ConfigError("dataset labels exceed classifier classes")
    probs = clf.scores(ds.samples)
    return float((probs.argmax(axis=1) == ds.labels).mean())


@dataclass
class QueryRecord:
    account: int
    index: int
    x: np.ndarray


class QueryChannel:
    """Interception point between users (accounts) and the target model.

    The observer, when attached, sees one QueryRecord per answered query in
    exact call order and returns a verdict; accounts it bans are refused
    before the model is evaluated.
    """

    def __init__(self, target: Classifier, observer=None):
        self.target = target
        self.observer = observer
        self.counts: dict = {}

    def queries_for(self, account) -> int:
        return self.counts.get(account, 0)

    def total_queries(self) -> int:
        return sum(self.counts.values())

    def _check_banned(self, account, answered=None):
        if self.observer is not None and self.observer.is_banned(account):
            raise BlockedAccountError(account, scores=answered)

    def predict_scores(self, account, x: np.ndarray) -> np.ndarray:
        """Answer one query: softmax scores for ``x`` billed to ``account``."""
        self._check_banned(account)
        x = nk.as_tensor(x)
        if x.shape != self.target.input_dims:
            raise ShapeError(f"query shape {x.shape}, model expects {self.target.input_dims}")
        scores = self.target.scores(x)
        index = self.counts.get(account, 0)
        self.counts[account] = index + 1
        if self.observer is not None:
            self.observer.observe(QueryRecord(account, index, x))
        return scores

    def predict_scores_batch(self, account, xs: np.ndarray) -> np.ndarray:
        """Sequential-equivalent batch of queries (scores row per query).

        The model is pure, so outputs are precomputed in one pass; counters
        and observer notifications still run strictly in order, and a ban
        raised mid-batch aborts the remaining queries exactly as a loop of
        predict_scores would (the exception carries the answered rows).
        """
        xs = nk.as_tensor(xs)
        if xs.ndim != len(self.target.input_dims) + 1 or xs.shape[1:] != self.target.input_dims:
            raise ShapeError(f"batch shape {xs.shape}, model expects (n, {self.target.input_dims})")
        self._check_banned(account, answered=np.empty((0, self.target.num_classes)))
        all_scores = self.target.scores(xs)
        if self.observer is None:
            self.counts[account] = self.counts.get(account, 0) + xs.shape[0]
            return all_scores
        # embedding is pure, so observers may precompute it for the batch;
        # observation order, counters and bans stay strictly sequential
        embeddings = None
        if hasattr(self.observer, "embed_batch") and hasattr(self.observer, "observe_embedded"):
            embeddings = self.observer.embed_batch(xs)
        for i in range(xs.shape[0]):
            self._check_banned(account, answered=all_scores[:i].copy())
            index = self.counts.get(account, 0)
            self.counts[account] = index + 1
            if embeddings is not None:
                self.observer.observe_embedded(account, embeddings[i])
            else:
                self.observer.observe(QueryRecord(account, index, xs[i]))
        return all_scores


def classifier_scorer(clf: Classifier):
    """Scoring callable backed by direct (white-box/offline) model access."""
    return clf.scores


def channel_scorer(channel: QueryChannel, account):
    """Scoring callable that issues real queries billed to ``account``."""

    def score(x: np.ndarray) -> np.ndarray:
        if x.ndim == len(channel.target.input_dims) + 1:
            return channel.predict_scores_batch(account, x)
        return channel.predict_scores(account, x)

    return score


def save_classifier(path, clf: Classifier):
    items = nk.net_to_tensors(clf.net)
    meta = clf.meta or TrainingMeta(0, 0, float("nan"))
    items.append(("meta.training", np.array([meta.seed, meta.epochs, meta.holdout_accuracy])))
    items.append(("meta.num_classes", np.array([clf.num_classes])))
    save_weights(path, items)


def load_classifier(path) -> Classifier:
    tensors = load_weights(path)
    net = nk.net_from_tensors(tensors)
    num_classes = int(tensors["meta.num_classes"][0])
    raw = tensors.get("meta.training")
    meta = TrainingMeta(int(raw[0]), int(raw[1]), float(raw[2])) if raw is not None else None
    return Classifier(net, num_classes, meta)
