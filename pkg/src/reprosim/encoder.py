"""Siamese similarity encoder: pair distance, contrastive loss, training.

One tower is trained on both members of every pair (weight sharing by
construction); at inference a single embedding pass suffices. Similar pairs
(label 0) are pulled together by a quadratic term, dissimilar pairs
(label 1) pushed apart by a hinge up to the margin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .data import PairDataset
from .errors import ConfigError, ShapeError, TrainingError
from .fileio import load_weights, save_weights


@dataclass
class EncoderConfig:
    hidden: tuple = (256,)
    embed_dim: int = 32
    margin: float = 1.0
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6

    def __post_init__(self):
        if self.margin <= 0 or not np.isfinite(self.margin):
            raise ConfigError("margin must be finite and positive")


class SimilarityEncoder:
    """Deterministic embedding tower with a contrastive margin."""

    def __init__(self, net: nk.FeedforwardNet, margin: float, meta: dict | None = None):
        if len(net.output_dims) != 1:
            raise ShapeError("encoder must produce a flat embedding")
        if net.is_classifier:
            raise ShapeError("encoder net must not end in softmax")
        self.net = net
        self.margin = float(margin)
        self.meta = meta or {}

    @property
    def embed_dim(self) -> int:
        return self.net.output_dims[0]


def build_encoder_net(input_dims, hidden, embed_dim: int, rng: np.random.Generator) -> nk.FeedforwardNet:
    layers = []
    dims = tuple(input_dims)
    for width in hidden:
        layers.append(nk.Affine.init(dims, int(width), rng))
        dims = layers[-1].output_dims
        layers.append(nk.Relu(dims))
    layers.append(nk.Affine.init(dims, embed_dim, rng))
    return nk.FeedforwardNet(layers, input_dims)


def embed(enc: SimilarityEncoder, x: np.ndarray) -> np.ndarray:
    return nk.net_forward(enc.net, x)


def pair_distance(enc: SimilarityEncoder, x1: np.ndarray, x2: np.ndarray) -> float:
    """Euclidean distance between the two embeddings."""
    return float(np.linalg.norm(embed(enc, x1) - embed(enc, x2)))


def contrastive_loss(enc: SimilarityEncoder, x1, x2, label: int, margin: float | None = None) -> float:
    """Per-pair loss: (1-l)/2 * d^2 + l/2 * max(0, margin - d)^2."""
    if label not in (0, 1):
        raise ConfigError("pair label must be 0 (similar) or 1 (dissimilar)")
    z = enc.margin if margin is None else margin
    d = pair_distance(enc, x1, x2)
    return contrastive_from_distance(d, label, z)


def contrastive_from_distance(d: float, label: int, margin: float) -> float:
    similar_term = 0.5 * d * d
    hinge = max(0.0, margin - d)
    dissimilar_term = 0.5 * hinge * hinge
    return (1 - label) * similar_term + label * dissimilar_term


def contrastive_total(enc: SimilarityEncoder, pairs: PairDataset, margin: float | None = None) -> float:
    """Sum of per-pair losses over the whole pair dataset."""
    z = enc.margin if margin is None else margin
    d, _ = _pair_distances(enc, pairs)
    labels = pairs.labels
    hinge = np.maximum(0.0, z - d)
    return float(np.sum((1 - labels) * 0.5 * d * d + labels * 0.5 * hinge * hinge))


def _pair_distances(enc, pairs: PairDataset):
    e1 = enc.net.forward(pairs.first)
    e2 = enc.net.forward(pairs.second)
    diff = e1 - e2
    return np.linalg.norm(diff, axis=1), diff


def _batch_objective_and_grads(net, first, second, labels, margin, weight_decay):
    """Mean contrastive loss + L2 penalty, with parameter gradients.

    The L2 penalty is 0.5 * weight_decay * sum(w^2) over all parameters.
    Near-zero distances on dissimilar pairs take a zero subgradient (the
    push direction is undefined there).
    """
    n = first.shape[0]
    stacked = np.concatenate([first, second])
    inputs, emb = net.trace(stacked)
    e1, e2 = emb[:n], emb[n:]
    diff = e1 - e2
    d = np.linalg.norm(diff, axis=1)

    hinge = np.maximum(0.0, margin - d)
    per_pair = (1 - labels) * 0.5 * d * d + labels * 0.5 * hinge * hinge
    data_loss = float(per_pair.mean())

    d_dd = (1 - labels) * d - labels * hinge  # d(loss)/d(distance) per pair
    safe = np.where(d > 1e-12, d, 1.0)
    coeff = np.where(d > 1e-12, d_dd / safe, 0.0) / n
    dE1 = coeff[:, None] * diff
    grad_out = np.concatenate([dE1, -dE1])

    param_grads = [None] * len(net.params())
    pos = len(param_grads)
    dy = grad_out
    for layer, layer_in in zip(reversed(net.layers), reversed(inputs)):
        grads, dy = layer.backward(layer_in, dy)
        pos -= len(grads)
        param_grads[pos : pos + len(grads)] = grads

    penalty = 0.0
    for p, g in zip(net.params(), param_grads):
        penalty += 0.5 * weight_decay * float(np.sum(p * p))
        g += weight_decay * p
    return data_loss + penalty, param_grads


def train_encoder(pairs: PairDataset, config: EncoderConfig, seed: int) -> SimilarityEncoder:
    enc, _ = train_encoder_with_log(pairs, config, seed)
    return enc


def train_encoder_with_log(pairs: PairDataset, config: EncoderConfig, seed: int):
    """Train the tower with RMSprop; log rows are (epoch, mean objective)."""
    if len(pairs) == 0:
        raise ConfigError("cannot train an encoder without pairs")
    init_rng = np.random.default_rng(np.random.SeedSequence((seed, 20)))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((seed, 21)))

    input_dims = pairs.first.shape[1:]
    net = build_encoder_net(input_dims, config.hidden, config.embed_dim, init_rng)
    state = nk.RmspropState(config.learning_rate)

    log = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(pairs))
        batch_size = min(config.batch_size, len(pairs))
        losses = []
        for start in range(0, len(order) - batch_size + 1, batch_size):
            batch = order[start : start + batch_size]
            loss, grads = _batch_objective_and_grads(
                net,
                pairs.first[batch],
                pairs.second[batch],
                pairs.labels[batch],
                config.margin,
                config.weight_decay,
            )
            if not np.isfinite(loss):
                raise TrainingError(f"encoder loss diverged at epoch {epoch}")
            state, new_params = nk.rmsprop_step(state, net.params(), grads)
            net.set_params(new_params)
            losses.append(loss)
        log.append((epoch, float(np.mean(losses))))

    meta = {"seed": seed, "epochs": config.epochs}
    return SimilarityEncoder(net, config.margin, meta), log


def encoder_pair_accuracy(enc: SimilarityEncoder, pairs: PairDataset, margin: float | None = None) -> float:
    """Pair classification accuracy thresholding distance at margin / 2.

    Predicts "similar" exactly when the embedded distance is below half the
    margin. The headline numbers reported for this metric are scale- and
    dataset-dependent; treat them as descriptive, not as targets.
    """
    if len(pairs) == 0:
        raise ConfigError("accuracy over an empty pair set is undefined")
    z = enc.margin if margin is None else margin
    d, _ = _pair_distances(enc, pairs)
    predicted = (d >= z / 2).astype(np.int64)  # 1 = dissimilar
    return float((predicted == pairs.labels).mean())


def mean_distances_by_label(enc: SimilarityEncoder, pairs: PairDataset):
    """(mean similar-pair distance, mean dissimilar-pair distance)."""
    d, _ = _pair_distances(enc, pairs)
    sim = d[pairs.labels == 0]
    dis = d[pairs.labels == 1]
    return (
        float(sim.mean()) if len(sim) else float("nan"),
        float(dis.mean()) if len(dis) else float("nan"),
    )


def save_encoder(path, enc: SimilarityEncoder):
    items = nk.net_to_tensors(enc.net)
    items.append(("meta.margin", np.array([enc.margin])))
    save_weights(path, items)


def load_encoder(path) -> SimilarityEncoder:
    tensors = load_weights(path)
    net = nk.net_from_tensors(tensors)
    margin = float(tensors["meta.margin"][0])
    return SimilarityEncoder(net, margin)
