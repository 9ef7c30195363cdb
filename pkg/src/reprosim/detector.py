"""Stateful query-stream defense: per-account buffers and k-NN distance test.

Each account's queries are embedded and buffered. Once the buffer holds at
least k embeddings, every further query is compared to its k nearest
buffered neighbors; a mean distance strictly below the threshold flags the
query, increments the detection counter, and clears the buffer (the flagged
embedding is discarded with it). With an infinite buffer and this clearing
rule, detections can never exceed floor(queries / (k + 1)); that bound is
checked at runtime after every observation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .encoder import SimilarityEncoder, embed
from .errors import ConfigError, InvariantError, UndefinedStatError


@dataclass
class DetectorConfig:
    k: int
    threshold: float
    encoder: SimilarityEncoder
    ban_on_detect: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.threshold <= 0:
            raise ConfigError("threshold must be positive")


class DetectorState:
    """Per-account embedding buffer plus query/detection counters."""

    def __init__(self, embed_dim: int):
        self.embed_dim = embed_dim
        self._buf = np.empty((64, embed_dim))
        self.size = 0
        self.queries = 0
        self.detections = 0

    @property
    def buffer(self) -> np.ndarray:
        return self._buf[: self.size]

    def _append(self, e: np.ndarray):
        if self.size == len(self._buf):
            grown = np.empty((2 * len(self._buf), self.embed_dim))
            grown[: self.size] = self._buf
            self._buf = grown
        self._buf[self.size] = e
        self.size += 1

    def _clear_buffer(self):
        self.size = 0


PASS, FLAGGED = "pass", "flagged"


def _mean_knn_distance(buffer: np.ndarray, e: np.ndarray, k: int) -> float:
    dists = np.linalg.norm(buffer - e[None, :], axis=1)
    if len(dists) > k:
        dists = np.partition(dists, k - 1)[:k]
    return float(dists.mean())


def observe(state: DetectorState, cfg: DetectorConfig, x: np.ndarray) -> str:
    """Process one raw query; returns "pass" or "flagged"."""
    e = embed(cfg.encoder, x)
    return observe_embedding(state, cfg, e)


def observe_embedding(state: DetectorState, cfg: DetectorConfig, e: np.ndarray, log=None, account=None) -> str:
    """Detector state machine on a precomputed embedding."""
    buffer_before = state.size
    if state.size < cfg.k:
        state._append(e)
        verdict = PASS
        mean_dist = None
    else:
        mean_dist = _mean_knn_distance(state.buffer, e, cfg.k)
        if mean_dist < cfg.threshold:  # ties pass
            state.detections += 1
            state._clear_buffer()
            verdict = FLAGGED
        else:
            state._append(e)
            verdict = PASS
    state.queries += 1
    if state.detections > state.queries // (cfg.k + 1):
        raise InvariantError(
            f"detections {state.detections} exceed floor({state.queries}/{cfg.k + 1})"
        )
    if log is not None:
        log.append((account, state.queries - 1, buffer_before, mean_dist, verdict))
    return verdict


def reset(state: DetectorState, zero_counters: bool = False) -> DetectorState:
    """Clear the buffer; optionally zero the counters (fresh account)."""
    state._clear_buffer()
    if zero_counters:
        state.queries = 0
        state.detections = 0
    return state


@dataclass
class DetectionStats:
    queries: int
    detections: int
    rate: float  # detections / queries
    normalized_rate: float  # (k + 1) * rate, in [0, 1]


def stats(state_or_detections, k: int, queries: int | None = None) -> DetectionStats:
    """Detection rate and its (k+1)-normalized form.

    Accepts either a DetectorState or raw ``(detections, k, queries)``.
    """
    if isinstance(state_or_detections, DetectorState):
        d, q = state_or_detections.detections, state_or_detections.queries
    else:
        d, q = int(state_or_detections), int(queries)
    if q <= 0:
        raise UndefinedStatError("stats undefined with zero queries")
    rate = d / q
    normalized = (k + 1) * rate
    if not 0.0 <= normalized <= 1.0 + 1e-12:
        raise InvariantError(f"normalized detection rate {normalized} outside [0, 1]")
    return DetectionStats(q, d, rate, min(normalized, 1.0))


class StatefulDetector:
    """Multi-account detector service used as a query-channel observer.

    Keeps one DetectorState per account, bans accounts on detection when
    configured to, and optionally records a per-query log of
    (account, query index, buffer size before, mean k-NN distance or None
    during warm-up, verdict).
    """

    def __init__(self, cfg: DetectorConfig, keep_log: bool = False):
        self.cfg = cfg
        self.states: dict = {}
        self.banned: set = set()
        self.log: list | None = [] if keep_log else None

    def state_for(self, account) -> DetectorState:
        if account not in self.states:
            self.states[account] = DetectorState(self.cfg.encoder.embed_dim)
        return self.states[account]

    def is_banned(self, account) -> bool:
        return account in self.banned

    def detections_for(self, account) -> int:
        state = self.states.get(account)
        return state.detections if state else 0

    def queries_for(self, account) -> int:
        state = self.states.get(account)
        return state.queries if state else 0

    def observe(self, record) -> str:
        """Channel observer hook: record has .account and .x."""
        e = embed(self.cfg.encoder, record.x)
        return self._observe_embedding(record.account, e)

    def embed_batch(self, xs: np.ndarray) -> np.ndarray:
        """Pure batched embedding, used by the channel's batch fast path."""
        return self.cfg.encoder.net.forward(xs)

    def observe_embedded(self, account, e: np.ndarray) -> str:
        return self._observe_embedding(account, e)

    def _observe_embedding(self, account, e) -> str:
        state = self.state_for(account)
        verdict = observe_embedding(state, self.cfg, e, log=self.log, account=account)
        if verdict == FLAGGED and self.cfg.ban_on_detect:
            self.banned.add(account)
        return verdict

    def total_detections(self) -> int:
        return sum(s.detections for s in self.states.values())

    def total_queries(self) -> int:
        return sum(s.queries for s in self.states.values())


def noreset_knn_distances(encoder: SimilarityEncoder, samples: np.ndarray, k: int) -> np.ndarray:
    """Mean k-NN distance of each query against all prior ones, no clearing.

    ``samples`` are streamed in the given order; the first k positions only
    warm the buffer up and contribute no distance.
    """
    n = len(samples)
    if n <= k:
        raise ConfigError(f"need more than k={k} samples, got {n}")
    embeddings = encoder.net.forward(samples)
    out = np.empty(n - k)
    for i in range(k, n):
        out[i - k] = _mean_knn_distance(embeddings[:i], embeddings[i], k)
    return out


def calibrate_threshold(
    encoder: SimilarityEncoder, benign: LabeledDataset, k: int, target_fpr: float, seed: int
) -> float:
    """Threshold whose no-reset false-positive rate on a benign stream is
    at most ``target_fpr``.

    The benign set is streamed in a seeded random permutation with no buffer
    clearing; the returned threshold is the lower-tail quantile of the
    recorded mean k-NN distances (flagging uses a strict comparison, so
    target_fpr = 0 lands strictly below the minimum).
    """
    if not 0.0 <= target_fpr <= 1.0:
        raise ConfigError("target_fpr must be in [0, 1]")
    if len(benign) <= k:
        raise ConfigError(f"benign dataset too small: need more than k={k} samples")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 30)))
    order = rng.permutation(len(benign))
    distances = np.sort(noreset_knn_distances(encoder, benign.samples[order], k))
    m = len(distances)
    if target_fpr >= 1.0:
        return float(np.nextafter(distances[-1], np.inf))
    flag_count = int(np.floor(target_fpr * m))
    if flag_count == 0:
        return float(np.nextafter(distances[0], -np.inf))
    return float(distances[flag_count])


def measure_noreset_fpr(
    encoder: SimilarityEncoder, benign: LabeledDataset, k: int, threshold: float, seed: int
) -> float:
    """Fraction of post-warm-up benign queries a no-reset stream would flag.

    Streams the same permutation calibrate_threshold builds for this seed,
    so re-measuring with the calibration seed replays its stream exactly;
    any other seed gives an independent estimate.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 30)))
    order = rng.permutation(len(benign))
    distances = noreset_knn_distances(encoder, benign.samples[order], k)
    return float((distances < threshold).mean())
