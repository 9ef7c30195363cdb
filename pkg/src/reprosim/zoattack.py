"""Black-box reprogramming via one-sided averaged gradient estimation.

The estimator probes the loss along random unit directions around the
current programmed input and scales the loss differences back into a
gradient estimate; each per-sample estimate costs exactly
``directions + 1`` queries (one shared baseline). The attack loop mirrors
the white-box one with the estimate substituted for the true gradient, and
rotates to a fresh account whenever the defense bans the current one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset, PaddingSpec
from .errors import AttackAbortedError, BlockedAccountError, ConfigError, NumericError
from .models import QueryChannel
from .reprogram import (
    AdversarialProgram,
    LabelMapping,
    apply_program_batch,
    focal_loss,
    grad_to_weights,
    mapping_score_matrix,
)


@dataclass
class ZOConfig:
    """Estimator knobs: directions per estimate, smoothing, scaling."""

    directions: int = 30
    smoothing: float = 0.1
    scale: float | None = None  # None -> input dimension
    mask_directions: bool = False

    def __post_init__(self):
        if self.directions < 1:
            raise ConfigError("need at least one direction per estimate")
        if self.smoothing <= 0:
            raise ConfigError("smoothing must be positive")
        if self.scale is not None and self.scale <= 0:
            raise ConfigError("scale must be positive")


@dataclass
class AttackBudget:
    accounts_used: int = 0
    queries: int = 0
    detections: int = 0


def sample_unit_directions(dim: int, count: int, rng) -> np.ndarray:
    """(count, dim) i.i.d. unit vectors: normalized standard Gaussians."""
    if dim < 1:
        raise ConfigError("dimension must be positive")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(np.random.SeedSequence(rng))
    u = rng.standard_normal((count, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _masked_directions(u: np.ndarray, mask_flat: np.ndarray) -> np.ndarray:
    projected = u * mask_flat[None, :]
    norms = np.linalg.norm(projected, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericError("direction fully outside the mask support")
    return projected / norms


def assemble_estimate(baseline_loss: float, direction_losses: np.ndarray, u: np.ndarray, cfg: ZOConfig) -> np.ndarray:
    """Scaled sum of loss differences along the probed directions (flat)."""
    dim = u.shape[1]
    scale = (cfg.scale if cfg.scale is not None else float(dim)) / (cfg.directions * cfg.smoothing)
    return scale * ((direction_losses - baseline_loss)[:, None] * u).sum(axis=0)


def estimate_gradient_from_losses(loss_fn, x0: np.ndarray, cfg: ZOConfig, rng, mask: np.ndarray | None = None) -> np.ndarray:
    """Estimate the gradient of ``loss_fn`` at ``x0``.

    ``loss_fn`` maps a stacked batch (m, *x0.shape) to (m,) losses and is
    evaluated once on directions + 1 rows (baseline first).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    dim = x0.size
    u = sample_unit_directions(dim, cfg.directions, rng)
    if cfg.mask_directions:
        if mask is None:
            raise ConfigError("mask_directions requires a mask")
        u = _masked_directions(u, np.asarray(mask, dtype=np.float64).ravel())
    rows = np.concatenate([x0[None], x0[None] + cfg.smoothing * u.reshape((cfg.directions,) + x0.shape)])
    losses = np.asarray(loss_fn(rows), dtype=np.float64)
    if losses.shape != (cfg.directions + 1,):
        raise ConfigError(f"loss_fn returned shape {losses.shape}, expected ({cfg.directions + 1},)")
    return assemble_estimate(losses[0], losses[1:], u, cfg).reshape(x0.shape)


def _programmed_losses(scores: np.ndarray, ys: np.ndarray, mapping: LabelMapping, gamma: float) -> np.ndarray:
    mapped = mapping_score_matrix(scores, mapping)
    p = mapped[np.arange(len(ys)), ys]
    return np.asarray(focal_loss(p, gamma))


def zo_estimate_gradient(
    channel: QueryChannel,
    account,
    x_target: np.ndarray,
    prog: AdversarialProgram,
    mapping: LabelMapping,
    y: int,
    cfg: ZOConfig,
    rng,
    spec: PaddingSpec,
    gamma: float = 2.0,
) -> np.ndarray:
    """One-sample gradient estimate; issues exactly directions + 1 queries."""
    base = apply_program_batch(np.asarray(x_target, dtype=np.float64)[None], prog, spec)[0]
    ys = np.full(cfg.directions + 1, y, dtype=np.int64)

    def loss_fn(rows):
        scores = channel.predict_scores_batch(account, rows)
        return _programmed_losses(scores, ys[: len(rows)], mapping, gamma)

    mask = prog.mask if cfg.mask_directions else None
    return estimate_gradient_from_losses(loss_fn, base, cfg, rng, mask=mask)


class _QueryDriver:
    """Issues attack queries, rotating to the next account on a ban."""

    def __init__(self, channel: QueryChannel, accounts, trace=None):
        self.channel = channel
        self.accounts = list(accounts)
        if not self.accounts:
            raise ConfigError("at least one attacker account is required")
        self.pos = 0
        self.used = []
        self.query_index = 0
        self.trace = trace
        self._start_queries = {a: channel.queries_for(a) for a in self.accounts}
        obs = channel.observer
        self._start_detections = {
            a: obs.detections_for(a) if obs is not None and hasattr(obs, "detections_for") else 0
            for a in self.accounts
        }

    @property
    def account(self):
        return self.accounts[self.pos]

    def scores(self, rows: np.ndarray):
        """Answer every row, rotating accounts as bans land.

        Returns (scores, per-row answering account).
        """
        collected = []
        row_accounts = []
        remaining = rows
        while len(remaining):
            try:
                got = self.channel.predict_scores_batch(self.account, remaining)
            except BlockedAccountError as err:
                answered = np.asarray(err.scores)
                if len(answered):
                    collected.append(answered)
                    row_accounts.extend([self.account] * len(answered))
                    if self.account not in self.used:
                        self.used.append(self.account)
                remaining = remaining[len(answered) :]
                self.pos += 1
                if self.pos >= len(self.accounts):
                    raise
                continue
            collected.append(got)
            row_accounts.extend([self.account] * len(got))
            if self.account not in self.used:
                self.used.append(self.account)
            remaining = remaining[:0]
        scores = np.concatenate(collected) if collected else np.empty((0, self.channel.target.num_classes))
        return scores, row_accounts

    def record(self, purposes, losses, row_accounts, epoch, batch):
        if self.trace is None:
            self.query_index += len(losses)
            return
        for purpose, loss, acct in zip(purposes, losses, row_accounts):
            self.trace((self.query_index, acct, epoch, batch, purpose, float(loss)))
            self.query_index += 1

    def budget(self) -> AttackBudget:
        queries = sum(self.channel.queries_for(a) - self._start_queries[a] for a in self.accounts)
        obs = self.channel.observer
        detections = 0
        if obs is not None and hasattr(obs, "detections_for"):
            detections = sum(obs.detections_for(a) - self._start_detections[a] for a in self.accounts)
        return AttackBudget(accounts_used=len(self.used), queries=queries, detections=detections)


def blackbox_reprogram(
    channel: QueryChannel,
    accounts,
    train_ds: LabeledDataset,
    mapping: LabelMapping,
    spec: PaddingSpec,
    cfg: ZOConfig,
    step_size: float = 0.05,
    epochs: int = 10,
    batch_size: int = 32,
    seed: int = 0,
    gamma: float = 2.0,
    raw_update: bool = False,
    init_weights: np.ndarray | None = None,
    trace=None,
):
    """Query-only reprogramming: the white-box loop with estimated gradients.

    Per batch, each sample contributes a (directions + 1)-query estimate
    around the current programmed input (baseline reused across directions);
    estimates are averaged, chained through the reparameterization (unless
    ``raw_update``), and applied to the program weights. Epoch-end losses are
    measured through the channel too, and decide the best program returned.

    Returns (best program, AttackBudget, loss curve of (epoch, loss)).
    Raises AttackAbortedError if every account gets banned; the exception
    carries the best program so far and the spent budget.
    """
    if len(train_ds) == 0:
        raise ConfigError("cannot reprogram with an empty training set")
    if batch_size < 1 or epochs < 0:
        raise ConfigError("batch size must be >= 1 and epochs >= 0")
    init_rng = np.random.default_rng(np.random.SeedSequence((seed, 10)))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((seed, 11)))
    direction_rng = np.random.default_rng(np.random.SeedSequence((seed, 12)))

    mask = spec.mask()
    if init_weights is None:
        prog = AdversarialProgram.random_init(mask, init_rng)
    else:
        prog = AdversarialProgram(np.asarray(init_weights, dtype=np.float64).copy(), mask)

    driver = _QueryDriver(channel, accounts, trace=trace)
    dim = int(np.prod(mask.shape))
    mask_flat = mask.ravel()
    q = cfg.directions

    best_prog, best_loss = prog.copy(), float("inf")
    curve = []
    xs, ys = train_ds.samples, train_ds.labels
    n = len(train_ds)

    try:
        for epoch in range(1, epochs + 1):
            order = shuffle_rng.permutation(n)
            for b in range(n // batch_size):
                batch = order[b * batch_size : (b + 1) * batch_size]
                programmed = apply_program_batch(xs[batch], prog, spec)
                u = sample_unit_directions(dim, len(batch) * q, direction_rng)
                if cfg.mask_directions:
                    u = _masked_directions(u, mask_flat)
                u = u.reshape(len(batch), q, dim)

                rows = np.empty((len(batch) * (q + 1),) + mask.shape)
                row_ys = np.empty(len(batch) * (q + 1), dtype=np.int64)
                purposes = []
                for i in range(len(batch)):
                    base = programmed[i]
                    start = i * (q + 1)
                    rows[start] = base
                    rows[start + 1 : start + q + 1] = base[None] + cfg.smoothing * u[i].reshape((q,) + mask.shape)
                    row_ys[start : start + q + 1] = ys[batch[i]]
                    purposes.append("baseline")
                    purposes.extend(["direction"] * q)

                scores, row_accounts = driver.scores(rows)
                losses = _programmed_losses(scores, row_ys, mapping, gamma)
                driver.record(purposes, losses, row_accounts, epoch, b)

                g_hat = np.zeros(dim)
                for i in range(len(batch)):
                    start = i * (q + 1)
                    g_hat += assemble_estimate(losses[start], losses[start + 1 : start + q + 1], u[i], cfg)
                g_hat = g_hat.reshape(mask.shape) / len(batch)

                step = g_hat if raw_update else grad_to_weights(g_hat, prog)
                prog = AdversarialProgram(prog.weights - step_size * step, prog.mask)

            eval_rows = apply_program_batch(xs, prog, spec)
            eval_scores, eval_accounts = driver.scores(eval_rows)
            eval_losses = _programmed_losses(eval_scores, ys, mapping, gamma)
            driver.record(["eval"] * n, eval_losses, eval_accounts, epoch, -1)
            loss = float(eval_losses.mean())
            if not np.isfinite(loss):
                raise NumericError(f"black-box loss diverged at epoch {epoch}")
            curve.append((epoch, loss))
            if loss < best_loss:
                best_loss = loss
                best_prog = prog.copy()
    except BlockedAccountError:
        raise AttackAbortedError(
            "all attacker accounts banned", program=best_prog, budget=driver.budget()
        )
    return best_prog, driver.budget(), curve


def finetune_from_surrogate(
    surrogate_prog: AdversarialProgram,
    channel: QueryChannel,
    accounts,
    train_ds: LabeledDataset,
    mapping: LabelMapping,
    spec: PaddingSpec,
    cfg: ZOConfig,
    step_size: float = 0.05,
    epochs: int = 10,
    batch_size: int = 32,
    seed: int = 0,
    gamma: float = 2.0,
    raw_update: bool = False,
    trace=None,
):
    """Black-box run initialized from a program crafted on a surrogate."""
    if not np.array_equal(surrogate_prog.mask, spec.mask()):
        raise ConfigError("surrogate program mask does not match the padding spec")
    return blackbox_reprogram(
        channel,
        accounts,
        train_ds,
        mapping,
        spec,
        cfg,
        step_size=step_size,
        epochs=epochs,
        batch_size=batch_size,
        seed=seed,
        gamma=gamma,
        raw_update=raw_update,
        init_weights=surrogate_prog.weights,
        trace=trace,
    )
