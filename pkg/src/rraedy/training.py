"""Training loops: fixed-rank descent and the adaptive rank schedule.

The adaptive schedule trains at full rank until the loss stagnates, records
that loss as the target, then repeatedly decrements the bottleneck rank.
Each rank that reaches the target (within a slack factor) is checkpointed;
the first rank that stagnates short of it triggers a rollback to the last
checkpoint and ends the search.  Afterwards a no-update sweep collects the
per-batch bases that are distilled into the common inference basis, and
the evolution operator is refit once over the whole training set.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .model import (
    ADAPTIVE_VARIANTS,
    InferenceBundle,
    ModelConfig,
    NormStats,
    RraedyModel,
    SeriesTensor,
    build_inference_bundle,
    check_variant,
    forward_train,
)
from .nn import AdaBeliefState, adabelief_step


class TrainingError(Exception):
    """Training could not satisfy the schedule's contract."""

    def __init__(self, message: str, log: "TrainLog | None" = None):
        super().__init__(message)
        self.log = log


@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""

    batch_size: int = 32
    learning_rate: float = 1e-3
    max_epochs: int = 5000
    latent_dim: int = 10
    k_init: int | None = None          # default: min(T, latent_dim)
    stagnation_window: int = 50
    stagnation_tol: float = 1e-3
    optimal_loss_slack: float = 0.05
    # Additive floor on the acceptance threshold so exactly-realizable data
    # (optimal loss at machine epsilon) is not rejected by roundoff noise.
    optimal_loss_floor: float = 1e-12
    seed: int = 0
    normalize: bool = False
    shuffle: bool = True
    encoder_hidden: tuple[int, ...] = (64, 64, 64)
    decoder_hidden: tuple[int, ...] = (64, 64, 64, 64, 64, 64)
    param_latent: int = 2
    param_hidden: tuple[int, ...] = (16,)
    stop_gradient_on_basis: bool = False
    dmd_rcond: float = 1e-12
    progress: bool = False

    def __post_init__(self):
        if self.stagnation_tol <= 0.0:
            raise ValueError("stagnation_tol must be positive")
        if self.stagnation_window < 2:
            raise ValueError("stagnation_window must be at least 2")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    k_star: int
    sigma_max: float
    sigma_min: float
    eig_max: float
    eig_min: float
    wall_time: float
    degenerate: int

    CSV_FIELDS = ("epoch", "loss", "k_star", "sigma_max", "sigma_min",
                  "eig_max", "eig_min", "wall_time", "degenerate")

    def row(self) -> list:
        return [self.epoch, self.loss, self.k_star, self.sigma_max,
                self.sigma_min, self.eig_max, self.eig_min, self.wall_time,
                self.degenerate]


@dataclass
class TrainLog:
    """Per-epoch measurements plus schedule events (decrements, rollbacks)."""

    records: list[EpochRecord] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    final_k: int | None = None
    final_loss: float | None = None

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def phase_starts(self) -> list[tuple[int, int]]:
        """(epoch, k) pairs where the bottleneck rank changed."""
        out = []
        prev = None
        for r in self.records:
            if r.k_star != prev:
                out.append((r.epoch, r.k_star))
                prev = r.k_star
        return out


class CheckpointRegistry:
    """At most one parameter snapshot per rank, ranks strictly decreasing."""

    def __init__(self):
        self._store: dict[int, tuple[list[np.ndarray], AdaBeliefState, float, int]] = {}
        self._order: list[int] = []

    def save(self, k: int, model: RraedyModel, opt: AdaBeliefState,
             loss: float, epoch: int) -> None:
        if self._order and k >= self._order[-1]:
            raise ValueError(f"checkpoint ranks must strictly decrease, got {k} "
                             f"after {self._order[-1]}")
        self._store[k] = (model.copy_parameters(), opt.copy(), loss, epoch)
        self._order.append(k)

    def load(self, k: int, model: RraedyModel) -> AdaBeliefState:
        params, opt, _, _ = self._store[k]
        model.load_parameters(params)
        return opt.copy()

    def has(self, k: int) -> bool:
        return k in self._store

    def ranks(self) -> list[int]:
        return list(self._order)

    def loss_at(self, k: int) -> float:
        return self._store[k][2]


def stagnation_check(window: list[float] | np.ndarray, tol: float) -> bool:
    """True when relative improvement over the window falls below ``tol``."""
    window = np.asarray(window, dtype=np.float64)
    if window.size < 2:
        raise ValueError("stagnation window needs at least two losses")
    first, last = window[0], window[-1]
    return (first - last) / max(first, 1e-30) < tol


def _batch_slices(n: int, batch_size: int) -> list[np.ndarray]:
    bounds = list(range(0, n, batch_size))
    return [np.arange(b, min(b + batch_size, n)) for b in bounds]


class _Run:
    """Shared state of one training run over a fixed dataset."""

    def __init__(self, data: SeriesTensor, cfg: TrainConfig, variant: str,
                 mu: np.ndarray | None, fixed_k: int | None = None):
        check_variant(variant)
        self.cfg = cfg
        self.variant = variant
        self.stats = NormStats.fit(data) if cfg.normalize else NormStats.identity(data.F)
        self.data = self.stats.apply(data)
        self.mu = None if mu is None else np.asarray(mu, dtype=np.float64)
        if self.mu is not None and self.mu.shape[1] != data.N:
            raise ValueError(f"mu has {self.mu.shape[1]} columns for {data.N} samples")
        self.model_cfg = ModelConfig(
            feature_dim=data.F,
            latent_dim=cfg.latent_dim,
            variant=variant,
            encoder_hidden=cfg.encoder_hidden,
            decoder_hidden=cfg.decoder_hidden,
            bottleneck_dim=fixed_k if variant == "aedy" else None,
            param_dim=0 if self.mu is None else self.mu.shape[0],
            param_hidden=cfg.param_hidden,
            param_latent=cfg.param_latent,
            stop_gradient_on_basis=cfg.stop_gradient_on_basis,
            dmd_rcond=cfg.dmd_rcond,
        )
        self.model = RraedyModel(self.model_cfg, seed=cfg.seed)
        self.opt = AdaBeliefState.for_params(self.model.parameters(),
                                             learning_rate=cfg.learning_rate)
        self.rng = np.random.default_rng(cfg.seed)
        self.log = TrainLog()
        self.epoch = 0
        self.t0 = time.monotonic()

    def run_epoch(self, k: int) -> float:
        cfg = self.cfg
        n = self.data.N
        order = self.rng.permutation(n) if cfg.shuffle else np.arange(n)
        losses = []
        last_w = None
        degenerate = 0
        for sl in _batch_slices(n, cfg.batch_size):
            idx = order[sl]
            xb = SeriesTensor(self.data.data[:, :, idx])
            mub = None if self.mu is None else self.mu[:, idx]
            result = forward_train(self.model, xb, k, mu=mub)
            loss = result.loss.item()
            if not np.isfinite(loss):
                degenerate += 1
                self.log.events.append(
                    f"epoch {self.epoch}: non-finite loss on a batch, update skipped")
                continue
            result.tape.backward(result.loss)
            grads = result.gradients()
            degenerate += result.tape.svd_gap_clamps + result.tape.pinv_rank_deficiencies
            if any(not np.all(np.isfinite(g)) for g in grads):
                degenerate += 1
                self.log.events.append(
                    f"epoch {self.epoch}: non-finite gradient on a batch, update skipped")
                continue
            adabelief_step(self.model.parameters(), grads, self.opt)
            losses.append(loss)
            if result.w is not None:
                last_w = result.w
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        self._record(mean_loss, k, last_w, degenerate)
        if cfg.progress and self.epoch % 100 == 0:
            print(f"epoch {self.epoch} k={k} loss={mean_loss:.6g}", file=sys.stderr)
        self.epoch += 1
        return mean_loss

    def _record(self, loss: float, k: int, w: np.ndarray | None, degenerate: int):
        if w is not None:
            sigma = linalg.svd(w).sigma
            moduli = linalg.eigenvalues(w).moduli
            smax, smin = float(sigma[0]), float(sigma[-1])
            emax, emin = float(np.max(moduli)), float(np.min(moduli))
        else:
            smax = smin = emax = emin = float("nan")
        self.log.records.append(EpochRecord(
            epoch=self.epoch, loss=loss, k_star=k,
            sigma_max=smax, sigma_min=smin, eig_max=emax, eig_min=emin,
            wall_time=time.monotonic() - self.t0, degenerate=degenerate,
        ))

    def collect_bases(self, k: int) -> list[np.ndarray]:
        """No-update sweep over unshuffled batches with the final parameters."""
        if self.variant == "aedy":
            return []
        bases = []
        for sl in _batch_slices(self.data.N, self.cfg.batch_size):
            xb = SeriesTensor(self.data.data[:, :, sl])
            mub = None if self.mu is None else self.mu[:, sl]
            result = forward_train(self.model, xb, k, mu=mub)
            bases.append(result.basis)
        return bases

    def finish(self, k: int) -> InferenceBundle:
        bases = self.collect_bases(k)
        return build_inference_bundle(
            self.model, self.data, k,
            bases if self.variant != "aedy" else None,
            self.stats, mu=self.mu)


def train_fixed(data: SeriesTensor, cfg: TrainConfig, k: int, variant: str,
                mu: np.ndarray | None = None) -> tuple[InferenceBundle, TrainLog]:
    """Plain training loop at one bottleneck rank, no schedule."""
    if not 1 <= k <= min(cfg.latent_dim, data.T * data.N):
        raise ValueError(f"k={k} out of range for L={cfg.latent_dim}, "
                         f"T*N={data.T * data.N}")
    run = _Run(data, cfg, variant, mu, fixed_k=k)
    for _ in range(cfg.max_epochs):
        run.run_epoch(k)
    run.log.final_k = k
    run.log.final_loss = run.log.records[-1].loss if run.log.records else None
    return run.finish(k), run.log


def train_adaptive(data: SeriesTensor, cfg: TrainConfig, variant: str,
                   mu: np.ndarray | None = None) -> tuple[InferenceBundle, TrainLog]:
    """The adaptive rank schedule (requires an SVD bottleneck variant)."""
    if variant not in ADAPTIVE_VARIANTS:
        raise ValueError(
            f"adaptive training requires one of {ADAPTIVE_VARIANTS}, got {variant!r}")
    run = _Run(data, cfg, variant, mu)
    k = cfg.k_init if cfg.k_init is not None else min(data.T, cfg.latent_dim)
    if not 1 <= k <= min(cfg.latent_dim, data.T * data.N):
        raise ValueError(f"k_init={k} out of range")
    log = run.log
    checkpoints = CheckpointRegistry()

    if cfg.max_epochs == 0:
        log.events.append("zero epoch budget: bundle reflects initialization")
        log.final_k = k
        return run.finish(k), log

    # Initial phase: train at full rank until the loss stagnates.
    window = cfg.stagnation_window
    phase_losses: list[float] = []
    converged = False
    while run.epoch < cfg.max_epochs:
        phase_losses.append(run.run_epoch(k))
        if len(phase_losses) >= window and stagnation_check(
                phase_losses[-window:], cfg.stagnation_tol):
            converged = True
            break
    if not converged:
        raise TrainingError(
            f"training never converged at k_init={k} within "
            f"{cfg.max_epochs} epochs", log)
    optimal_loss = phase_losses[-1]
    threshold = (1.0 + cfg.optimal_loss_slack) * optimal_loss + cfg.optimal_loss_floor
    checkpoints.save(k, run.model, run.opt, optimal_loss, run.epoch)
    log.events.append(f"converged at k*={k}, optimal_loss={optimal_loss:.6g}")

    final_k = k
    while k > 1:
        k -= 1
        log.events.append(f"epoch {run.epoch}: decrement to k*={k}")
        phase_losses = []
        reached = False
        stagnated = False
        while run.epoch < cfg.max_epochs:
            loss = run.run_epoch(k)
            phase_losses.append(loss)
            if loss <= threshold:
                reached = True
                break
            if len(phase_losses) >= window and stagnation_check(
                    phase_losses[-window:], cfg.stagnation_tol):
                stagnated = True
                break
        if reached:
            checkpoints.save(k, run.model, run.opt, phase_losses[-1], run.epoch)
            final_k = k
            log.events.append(
                f"epoch {run.epoch}: optimal loss reached at k*={k}")
            continue
        # Stagnated short of the target, or ran out of budget: roll back.
        final_k = k + 1
        run.opt = checkpoints.load(final_k, run.model)
        reason = "stagnated" if stagnated else "epoch budget exhausted"
        log.events.append(
            f"epoch {run.epoch}: {reason} at k*={k}, rolled back to k*={final_k}")
        break

    log.final_k = final_k
    log.final_loss = checkpoints.loss_at(final_k)
    return run.finish(final_k), log
