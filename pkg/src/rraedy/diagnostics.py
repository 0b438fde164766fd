"""Quantitative claims as measurable quantities.

Everything here reports; nothing enforces.  The two structural claims
about the learned operator are checked empirically: batch-to-batch
similarity (conjugation by the basis-alignment matrix) and the
near-identity bound tying the operator's spectrum to the Lipschitz
constants of the data and encoder and to the kept singular values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .model import (
    DmdOperator,
    InferenceBundle,
    SeriesTensor,
    dmd_fit,
    flatten,
    forecast_batch,
    unflatten,
)


def npe(x: SeriesTensor, x_tilde: SeriesTensor) -> float:
    """Norm percentage error, ||X - X~||_F / ||X||_F * 100."""
    if x.data.shape != x_tilde.data.shape:
        raise ValueError(f"shape mismatch {x.data.shape} vs {x_tilde.data.shape}")
    denom = np.linalg.norm(x.data)
    if denom == 0.0:
        raise ValueError("ground truth has zero norm")
    return float(np.linalg.norm(x.data - x_tilde.data) / denom * 100.0)


def mse(x: SeriesTensor, x_tilde: SeriesTensor) -> float:
    """Mean squared elementwise error."""
    if x.data.shape != x_tilde.data.shape:
        raise ValueError(f"shape mismatch {x.data.shape} vs {x_tilde.data.shape}")
    return float(np.mean((x.data - x_tilde.data) ** 2))


def commutator_norm(w: np.ndarray | DmdOperator) -> float:
    """Normality defect ||W^T W - W W^T||_2; zero iff W is normal."""
    m = w.w if isinstance(w, DmdOperator) else np.asarray(w, dtype=np.float64)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"operator must be square, got {m.shape}")
    return linalg.spectral_norm(m.T @ m - m @ m.T)


@dataclass(frozen=True)
class BoundReport:
    """All quantities of the near-identity spectral bound."""

    k_star: int
    sigma_k: float        # smallest kept singular value of the latent batch
    kappa: float          # condition number of the rank-k* latent
    l_x: float            # max consecutive input difference (2-norm)
    l_e: float            # max ratio ||dY|| / ||dX|| over consecutive pairs
    eig_bound: float      # sqrt(k*) L_E L_X / sigma_k
    norm_bound: float     # kappa * eig_bound
    max_eig_dev: float    # max_i |lambda_i(W) - 1|
    w_minus_i_norm: float
    eig_within_bound: bool
    norm_within_bound: bool

    CSV_FIELDS = ("k_star", "sigma_k", "kappa", "l_x", "l_e", "eig_bound",
                  "norm_bound", "max_eig_dev", "w_minus_i_norm",
                  "eig_within_bound", "norm_within_bound")

    def row(self) -> list:
        return [self.k_star, self.sigma_k, self.kappa, self.l_x, self.l_e,
                self.eig_bound, self.norm_bound, self.max_eig_dev,
                self.w_minus_i_norm, int(self.eig_within_bound),
                int(self.norm_within_bound)]


def lipschitz_estimates(x_cols: np.ndarray, y_cols: np.ndarray,
                        timesteps: int, samples: int) -> tuple[float, float]:
    """Max consecutive-step input motion and encoder amplification ratio.

    Pairs with input motion below 1e-12 are skipped for the ratio.
    """
    l_x = 0.0
    l_e = 0.0
    for s in range(samples):
        block = slice(s * timesteps, (s + 1) * timesteps)
        dx = np.linalg.norm(np.diff(x_cols[:, block], axis=1), axis=0)
        dy = np.linalg.norm(np.diff(y_cols[:, block], axis=1), axis=0)
        if dx.size:
            l_x = max(l_x, float(np.max(dx)))
            moving = dx > 1e-12
            if np.any(moving):
                l_e = max(l_e, float(np.max(dy[moving] / dx[moving])))
    return l_x, l_e


def lemma2_report(bundle: InferenceBundle, data: SeriesTensor,
                  mu: np.ndarray | None = None,
                  w: np.ndarray | None = None) -> BoundReport:
    """Evaluate the near-identity bound for an operator on one data batch.

    ``data`` is raw; the bundle's normalization and encoder produce the
    latent batch.  ``w`` defaults to the bundle's frozen operator.
    """
    if data.T < 2:
        raise ValueError("need at least two timesteps per sample")
    k = bundle.k_star
    x_cols = bundle.normalization.apply_columns(flatten(data))
    mu_cols = None
    if bundle.parametric:
        if mu is None:
            raise ValueError("parametric bundle requires mu")
        mu_cols = np.repeat(np.asarray(mu, dtype=np.float64), data.T, axis=1)
    y_cols = bundle.encode_columns(flatten(data), mu_cols)

    l_x, l_e = lipschitz_estimates(x_cols, y_cols, data.T, data.N)
    tsvd = linalg.truncated_svd(y_cols, k)
    sigma_k = float(tsvd.sigma_k[-1])
    kappa = float(tsvd.sigma_k[0] / sigma_k) if sigma_k > 0 else float("inf")
    eig_bound = np.sqrt(k) * l_e * l_x / sigma_k if sigma_k > 0 else float("inf")
    norm_bound = kappa * eig_bound

    w_mat = bundle.w.w if w is None else np.asarray(w, dtype=np.float64)
    spectrum = linalg.eigenvalues(w_mat)
    max_eig_dev = float(np.max(np.abs(spectrum.eigenvalues - 1.0)))
    w_minus_i = linalg.spectral_norm(w_mat - np.eye(w_mat.shape[0]))

    return BoundReport(
        k_star=k, sigma_k=sigma_k, kappa=kappa, l_x=l_x, l_e=l_e,
        eig_bound=float(eig_bound), norm_bound=float(norm_bound),
        max_eig_dev=max_eig_dev, w_minus_i_norm=w_minus_i,
        eig_within_bound=bool(max_eig_dev <= eig_bound),
        norm_within_bound=bool(w_minus_i <= norm_bound),
    )


@dataclass(frozen=True)
class SimilarityPair:
    """Batch-pair alignment quantities."""

    i: int
    j: int
    eig_modulus_dev: float   # max gap between sorted eigenvalue moduli
    orth_defect: float       # ||Q^T Q - I||_2 for Q = U_i^T U_j
    conj_residual: float     # ||W_j - Q^T W_i Q||_2

    CSV_FIELDS = ("i", "j", "eig_modulus_dev", "orth_defect", "conj_residual")

    def row(self) -> list:
        return [self.i, self.j, self.eig_modulus_dev, self.orth_defect,
                self.conj_residual]


@dataclass(frozen=True)
class SimilarityReport:
    pairs: list[SimilarityPair]

    def max_eig_modulus_dev(self) -> float:
        return max(p.eig_modulus_dev for p in self.pairs)


def lemma1_report(bases: list[np.ndarray], operators: list[np.ndarray]) -> SimilarityReport:
    """Pairwise similarity of per-batch operators through basis alignment."""
    if len(bases) < 2 or len(bases) != len(operators):
        raise ValueError("need at least two (basis, operator) pairs")
    k = bases[0].shape[1]
    for b, w in zip(bases, operators):
        if b.shape[1] != k or w.shape != (k, k):
            raise ValueError("mismatched bottleneck rank across batches")
    pairs = []
    for i in range(len(bases)):
        for j in range(i + 1, len(bases)):
            q = bases[i].T @ bases[j]
            orth = linalg.spectral_norm(q.T @ q - np.eye(k))
            conj = linalg.spectral_norm(operators[j] - q.T @ operators[i] @ q)
            mi = np.sort(linalg.eigenvalues(operators[i]).moduli)
            mj = np.sort(linalg.eigenvalues(operators[j]).moduli)
            dev = float(np.max(np.abs(mi - mj)))
            pairs.append(SimilarityPair(i=i, j=j, eig_modulus_dev=dev,
                                        orth_defect=orth, conj_residual=conj))
    return SimilarityReport(pairs=pairs)


def per_batch_operators(bundle: InferenceBundle, data: SeriesTensor,
                        n_batches: int, mu: np.ndarray | None = None
                        ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Recompute per-batch bases and operators the way training sees them."""
    if n_batches < 2 or data.N < n_batches:
        raise ValueError("need at least two batches of at least one sample")
    k = bundle.k_star
    bounds = np.array_split(np.arange(data.N), n_batches)
    bases, ops = [], []
    for idx in bounds:
        chunk = SeriesTensor(data.data[:, :, idx])
        mu_cols = None
        if bundle.parametric:
            mu_cols = np.repeat(mu[:, idx], chunk.T, axis=1)
        y = bundle.encode_columns(flatten(chunk), mu_cols)
        tsvd = linalg.truncated_svd(y, k)
        alpha = unflatten(tsvd.alpha, chunk.T, len(idx)).data
        bases.append(tsvd.u_k)
        ops.append(dmd_fit(alpha).w)
    return bases, ops


def spectrum_track(operators: list[np.ndarray]) -> np.ndarray:
    """Per-operator spectral summaries: rows (sigma_max, sigma_min,
    eig_max_modulus, eig_min_modulus)."""
    rows = []
    for w in operators:
        sigma = linalg.svd(w).sigma
        moduli = linalg.eigenvalues(w).moduli
        rows.append((float(sigma[0]), float(sigma[-1]),
                     float(np.max(moduli)), float(np.min(moduli))))
    return np.array(rows)


def extrapolation_check(bundle: InferenceBundle, x0: np.ndarray,
                        horizon_multiplier: int, train_horizon: int,
                        mu: np.ndarray | None = None
                        ) -> tuple[SeriesTensor, bool]:
    """Forecast far past the training horizon and judge boundedness.

    Verdict is true when the max state 2-norm over the extended horizon
    stays within twice the max over the training horizon.
    """
    if horizon_multiplier < 1:
        raise ValueError("horizon_multiplier must be >= 1")
    steps = horizon_multiplier * train_horizon
    traj = forecast_batch(bundle, np.asarray(x0, dtype=np.float64)[:, None],
                          steps, mu=None if mu is None else mu.reshape(-1, 1))
    norms = np.linalg.norm(traj.data[:, :, 0], axis=0)
    train_max = float(np.max(norms[:train_horizon]))
    extended_max = float(np.max(norms))
    return traj, bool(extended_max <= 2.0 * train_max)


def krylov_matrix(w: np.ndarray, v: np.ndarray, order: int) -> np.ndarray:
    """Iterated images [v, Wv, ..., W^(order-1) v] as a (k, order) matrix."""
    k = v.shape[0]
    out = np.empty((k, order))
    out[:, 0] = v
    for t in range(1, order):
        out[:, t] = w @ out[:, t - 1]
    return out


def operator_from_krylov(kry: np.ndarray, k: int) -> np.ndarray:
    """Recover the generating operator from a full-rank Krylov matrix.

    Builds the shift-plus-recurrence companion ``C`` with ``W K = K C``
    (the dependence coefficients of column k+1 on the first k columns
    fill the last column) and returns ``K C K^+``.
    """
    order = kry.shape[1]
    if order < k + 1:
        raise ValueError("Krylov matrix too short to expose the recurrence")
    coeffs = linalg.pseudoinverse(kry[:, :k]) @ kry[:, k]
    c = np.zeros((order, order))
    for j in range(order - 1):
        c[j + 1, j] = 1.0
    c[order - k:, order - 1] = coeffs
    return kry @ c @ linalg.pseudoinverse(kry)


def forecast_npe(bundle: InferenceBundle, data: SeriesTensor,
                 mu: np.ndarray | None = None) -> float:
    """NPE of forecasts seeded only with each sample's initial condition."""
    pred = forecast_batch(bundle, data.data[:, 0, :], data.T, mu=mu)
    return npe(data, pred)


def forecast_mse(bundle: InferenceBundle, data: SeriesTensor,
                 mu: np.ndarray | None = None) -> float:
    """MSE of forecasts seeded only with each sample's initial condition."""
    pred = forecast_batch(bundle, data.data[:, 0, :], data.T, mu=mu)
    return mse(data, pred)
