"""The rank-reduced latent-dynamics model and its inference bundle.

Training composition: encode each observation, flatten the batch, compress
through a truncated SVD (or a plain linear bottleneck for the ``aedy``
variant), fit a linear evolution operator on the shifted coefficient
matrices, roll every sample forward from its own first coefficient, lift
back through the basis, and decode.  The ``arrae`` variant skips the
dynamics fit and passes the compressed coefficients straight through.

Inference replaces the per-batch SVD by a projection onto a frozen common
basis ``U_f`` and evolves initial conditions with a single operator ``W``
refit once over the whole training set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .autodiff import Tape, Var
from .nn import MlpParams, TapedMlp, init_mlp, mlp_forward

VARIANTS = ("rraedy", "f_rraedy", "aedy", "arrae")
SVD_VARIANTS = ("rraedy", "f_rraedy", "arrae")
DMD_VARIANTS = ("rraedy", "f_rraedy", "aedy")
ADAPTIVE_VARIANTS = ("rraedy", "arrae")


def check_variant(tag: str) -> str:
    if tag not in VARIANTS:
        raise ValueError(f"unknown variant {tag!r}; expected one of {VARIANTS}")
    return tag


@dataclass(frozen=True)
class SeriesTensor:
    """A stack of ``N`` time series with ``T`` observations of dimension ``F``."""

    data: np.ndarray  # (F, T, N) float64

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError(f"series tensor must be 3-D (F, T, N), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("series tensor contains NaN or Inf entries")
        object.__setattr__(self, "data", d)

    @property
    def F(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]

    @property
    def N(self) -> int:
        return self.data.shape[2]


def flatten(t: SeriesTensor) -> np.ndarray:
    """Stack samples into an (F, T*N) matrix, sample-major.

    Column ``s*T + j`` holds observation ``(j, s)``, so each sample's
    timeline occupies a contiguous block of columns.
    """
    f, tt, n = t.data.shape
    return np.ascontiguousarray(t.data.transpose(0, 2, 1)).reshape(f, tt * n)


def unflatten(m: np.ndarray, timesteps: int, samples: int) -> SeriesTensor:
    """Inverse of :func:`flatten`."""
    f = m.shape[0]
    if m.shape[1] != timesteps * samples:
        raise ValueError(f"cannot unflatten {m.shape} into T={timesteps}, N={samples}")
    return SeriesTensor(m.reshape(f, samples, timesteps).transpose(0, 2, 1))


def shift_indices(timesteps: int, samples: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column indices (first, minus, plus) into a flattened (T*N) layout.

    The shifted pairs stay inside each sample's block; no pair straddles a
    sample boundary.
    """
    starts = np.arange(samples) * timesteps
    minus = (starts[:, None] + np.arange(timesteps - 1)[None, :]).ravel()
    return starts, minus, minus + 1


@dataclass(frozen=True)
class DmdOperator:
    """A least-squares one-step evolution operator with its spectrum."""

    w: np.ndarray
    spectrum: linalg.Spectrum
    fit_residual: float
    degenerate: bool = False

    @property
    def k(self) -> int:
        return self.w.shape[0]


def dmd_fit(alpha: np.ndarray, rcond: float = 1e-12) -> DmdOperator:
    """Fit ``W`` minimizing ||alpha_p - W alpha_m||_F over shifted pairs.

    ``alpha`` is (k, T, N); pairs are built inside each sample then
    stacked.  Rank-deficient coefficient matrices fall back to the
    regularized pseudoinverse and set the ``degenerate`` flag.
    """
    k, timesteps, samples = alpha.shape
    if timesteps < 2:
        raise ValueError("need at least two timesteps to fit dynamics")
    flat = np.ascontiguousarray(alpha.transpose(0, 2, 1)).reshape(k, timesteps * samples)
    _, idx_m, idx_p = shift_indices(timesteps, samples)
    a_m = flat[:, idx_m]
    a_p = flat[:, idx_p]
    sing = linalg.svd(a_m).sigma
    degenerate = bool(sing[-1] <= rcond * sing[0]) or a_m.shape[1] < k
    w = a_p @ linalg.pseudoinverse(a_m, rcond=rcond)
    residual = float(np.linalg.norm(a_p - w @ a_m))
    return DmdOperator(w=w, spectrum=linalg.eigenvalues(w),
                       fit_residual=residual, degenerate=degenerate)


def dmd_rollout(w: np.ndarray, a0: np.ndarray, steps: int) -> np.ndarray:
    """Iterated images ``[a0, W a0, ..., W^(steps-1) a0]`` as a (k, steps) matrix."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    a0 = np.asarray(a0, dtype=np.float64)
    out = np.empty((a0.shape[0], steps))
    out[:, 0] = a0
    for t in range(1, steps):
        out[:, t] = w @ out[:, t - 1]
    return out


def encode_series(enc: MlpParams, x: SeriesTensor) -> SeriesTensor:
    """Apply the encoder to every observation independently."""
    flat = mlp_forward(enc, flatten(x))
    return unflatten(flat, x.T, x.N)


def bottleneck_train(y: SeriesTensor, k: int) -> tuple[linalg.TruncatedSvd, np.ndarray]:
    """Truncated SVD of the flattened latent plus the (k, T, N) coefficients."""
    tsvd = linalg.truncated_svd(flatten(y), k)
    alpha = unflatten(tsvd.alpha, y.T, y.N).data
    return tsvd, alpha


@dataclass(frozen=True)
class NormStats:
    """Per-feature affine normalization fitted on the training split."""

    mean: np.ndarray  # (F,)
    std: np.ndarray   # (F,), floored away from zero

    @classmethod
    def identity(cls, feature_dim: int) -> "NormStats":
        return cls(mean=np.zeros(feature_dim), std=np.ones(feature_dim))

    @classmethod
    def fit(cls, t: SeriesTensor) -> "NormStats":
        flat = flatten(t)
        std = flat.std(axis=1)
        return cls(mean=flat.mean(axis=1), std=np.maximum(std, 1e-8))

    def apply(self, t: SeriesTensor) -> SeriesTensor:
        return SeriesTensor((t.data - self.mean[:, None, None]) / self.std[:, None, None])

    def invert(self, t: SeriesTensor) -> SeriesTensor:
        return SeriesTensor(t.data * self.std[:, None, None] + self.mean[:, None, None])

    def apply_columns(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[:, None]) / self.std[:, None]

    def invert_columns(self, x: np.ndarray) -> np.ndarray:
        return x * self.std[:, None] + self.mean[:, None]


@dataclass
class ModelConfig:
    """Architecture hyperparameters of one model instance."""

    feature_dim: int
    latent_dim: int
    variant: str = "rraedy"
    encoder_hidden: tuple[int, ...] = (64, 64, 64)
    decoder_hidden: tuple[int, ...] = (64, 64, 64, 64, 64, 64)
    bottleneck_dim: int | None = None     # fixed k for aedy
    param_dim: int = 0                    # 0 disables the parametric branch
    param_hidden: tuple[int, ...] = (16,)
    param_latent: int = 2
    time_varying_params: bool = False
    stop_gradient_on_basis: bool = False
    dmd_rcond: float = 1e-12

    def __post_init__(self):
        check_variant(self.variant)
        if self.variant == "aedy" and self.bottleneck_dim is None:
            raise ValueError("aedy requires a fixed bottleneck_dim")

    @property
    def parametric(self) -> bool:
        return self.param_dim > 0

    @property
    def total_latent_dim(self) -> int:
        return self.latent_dim + (self.param_latent if self.parametric else 0)


class RraedyModel:
    """Trainable parameters for one variant, plus the forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        lt = config.total_latent_dim
        self.encoder = init_mlp(
            [config.feature_dim, *config.encoder_hidden, config.latent_dim], rng)
        self.decoder = init_mlp(
            [lt, *config.decoder_hidden, config.feature_dim], rng)
        self.param_encoder = None
        if config.parametric:
            self.param_encoder = init_mlp(
                [config.param_dim, *config.param_hidden, config.param_latent], rng)
        self.bottleneck_down = None
        self.bottleneck_up = None
        if config.variant == "aedy":
            k = config.bottleneck_dim
            bound = 1.0 / np.sqrt(lt)
            self.bottleneck_down = rng.uniform(-bound, bound, size=(k, lt))
            self.bottleneck_up = rng.uniform(-bound, bound, size=(lt, k))

    def parameters(self) -> list[np.ndarray]:
        out = self.encoder.arrays() + self.decoder.arrays()
        if self.param_encoder is not None:
            out += self.param_encoder.arrays()
        if self.bottleneck_down is not None:
            out += [self.bottleneck_down, self.bottleneck_up]
        return out

    def copy_parameters(self) -> list[np.ndarray]:
        return [p.copy() for p in self.parameters()]

    def load_parameters(self, snapshot: list[np.ndarray]) -> None:
        own = self.parameters()
        if len(own) != len(snapshot):
            raise ValueError("parameter snapshot does not match model structure")
        for dst, src in zip(own, snapshot):
            if dst.shape != src.shape:
                raise ValueError(f"snapshot shape {src.shape} != {dst.shape}")
            dst[...] = src


@dataclass
class ForwardResult:
    """Everything a training step needs from one forward pass."""

    loss: Var
    reconstruction: np.ndarray            # (F, T, N)
    w: np.ndarray | None                  # fitted operator, if the variant has one
    basis: np.ndarray | None              # U_k (or up-projection for aedy)
    fit_residual: float | None
    tape: Tape
    taped_mlps: list[TapedMlp]
    extra_vars: list[Var]                 # bottleneck linear maps, when present

    def gradients(self) -> list[np.ndarray]:
        out = []
        for net in self.taped_mlps:
            out += net.grads()
        for var in self.extra_vars:
            g = var.grad
            out.append(g if g is not None else np.zeros_like(var.value))
        return out


def forward_train(model: RraedyModel, x: SeriesTensor, k: int,
                  mu: np.ndarray | None = None) -> ForwardResult:
    """Differentiable training pass for any variant.

    ``k`` is the current bottleneck rank (ignored by ``aedy``, which uses
    its fixed bottleneck width).  For parametric models ``mu`` carries one
    parameter vector per sample, shape (P, N).
    """
    cfg = model.config
    timesteps, samples = x.T, x.N
    if timesteps < 2 and cfg.variant != "arrae":
        raise ValueError("dynamics-bearing variants need T >= 2")
    tape = Tape()
    x_flat = flatten(x)
    x_const = tape.leaf(x_flat)

    enc = TapedMlp(tape, model.encoder)
    dec = TapedMlp(tape, model.decoder)
    taped = [enc, dec]
    extra: list[Var] = []

    y = enc.apply(x_const)  # (L, T*N)

    if cfg.parametric:
        if mu is None:
            raise ValueError("parametric model requires mu")
        mu = np.asarray(mu, dtype=np.float64)
        penc = TapedMlp(tape, model.param_encoder)
        taped.append(penc)
        if cfg.time_varying_params:
            if mu.shape != (cfg.param_dim, timesteps, samples):
                raise ValueError(f"time-varying mu must be (P, T, N), got {mu.shape}")
            mu_cols = tape.leaf(flatten(SeriesTensor(mu)))
            y_mu = penc.apply(mu_cols)
        else:
            if mu.shape != (cfg.param_dim, samples):
                raise ValueError(
                    f"mu must be (P, N) = ({cfg.param_dim}, {samples}), got {mu.shape}")
            y_mu = tape.repeat_cols(penc.apply(tape.leaf(mu)), timesteps)
        y = tape.concat([y, y_mu], axis=0)  # (L + L_mu, T*N)

    if cfg.variant == "aedy":
        down = tape.leaf(model.bottleneck_down)
        up = tape.leaf(model.bottleneck_up)
        extra += [down, up]
        alpha_hat = tape.matmul(down, y)
        basis_val = model.bottleneck_up
        lift = up
        k_eff = cfg.bottleneck_dim
    else:
        u_var, alpha_hat = tape.truncated_svd(y, k,
                                              stop_basis_grad=cfg.stop_gradient_on_basis)
        basis_val = u_var.value
        lift = u_var
        k_eff = k

    w_val = None
    residual = None
    if cfg.variant == "arrae":
        latent = alpha_hat
    else:
        idx0, idx_m, idx_p = shift_indices(timesteps, samples)
        a_m = tape.getitem(alpha_hat, (slice(None), idx_m))
        a_p = tape.getitem(alpha_hat, (slice(None), idx_p))
        w = tape.lstsq_fit(a_p, a_m, rcond=cfg.dmd_rcond)
        a0 = tape.getitem(alpha_hat, (slice(None), idx0))
        rolled = tape.rollout(w, a0, timesteps)  # (k, T, N)
        latent = tape.reshape(tape.transpose(rolled, (0, 2, 1)),
                              (k_eff, timesteps * samples))
        w_val = w.value
        residual = float(np.linalg.norm(a_p.value - w.value @ a_m.value))

    y_tilde = tape.matmul(lift, latent)
    x_tilde = dec.apply(y_tilde)
    loss = tape.mse(x_tilde, x_const)

    return ForwardResult(
        loss=loss,
        reconstruction=unflatten(x_tilde.value, timesteps, samples).data,
        w=w_val,
        basis=basis_val,
        fit_residual=residual,
        tape=tape,
        taped_mlps=taped,
        extra_vars=extra,
    )


@dataclass(frozen=True)
class InferenceBundle:
    """The frozen deployable model: networks, common basis, operator, stats."""

    encoder: MlpParams
    decoder: MlpParams
    u_f: np.ndarray               # (L_total, k), orthonormal columns
    w: DmdOperator
    k_star: int
    normalization: NormStats
    variant: str
    param_encoder: MlpParams | None = None

    def __post_init__(self):
        check_variant(self.variant)
        k = self.k_star
        if self.u_f.shape[1] != k or self.w.w.shape != (k, k):
            raise ValueError(
                f"inconsistent bundle shapes: U_f {self.u_f.shape}, "
                f"W {self.w.w.shape}, k*={k}")
        defect = np.max(np.abs(self.u_f.T @ self.u_f - np.eye(k)))
        if defect > 1e-8:
            raise ValueError(f"U_f columns not orthonormal (defect {defect:.2e})")
        if self.decoder.in_dim != self.u_f.shape[0]:
            raise ValueError("decoder input width does not match basis height")

    @property
    def parametric(self) -> bool:
        return self.param_encoder is not None

    def encode_columns(self, x: np.ndarray, mu: np.ndarray | None = None) -> np.ndarray:
        """Raw observations (F, M) to latent columns (L_total, M)."""
        y = mlp_forward(self.encoder, self.normalization.apply_columns(x))
        if self.parametric:
            if mu is None:
                raise ValueError("parametric bundle requires mu")
            y = np.vstack([y, mlp_forward(self.param_encoder, mu)])
        elif mu is not None:
            raise ValueError("bundle is not parametric but mu was given")
        return y


def common_basis(bases: list[np.ndarray], k: int) -> np.ndarray:
    """Distill one orthonormal basis from per-batch bases by a final SVD."""
    if len(bases) < 1:
        raise ValueError("need at least one stored batch basis")
    stacked = np.concatenate(bases, axis=1)
    return linalg.truncated_svd(stacked, k).u_k


def build_inference_bundle(model: RraedyModel, train: SeriesTensor, k: int,
                           bases: list[np.ndarray] | None,
                           normalization: NormStats,
                           mu: np.ndarray | None = None) -> InferenceBundle:
    """Freeze the common basis and refit the operator on the whole training set.

    ``train`` must already be in model space (normalized when the run
    normalizes).  ``bases`` are the per-batch left singular bases collected
    after training; ``aedy`` ignores them and folds its linear bottleneck
    into the stored networks instead.
    """
    cfg = model.config
    encoder = model.encoder.copy()
    decoder = model.decoder.copy()
    param_encoder = model.param_encoder.copy() if model.param_encoder else None

    if cfg.variant == "aedy":
        kk = cfg.bottleneck_dim
        encoder_out = encoder  # the down-projection becomes part of encoding
        u_f = np.eye(kk)
        # Fold down/up maps into the stored networks as extra linear layers.
        if cfg.parametric:
            raise ValueError("parametric aedy is not supported")
        encoder_out = MlpParams(
            weights=encoder.weights + [model.bottleneck_down.copy()],
            biases=encoder.biases + [np.zeros(kk)],
            activations=encoder.activations + ["linear"],
        )
        decoder_out = MlpParams(
            weights=[model.bottleneck_up.copy()] + decoder.weights,
            biases=[np.zeros(cfg.total_latent_dim)] + decoder.biases,
            activations=["linear"] + decoder.activations,
        )
        encoder, decoder = encoder_out, decoder_out
        k = kk
    else:
        if not bases:
            raise ValueError("need at least one stored batch basis")
        u_f = common_basis(bases, k)

    # Refit W once over the whole training set's projected coefficients.
    y = mlp_forward(encoder, flatten(train))
    if cfg.parametric:
        if mu is None:
            raise ValueError("parametric bundle refit requires mu")
        y_mu = np.repeat(mlp_forward(param_encoder, mu), train.T, axis=1)
        y = np.vstack([y, y_mu])
    alpha = unflatten(u_f.T @ y, train.T, train.N).data
    operator = dmd_fit(alpha, rcond=cfg.dmd_rcond)

    return InferenceBundle(
        encoder=encoder, decoder=decoder, u_f=u_f, w=operator, k_star=k,
        normalization=normalization, variant=cfg.variant,
        param_encoder=param_encoder,
    )


def forecast_batch(bundle: InferenceBundle, x0: np.ndarray, steps: int,
                   mu: np.ndarray | None = None) -> SeriesTensor:
    """Evolve a batch of initial conditions; ``x0`` is (F, M) raw columns.

    Step 1 of each forecast is the autoencoded initial condition; later
    steps iterate the frozen operator in coefficient space.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 1:
        x0 = x0[:, None]
    y = bundle.encode_columns(x0, mu)
    alpha0 = bundle.u_f.T @ y                        # (k, M)
    k, m = alpha0.shape
    coeffs = np.empty((k, steps, m))
    coeffs[:, 0, :] = alpha0
    for t in range(1, steps):
        coeffs[:, t, :] = bundle.w.w @ coeffs[:, t - 1, :]
    lifted = bundle.u_f @ coeffs.transpose(0, 2, 1).reshape(k, m * steps)
    decoded = mlp_forward(bundle.decoder, lifted)
    raw = bundle.normalization.invert_columns(decoded)
    return unflatten(raw, steps, m)


def forecast(bundle: InferenceBundle, x0: np.ndarray, steps: int,
             mu: np.ndarray | None = None) -> SeriesTensor:
    """Evolve one initial condition for ``steps`` timesteps, (F, steps, 1)."""
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    if mu is not None:
        mu = np.asarray(mu, dtype=np.float64).reshape(-1, 1)
    return forecast_batch(bundle, x0[:, None], steps, mu)
