"""Deterministic benchmark-system generators and seeded splitting.

Each generator derives a per-sample RNG from (seed, sample index), so the
output is identical whether samples are produced serially or in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import SeriesTensor


class BlowUpError(Exception):
    """An integration produced a non-finite state."""

    def __init__(self, step: int):
        super().__init__(f"non-finite state at integration step {step}")
        self.step = step


@dataclass
class OdeSystem:
    """A first-order ODE ``x' = rhs(x, t, params)``."""

    state_dim: int
    rhs: Callable[[np.ndarray, float, np.ndarray], np.ndarray]
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class DatasetSpec:
    """Shape and sampling choices for one generated dataset."""

    system: str
    n_samples: int
    timesteps: int
    seed: int = 0
    normalize: bool = False
    grid: int = 16            # rotating-gaussian resolution per axis
    refine: int = 1           # temporal refinement factor (testing hook)

    def __post_init__(self):
        if self.n_samples < 1 or self.timesteps < 2:
            raise ValueError("need n_samples >= 1 and timesteps >= 2")


def rk4_integrate(sys: OdeSystem, x0: np.ndarray, t0: float, dt: float,
                  steps: int) -> np.ndarray:
    """Classical 4th-order Runge-Kutta; returns (state_dim, steps), column 1 = x0."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x0, dtype=np.float64).copy()
    out = np.empty((sys.state_dim, steps))
    out[:, 0] = x
    t = t0
    for j in range(1, steps):
        k1 = sys.rhs(x, t, sys.params)
        k2 = sys.rhs(x + 0.5 * dt * k1, t + 0.5 * dt, sys.params)
        k3 = sys.rhs(x + 0.5 * dt * k2, t + 0.5 * dt, sys.params)
        k4 = sys.rhs(x + dt * k3, t + dt, sys.params)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise BlowUpError(j)
        out[:, j] = x
        t += dt
    return out


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def van_der_pol_system(mu: float = 2.0) -> OdeSystem:
    def rhs(x, t, p):
        return np.array([x[1], p[0] * (1.0 - x[0] ** 2) * x[1] - x[0]])

    return OdeSystem(state_dim=2, rhs=rhs, params=np.array([mu]))


def gen_van_der_pol(spec: DatasetSpec, mu: float = 2.0, dt: float = 0.05,
                    ic_range: tuple[float, float] = (-1.5, 1.5)) -> SeriesTensor:
    """Van der Pol oscillator samples with uniformly sampled initial states."""
    sys = van_der_pol_system(mu)
    fine = spec.refine
    data = np.empty((2, spec.timesteps, spec.n_samples))
    for i in range(spec.n_samples):
        rng = _sample_rng(spec.seed, i)
        x0 = rng.uniform(ic_range[0], ic_range[1], size=2)
        traj = rk4_integrate(sys, x0, 0.0, dt / fine,
                             (spec.timesteps - 1) * fine + 1)
        data[:, :, i] = traj[:, ::fine]
    return SeriesTensor(data)


def mass_spring_damper_system() -> OdeSystem:
    def rhs(x, t, p):
        m, c, k = p
        return np.array([x[1], -(c / m) * x[1] - (k / m) * x[0]])

    return OdeSystem(state_dim=2, rhs=rhs, params=np.zeros(3))


def gen_mass_spring_damper(
    spec: DatasetSpec,
    t_span: tuple[float, float] = (0.0, 15.0),
    x0: float = 1.0,
    v0: float = 1.0,
    m_range: tuple[float, float] = (0.5, 2.0),
    c_range: tuple[float, float] = (0.1, 2.0),
    k_range: tuple[float, float] = (0.5, 3.0),
) -> tuple[SeriesTensor, np.ndarray]:
    """Damped-oscillator family; returns trajectories and the (3, N) parameters."""
    # The stated span and step are mutually inconsistent at T=200; the frame
    # count wins and the step is derived from it.  The integrator runs two
    # substeps per output frame so stiff parameter corners stay at RK4-level
    # accuracy at this spacing.
    dt = (t_span[1] - t_span[0]) / (spec.timesteps - 1)
    fine = 2 * spec.refine
    data = np.empty((2, spec.timesteps, spec.n_samples))
    params = np.empty((3, spec.n_samples))
    start = np.array([x0, v0])
    for i in range(spec.n_samples):
        rng = _sample_rng(spec.seed, i)
        p = np.array([
            rng.uniform(*m_range),
            rng.uniform(*c_range),
            rng.uniform(*k_range),
        ])
        sys = mass_spring_damper_system()
        sys.params = p
        traj = rk4_integrate(sys, start, t_span[0], dt / fine,
                             (spec.timesteps - 1) * fine + 1)
        data[:, :, i] = traj[:, ::fine]
        params[:, i] = p
    return SeriesTensor(data), params


def _burgers_initial_profile(rng: np.random.Generator, x: np.ndarray) -> np.ndarray:
    """Random degree-4 polynomial, shifted to vanish at both boundaries and
    scaled to unit peak amplitude."""
    coeffs = rng.uniform(-1.0, 1.0, size=5)
    u = np.polyval(coeffs, x)
    u = u - ((1.0 - x) * u[0] + x * u[-1])
    peak = np.max(np.abs(u))
    if peak > 1e-12:
        u = u / peak
    return u


def gen_burgers(spec: DatasetSpec, nu: float = 0.01,
                grid_points: int = 100,
                t_span: tuple[float, float] = (0.0, 15.0)) -> SeriesTensor:
    """Viscous Burgers fields on [0, 1] with homogeneous Dirichlet boundaries.

    First-order upwind advection plus second-order central diffusion,
    advanced with explicit Euler substeps sized by the CFL and diffusion
    limits, then subsampled to ``spec.timesteps`` output frames.
    """
    f = grid_points
    x = np.linspace(0.0, 1.0, f)
    dx = x[1] - x[0]
    frame_dt = (t_span[1] - t_span[0]) / (spec.timesteps - 1)
    safety = 0.9 / spec.refine
    data = np.empty((f, spec.timesteps, spec.n_samples))

    for i in range(spec.n_samples):
        rng = _sample_rng(spec.seed, i)
        u = _burgers_initial_profile(rng, x)
        u[0] = 0.0
        u[-1] = 0.0
        data[:, 0, i] = u
        for frame in range(1, spec.timesteps):
            remaining = frame_dt
            while remaining > 1e-15:
                umax = max(np.max(np.abs(u)), 1e-12)
                # Joint advection-diffusion limit; stricter than (and hence
                # satisfying) the separate CFL and diffusion bounds.
                dt_stable = safety / (umax / dx + 2.0 * nu / (dx * dx))
                dt = min(dt_stable, remaining)
                u = _burgers_step(u, dt, dx, nu)
                if not np.all(np.isfinite(u)):
                    raise BlowUpError(frame)
                remaining -= dt
            data[:, frame, i] = u
    return SeriesTensor(data)


def _burgers_step(u: np.ndarray, dt: float, dx: float, nu: float) -> np.ndarray:
    dudx_back = np.zeros_like(u)
    dudx_fwd = np.zeros_like(u)
    dudx_back[1:] = (u[1:] - u[:-1]) / dx
    dudx_fwd[:-1] = (u[1:] - u[:-1]) / dx
    advect = np.where(u > 0.0, u * dudx_back, u * dudx_fwd)
    diffuse = np.zeros_like(u)
    diffuse[1:-1] = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / (dx * dx)
    unew = u + dt * (-advect + nu * diffuse)
    unew[0] = 0.0
    unew[-1] = 0.0
    return unew


def gen_rotating_gaussian(spec: DatasetSpec, sigma: float = 0.1,
                          r_range: tuple[float, float] = (0.3, 0.8),
                          total_angle: float = 3.0 * np.pi) -> SeriesTensor:
    """A Gaussian bump tracing ``(r cos(a), r sin(a))`` for angles in
    [0, total_angle] on a square grid over [-1, 1]^2.

    When ``spec.normalize`` the whole tensor is standardized to zero mean
    and unit standard deviation.
    """
    g = spec.grid
    axis = np.linspace(-1.0, 1.0, g)
    gy, gx = np.meshgrid(axis, axis, indexing="ij")  # pixel index = iy * g + ix
    angles = np.linspace(0.0, total_angle, spec.timesteps)
    data = np.empty((g * g, spec.timesteps, spec.n_samples))
    for i in range(spec.n_samples):
        rng = _sample_rng(spec.seed, i)
        r = rng.uniform(*r_range)
        cx = r * np.cos(angles)
        cy = r * np.sin(angles)
        frames = np.exp(
            -((gx[:, :, None] - cx[None, None, :]) ** 2
              + (gy[:, :, None] - cy[None, None, :]) ** 2) / (2.0 * sigma * sigma))
        data[:, :, i] = frames.reshape(g * g, spec.timesteps)
    if spec.normalize:
        data = (data - data.mean()) / data.std()
    return SeriesTensor(data)


def split_indices(n: int, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle of sample indices into disjoint, exhaustive halves."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if n < 2:
        raise ValueError("need at least two samples to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * ratio))
    n_train = min(max(n_train, 1), n - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split(data: SeriesTensor, ratio: float, seed: int) -> tuple[SeriesTensor, SeriesTensor]:
    """Split samples into train/test tensors with a seeded shuffle."""
    tr, te = split_indices(data.N, ratio, seed)
    return SeriesTensor(data.data[:, :, tr]), SeriesTensor(data.data[:, :, te])
