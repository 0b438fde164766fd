"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records matrix-level primitives in execution order (which
is already topological), and :meth:`Tape.backward` replays them once in
reverse, accumulating cotangents.  Besides the usual arithmetic the tape
provides three structured nodes that the latent-dynamics model needs:

* a truncated-SVD node whose adjoint handles the factor coupling with a
  guarded ``1 / (sigma_i^2 - sigma_j^2)`` kernel,
* a least-squares fit node ``W = A_p @ pinv(A_m)`` differentiated through
  the pseudoinverse, and
* a linear-rollout node ``a_{t+1} = W a_t`` whose adjoint is the usual
  backward recurrence, so tape size stays independent of the horizon.

Near-degenerate singular spectra and rank-deficient least-squares inputs
do not raise; they clamp the offending denominators and increment the
tape's degeneracy counters so training loops can log them.
"""

from __future__ import annotations

import numpy as np

from . import linalg

# Relative gap guard for the SVD adjoint: denominators sigma_i^2 - sigma_j^2
# smaller than GAP_GUARD * sigma_1^2 in magnitude are clamped.
GAP_GUARD = 1e-6

# Relative cutoff below which singular values are treated as zero inside
# adjoint computations (matches the pseudoinverse default).
SINGULAR_GUARD = 1e-12


class Var:
    """Handle to one tape node; carries the forward value."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape: "Tape", idx: int, value: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray | None:
        return self.tape.grad_of(self)

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other: "Var") -> "Var":
        return self.tape.add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return self.tape.sub(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return self.tape.mul(self, other)

    def __matmul__(self, other: "Var") -> "Var":
        return self.tape.matmul(self, other)


class Tape:
    """Append-only record of primitive operations for one forward pass."""

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list = []
        self._grads: list[np.ndarray | None] = []
        # Degeneracy counters, reset per tape; training loops log them.
        self.svd_gap_clamps = 0
        self.pinv_rank_deficiencies = 0

    # -- node plumbing ---------------------------------------------------

    def _record(self, value: np.ndarray, parents: tuple[int, ...], vjp) -> Var:
        idx = len(self._parents)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return Var(self, idx, value)

    def leaf(self, value) -> Var:
        """Register an input (parameter or data) node."""
        return self._record(np.asarray(value, dtype=np.float64), (), None)

    def grad_of(self, var: Var) -> np.ndarray | None:
        if not self._grads:
            return None
        return self._grads[var.idx]

    def backward(self, loss: Var) -> None:
        """Accumulate d(loss)/d(node) for every node reaching ``loss``."""
        if loss.value.ndim != 0:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        n = len(self._parents)
        grads: list[np.ndarray | None] = [None] * n
        grads[loss.idx] = np.asarray(1.0)
        for idx in range(loss.idx, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            vjp = self._vjps[idx]
            if vjp is None:
                continue
            contribs = vjp(g)
            for parent, contrib in zip(self._parents[idx], contribs):
                if contrib is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = contrib
                else:
                    grads[parent] = grads[parent] + contrib
        self._grads = grads

    # -- arithmetic primitives --------------------------------------------

    def add(self, a: Var, b: Var) -> Var:
        return self._record(a.value + b.value, (a.idx, b.idx), lambda g: (g, g))

    def sub(self, a: Var, b: Var) -> Var:
        return self._record(a.value - b.value, (a.idx, b.idx), lambda g: (g, -g))

    def mul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        return self._record(av * bv, (a.idx, b.idx), lambda g: (g * bv, g * av))

    def scale(self, a: Var, c: float) -> Var:
        return self._record(a.value * c, (a.idx,), lambda g: (g * c,))

    def matmul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        return self._record(av @ bv, (a.idx, b.idx), lambda g: (g @ bv.T, av.T @ g))

    def add_bias(self, x: Var, b: Var) -> Var:
        """Add a per-row bias vector to every column of a matrix."""
        return self._record(
            x.value + b.value[:, None],
            (x.idx, b.idx),
            lambda g: (g, g.sum(axis=1)),
        )

    def relu(self, x: Var) -> Var:
        mask = x.value > 0.0
        return self._record(np.where(mask, x.value, 0.0), (x.idx,),
                            lambda g: (np.where(mask, g, 0.0),))

    def square(self, x: Var) -> Var:
        xv = x.value
        return self._record(xv * xv, (x.idx,), lambda g: (2.0 * g * xv,))

    def mean(self, x: Var) -> Var:
        size = x.value.size
        return self._record(
            np.asarray(x.value.mean()),
            (x.idx,),
            lambda g: (np.broadcast_to(g / size, x.value.shape).copy(),),
        )

    def mse(self, a: Var, b: Var) -> Var:
        """Mean squared elementwise difference."""
        return self.mean(self.square(self.sub(a, b)))

    # -- structural primitives --------------------------------------------

    def reshape(self, x: Var, shape: tuple[int, ...]) -> Var:
        old = x.value.shape
        return self._record(x.value.reshape(shape), (x.idx,),
                            lambda g: (g.reshape(old),))

    def transpose(self, x: Var, axes: tuple[int, ...]) -> Var:
        inverse = tuple(np.argsort(axes))
        return self._record(np.ascontiguousarray(x.value.transpose(axes)), (x.idx,),
                            lambda g: (g.transpose(inverse),))

    def getitem(self, x: Var, index) -> Var:
        xv = x.value

        def vjp(g):
            out = np.zeros_like(xv)
            np.add.at(out, index, g)
            return (out,)

        return self._record(np.ascontiguousarray(xv[index]), (x.idx,), vjp)

    def concat(self, parts: list[Var], axis: int) -> Var:
        sizes = [p.value.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]
        return self._record(
            np.concatenate([p.value for p in parts], axis=axis),
            tuple(p.idx for p in parts),
            lambda g: tuple(np.split(g, splits, axis=axis)),
        )

    def repeat_cols(self, x: Var, times: int) -> Var:
        """Repeat each column ``times`` times in place: (m, n) -> (m, n*times)."""
        m, n = x.value.shape
        return self._record(
            np.repeat(x.value, times, axis=1),
            (x.idx,),
            lambda g: (g.reshape(m, n, times).sum(axis=2),),
        )

    # -- structured nodes ---------------------------------------------------

    def truncated_svd(self, a: Var, k: int, stop_basis_grad: bool = False) -> tuple[Var, Var]:
        """Rank-``k`` factor pair ``(U_k, alpha)`` of a matrix node.

        Both outputs backpropagate into ``a`` through the SVD adjoint; with
        ``stop_basis_grad`` the basis is treated as a constant and only the
        coefficient path carries gradient.
        """
        f = linalg.truncated_svd(a.value, k)
        full = linalg.svd(a.value)

        def vjp_u(g):
            if stop_basis_grad:
                return (None,)
            return (self._svd_adjoint(full, k, u_bar_k=g, alpha_bar=None),)

        def vjp_alpha(g):
            return (self._svd_adjoint(full, k, u_bar_k=None, alpha_bar=g),)

        u_var = self._record(f.u_k, (a.idx,), vjp_u)
        alpha_var = self._record(f.alpha, (a.idx,), vjp_alpha)
        return u_var, alpha_var

    def _svd_adjoint(self, f: linalg.SvdFactorization, k: int,
                     u_bar_k: np.ndarray | None,
                     alpha_bar: np.ndarray | None) -> np.ndarray:
        """Cotangent on A of the map A -> (U_k, diag(s_k) Vt_k)."""
        u, s, vt = f.u, f.sigma, f.vt
        v = vt.T
        m, r = u.shape
        n = v.shape[0]
        s1sq = float(s[0] * s[0]) if s.size else 0.0
        eps_gap = GAP_GUARD * max(s1sq, np.finfo(np.float64).tiny)

        # Expand truncated cotangents to full-rank shapes.
        u_bar = np.zeros((m, r))
        s_bar = np.zeros(r)
        v_bar = np.zeros((n, r))
        if u_bar_k is not None:
            u_bar[:, :k] = u_bar_k
        if alpha_bar is not None:
            # alpha = diag(s_k) @ Vt_k, so each row feeds one (sigma, V-column).
            s_bar[:k] = np.einsum("ij,ji->i", alpha_bar, v[:, :k])
            v_bar[:, :k] = alpha_bar.T * s[:k][None, :]

        d = s[None, :] ** 2 - s[:, None] ** 2
        clamped = np.abs(d) < eps_gap
        np.fill_diagonal(clamped, False)
        involved = np.zeros_like(clamped)
        involved[:k, :] = True
        involved[:, :k] = True
        if np.any(clamped & involved):
            self.svd_gap_clamps += 1
        signs = np.where(d >= 0.0, 1.0, -1.0)
        fmat = signs / np.maximum(np.abs(d), eps_gap)
        np.fill_diagonal(fmat, 0.0)

        core = np.diag(s_bar)
        utub = u.T @ u_bar
        core = core + (fmat * (utub - utub.T)) * s[None, :]
        vtvb = v.T @ v_bar
        core = core + s[:, None] * (fmat * (vtvb - vtvb.T))
        a_bar = u @ core @ vt

        cutoff = SINGULAR_GUARD * (s[0] if s.size else 0.0)
        keep = s > cutoff
        if not np.all(keep):
            self.svd_gap_clamps += 1
        s_inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
        if m > r:
            t = u_bar - u @ utub
            a_bar = a_bar + (t * s_inv[None, :]) @ vt
        if n > r:
            w = v_bar.T - (v_bar.T @ v) @ vt
            a_bar = a_bar + (u * s_inv[None, :]) @ w
        return a_bar

    def lstsq_fit(self, a_p: Var, a_m: Var, rcond: float = 1e-12) -> Var:
        """Least-squares operator node ``W = a_p @ pinv(a_m)``.

        ``a_m`` losing full row rank flags a degeneracy and falls back to
        the rcond-regularized pseudoinverse.
        """
        am = a_m.value
        ap = a_p.value
        sing = linalg.svd(am).sigma
        if sing[-1] <= rcond * sing[0] or am.shape[0] > am.shape[1]:
            self.pinv_rank_deficiencies += 1
        pinv = linalg.pseudoinverse(am, rcond=rcond)
        w = ap @ pinv

        def vjp(g):
            ap_bar, am_bar = lstsq_vjp(ap, am, g, pinv=pinv)
            return (ap_bar, am_bar)

        return self._record(w, (a_p.idx, a_m.idx), vjp)

    def rollout(self, w: Var, a0: Var, steps: int) -> Var:
        """Iterated images ``[a0, W a0, ..., W^(steps-1) a0]`` stacked on axis 1.

        ``a0`` is (k, N); the result is (k, steps, N).  The adjoint runs the
        reverse recurrence, so only this single node lands on the tape.
        """
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        wv, a0v = w.value, a0.value
        k, n = a0v.shape
        out = np.empty((k, steps, n))
        out[:, 0, :] = a0v
        for t in range(1, steps):
            out[:, t, :] = wv @ out[:, t - 1, :]

        def vjp(g):
            abar = np.ascontiguousarray(g[:, steps - 1, :])
            wbar = np.zeros_like(wv)
            for t in range(steps - 2, -1, -1):
                wbar += abar @ out[:, t, :].T
                abar = g[:, t, :] + wv.T @ abar
            return (wbar, abar)

        return self._record(out, (w.idx, a0.idx), vjp)


def lstsq_vjp(a_p: np.ndarray, a_m: np.ndarray, w_bar: np.ndarray,
              pinv: np.ndarray | None = None,
              rcond: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Cotangents of ``W = a_p @ pinv(a_m)`` with respect to both factors.

    Uses the standard pseudoinverse differential; all intermediates stay
    (k x k) or (k x M), never (M x M).
    """
    if pinv is None:
        pinv = linalg.pseudoinverse(a_m, rcond=rcond)
    ap_bar = w_bar @ pinv.T
    gp = a_p.T @ w_bar                      # cotangent on pinv(a_m), (M, k)
    ap_proj = a_m @ pinv                    # (k, k)
    ptp = pinv.T @ pinv                     # (k, k)
    t1 = -pinv.T @ gp @ pinv.T
    t2 = (np.eye(a_m.shape[0]) - ap_proj) @ (gp.T @ pinv) @ pinv.T
    z = ptp @ gp.T
    t3 = z - (z @ pinv) @ a_m
    return ap_bar, t1 + t2 + t3
