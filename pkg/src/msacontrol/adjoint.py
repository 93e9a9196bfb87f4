"""First- and second-order adjoint solvers along a simulated trajectory.

Both adjoints are linear backward equations; coefficients are assembled
pointwise along (t_j, X_j, Y_j, Z_j, u_j) and handed to the generic linear
BSDE solver. The matrix-valued second-order equation is solved in its
column-stacked n^2-dimensional form and symmetrized step by step.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .bsde import (BackwardPaths, RegressionBackend, solve_linear_bsde,
                   solve_state_bsde, _step_features)
from .model import ProblemSpec
from .stochastics import BrownianBatch, ControlField, ForwardPaths, TimeGrid, simulate_forward

Array = np.ndarray


@dataclass(frozen=True)
class FirstOrderAdjoint:
    p: Array  # (M, N+1, n)
    q: Array  # (M, N, n, d)


@dataclass(frozen=True)
class SecondOrderAdjoint:
    P: Array  # (M, N+1, n, n), symmetric
    Q: Array  # (M, N, n, n, d)
    asymmetry: float  # max pre-projection |P - P'| seen during the solve


def upsilon(spec: ProblemSpec, t: float, x, p, q, u) -> Array:
    """Column i = (sigma_x^i)' p + q^i, shape (n, d)."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    u = np.asarray(u, dtype=float).reshape(1, -1)
    p = np.asarray(p, dtype=float).reshape(1, -1)
    q = np.asarray(q, dtype=float).reshape(1, spec.n, spec.d)
    sx = spec.derivatives.sigma_x(t, x, u)
    return _upsilon_batch(sx, p, q)[0]


def _upsilon_batch(sx: Array, p: Array, q: Array) -> Array:
    # sx (M, d, n, n), p (M, n), q (M, n, d) -> (M, n, d)
    return np.einsum("miab,ma->mbi", sx, p) + q


def _coeffs_at(spec: ProblemSpec, t: float, x: Array, y: Array, z: Array, u: Array):
    """A_1, B_1, f_x of the linearized first-order equation at one time slice."""
    dv = spec.derivatives
    fz = dv.f_z(t, x, y, z, u)          # (M, d)
    fy = dv.f_y(t, x, y, z, u)          # (M,)
    fx = dv.f_x(t, x, y, z, u)          # (M, n)
    sx = dv.sigma_x(t, x, u)            # (M, d, n, n)
    bx = dv.b_x(t, x, u)                # (M, n, n)
    eye = np.eye(spec.n)
    a1 = np.einsum("mi,miab->mab", fz, sx) + fy[:, None, None] * eye + bx
    b1 = fz[:, :, None, None] * eye + sx
    return a1, b1, fx, sx, fz, fy


def first_order_adjoint(spec: ProblemSpec, forward: ForwardPaths,
                        backward: BackwardPaths, control: ControlField,
                        backend) -> FirstOrderAdjoint:
    """Solve the costate equation with terminal Phi_x(X_T).

    Drift form: A_1 = sum_i f_{z_i} sigma_x^i + f_y I + b_x,
    B_1^i = f_{z_i} I + sigma_x^i, inhomogeneity f_x.
    """
    batch = forward.batch
    M, N, n, d = batch.n_paths, batch.grid.steps, spec.n, spec.d
    nodes = batch.grid.nodes
    A = np.empty((M, N, n, n))
    B = np.empty((M, N, d, n, n))
    c = np.empty((M, N, n))
    feats = _features_grid(forward, control, backend)
    for j in range(N):
        A[:, j], B[:, j], c[:, j], _, _, _ = _coeffs_at(
            spec, nodes[j], forward.states[:, j, :], backward.values[:, j],
            backward.integrand[:, j, :], control.values[:, j, :])
    terminal = spec.derivatives.phi_x(forward.states[:, N, :])
    p, q = solve_linear_bsde(terminal, A, B, c, feats, batch, backend)
    return FirstOrderAdjoint(p=p, q=q)


def _features_grid(forward: ForwardPaths, control: ControlField, backend) -> Array:
    N = forward.batch.grid.steps
    cols = [_step_features(forward, control, j, backend) for j in range(N)]
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# second order

def _vec(P: Array) -> Array:
    # stack columns: vec(P)[i + j*n] = P[i, j]
    M, n, _ = P.shape
    return P.transpose(0, 2, 1).reshape(M, n * n)


def _unvec(v: Array, n: int) -> Array:
    M = v.shape[0]
    return v.reshape(M, n, n).transpose(0, 2, 1)


def _commutation(n: int) -> Array:
    K = np.zeros((n * n, n * n))
    for i in range(n):
        for j in range(n):
            K[i + j * n, j + i * n] = 1.0
    return K


def _kron_batch(A: Array, B: Array) -> Array:
    M, p, qq = A.shape
    _, r, s = B.shape
    return np.einsum("mpq,mrs->mprqs", A, B).reshape(M, p * r, qq * s)


def second_order_vanishes(spec: ProblemSpec) -> bool:
    """Whether P = 0 identically, so the n^2-dimensional solve can be skipped.

    True when declared outright, or when the terminal curvature, both
    coefficient Hessians, and the driver Hessian all vanish: the equation is
    then linear homogeneous with zero terminal.
    """
    s = spec.structure
    if getattr(s, "second_order_zero", False):
        return True
    return s.phi_xx_zero and s.b_xx_zero and s.sigma_xx_zero and s.f_hess_zero


def psi_matrix(spec: ProblemSpec, t: float, x: Array, y: Array, z: Array,
               u: Array, p: Array, q: Array) -> Array:
    """Inhomogeneity of the second-order equation, shape (M, n, n).

    Psi = sum_j (b_xx)^j p^j
        + sum_{i,j} (sigma_xx^i)^j (f_{z_i} p^j + q^{ji})
        + (I, p, Upsilon) D2f (I, p, Upsilon)'.
    """
    dv = spec.derivatives
    M, n = x.shape[0], spec.n
    bxx = dv.b_xx(t, x, u)              # (M, n, n, n)
    sxx = dv.sigma_xx(t, x, u)          # (M, d, n, n, n)
    fz = dv.f_z(t, x, y, z, u)          # (M, d)
    hess = dv.f_hess(t, x, y, z, u)     # (M, m, m)
    sx = dv.sigma_x(t, x, u)
    ups = _upsilon_batch(sx, p, q)      # (M, n, d)
    psi = np.einsum("mjab,mj->mab", bxx, p)
    coef = fz[:, :, None] * p[:, None, :] + q.transpose(0, 2, 1)  # (M, d, n) = fz_i p^j + q^{ji}
    psi = psi + np.einsum("mijab,mij->mab", sxx, coef)
    eye = np.broadcast_to(np.eye(n), (M, n, n))
    mmat = np.concatenate([eye, p[:, :, None], ups], axis=2)      # (M, n, n+1+d)
    psi = psi + np.einsum("mia,mab,mjb->mij", mmat, hess, mmat)
    return psi


def second_order_adjoint(spec: ProblemSpec, forward: ForwardPaths,
                         backward: BackwardPaths, control: ControlField,
                         first: FirstOrderAdjoint, backend,
                         symmetrize: bool = True) -> SecondOrderAdjoint:
    """Solve the matrix-valued equation in column-stacked form.

    The drift coefficients come from the component equation
    f_y P + b_x'P + P'b_x + sum_i f_{z_i}(sx_i'P + P'sx_i) + sum_i sx_i'P sx_i
    + sum_i f_{z_i} Q^i + sum_i (sx_i'Q^i + Q^i'sx_i) + Psi
    via vec identities with the commutation matrix. With ``symmetrize`` each
    P_j is projected to (P + P')/2; the worst pre-projection asymmetry is
    reported.
    """
    batch = forward.batch
    M, N, n, d = batch.n_paths, batch.grid.steps, spec.n, spec.d
    n2 = n * n
    nodes = batch.grid.nodes
    K = _commutation(n)
    eye_n = np.eye(n)
    eye_n2 = np.eye(n2)
    ik = eye_n2 + K
    A = np.empty((M, N, n2, n2))
    B = np.empty((M, N, d, n2, n2))
    c = np.empty((M, N, n2))
    dv = spec.derivatives
    for j in range(N):
        t, xj = nodes[j], forward.states[:, j, :]
        yj, zj = backward.values[:, j], backward.integrand[:, j, :]
        uj = control.values[:, j, :]
        pj, qj = first.p[:, j, :], first.q[:, j, :, :]
        bx = dv.b_x(t, xj, uj)
        sx = dv.sigma_x(t, xj, uj)
        fz = dv.f_z(t, xj, yj, zj, uj)
        fy = dv.f_y(t, xj, yj, zj, uj)
        eyeM = np.broadcast_to(eye_n, (M, n, n))
        kron_b = _kron_batch(eyeM, bx.transpose(0, 2, 1))
        g_p = fy[:, None, None] * eye_n2 + np.einsum("pq,mqr->mpr", ik, kron_b)
        for i in range(d):
            sxt = sx[:, i].transpose(0, 2, 1)
            kron_s = _kron_batch(eyeM, sxt)
            ik_kron_s = np.einsum("pq,mqr->mpr", ik, kron_s)
            g_p = g_p + fz[:, i, None, None] * ik_kron_s + _kron_batch(sxt, sxt)
            B[:, j, i] = (fz[:, i, None, None] * eye_n2 + ik_kron_s).transpose(0, 2, 1)
        A[:, j] = g_p.transpose(0, 2, 1)
        c[:, j] = _vec(psi_matrix(spec, t, xj, yj, zj, uj, pj, qj))
    terminal = _vec(dv.phi_xx(forward.states[:, N, :]))
    feats = _features_grid(forward, control, backend)
    tracker = {"asym": 0.0}

    def project(pj_flat):
        P = _unvec(pj_flat, n)
        Pt = P.transpose(0, 2, 1)
        tracker["asym"] = max(tracker["asym"], float(np.max(np.abs(P - Pt))))
        return _vec(0.5 * (P + Pt))

    p_flat, q_flat = solve_linear_bsde(
        terminal, A, B, c, feats, batch, backend,
        project=project if symmetrize else None)
    P = np.stack([_unvec(p_flat[:, j, :], n) for j in range(N + 1)], axis=1)
    Q = np.stack([np.stack([_unvec(q_flat[:, j, :, i], n) for i in range(d)], axis=-1)
                  for j in range(N)], axis=1)
    return SecondOrderAdjoint(P=P, Q=Q, asymmetry=tracker["asym"])


def zero_second_order(spec: ProblemSpec, batch: BrownianBatch) -> SecondOrderAdjoint:
    M, N, n, d = batch.n_paths, batch.grid.steps, spec.n, spec.d
    return SecondOrderAdjoint(P=np.zeros((M, N + 1, n, n)),
                              Q=np.zeros((M, N, n, n, d)), asymmetry=0.0)


# ---------------------------------------------------------------------------
# deterministic fast paths (classic RK4)

def _as_time_fn(value, shape):
    if callable(value):
        return value
    arr = np.broadcast_to(np.asarray(value, dtype=float), shape).copy()
    return lambda t: arr


def ode_adjoint_linear(f1, f2, b1, alpha, grid: TimeGrid):
    """Deterministic costate of the linear recursive problem.

    Solves p' = -[(f2 I + b1') p + f1] backward from p_T = alpha, and the
    scalar growth ODE Gamma' = f2 Gamma, Gamma_0 = 1, both with fourth-order
    Runge-Kutta on the grid nodes. Returns (p (N+1, n), Gamma (N+1,)).

    The drift matrix is transposed: the costate couples through the
    transposed state Jacobian, which only shows once n > 1.
    """
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    n = alpha.shape[0]
    f1 = _as_time_fn(f1, (n,))
    b1 = _as_time_fn(b1, (n, n))
    f2 = f2 if callable(f2) else (lambda t, v=float(f2): v)
    nodes = grid.nodes
    dt = grid.dt

    def rhs(t, p):
        return -((f2(t) * np.eye(n) + b1(t).T) @ p + f1(t))

    p = np.empty((grid.steps + 1, n))
    p[-1] = alpha
    for j in range(grid.steps, 0, -1):
        p[j - 1] = _rk4_step(rhs, nodes[j], p[j], -dt)
    gamma = np.empty(grid.steps + 1)
    gamma[0] = 1.0
    for j in range(grid.steps):
        gamma[j + 1] = _rk4_step(lambda t, g: f2(t) * g, nodes[j], gamma[j], dt)
    return p, gamma


def lq_second_order_ode(gamma_mat, a_fn, b1, grid: TimeGrid) -> Array:
    """Deterministic second-order adjoint of the quadratic-cost problem.

    P' = -(b1' P + P' b1 + A), P_T = Gamma; returns (N+1, n, n).
    """
    gamma_mat = np.atleast_2d(np.asarray(gamma_mat, dtype=float))
    n = gamma_mat.shape[0]
    a_fn = _as_time_fn(a_fn, (n, n))
    b1 = _as_time_fn(b1, (n, n))

    def rhs(t, P):
        return -(b1(t).T @ P + P.T @ b1(t) + a_fn(t))

    nodes, dt = grid.nodes, grid.dt
    P = np.empty((grid.steps + 1, n, n))
    P[-1] = gamma_mat
    for j in range(grid.steps, 0, -1):
        P[j - 1] = _rk4_step(rhs, nodes[j], P[j], -dt)
    return P


def _rk4_step(rhs, t, y, h):
    k1 = rhs(t, y)
    k2 = rhs(t + h / 2.0, y + h / 2.0 * k1)
    k3 = rhs(t + h / 2.0, y + h / 2.0 * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# ---------------------------------------------------------------------------
# cross-check oracles and diagnostics

def explicit_p0_oracle(spec: ProblemSpec, control: ControlField, batch: BrownianBatch,
                       backend=None):
    """Monte Carlo estimate of p_0 from the state-transition representation.

    p_0 = E[Gamma_T' Phi_x(X_T) + int_0^T Gamma_s' f_x ds], with Gamma the
    transition matrix of the linearized state, simulated by Euler alongside X.
    Returns (estimate (n,), stderr (n,)).
    """
    backend = backend or RegressionBackend()
    forward = simulate_forward(spec, control, batch)
    backward = solve_state_bsde(spec, forward, control, backend)
    M, N, n = batch.n_paths, batch.grid.steps, spec.n
    nodes, dt = batch.grid.nodes, batch.dt
    G = np.broadcast_to(np.eye(n), (M, n, n)).copy()
    integral = np.zeros((M, n))
    for j in range(N):
        a1, b1, fx, _, _, _ = _coeffs_at(
            spec, nodes[j], forward.states[:, j, :], backward.values[:, j],
            backward.integrand[:, j, :], control.values[:, j, :])
        integral += np.einsum("mab,ma->mb", G, fx) * dt
        dG = (np.einsum("mab,mbc->mac", a1, G) * dt
              + np.einsum("miab,mbc,mi->mac", b1, G, batch.increments[:, j, :]))
        G = G + dG
    samples = np.einsum("mab,ma->mb", G, spec.derivatives.phi_x(forward.states[:, N, :]))
    samples = samples + integral
    est = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(M) if M > 1 else np.full(n, np.nan)
    return est, se


def empirical_knorm(q: Array, grid: TimeGrid, forward: ForwardPaths, backend) -> float:
    """Heuristic conditional-second-moment norm of the martingale integrand.

    For each j, regress sum_{l>=j} |q_l|^2 dt on X_{t_j} and take the largest
    predicted value over paths; returns the max over j. Diagnostic only: a
    regression sup cannot certify an essential supremum.
    """
    q = np.asarray(q, dtype=float)
    M, N = q.shape[0], q.shape[1]
    sq = (q ** 2).sum(axis=(2, 3)) * grid.dt
    tails = np.cumsum(sq[:, ::-1], axis=1)[:, ::-1]
    worst = 0.0
    for j in range(N):
        preds = backend.project(j, forward.states[:, j, :], tails[:, j])
        worst = max(worst, float(np.max(preds)))
    return worst
