"""Hamiltonian evaluation and the pointwise control update.

Everything here is pure. The batch functions take one leading sample axis and
are what the solver loop calls; the single-point wrappers mirror them for
direct use and testing. The candidate control v may be a single point (k,) or
a per-sample array (B, k).

The augmented Hamiltonian adds rho/2 times squared coefficient and
G-derivative differences between the candidate and the current control; its
derivative terms are assembled from the closed-form bundle (chain rule through
z + delta), never finite differences, because they sit inside a minimization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import ConfigurationError
from .model import ControlDomain, ProblemSpec, enumerate_controls

Array = np.ndarray


@dataclass(frozen=True)
class HamiltonianPoint:
    """Arguments of the augmented Hamiltonian at one (t, omega)."""

    t: float
    x: Array          # (n,)
    y: float
    z: Array          # (d,)
    p: Array          # (n,)
    q: Array          # (n, d)
    P: Array          # (n, n)
    u_prev: Array     # (k,)


def _ctl(v, B: int, k: int) -> Array:
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        return np.broadcast_to(v, (B, k))
    return v


def delta_tilde_batch(spec: ProblemSpec, t: float, x: Array, p: Array,
                      v, u) -> Array:
    """Component i = (sigma^i(t, x, v) - sigma^i(t, x, u))' p, shape (B, d)."""
    B = x.shape[0]
    v = _ctl(v, B, spec.k)
    u = _ctl(u, B, spec.k)
    ds = spec.diffusion(t, x, v) - spec.diffusion(t, x, u)
    return np.einsum("mnd,mn->md", ds, p)


def g_batch(spec: ProblemSpec, t: float, x: Array, y: Array, z: Array,
            p: Array, q: Array, v, u) -> Array:
    """G = p'b(v) + sum_i (q^i)' sigma^i(v) + f(t, x, y, z + delta, v)."""
    B = x.shape[0]
    v = _ctl(v, B, spec.k)
    delta = delta_tilde_batch(spec, t, x, p, v, u)
    bv = spec.drift(t, x, v)
    sv = spec.diffusion(t, x, v)
    return (np.einsum("mn,mn->m", p, bv)
            + np.einsum("mnd,mnd->m", q, sv)
            + spec.driver(t, x, y, z + delta, v))


def h_batch(spec: ProblemSpec, t: float, x: Array, y: Array, z: Array,
            p: Array, q: Array, P: Array, v, u) -> Array:
    """H = G + (1/2) sum_i (sigma^i(v) - sigma^i(u))' P (sigma^i(v) - sigma^i(u))."""
    B = x.shape[0]
    v = _ctl(v, B, spec.k)
    u = _ctl(u, B, spec.k)
    g = g_batch(spec, t, x, y, z, p, q, v, u)
    ds = spec.diffusion(t, x, v) - spec.diffusion(t, x, u)
    quad = np.einsum("mni,mnk,mki->m", ds, P, ds)
    return g + 0.5 * quad


def _g_derivatives(spec: ProblemSpec, t, x, y, z, p, q, v, u):
    """(G_x, G_y, G_z) at (v, u), each evaluated at the shifted z + delta."""
    dv = spec.derivatives
    delta = delta_tilde_batch(spec, t, x, p, v, u)
    zs = z + delta
    fz = dv.f_z(t, x, y, zs, v)
    sx_v = dv.sigma_x(t, x, v)
    sx_u = dv.sigma_x(t, x, u)
    gx = (np.einsum("mij,mi->mj", dv.b_x(t, x, v), p)
          + np.einsum("miab,mai->mb", sx_v, q)
          + dv.f_x(t, x, y, zs, v)
          + np.einsum("mik,mi->mk", np.einsum("mijk,mj->mik", sx_v - sx_u, p), fz))
    gy = dv.f_y(t, x, y, zs, v)
    return gx, gy, fz


def penalty_batch(spec: ProblemSpec, t: float, x: Array, y: Array, z: Array,
                  p: Array, q: Array, v, u) -> Array:
    """Squared-difference penalty of the augmented Hamiltonian (without rho/2).

    sum_{psi in {b, sigma, f}} |psi(v) - psi(u)|^2
    + sum_{w in {x, y, z}} |G_w(v, u) - G_w(u, u)|^2,
    the driver difference taken at the unshifted z.
    """
    B = x.shape[0]
    v = _ctl(v, B, spec.k)
    u = _ctl(u, B, spec.k)
    db = spec.drift(t, x, v) - spec.drift(t, x, u)
    dsig = spec.diffusion(t, x, v) - spec.diffusion(t, x, u)
    df = spec.driver(t, x, y, z, v) - spec.driver(t, x, y, z, u)
    pen = (db ** 2).sum(axis=1) + (dsig ** 2).sum(axis=(1, 2)) + df ** 2
    gx_v, gy_v, gz_v = _g_derivatives(spec, t, x, y, z, p, q, v, u)
    gx_u, gy_u, gz_u = _g_derivatives(spec, t, x, y, z, p, q, u, u)
    pen = pen + ((gx_v - gx_u) ** 2).sum(axis=1)
    pen = pen + (gy_v - gy_u) ** 2
    pen = pen + ((gz_v - gz_u) ** 2).sum(axis=1)
    return pen


def h_aug_batch(spec: ProblemSpec, t: float, x: Array, y: Array, z: Array,
                p: Array, q: Array, P: Array, v, u, rho: float) -> Array:
    vals = h_batch(spec, t, x, y, z, p, q, P, v, u)
    if rho != 0.0:
        vals = vals + 0.5 * rho * penalty_batch(spec, t, x, y, z, p, q, v, u)
    return vals


HamiltonianFn = Callable[..., Array]


def minimize_step(spec: ProblemSpec, t: float, x: Array, y: Array, z: Array,
                  p: Array, q: Array, P: Array, u_prev: Array, candidates: Array,
                  rho: float, h_fn: Optional[HamiltonianFn] = None,
                  pen_fn: Optional[HamiltonianFn] = None):
    """Argmin of the augmented Hamiltonian over the candidate list, per sample.

    Ties go to the lowest candidate index. Samples whose current control beats
    every candidate (possible only off the enumeration) keep it. Returns
    (u_new (B, k), h_new (B,), h_prev (B,), h_aug_new (B,)) where h_* are
    values of the plain (non-augmented) Hamiltonian.
    """
    if h_fn is None:
        h_fn = h_batch
    if pen_fn is None:
        pen_fn = penalty_batch
    B = x.shape[0]
    n_c = len(candidates)
    h_vals = np.empty((n_c, B))
    aug_vals = np.empty((n_c, B))
    for idx, cand in enumerate(candidates):
        hv = h_fn(spec, t, x, y, z, p, q, P, cand, u_prev)
        h_vals[idx] = hv
        if rho != 0.0:
            aug_vals[idx] = hv + 0.5 * rho * pen_fn(spec, t, x, y, z, p, q, cand, u_prev)
        else:
            aug_vals[idx] = hv
    best = np.argmin(aug_vals, axis=0)
    rows = np.arange(B)
    h_prev = h_fn(spec, t, x, y, z, p, q, P, u_prev, u_prev)
    keep = aug_vals[best, rows] > h_prev  # penalty vanishes at v = u_prev
    u_new = candidates[best].copy()
    u_new[keep] = u_prev[keep]
    h_new = np.where(keep, h_prev, h_vals[best, rows])
    h_aug_new = np.where(keep, h_prev, aug_vals[best, rows])
    return u_new, h_new, h_prev, h_aug_new


# ---------------------------------------------------------------------------
# single-point surface

def _point_arrays(spec: ProblemSpec, point: HamiltonianPoint):
    x = np.asarray(point.x, dtype=float).reshape(1, spec.n)
    y = np.asarray([point.y], dtype=float)
    z = np.asarray(point.z, dtype=float).reshape(1, spec.d)
    p = np.asarray(point.p, dtype=float).reshape(1, spec.n)
    q = np.asarray(point.q, dtype=float).reshape(1, spec.n, spec.d)
    P = np.asarray(point.P, dtype=float).reshape(1, spec.n, spec.n)
    u = np.asarray(point.u_prev, dtype=float).reshape(1, spec.k)
    return x, y, z, p, q, P, u


def delta_tilde(spec: ProblemSpec, t: float, x, p, v, u) -> Array:
    x = np.asarray(x, dtype=float).reshape(1, spec.n)
    p = np.asarray(p, dtype=float).reshape(1, spec.n)
    v = np.asarray(v, dtype=float).reshape(1, spec.k)
    u = np.asarray(u, dtype=float).reshape(1, spec.k)
    return delta_tilde_batch(spec, t, x, p, v, u)[0]


def eval_G(spec: ProblemSpec, t: float, x, y, z, p, q, v, u) -> float:
    x = np.asarray(x, dtype=float).reshape(1, spec.n)
    z = np.asarray(z, dtype=float).reshape(1, spec.d)
    p = np.asarray(p, dtype=float).reshape(1, spec.n)
    q = np.asarray(q, dtype=float).reshape(1, spec.n, spec.d)
    v = np.asarray(v, dtype=float).reshape(1, spec.k)
    u = np.asarray(u, dtype=float).reshape(1, spec.k)
    return float(g_batch(spec, t, x, np.asarray([y], dtype=float), z, p, q, v, u)[0])


def eval_H(spec: ProblemSpec, point: HamiltonianPoint, v) -> float:
    x, y, z, p, q, P, u = _point_arrays(spec, point)
    v = np.asarray(v, dtype=float).reshape(1, spec.k)
    return float(h_batch(spec, point.t, x, y, z, p, q, P, v, u)[0])


def eval_H_aug(spec: ProblemSpec, point: HamiltonianPoint, v, rho: float) -> float:
    if rho < 0:
        raise ConfigurationError("rho must be >= 0")
    x, y, z, p, q, P, u = _point_arrays(spec, point)
    v = np.asarray(v, dtype=float).reshape(1, spec.k)
    return float(h_aug_batch(spec, point.t, x, y, z, p, q, P, v, u, rho)[0])


def minimize_H_aug(spec: ProblemSpec, point: HamiltonianPoint,
                   domain: ControlDomain, rho: float) -> Tuple[Array, float]:
    """Best candidate and its augmented value; first lowest index wins ties."""
    if rho < 0:
        raise ConfigurationError("rho must be >= 0")
    candidates = enumerate_controls(domain)
    x, y, z, p, q, P, u = _point_arrays(spec, point)
    u_new, _, h_prev, h_aug_new = minimize_step(
        spec, point.t, x, y, z, p, q, P, u, candidates, rho)
    return u_new[0], float(h_aug_new[0])
