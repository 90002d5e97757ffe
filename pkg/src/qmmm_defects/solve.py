"""Equilibration: L-BFGS energy minimisation and Jacobian-free Newton-Krylov force balance."""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .lattice import ReferenceConfig, site_norms_nn


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-8
    max_iter: int = 5000
    history: int = 20
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    krylov_dim: int = 60
    krylov_restarts: int = 5
    krylov_rtol: float = 1e-3
    fd_step: float = 1e-6
    max_newton: int = 60
    divergence_window: int = 5

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")

    @classmethod
    def from_dict(cls, d: dict | None) -> "SolverConfig":
        return cls(**(d or {}))


@dataclass
class SolveResult:
    u: np.ndarray
    converged: bool
    iterations: int
    value: float  # final energy (minimize) or residual sup-norm (force balance)
    gradnorm: float
    log: list = field(default_factory=list)
    message: str = ""

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "energy_or_residual", "gradnorm", "step"])
            w.writerows(self.log)


def _sup(v):
    return float(np.max(np.abs(v), initial=0.0))


def minimize(energy, u_init: np.ndarray, free: np.ndarray, cfg: SolverConfig = SolverConfig()) -> SolveResult:
    """L-BFGS over the free sites; ``energy(u)`` returns (E, gradient)."""
    free = np.asarray(free, bool)
    shape = np.shape(u_init)
    u = np.array(u_init, float)

    def fg(x):
        full = u.copy()
        full[free] = x.reshape(-1, shape[1])
        E, g = energy(full)
        return float(E), np.asarray(g, float)[free].ravel()

    x = u[free].ravel()
    E, g = fg(x)
    mem: deque = deque(maxlen=cfg.history)
    log = [(0, E, _sup(g), 0.0)]
    it = 0
    msg = ""
    while _sup(g) >= cfg.tol:
        if it >= cfg.max_iter:
            msg = "maximum iterations exceeded"
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(mem):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if mem:
            s, y, _ = mem[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(mem, reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        p = -q
        slope = g @ p
        if slope >= 0:
            mem.clear()
            p = -g
            slope = -(g @ g)
        t = 1.0 if mem else min(1.0, 1e-2 / max(_sup(g), 1e-300))
        # roundoff slack: energy differences below a few ulps of |E| are not resolved
        slack = 8 * np.finfo(float).eps * (abs(E) + 1.0)
        for _ in range(cfg.max_backtracks):
            xn = x + t * p
            try:
                En, gn = fg(xn)
            except ValueError:
                En, gn = math.inf, None
            if En <= E + cfg.armijo * t * slope + slack:
                break
            t *= cfg.backtrack
        else:
            msg = "line search failed"
            break
        s_, y_ = xn - x, gn - g
        sy = s_ @ y_
        if sy > 1e-300:
            mem.append((s_, y_, 1.0 / sy))
        x, E, g = xn, En, gn
        it += 1
        log.append((it, E, _sup(g), t))
    u[free] = x.reshape(-1, shape[1])
    return SolveResult(u, _sup(g) < cfg.tol, it, E, _sup(g), log, msg)


def solve_force_balance(force, u_init: np.ndarray, free: np.ndarray, cfg: SolverConfig = SolverConfig()) -> SolveResult:
    """Newton iteration for force(u) = 0 on the free sites with GMRES on FD directional derivatives."""
    free = np.asarray(free, bool)
    shape = np.shape(u_init)
    u = np.array(u_init, float)

    def R(x):
        full = u.copy()
        full[free] = x.reshape(-1, shape[1])
        return np.asarray(force(full), float)[free].ravel()

    x = u[free].ravel()
    r = R(x)
    norm = float(np.linalg.norm(r))
    log = [(0, _sup(r), norm, 0.0)]
    history = [norm]
    it = 0
    msg = ""
    while _sup(r) >= cfg.tol:
        if it >= cfg.max_newton:
            msg = "maximum Newton iterations exceeded"
            break
        h = cfg.fd_step * (1.0 + float(np.linalg.norm(x)))
        r0 = r

        def jv(v, x=x, r0=r0, h=h):
            nv = float(np.linalg.norm(v))
            if nv == 0:
                return np.zeros_like(v)
            return (R(x + (h / nv) * v) - r0) * (nv / h)

        J = spla.LinearOperator((len(x), len(x)), matvec=jv, dtype=float)
        # force = -gradient, so J is minus the Hessian; solve J dx = -r
        dx, info = spla.gmres(J, -r, rtol=cfg.krylov_rtol, atol=0.0, restart=cfg.krylov_dim,
                              maxiter=cfg.krylov_restarts)
        if not np.all(np.isfinite(dx)):
            msg = "Krylov breakdown"
            break
        t = 1.0
        for _ in range(cfg.max_backtracks):
            xn = x + t * dx
            try:
                rn = R(xn)
            except ValueError:
                rn = None
            if rn is not None and np.linalg.norm(rn) < (1 - 1e-4 * t) * norm:
                break
            t *= cfg.backtrack
        else:
            msg = "Krylov stagnation" if info != 0 else "residual backtracking failed"
            break
        x, r = xn, rn
        norm = float(np.linalg.norm(r))
        it += 1
        history.append(norm)
        log.append((it, _sup(r), norm, t))
        w = cfg.divergence_window
        if len(history) > w and all(history[-k] > history[-k - 1] for k in range(1, w + 1)):
            msg = "divergence"
            break
    u[free] = x.reshape(-1, shape[1])
    return SolveResult(u, _sup(r) < cfg.tol, it, _sup(r), float(np.linalg.norm(r)), log, msg)


# --------------------------------------------------------------------- decay


@dataclass
class DecayProfile:
    radii: np.ndarray
    maxima: np.ndarray
    slope: float | None
    stderr: float | None

    def rows(self):
        return list(zip(self.radii.tolist(), self.maxima.tolist()))


def loglog_slope(r, v):
    """Least-squares slope of log v against log r and its standard error."""
    r, v = np.asarray(r, float), np.asarray(v, float)
    if len(r) < 2:
        raise ValueError("need at least two points")
    X, Y = np.log(r), np.log(v)
    A = np.vstack([X, np.ones_like(X)]).T
    coef, res, *_ = np.linalg.lstsq(A, Y, rcond=None)
    if len(r) > 2:
        resid = Y - A @ coef
        s2 = float(resid @ resid) / (len(r) - 2)
        se = math.sqrt(s2 / float(np.sum((X - X.mean()) ** 2)))
    else:
        se = 0.0
    return float(coef[0]), se


def annulus_maxima(r: np.ndarray, values: np.ndarray, r_min: float, r_max: float, n_bins: int = 12):
    edges = np.geomspace(r_min, r_max, n_bins + 1)
    rs, vs = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        m = (r >= lo) & (r < hi)
        if m.any():
            rs.append(math.sqrt(lo * hi))
            vs.append(float(np.max(values[m])))
    return np.array(rs), np.array(vs)


def decay_profile(config: ReferenceConfig, u: np.ndarray, r_min: float = 3.0, r_max: float | None = None,
                  n_bins: int = 12, values: np.ndarray | None = None) -> DecayProfile:
    """Annulus maxima of |Du(l)|_N (or given per-site values) and their log-log slope."""
    r = config.radii()
    if r_max is None:
        r_max = 0.5 * config.R_DOM
    vals = site_norms_nn(config, u) if values is None else np.asarray(values, float)
    rs, vs = annulus_maxima(r, vals, r_min, r_max, n_bins)
    if len(rs) < 3:
        raise ValueError("too few annuli")
    ok = vs > 0
    if ok.sum() < 3:
        return DecayProfile(rs, vs, None, None)
    slope, se = loglog_slope(rs[ok], vs[ok])
    return DecayProfile(rs, vs, slope, se)
