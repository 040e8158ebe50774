"""Primal-dual interior-point solver for the velocity-level contact LCP and its
implicit-differentiation adjoint.

The problem solved is the mixed complementarity system::

    M x - b - Je^T y - G^T lam = 0          (momentum balance)
    Je x - e0 = 0                           (joint rows)
    s = G x + F lam + g,  s >= 0, lam >= 0, s * lam = 0

with ``G = [J_c; J_f; 0]`` and ``F`` carrying the friction-cone coupling
``[[0, 0, 0], [0, 0, E], [diag(mu), -E^T, 0]]``.  ``x`` are the next-step twists
of the dynamic bodies and ``lam = (lam_c, lam_f, gamma)``.

After the interior-point iterations the active set is read off (``lam > s``)
and the reduced linear system is re-solved, which gives a solution exact to
rounding.  The same reduced system, transposed, yields the adjoint used for
gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np

log = logging.getLogger(__name__)

FRACTION_TO_BOUNDARY = 0.995
SVD_RCOND = 1e-13
WEAK_ACTIVITY = 1e-7
REFINE_TOLS = (1e-11, 1e-14)


class LcpError(RuntimeError):
    """Interior-point failure: iteration cap reached or a non-finite iterate."""

    def __init__(self, msg: str, residuals: dict | None = None):
        super().__init__(msg)
        self.residuals = residuals or {}


@dataclass
class SolverConfig:
    tol: float = 1e-8
    max_iter: int = 50
    polish: bool = True


@dataclass
class MlcpSolution:
    x: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    s: np.ndarray
    iterations: int
    residuals: dict = field(default_factory=dict)
    active: np.ndarray | None = None
    polished: bool = False
    # stacked (x, y, lam[active]) of the reduced system the solution came from
    z: np.ndarray | None = None

    @property
    def degenerate(self) -> bool:
        """True when some constraint is weakly active (both lam and slack tiny)."""
        if len(self.lam) == 0:
            return False
        return bool(np.min(np.maximum(self.lam, self.s)) < WEAK_ACTIVITY)


def residuals(M, b, Je, e0, G, F, g, x, y, lam, s) -> dict:
    r_d = M @ x - b - Je.T @ y - G.T @ lam
    r_e = Je @ x - e0
    slack = G @ x + F @ lam + g
    out = {
        "stationarity": float(np.abs(r_d).max(initial=0.0)),
        "equality": float(np.abs(r_e).max(initial=0.0)),
        "primal": float(max(np.abs(slack - s).max(initial=0.0), np.maximum(-s, 0).max(initial=0.0))),
        "dual": float(np.maximum(-lam, 0).max(initial=0.0)),
        "complementarity": float(np.abs(s * lam).max(initial=0.0)),
    }
    out["max"] = max(out.values())
    return out


@numba.njit(cache=True)
def _max_step(v, dv):
    a = np.inf
    for i in range(v.shape[0]):
        if dv[i] < 0:
            r = -v[i] / dv[i]
            if r < a:
                a = r
    return a


@numba.njit(cache=True)
def _interior_point(M, b, Je, e0, G, F, g, tol, max_iter):
    """Mehrotra predictor-corrector on the mixed LCP.

    Returns ``(x, y, lam, s, iterations, status)`` with status 0 on
    convergence, 1 when the cap was hit and 2 on a non-finite iterate.
    """
    n, ne, m = M.shape[0], Je.shape[0], G.shape[0]
    k = n + ne + m
    K0 = np.zeros((k, k))
    K0[:n, :n] = M
    K0[:n, n : n + ne] = -Je.T
    K0[:n, n + ne :] = -G.T
    K0[n : n + ne, :n] = Je
    K0[n + ne :, :n] = G
    K0[n + ne :, n + ne :] = F
    x = np.linalg.solve(M, b)
    y = np.zeros(ne)
    lam = np.ones(m)
    s = np.ones(m)
    rhs = np.zeros(k)
    for it in range(max_iter + 1):
        r_d = M @ x - b - Je.T @ y - G.T @ lam
        r_e = Je @ x - e0
        r_p = G @ x + F @ lam + g - s
        comp = s * lam
        err = 0.0
        for v in (r_d, r_e, r_p):
            for i in range(v.shape[0]):
                if abs(v[i]) > err:
                    err = abs(v[i])
        for i in range(m):
            if comp[i] > err:
                err = comp[i]
        if not np.isfinite(err):
            return x, y, lam, s, it, 2
        if err <= tol:
            return x, y, lam, s, it, 0
        if it == max_iter:
            break
        mu = comp.sum() / m
        K = K0.copy()
        for i in range(m):
            K[n + ne + i, n + ne + i] += s[i] / lam[i]
        # predictor
        rhs[:n] = -r_d
        rhs[n : n + ne] = -r_e
        rhs[n + ne :] = -r_p - s
        d = np.linalg.solve(K, rhs)
        dlam_a = d[n + ne :]
        ds_a = -s - (s / lam) * dlam_a
        a_aff = min(1.0, _max_step(lam, dlam_a), _max_step(s, ds_a))
        mu_aff = np.dot(s + a_aff * ds_a, lam + a_aff * dlam_a) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        base = (-comp - ds_a * dlam_a + sigma * mu) / lam
        rhs[n + ne :] = -r_p + base
        d = np.linalg.solve(K, rhs)
        dx, dy, dlam = d[:n], d[n : n + ne], d[n + ne :]
        ds = base - (s / lam) * dlam
        alpha = min(1.0, FRACTION_TO_BOUNDARY * min(_max_step(lam, dlam), _max_step(s, ds)))
        x = x + alpha * dx
        y = y + alpha * dy
        lam = lam + alpha * dlam
        s = s + alpha * ds
    return x, y, lam, s, max_iter, 1


def _reduced_system(M, Je, G, F, active):
    n, ne = M.shape[0], Je.shape[0]
    A = np.flatnonzero(active)
    GA = G[A]
    k = n + ne + len(A)
    K = np.zeros((k, k))
    K[:n, :n] = M
    K[:n, n : n + ne] = -Je.T
    K[:n, n + ne :] = -GA.T
    K[n : n + ne, :n] = Je
    K[n + ne :, :n] = GA
    K[n + ne :, n + ne :] = F[np.ix_(A, A)]
    return K, A


def _svd(K):
    U, S, Vt = np.linalg.svd(K)
    keep = S > SVD_RCOND * S[0] if len(S) else np.zeros(0, bool)
    return U[:, keep], S[keep], Vt[keep]


def _polish(M, b, Je, e0, G, F, g, x, y, lam, s, tol):
    n, ne = M.shape[0], Je.shape[0]
    active = lam > s
    K, A = _reduced_system(M, Je, G, F, active)
    rhs = np.concatenate((b, e0, -g[A]))
    U, S, Vt = _svd(K)
    z_mn = Vt.T @ ((U.T @ rhs) / S)
    if np.abs(K @ z_mn - rhs).max(initial=0.0) > tol * (1.0 + np.abs(rhs).max(initial=0.0)):
        return None
    # When the active rows leave the twist itself undetermined the minimum-norm
    # point is the (smooth) selection; otherwise only the multipliers are
    # ambiguous and we take the ones nearest the interior-point iterate.
    candidates = [z_mn]
    x_free = len(S) < K.shape[0] and np.linalg.norm(np.eye(n) - Vt[:, :n].T @ Vt[:, :n]) > 1e-9
    if not x_free:
        z_ip = np.concatenate((x, y, lam[A]))
        candidates.insert(0, z_mn + (z_ip - Vt.T @ (Vt @ z_ip)))
    for z in candidates:
        lam_p = np.zeros_like(lam)
        lam_p[A] = z[n + ne :]
        x_p = z[:n]
        y_p = z[n : n + ne]
        s_p = G @ x_p + F @ lam_p + g
        if (s_p[~active] < -tol).any() or (lam_p[A] < -tol).any():
            continue
        s_p[active] = 0.0
        return x_p, y_p, lam_p, s_p, active, z
    return None


def solve_mlcp(M, b, Je, e0, G, F, g, cfg: SolverConfig | None = None) -> MlcpSolution:
    """Solve the mixed LCP (numpy arrays, float64)."""
    cfg = cfg or SolverConfig()
    n, ne, m = M.shape[0], Je.shape[0], G.shape[0]
    if m == 0:
        K = np.block([[M, -Je.T], [Je, np.zeros((ne, ne))]]) if ne else M
        z = np.linalg.solve(K, np.concatenate((b, e0)))
        x, y = z[:n], z[n:]
        lam = s = np.zeros(0)
        return MlcpSolution(x, y, lam, s, 0, residuals(M, b, Je, e0, G, F, g, x, y, lam, s), np.zeros(0, bool), True)
    arrays = [np.ascontiguousarray(a, dtype=np.float64) for a in (M, b, Je.reshape(-1, n), e0, G, F, g)]
    polished = None
    total = 0
    # a loosely converged iterate can leave a pair (lam, s) unresolved; tighten
    # the interior-point tolerance until the active set is identifiable
    for tol in (cfg.tol, *REFINE_TOLS):
        x, y, lam, s, it, status = _interior_point(*arrays, float(min(tol, cfg.tol)), int(cfg.max_iter))
        total += it
        if status == 2:
            raise LcpError("non-finite interior-point iterate")
        if tol == cfg.tol:
            converged = status == 0
        if not cfg.polish:
            break
        polished = _polish(M, b, Je, e0, G, F, g, x, y, lam, s, cfg.tol)
        if polished is not None:
            break
    if polished is not None:
        x, y, lam, s, active, z = polished
        sol = MlcpSolution(x, y, lam, s, total, active=active, polished=True, z=z)
    else:
        sol = MlcpSolution(x, y, lam, s, total, active=lam > s)
    sol.residuals = residuals(M, b, Je, e0, G, F, g, x, y, lam, s)
    if not converged and sol.residuals["max"] > cfg.tol:
        raise LcpError(
            f"interior point did not converge in {cfg.max_iter} iterations "
            f"(max residual {sol.residuals['max']:.3e})",
            sol.residuals,
        )
    return sol


def mlcp_adjoint(M, Je, G, F, sol: MlcpSolution, adj_x: np.ndarray) -> dict[str, np.ndarray]:
    """Vector-Jacobian product of the solution ``x`` with respect to all problem data.

    Differentiates the reduced KKT system ``K z = r`` at the solution with the
    active set held fixed; inactive rows (lam = 0) pass no gradient.  ``z`` is
    the pseudo-inverse solution ``K⁺ r``, whose derivative also carries a
    null-space term when ``K`` is rank deficient.
    """
    n, ne, m = M.shape[0], Je.shape[0], G.shape[0]
    active = sol.active if sol.active is not None else sol.lam > sol.s
    K, A = _reduced_system(M, Je, G, F, active)
    z = sol.z if sol.z is not None else np.concatenate((sol.x, sol.y, sol.lam[A]))
    a = np.concatenate((adj_x, np.zeros(ne + len(A))))
    U, S, Vt = _svd(K)
    w = U @ ((Vt @ a) / S)
    gK = -np.outer(w, z)
    if len(S) < K.shape[0]:
        q = U @ ((Vt @ z) / S)
        gK += np.outer(q, a - Vt.T @ (Vt @ a))
    w1, w2, w3 = w[:n], w[n : n + ne], w[n + ne :]
    na = n + ne
    gG = np.zeros((m, n))
    gG[A] = gK[na:, :n] - gK[:n, na:].T
    gF = np.zeros((m, m))
    gF[np.ix_(A, A)] = gK[na:, na:]
    gg = np.zeros(m)
    gg[A] = -w3
    return {
        "M": gK[:n, :n],
        "b": w1,
        "Je": gK[n:na, :n] - gK[:n, n:na].T,
        "e0": w2,
        "G": gG,
        "F": gF,
        "g": gg,
    }
