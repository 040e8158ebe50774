"""Per-solve physical invariants of the contact solver."""

from __future__ import annotations

import numpy as np

from pinwm.contacts import detect_contacts

COMPLEMENTARITY = 1e-8
TOL = 1e-6


def check_solve(scene, rec) -> dict[str, float]:
    """Violation measures for one recorded substep (all should be <= 0)."""
    prob, sol = rec.problem, rec.solution
    n_d = scene.sim.n_d
    out = {"complementarity": sol.residuals["complementarity"] - COMPLEMENTARITY}
    nc = prob.n_contacts
    if nc:
        fr = sol.lambda_f.reshape(nc, n_d).sum(axis=1)
        out["friction_cone"] = float(np.max(fr - prob.mu * sol.lambda_c)) - TOL
        out["dual_sign"] = float(-min(sol.lambda_c.min(), sol.lambda_f.min(initial=0.0))) - TOL
    after = detect_contacts(scene, rec.new_state, margin=0.0)
    depth = float(after.depths.max()) if len(after) else 0.0
    out["penetration"] = depth - scene.sim.slop - TOL
    return out


def worst(scene, records) -> dict[str, float]:
    agg: dict[str, float] = {}
    for rec in records:
        for k, v in check_solve(scene, rec).items():
            agg[k] = max(agg.get(k, -np.inf), v)
    return agg
