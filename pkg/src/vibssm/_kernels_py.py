"""Pure NumPy implementations of the surface kernels.

These mirror ``_kernels.pyx`` exactly and are used whenever the compiled
extension is unavailable (or ``VIBSSM_PURE_PYTHON=1`` is set).

The surface is star-shaped: for a unit direction ``d`` the surface point is
``X(d) = s(d) * (radii * d)`` with ``s(d) = 1 + sum_t coef[t] * d**exps[t]``.
"""

import numpy as np


def _monomials(d, exps):
    # d: (N, 3), exps: (T, 3) -> values (N, T) and ambient gradient (N, T, 3)
    pw = [np.stack([d[:, ax] ** e for e in range(int(exps.max()) + 1)], axis=1) for ax in range(3)]
    vals = np.ones((d.shape[0], exps.shape[0]))
    for ax in range(3):
        vals *= pw[ax][:, exps[:, ax]]
    grad = np.empty((d.shape[0], exps.shape[0], 3))
    for ax in range(3):
        e = exps[:, ax]
        term = np.ones_like(vals)
        for other in range(3):
            if other == ax:
                term *= e * pw[other][:, np.maximum(e - 1, 0)]
            else:
                term *= pw[other][:, exps[:, other]]
        grad[:, :, ax] = term
    return vals, grad


def radial_scale(d, exps, coef):
    """Return s(d) and its ambient gradient for unit directions ``d``."""
    vals, grad = _monomials(d, exps)
    return 1.0 + vals @ coef, np.einsum("ntk,t->nk", grad, coef)


def implicit_sdf(q, radii, exps, coef):
    """First-order signed distance ``F / |grad F|`` with ``F = |q/radii| - s(d)``.

    Negative inside the surface.
    """
    q = np.asarray(q, dtype=np.float64)
    u = q / radii
    rho = np.linalg.norm(u, axis=1)
    out = np.empty(q.shape[0])
    centre = rho < 1e-12
    safe = np.where(centre, 1.0, rho)
    d = u / safe[:, None]
    d[centre] = (1.0, 0.0, 0.0)
    s, g = radial_scale(d, exps, coef)
    f = rho - s
    gt = g - np.sum(g * d, axis=1, keepdims=True) * d
    grad = (d - gt / safe[:, None]) / radii
    gn = np.linalg.norm(grad, axis=1)
    out[:] = f / gn
    # the gradient is singular at the centre; fall back to the scaled radial gap
    out[centre] = -s[centre] * np.min(radii)
    return out


def _tangent_basis(d):
    e = np.zeros_like(d)
    use_y = np.abs(d[:, 0]) > 0.9
    e[~use_y, 0] = 1.0
    e[use_y, 1] = 1.0
    t1 = e - np.sum(e * d, axis=1, keepdims=True) * d
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(d, t1)
    return t1, t2


def _surface(d, radii, exps, coef):
    s, g = radial_scale(d, exps, coef)
    ad = radii * d
    x = s[:, None] * ad
    # jacobian of X w.r.t. ambient d: s*diag(radii) + (radii*d) g^T
    jac = s[:, None, None] * np.eye(3)[None] * radii[None, :, None] + ad[:, :, None] * g[:, None, :]
    return x, jac


def project_to_surface(q, d0, radii, exps, coef, tol=1e-6, max_iter=100):
    """Levenberg-Marquardt projection of query points onto the surface.

    Returns ``(directions, distances, converged)``.
    """
    q = np.asarray(q, dtype=np.float64)
    d = np.array(d0, dtype=np.float64)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    n = q.shape[0]
    lam = np.full(n, 1e-3)
    x, jac = _surface(d, radii, exps, coef)
    energy = 0.5 * np.sum((x - q) ** 2, axis=1)
    converged = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        da = d[idx]
        t1, t2 = _tangent_basis(da)
        tb = np.stack([t1, t2], axis=2)  # (n, 3, 2)
        jt = jac[idx] @ tb  # (n, 3, 2)
        r = x[idx] - q[idx]
        grad = np.einsum("nij,ni->nj", jt, r)
        h = np.einsum("nij,nik->njk", jt, jt)
        scale = np.trace(h, axis1=1, axis2=2) / 2.0 + 1e-300
        h = h + (lam[idx] * scale)[:, None, None] * np.eye(2)[None]
        step = -np.linalg.solve(h, grad[:, :, None])[:, :, 0]
        move = np.einsum("nij,nj->ni", tb, step)
        cand = da + move
        cand /= np.linalg.norm(cand, axis=1, keepdims=True)
        xc, jc = _surface(cand, radii, exps, coef)
        ec = 0.5 * np.sum((xc - q[idx]) ** 2, axis=1)
        moved = np.linalg.norm(np.einsum("nij,nj->ni", jt, step), axis=1)
        accept = ec <= energy[idx]
        acc = idx[accept]
        d[acc] = cand[accept]
        x[acc] = xc[accept]
        jac[acc] = jc[accept]
        energy[acc] = ec[accept]
        lam[acc] = np.maximum(lam[acc] / 3.0, 1e-12)
        rej = idx[~accept]
        lam[rej] *= 4.0
        done = idx[(accept & (moved < tol)) | (lam[idx] > 1e12)]
        converged[idx[accept & (moved < tol)]] = True
        active[done] = False
    return d, np.sqrt(2.0 * energy), converged
