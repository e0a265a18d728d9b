"""Velocity half-step fiber solvers with per-fiber optimality certificates.

Each position fiber advances its velocity profile by one implicit proximal
step: the output minimizes quadratic transport to the input plus the frozen
linear energy and the entropy of the fiber. A configurable inner solver
produces a candidate profile; a damped Newton engine then drives the
first-order optimality residual of the discretized problem to tolerance.
The residual is measured by rebuilding the interface velocity map from the
output, pushing the output through it with a hat-function mass split, and
taking the 1D transport distance back to the input fiber, so every returned
fiber carries its own error bound instead of a convergence assumption.

Discretization: cell masses m_j sit at centers v_j; the map

    T(b_i) = b_i + h * (F + alpha * b_i + alpha * g_i)

acts on cell interfaces b_i, with g_i the one-sided log-mass slope,
replicated at the two boundary interfaces. Each transported cell
[T(b_i), T(b_{i+1})] deposits its mass through the antiderivative of hat
functions centered at the v_j. The two edge hats extend flat outward, so
deposition conserves mass without clamping and stays C1 in the interface
positions. Solver unknowns are log masses (iterates stay positive) and
every accepted iterate keeps the interface map monotone, so the pushforward
is well defined at all times.

The engine has two phases. A ridged Gauss-Newton iteration in log mass
converges in a couple of steps whenever the fold region (interfaces pushed
past the grid edge, where the deposit cannot see individual masses) is
shallow; the ridge absorbs those flat directions. Fibers that stall switch
to a Levenberg-Marquardt iteration in width coordinates (first interface,
log widths, total log mass), which keeps the map monotone by construction
and crosses deposit breakpoints more reliably under strong forces. Cold
batches are solved in waves: a strided seed subset first, then bisection
midpoints warm-started from their nearest solved neighbor, which keeps
per-fiber iteration counts near the warm-start floor of one to three.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

__all__ = [
    "EntropicProximal",
    "ImplicitFD",
    "solve_velocity_fibers",
    "candidate_masses",
    "el_residuals",
    "chang_cooper_generator",
]

DEFAULT_EPSILON_FACTOR = 1e-3
DEFAULT_EL_TOL = 1e-6

_MASS_FLOOR = 1e-300
_WIDTH_TOL = 1e-9  # min interface width, relative to spacing, for a usable map
_MERIT_FLOOR = 1e-8  # relative row-weight floor of the scaled merit
_RIDGE_MIN = 1e-12
_LM_RIDGE_MIN = 1e-10
_GAIN_NEWTON_MAX = 0.75  # alpha*h/spacing above this goes straight to LM
_MEM_BUDGET = 96_000_000  # bytes of dense Jacobian blocks held at once


@dataclass(frozen=True)
class EntropicProximal:
    """Proximal splitting with entropically smeared transport.

    Alternates a closed-form multiplicative update for the linear-plus-
    entropy part of the fiber objective with an exact marginal projection
    on the input side, all in log domain. epsilon None means the default
    1e-3 * spacing^2 of the velocity grid; at that strength the kernel is
    numerically diagonal and the alternation contracts too slowly to be
    worth running out, so sweeps stop early once the per-sweep change
    stagnates and the Newton engine finishes the job.
    """

    epsilon: float | None = None
    max_sweeps: int = 2000
    tol: float = 1e-10

    def __post_init__(self) -> None:
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    def resolved_epsilon(self, spacing: float) -> float:
        if self.epsilon is not None:
            return float(self.epsilon)
        return DEFAULT_EPSILON_FACTOR * spacing * spacing


@dataclass(frozen=True)
class ImplicitFD:
    """Backward-Euler Chang-Cooper step(s) of the fiber flow."""

    inner_substeps: int = 1

    def __post_init__(self) -> None:
        if self.inner_substeps < 1:
            raise ValueError("inner_substeps must be at least 1")


# ---------------------------------------------------------------------------
# candidate solvers


def candidate_masses(p, forces, v_centers, spacing, alpha, h, solver):
    """Run the configured inner solver on a fiber batch; no certification."""
    p = np.asarray(p, dtype=float)
    forces = np.asarray(forces, dtype=float)
    v_centers = np.asarray(v_centers, dtype=float)
    if isinstance(solver, EntropicProximal):
        return _entropic_all(p, forces, v_centers, spacing, alpha, h, solver)
    if isinstance(solver, ImplicitFD):
        return _implicit_fd_all(p, forces, v_centers, spacing, alpha, h, solver)
    raise TypeError(f"unknown fiber solver {solver!r}")


def _lse(a, axis):
    mx = a.max(axis=axis, keepdims=True)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(a - safe).sum(axis=axis)) + np.squeeze(safe, axis)
    return out


def _entropic_all(p, forces, v, dv, alpha, h, params):
    nf, n = p.shape
    eps = params.resolved_epsilon(dv)
    logK = -((v[:, None] - v[None, :]) ** 2) / (2.0 * h * eps)
    lin = h * (forces[:, None] * v[None, :] + 0.5 * alpha * v[None, :] ** 2)
    ah = alpha * h
    logp = np.log(np.maximum(p, _MASS_FLOOR))

    # chunk over fibers: the kernel broadcast holds (chunk, n, n) floats
    chunk = max(1, int(_MEM_BUDGET // (2 * 8 * n * n)))
    m = np.empty_like(p)
    sweeps_total = 0
    for lo_f in range(0, nf, chunk):
        sl = slice(lo_f, min(lo_f + chunk, nf))
        loga = np.zeros((sl.stop - sl.start, n))
        cur = p[sl].copy()
        prev_change = np.inf
        stalled = 0
        for sweep in range(params.max_sweeps):
            sweeps_total += 1
            logb = logp[sl] - _lse(loga[:, :, None] + logK[None, :, :], axis=1)
            logkb = _lse(logb[:, None, :] + logK[None, :, :], axis=2)
            logm = (eps * logkb - lin[sl] - ah) / (ah + eps)
            loga = logm - logkb
            nxt = np.exp(logm)
            change = np.abs(nxt - cur).sum(axis=1).max()
            cur = nxt
            if change < params.tol:
                break
            # the tiny-epsilon regime contracts at a uselessly slow rate;
            # hand a stagnating iterate to the certifying engine instead
            stalled = stalled + 1 if change > 0.95 * prev_change else 0
            prev_change = change
            if stalled >= 10:
                break
        m[sl] = cur / cur.sum(axis=1, keepdims=True)
    return m, {"sweeps": sweeps_total, "epsilon": eps}


def chang_cooper_generator(force, v_centers, spacing, alpha):
    """Zero-flux tridiagonal generator of the fiber drift-diffusion flow.

    Discretizes d rho/dt = d_v((force + alpha v) rho) + alpha d_vv rho with
    interface weights chosen so the discrete Gibbs profile is stationary.
    Returns (lo, dg, up): sub-, main and superdiagonal of the generator,
    with lo[i] multiplying rho_i in the update of rho_{i+1}.
    """
    if not alpha > 0:
        raise ValueError("generator needs positive friction")
    n = v_centers.shape[0]
    B = force + alpha * (v_centers[:-1] + 0.5 * spacing)
    w = B * spacing / alpha
    small = np.abs(w) < 1e-4
    w_safe = np.where(small, 1.0, w)
    delta = np.where(small, 0.5 - w / 12.0, 1.0 / w_safe - 1.0 / np.expm1(w_safe))
    dd = alpha / spacing
    up_if = B * (1.0 - delta) + dd  # rho_{i+1} weight in the interface flux
    dn_if = B * delta - dd  # rho_i weight in the interface flux
    up = up_if / spacing
    lo = -dn_if / spacing
    dg = np.zeros(n)
    dg[:-1] += dn_if / spacing
    dg[1:] -= up_if / spacing
    return lo, dg, up


def _implicit_fd_all(p, forces, v, dv, alpha, h, params):
    nf, n = p.shape
    tau = h / params.inner_substeps
    m = np.empty_like(p)
    ab = np.zeros((3, n))
    for i in range(nf):
        lo, dg, up = chang_cooper_generator(forces[i], v, dv, alpha)
        ab[0, 1:] = -tau * up
        ab[1, :] = 1.0 - tau * dg
        ab[2, :-1] = -tau * lo
        x = p[i]
        for _ in range(params.inner_substeps):
            x = solve_banded((1, 1), ab, x)
        x = np.maximum(x, 0.0)
        m[i] = x / x.sum()
    return m, {"sweeps": nf * params.inner_substeps, "epsilon": None}


# ---------------------------------------------------------------------------
# deposit geometry


def _hat_antideriv(y, j, v, dv, n):
    """Antiderivative of the hat centered at v[j]; edge hats flat outward."""
    c = v[j]
    t = (y - c) / dv
    a = np.where(
        t <= -1.0, 0.0,
        np.where(t <= 0.0, 0.5 * dv * (t + 1.0) ** 2,
                 np.where(t <= 1.0, dv * (1.0 - 0.5 * (1.0 - t) ** 2), dv)))
    a = np.where(j == 0, np.where(y <= v[0], y - v[0], a - 0.5 * dv), a)
    a = np.where(j == n - 1, np.where(y >= v[n - 1], 0.5 * dv + (y - v[n - 1]), a), a)
    return a


def _hat_value(y, j, v, dv, n):
    t = np.maximum(0.0, 1.0 - np.abs(y - v[j]) / dv)
    t = np.where((j == 0) & (y <= v[0]), 1.0, t)
    t = np.where((j == n - 1) & (y >= v[n - 1]), 1.0, t)
    return t


def _interface_map(u, forces, edges, dv, alpha, h):
    """T at cell interfaces from log masses u; edge slopes replicated."""
    nf, n = u.shape
    gb = np.empty((nf, n + 1))
    gb[:, 1:n] = (u[:, 1:] - u[:, :-1]) / dv
    gb[:, 0] = gb[:, 1]
    gb[:, n] = gb[:, n - 1]
    e = edges[None, :]
    return e + h * (forces[:, None] + alpha * e + alpha * gb)


def _push_pieces(m, tau, v, dv, want_jac):
    """Deposit transported cells onto the grid; optionally sensitivities.

    Returns (out, Mw, G): out[f] the pushed masses, Mw[f, j, k] = m_k w_jk
    (mass sensitivities) and G[f, j, i] = d out_j / d tau_i. Widths must be
    positive.
    """
    nf, n = m.shape
    width = tau[:, 1:] - tau[:, :-1]
    lo, hi = tau[:, :-1], tau[:, 1:]
    jlo = np.clip(np.floor((lo - v[0]) / dv).astype(int) - 1, 0, n - 1)
    jhi = np.clip(np.ceil((hi - v[0]) / dv).astype(int), 0, n - 1)
    span = int((jhi - jlo).max()) + 1
    out = np.zeros((nf, n))
    Mw = np.zeros((nf, n, n)) if want_jac else None
    G = np.zeros((nf, n, n + 1)) if want_jac else None
    ks = np.broadcast_to(np.arange(n), (nf, n))
    fi = np.broadcast_to(np.arange(nf)[:, None], (nf, n))
    for d in range(span):
        j = jlo + d
        valid = j <= jhi
        j = np.minimum(j, n - 1)
        w = (_hat_antideriv(hi, j, v, dv, n) - _hat_antideriv(lo, j, v, dv, n)) / width
        w = np.where(valid, w, 0.0)
        np.add.at(out, (fi, j), m * w)
        if not want_jac:
            continue
        tlo = np.where(valid, _hat_value(lo, j, v, dv, n), 0.0)
        thi = np.where(valid, _hat_value(hi, j, v, dv, n), 0.0)
        np.add.at(Mw, (fi, j, ks), m * w)
        np.add.at(G, (fi, j, ks), m * (w - tlo) / width)
        np.add.at(G, (fi, j, ks + 1), m * (thi - w) / width)
    return out, Mw, G


def _jac_logmass(Mw, G, scale):
    """Chain deposit sensitivities through the interface map, in log mass.

    scale = h * alpha / spacing; interface i moves with +u_i and -u_{i-1},
    with the replicated end interfaces folded onto their inner neighbors.
    """
    nf, n, _ = Mw.shape
    J = Mw.copy()
    Hm = G[:, :, 1:n].copy()
    Hm[:, :, 0] += G[:, :, 0]
    Hm[:, :, n - 2] += G[:, :, n]
    J[:, :, 1:] += scale * Hm
    J[:, :, : n - 1] -= scale * Hm
    return J


def _w2sq_common_grid(wa, wb, v):
    """Squared 1D quantile transport between mass vectors on shared atoms."""
    nf, n = wa.shape
    ca = np.cumsum(wa, axis=1)
    cb = np.cumsum(wb, axis=1)
    ca = ca / ca[:, -1:]
    cb = cb / cb[:, -1:]
    q = np.sort(np.concatenate([ca, cb], axis=1), axis=1)
    segw = np.diff(q, axis=1, prepend=0.0)
    mids = q - 0.5 * segw
    # rows are independent; offsets make one flat searchsorted serve all
    off = 3.0 * np.arange(nf)[:, None]
    base = np.arange(nf)[:, None] * n
    ia = np.searchsorted((ca + off).ravel(), (mids + off).ravel()).reshape(nf, 2 * n)
    ib = np.searchsorted((cb + off).ravel(), (mids + off).ravel()).reshape(nf, 2 * n)
    ia = np.minimum(ia - base, n - 1)
    ib = np.minimum(ib - base, n - 1)
    return np.sum(segw * (v[ia] - v[ib]) ** 2, axis=1)


def el_residuals(m, p, forces, v_centers, spacing, alpha, h):
    """Optimality residual and minimum map width for each fiber.

    Pushes m through the interface map built from its own log gradient and
    returns the 1D transport distance to p, plus the smallest interface
    width (nonpositive means the map folds and the residual is reported
    as infinity for that fiber).
    """
    m = np.asarray(m, dtype=float)
    p = np.asarray(p, dtype=float)
    forces = np.asarray(forces, dtype=float)
    nf, n = m.shape
    edges = np.concatenate((
        [v_centers[0] - 0.5 * spacing], v_centers + 0.5 * spacing))
    u = np.log(np.maximum(m, _MASS_FLOOR))
    tau = _interface_map(u, forces, edges, spacing, alpha, h)
    minw = np.diff(tau, axis=1).min(axis=1)
    el = np.full(nf, np.inf)
    ok = minw > 0
    if ok.any():
        out, _, _ = _push_pieces(m[ok], tau[ok], v_centers, spacing, False)
        el[ok] = np.sqrt(_w2sq_common_grid(out, p[ok], v_centers))
    return el, minw


# ---------------------------------------------------------------------------
# certified engine


def _pullback_start(p, forces, edges, v, dv, alpha, h):
    """Midpoint log-density pullback through the map built from p itself."""
    n = v.shape[0]
    logp = np.log(np.maximum(p, _MASS_FLOOR))
    tau = _interface_map(logp, forces, edges, dv, alpha, h)
    mid = 0.5 * (tau[:, 1:] + tau[:, :-1])
    k = np.clip(np.floor((mid - v[0]) / dv).astype(int), 0, n - 2)
    frac = (mid - v[k]) / dv
    lm = logp[np.arange(p.shape[0])[:, None], k]
    lm = lm + frac * (np.take_along_axis(logp, k + 1, axis=1) - lm)
    with np.errstate(over="ignore", invalid="ignore"):
        m = np.exp(lm) * np.diff(tau, axis=1) / dv
    m = np.where(np.isfinite(m) & (m > 0), m, 0.0)
    tot = m.sum(axis=1, keepdims=True)
    good = tot[:, 0] > 0
    m[good] /= tot[good]
    m[~good] = p[~good]
    return m


def _select_starts(cands, p, forces, edges, v, dv, alpha, h):
    """Best monotone candidate per fiber, ranked by deposit residual.

    One deposit per candidate is far cheaper than the Newton sweeps a poor
    start costs, and it makes the cascade robust to a stage-1 solver that
    hands back a biased profile.
    """
    nf, n = p.shape
    w_row = np.maximum(p, p.max(axis=1, keepdims=True) * _MERIT_FLOOR)
    chosen = np.full(nf, -1)
    score = np.full(nf, np.inf)
    U = np.empty((nf, n))
    for ci, cand in enumerate(cands):
        if cand is None:
            continue
        c = np.maximum(np.asarray(cand, dtype=float), _MASS_FLOOR)
        c = c / c.sum(axis=1, keepdims=True)
        lc = np.log(c)
        tau = _interface_map(lc, forces, edges, dv, alpha, h)
        goodmap = np.diff(tau, axis=1).min(axis=1) > _WIDTH_TOL * dv
        if not goodmap.any():
            continue
        merit = np.full(nf, np.inf)
        gi = np.nonzero(goodmap)[0]
        out, _, _ = _push_pieces(c[gi], tau[gi], v, dv, False)
        merit[gi] = _merit(out - p[gi], w_row[gi])
        take = merit < score
        if take.any():
            U[take] = lc[take]
            score[take] = merit[take]
            chosen[take] = ci
    bad = chosen < 0
    if bad.any():
        # no monotone start exists; width coordinates clamp, so seed those
        # rows with the input fiber itself
        c = np.maximum(np.asarray(cands[-1], dtype=float), _MASS_FLOOR)
        c = c / c.sum(axis=1, keepdims=True)
        U[bad] = np.log(c[bad])
    return U, chosen >= 0


def _merit(R, w_row):
    with np.errstate(over="ignore", invalid="ignore"):
        s = np.sqrt(np.sum((R / w_row) ** 2, axis=1))
    return np.where(np.isfinite(s), s, np.inf)


def _jac_chunks(count, n, arrays):
    size = max(1, int(_MEM_BUDGET // (arrays * 8 * n * n)))
    return [slice(lo, min(lo + size, count)) for lo in range(0, count, size)]


def _gn_phase(U, p, forces, edges, v, dv, alpha, h, el_tol, max_iter):
    """Ridged Gauss-Newton in log mass. Returns (m, el, ok, iters)."""
    nf, n = U.shape
    scale = h * alpha / dv
    w_row = np.maximum(p, p.max(axis=1, keepdims=True) * _MERIT_FLOOR)
    lam = np.full(nf, 1e-6)
    stall = np.zeros(nf, dtype=int)
    el = np.full(nf, np.inf)
    ok = np.zeros(nf, dtype=bool)
    iters = np.zeros(nf, dtype=int)
    alive = np.ones(nf, dtype=bool)
    eye = np.eye(n)

    tau = _interface_map(U, forces, edges, dv, alpha, h)
    R = np.empty((nf, n))
    best = np.full(nf, np.inf)
    for sl in _jac_chunks(nf, n, 1):
        out, _, _ = _push_pieces(np.exp(U[sl]), tau[sl], v, dv, False)
        R[sl] = out - p[sl]
    best[:] = _merit(R, w_row)

    for _ in range(max_iter):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        el[idx] = np.sqrt(_w2sq_common_grid(R[idx] + p[idx], p[idx], v))
        done = idx[el[idx] <= el_tol]
        ok[done] = True
        alive[done] = False
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        iters[idx] += 1

        JtJ = np.empty((idx.size, n, n))
        Jtr = np.empty((idx.size, n))
        s0 = np.empty(idx.size)
        for sl in _jac_chunks(idx.size, n, 4):
            sub = idx[sl]
            mm = np.exp(U[sub])
            _, Mw, G = _push_pieces(mm, tau[sub], v, dv, True)
            J = _jac_logmass(Mw, G, scale)
            Js = J / w_row[sub][:, :, None]
            JtJ[sl] = np.matmul(Js.transpose(0, 2, 1), Js)
            Jtr[sl] = np.matmul(
                Js.transpose(0, 2, 1), (-R[sub] / w_row[sub])[:, :, None])[:, :, 0]
            s0[sl] = np.sqrt(np.trace(JtJ[sl], axis1=1, axis2=2) / n)

        # trial rounds re-solve with a stiffer ridge on rejection, bending
        # the step toward gradient descent, not merely shortening it
        accepted = np.zeros(idx.size, dtype=bool)
        for _round in range(8):
            trying = np.nonzero(~accepted)[0]
            if trying.size == 0:
                break
            sub = idx[trying]
            ridge = (lam[sub] * s0[trying]) ** 2
            A = JtJ[trying] + ridge[:, None, None] * eye[None, :, :]
            try:
                du = np.linalg.solve(A, Jtr[trying][:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                du = np.empty((sub.size, n))
                for r in range(sub.size):
                    try:
                        du[r] = np.linalg.solve(A[r], Jtr[trying][r])
                    except np.linalg.LinAlgError:
                        du[r] = 0.0
            # fraction to boundary keeps every interface width positive
            wid = np.diff(tau[sub], axis=1)
            tau_t = _interface_map(U[sub] + du, forces[sub], edges, dv, alpha, h)
            cw = np.diff(tau_t, axis=1) - wid
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(cw < 0, -wid / cw, np.inf)
            t = np.minimum(1.0, 0.95 * ratio.min(axis=1))
            hit = np.zeros(sub.size, dtype=bool)
            for _bt in range(3):
                open_ = np.nonzero(~hit)[0]
                if open_.size == 0:
                    break
                rows = sub[open_]
                u2 = U[rows] + t[open_, None] * du[open_]
                tau2 = _interface_map(u2, forces[rows], edges, dv, alpha, h)
                okw = np.diff(tau2, axis=1).min(axis=1) > 0
                merit2 = np.full(rows.size, np.inf)
                if okw.any():
                    with np.errstate(over="ignore", invalid="ignore"):
                        out2, _, _ = _push_pieces(
                            np.exp(u2[okw]), tau2[okw], v, dv, False)
                    merit2[okw] = _merit(out2 - p[rows[okw]], w_row[rows[okw]])
                good = merit2 < best[rows]
                if good.any():
                    grow = rows[good]
                    shift = np.log(np.exp(u2[good]).sum(axis=1, keepdims=True))
                    U[grow] = u2[good] - shift
                    tau[grow] = _interface_map(
                        U[grow], forces[grow], edges, dv, alpha, h)
                    sel = np.searchsorted(np.nonzero(okw)[0], np.nonzero(good)[0])
                    out_g = out2[sel] / np.exp(shift)
                    R[grow] = out_g - p[grow]
                    best[grow] = _merit(R[grow], w_row[grow])
                    hit[open_[good]] = True
                t[open_[~good]] *= 0.5
            accepted[trying[hit]] = True
            lam[sub[hit]] = np.maximum(lam[sub[hit]] * 0.3, _RIDGE_MIN)
            lam[sub[~hit]] *= 4.0
        rej_idx = idx[~accepted]
        stall[idx[accepted]] = 0
        stall[rej_idx] += 1
        alive[idx[stall[idx] >= 2]] = False

    m = np.exp(U)
    m /= m.sum(axis=1, keepdims=True)
    return m, el, ok, iters


def _unpack_widths(z, drift, dv, ha):
    """Width coordinates to (interfaces, log masses)."""
    nf, n = z.shape
    tau = np.empty((nf, n + 1))
    tau[:, 1] = z[:, 0]
    with np.errstate(over="ignore"):
        tau[:, 2:n] = z[:, :1] + dv * np.cumsum(np.exp(z[:, 1:n - 1]), axis=1)
    tau[:, 0] = drift[:, 0] + tau[:, 1] - drift[:, 1]
    tau[:, n] = drift[:, n] + tau[:, n - 1] - drift[:, n - 1]
    gb = (tau[:, 1:n] - drift[:, 1:n]) / ha
    u = np.empty((nf, n))
    u[:, 0] = z[:, n - 1]
    u[:, 1:] = z[:, n - 1:n] + dv * np.cumsum(gb, axis=1)
    return tau, u


def _lm_phase(m0, p, forces, edges, v, dv, alpha, h, el_tol, max_iter):
    """Levenberg-Marquardt in width coordinates. Returns (m, el, ok, iters)."""
    nf, n = m0.shape
    ha = h * alpha
    scale = dv / ha
    w_row = np.maximum(p, p.max(axis=1, keepdims=True) * _MERIT_FLOOR)
    drift = edges[None, :] + h * (forces[:, None] + alpha * edges[None, :])
    eye = np.eye(n)

    u0 = np.log(np.maximum(m0, _MASS_FLOOR))
    tau0 = _interface_map(u0, forces, edges, dv, alpha, h)
    z = np.empty((nf, n))
    z[:, 0] = tau0[:, 1]
    z[:, 1:n - 1] = np.log(
        np.maximum(np.diff(tau0, axis=1)[:, 1:n - 1], 1e-12 * dv) / dv)
    z[:, n - 1] = u0[:, 0]

    tau, u = _unpack_widths(z, drift, dv, ha)
    with np.errstate(over="ignore"):
        m = np.exp(u)
    R = np.empty((nf, n))
    for sl in _jac_chunks(nf, n, 1):
        out, _, _ = _push_pieces(m[sl], tau[sl], v, dv, False)
        R[sl] = out - p[sl]
    best = _merit(R, w_row)

    lam = np.full(nf, 1e-3)
    stall = np.zeros(nf, dtype=int)
    el = np.full(nf, np.inf)
    ok = np.zeros(nf, dtype=bool)
    iters = np.zeros(nf, dtype=int)
    alive = np.ones(nf, dtype=bool)

    for _ in range(max_iter):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        el[idx] = np.sqrt(_w2sq_common_grid(
            np.maximum(R[idx] + p[idx], 0.0), p[idx], v))
        done = idx[el[idx] <= el_tol]
        ok[done] = True
        alive[done] = False
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        iters[idx] += 1

        dz = np.empty((idx.size, n))
        s0 = np.empty(idx.size)
        AtA = np.empty((idx.size, n, n))
        Atr = np.empty((idx.size, n))
        for sl in _jac_chunks(idx.size, n, 6):
            sub = idx[sl]
            _, Mw, G = _push_pieces(m[sub], tau[sub], v, dv, True)
            B = G.copy()
            ML = np.cumsum(Mw[:, :, ::-1], axis=2)[:, :, ::-1] * scale
            B[:, :, 1:n] += ML[:, :, 1:n]
            wint = dv * np.exp(z[sub][:, 1:n - 1])
            A = np.empty((sub.size, n, n))
            A[:, :, 0] = B.sum(axis=2)
            Bc = np.cumsum(B[:, :, ::-1], axis=2)[:, :, ::-1]
            A[:, :, 1:n - 1] = Bc[:, :, 2:n] * wint[:, None, :]
            A[:, :, n - 1] = Mw.sum(axis=2)
            As = A / w_row[sub][:, :, None]
            AtA[sl] = np.matmul(As.transpose(0, 2, 1), As)
            Atr[sl] = np.matmul(
                As.transpose(0, 2, 1), (-R[sub] / w_row[sub])[:, :, None])[:, :, 0]
            s0[sl] = np.sqrt(np.trace(AtA[sl], axis1=1, axis2=2) / n)

        accepted = np.zeros(idx.size, dtype=bool)
        for _trial in range(8):
            trying = np.nonzero(~accepted)[0]
            if trying.size == 0:
                break
            sub = idx[trying]
            ridge = (lam[sub] * s0[trying]) ** 2
            Ad = AtA[trying] + ridge[:, None, None] * eye[None, :, :]
            try:
                step = np.linalg.solve(Ad, Atr[trying][:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                step = np.empty((sub.size, n))
                for r in range(sub.size):
                    try:
                        step[r] = np.linalg.solve(Ad[r], Atr[trying][r])
                    except np.linalg.LinAlgError:
                        step[r] = 0.0
            z2 = z[sub] + step
            tau2, u2 = _unpack_widths(z2, drift[sub], dv, ha)
            with np.errstate(over="ignore"):
                m2 = np.exp(u2)
            sane = np.isfinite(m2).all(axis=1) & np.isfinite(tau2).all(axis=1)
            merit2 = np.full(sub.size, np.inf)
            if sane.any():
                with np.errstate(over="ignore", invalid="ignore"):
                    out2, _, _ = _push_pieces(m2[sane], tau2[sane], v, dv, False)
                merit2[sane] = _merit(out2 - p[sub[sane]], w_row[sub[sane]])
            good = merit2 < best[sub]
            if good.any():
                gsub = sub[good]
                z[gsub] = z2[good]
                tau[gsub] = tau2[good]
                u[gsub] = u2[good]
                m[gsub] = m2[good]
                sel = np.searchsorted(np.nonzero(sane)[0], np.nonzero(good)[0])
                R[gsub] = out2[sel] - p[gsub]
                best[gsub] = merit2[good]
                lam[gsub] = np.maximum(lam[gsub] * 0.3, _LM_RIDGE_MIN)
                accepted[trying[good]] = True
            lam[sub[~good]] *= 4.0
        rej_idx = idx[~accepted]
        stall[idx[accepted]] = 0
        stall[rej_idx] += 1
        alive[idx[stall[idx] >= 2]] = False

    m = np.maximum(m, 0.0)
    m /= m.sum(axis=1, keepdims=True)
    return m, el, ok, iters


def _wave_order(nf, stride):
    """Strided seeds, then bisection midpoints until every index appears."""
    waves = [list(range(0, nf, stride))]
    seen = set(waves[0])
    s = stride
    while len(seen) < nf:
        s = max(s // 2, 1)
        wave = [i for i in range(0, nf) if i % s == 0 and i not in seen]
        if not wave:
            wave = [i for i in range(nf) if i not in seen]
        waves.append(wave)
        seen.update(wave)
    return [np.asarray(w, dtype=int) for w in waves]


def solve_velocity_fibers(p, forces, v_centers, spacing, alpha, h, solver=None,
                          *, el_tol=DEFAULT_EL_TOL, warm=None, gn_max=14,
                          lm_max=300, wave_stride=16):
    """Advance a fiber batch one proximal step, certified per fiber.

    p: (nf, n) nonnegative conditional masses, rows summing to 1.
    forces: (nf,) frozen force per fiber.
    warm: optional (nf, n) masses used as the preferred starting point
        (typically the previous step's output).

    Returns (m, el, info): row-normalized output masses, the per-fiber
    optimality residual of the returned masses, and solver counters.
    Fibers whose residual exceeds el_tol are reported, not raised; the
    caller owns the failure policy.
    """
    p = np.asarray(p, dtype=float)
    forces = np.asarray(forces, dtype=float)
    v_centers = np.asarray(v_centers, dtype=float)
    if p.ndim != 2 or p.shape[0] != forces.shape[0] or p.shape[1] != v_centers.shape[0]:
        raise ValueError("fiber batch shapes disagree")
    if not alpha > 0:
        raise ValueError("fiber solvers need positive friction")
    if not h > 0:
        raise ValueError("time step must be positive")
    if solver is None:
        solver = EntropicProximal()
    nf, n = p.shape
    dv = float(spacing)
    edges = np.concatenate((
        [v_centers[0] - 0.5 * dv], v_centers + 0.5 * dv))
    gain = alpha * h / dv

    stage1, s1info = candidate_masses(p, forces, v_centers, dv, alpha, h, solver)
    pull = _pullback_start(p, forces, edges, v_centers, dv, alpha, h)

    out = np.empty_like(p)
    el = np.full(nf, np.inf)
    info = {
        "stage1_sweeps": s1info["sweeps"],
        "epsilon": s1info["epsilon"],
        "gn_iters": 0,
        "lm_iters": 0,
        "lm_fibers": 0,
        "waves": 0,
    }

    cold_waves = (warm is None and gain <= _GAIN_NEWTON_MAX
                  and nf > 2 * wave_stride)
    waves = _wave_order(nf, wave_stride) if cold_waves else [np.arange(nf)]
    info["waves"] = len(waves)
    solved_sorted: list[int] = []

    for wi, wave in enumerate(waves):
        pw = p[wave]
        fw = forces[wave]
        cands = []
        if warm is not None:
            cands.append(np.asarray(warm, dtype=float)[wave])
        if wi > 0:
            arr = np.asarray(solved_sorted)
            pos = np.searchsorted(arr, wave)
            left = arr[np.clip(pos - 1, 0, arr.size - 1)]
            right = arr[np.clip(pos, 0, arr.size - 1)]
            near = np.where(np.abs(wave - left) <= np.abs(right - wave), left, right)
            cands.append(out[near])
        cands.append(stage1[wave])
        cands.append(pull[wave])
        cands.append(pw)
        U0, mono = _select_starts(cands, pw, fw, edges, v_centers, dv, alpha, h)

        m_w = np.exp(U0)
        m_w /= m_w.sum(axis=1, keepdims=True)
        el_w = np.full(wave.size, np.inf)
        ok_w = np.zeros(wave.size, dtype=bool)
        if gain <= _GAIN_NEWTON_MAX and mono.any():
            gi = np.nonzero(mono)[0]
            mg, elg, okg, itg = _gn_phase(
                U0[gi], pw[gi], fw[gi], edges, v_centers, dv, alpha, h,
                el_tol, gn_max)
            m_w[gi] = mg
            el_w[gi] = elg
            ok_w[gi] = okg
            info["gn_iters"] += int(itg.sum())
        hard = np.nonzero(~ok_w)[0]
        if hard.size:
            info["lm_fibers"] += int(hard.size)
            # restart from the validated cascade start, not the stalled
            # iterate: a half-converged fold configuration is a poor seed
            m_lm = np.exp(U0[hard])
            m_lm /= m_lm.sum(axis=1, keepdims=True)
            ml, ell, okl, itl = _lm_phase(
                m_lm, pw[hard], fw[hard], edges, v_centers, dv, alpha, h,
                el_tol, lm_max)
            keep = ell < el_w[hard]
            m_w[hard[keep]] = ml[keep]
            el_w[hard[keep]] = ell[keep]
            ok_w[hard] |= okl
            info["lm_iters"] += int(itl.sum())
        out[wave] = m_w
        el[wave] = el_w
        solved_sorted = sorted(set(solved_sorted) | set(wave.tolist()))

    # residuals of the returned (normalized) masses, not the last iterates
    el, minw = el_residuals(out, p, forces, v_centers, dv, alpha, h)
    info["max_el"] = float(el.max()) if nf else 0.0
    info["min_width"] = float(minw.min()) if nf else np.inf
    info["uncertified"] = int(np.sum(el > el_tol))
    return out, el, info
