"""Exact 1D optimal transport per fiber and the fibered distances.

Fiber measures are treated as atoms sitting at cell centers (not piecewise
constant reconstructions), so the quantile construction gives the exact
quadratic cost and a well-defined monotone coupling with mass splitting.
A fibered distance between two phase densities is the marginal-weighted
aggregate of per-fiber costs, finite only when the fixed marginals agree;
the infinite case is a flagged report state, never an operand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MarginalMismatch, MassMismatch
from .phase_space import (
    Axis,
    Marginal1D,
    PhaseDensity,
    disintegrate,
    _frozen,
)

DEFAULT_MARGINAL_TOLERANCE = 1e-8


def quantile_coupling(pos_a, mass_a, pos_b, mass_b):
    """Monotone coupling of two atomic measures on the line.

    Both mass vectors must be positive and sum to 1; positions must be
    sorted ascending. Returns (src_idx, tgt_idx, seg_mass): the coupling
    moves seg_mass[l] from pos_a[src_idx[l]] to pos_b[tgt_idx[l]]. Exact,
    up to the float cumsum; every atom may split across several segments.
    """
    cum_a = np.cumsum(mass_a)
    cum_b = np.cumsum(mass_b)
    cum_a[-1] = 1.0  # pin the endpoints; cumsum roundoff must not drop a segment
    cum_b[-1] = 1.0
    s = np.union1d(cum_a, cum_b)             # merged quantile breakpoints, ends at 1
    s = np.concatenate(([0.0], s))
    seg_mass = np.diff(s)
    mids = 0.5 * (s[:-1] + s[1:])
    src = np.searchsorted(cum_a, mids, side="left")
    tgt = np.searchsorted(cum_b, mids, side="left")
    keep = seg_mass > 0
    return src[keep], tgt[keep], seg_mass[keep]


def w2_cost_sq_atoms(pos_a, mass_a, pos_b, mass_b):
    """Exact squared quadratic transport cost between two atomic measures.

    Positions may be unsorted and masses unnormalized (they are normalized
    here); zero-mass atoms are dropped.
    """
    pos_a = np.asarray(pos_a, dtype=float)
    pos_b = np.asarray(pos_b, dtype=float)
    mass_a = np.asarray(mass_a, dtype=float)
    mass_b = np.asarray(mass_b, dtype=float)
    ka = mass_a > 0
    kb = mass_b > 0
    pa, ma = pos_a[ka], mass_a[ka]
    pb, mb = pos_b[kb], mass_b[kb]
    if pa.size == 0 or pb.size == 0:
        raise MassMismatch("cannot transport an empty measure")
    oa = np.argsort(pa, kind="stable")
    ob = np.argsort(pb, kind="stable")
    pa, ma = pa[oa], ma[oa]
    pb, mb = pb[ob], mb[ob]
    ma = ma / ma.sum()
    mb = mb / mb.sum()
    src, tgt, seg = quantile_coupling(pa, ma, pb, mb)
    return float(np.sum(seg * (pa[src] - pb[tgt]) ** 2))


@dataclass(frozen=True)
class FiberTransport:
    """Monotone optimal transport between two fibers on a common grid.

    map_values[i] is the barycentric image of source cell i (mass-split
    atoms are averaged), padded across empty cells so the array stays
    nondecreasing. The exact coupling segments are kept for pushforwards.
    """

    source_fiber: Marginal1D
    target_fiber: Marginal1D
    map_values: np.ndarray
    cost_sq: float
    src_idx: np.ndarray = field(repr=False)
    tgt_idx: np.ndarray = field(repr=False)
    seg_mass: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "map_values", _frozen(self.map_values))
        if np.any(np.diff(self.map_values) < 0):
            raise ValueError("map_values must be nondecreasing")
        if self.cost_sq < 0:
            raise ValueError("cost_sq must be nonnegative")


@dataclass(frozen=True)
class FiberedDistanceReport:
    """Outcome of a fibered distance evaluation.

    When matched_marginals is False the distance is infinite by definition;
    value then reads math.inf purely as a report, and callers must branch on
    the flag before doing arithmetic.
    """

    value: float
    per_fiber_cost_sq: np.ndarray
    matched_marginals: bool

    def __post_init__(self):
        object.__setattr__(self, "per_fiber_cost_sq", _frozen(self.per_fiber_cost_sq))


def quantile_ot_1d(p: Marginal1D, q: Marginal1D, mass_tolerance: float = 1e-10) -> FiberTransport:
    """Exact quadratic OT between two fibers via their quantile functions.

    cost_sq equals the integral over [0, 1] of the squared quantile gap of
    the cellwise-atomic discretizations; the induced coupling is monotone.
    """
    if p.grid.n_cells != q.grid.n_cells or p.grid.spacing != q.grid.spacing:
        raise ValueError("fibers must live on a common grid")
    mass_p = p.mass()
    mass_q = q.mass()
    if abs(mass_p - mass_q) > mass_tolerance:
        raise MassMismatch(
            f"fiber masses differ: {mass_p!r} vs {mass_q!r}",
            mass_p=mass_p, mass_q=mass_q,
        )
    centers = p.grid.centers
    a = p.p * p.grid.spacing
    b = q.p * q.grid.spacing
    ka = np.flatnonzero(a > 0)
    kb = np.flatnonzero(b > 0)
    if ka.size == 0 or kb.size == 0:
        raise MassMismatch("cannot transport an empty fiber")
    ma = a[ka] / a[ka].sum()
    mb = b[kb] / b[kb].sum()
    src_c, tgt_c, seg = quantile_coupling(centers[ka], ma, centers[kb], mb)
    src = ka[src_c]
    tgt = kb[tgt_c]
    cost_sq = float(np.sum(seg * (centers[src] - centers[tgt]) ** 2))

    # barycentric image per occupied source cell, then a monotone fill
    img_sum = np.zeros(p.grid.n_cells)
    np.add.at(img_sum, src, seg * centers[tgt])
    map_values = np.full(p.grid.n_cells, -np.inf)
    map_values[ka] = img_sum[ka] / ma
    map_values = _monotone_fill(map_values, ka)
    return FiberTransport(p, q, map_values, cost_sq, src, tgt, seg)


def _monotone_fill(values, occupied_idx):
    """Forward-fill -inf holes and absorb roundoff so the array is nondecreasing."""
    out = np.maximum.accumulate(values)
    first = occupied_idx[0]
    out[:first] = out[first]
    return out


def splat_linear(positions, masses, grid) -> np.ndarray:
    """Deposit point masses onto cell centers by linear mass splitting.

    Conservative (total mass exact) and first-moment exact: each atom is
    shared between the two nearest centers in proportion to overlap.
    Positions outside the center hull are clamped to the end cells (the
    clamp breaks mean exactness only for such atoms).
    """
    pos = np.asarray(positions, dtype=float)
    m = np.asarray(masses, dtype=float)
    n = grid.n_cells
    t = (pos - grid.centers[0]) / grid.spacing
    i0 = np.floor(t).astype(int)
    i0 = np.clip(i0, 0, n - 2)
    frac = np.clip(t - i0, 0.0, 1.0)
    out = np.zeros(n)
    np.add.at(out, i0, m * (1.0 - frac))
    np.add.at(out, i0 + 1, m * frac)
    return out


def _fibered_distance(mu: PhaseDensity, nu: PhaseDensity, fixed_axis: Axis,
                      marginal_tolerance: float) -> FiberedDistanceReport:
    if mu.grid != nu.grid:
        raise ValueError("densities must share a grid")
    dis_mu = disintegrate(mu, fixed_axis)
    dis_nu = disintegrate(nu, fixed_axis)
    marg_mu = dis_mu.marginal
    marg_nu = dis_nu.marginal
    l1 = float(np.sum(np.abs(marg_mu.p - marg_nu.p)) * marg_mu.grid.spacing)
    n_fibers = marg_mu.grid.n_cells
    per_fiber = np.zeros(n_fibers)
    if l1 > marginal_tolerance:
        return FiberedDistanceReport(math.inf, per_fiber, False)
    fiber_grid = mu.grid.v if fixed_axis == Axis.X else mu.grid.x
    weights = marg_mu.p * marg_mu.grid.spacing  # cell masses of the fixed marginal
    total = 0.0
    for i in range(n_fibers):
        if dis_mu.empty[i] or dis_nu.empty[i]:
            continue  # below the fiber floor on one side; weight is sub-tolerance
        fib_mu = Marginal1D(fiber_grid, dis_mu.conditionals[i], mass_tolerance=1e-6)
        fib_nu = Marginal1D(fiber_grid, dis_nu.conditionals[i], mass_tolerance=1e-6)
        ft = quantile_ot_1d(fib_mu, fib_nu)
        per_fiber[i] = ft.cost_sq
        total += weights[i] * ft.cost_sq
    return FiberedDistanceReport(math.sqrt(max(total, 0.0)), per_fiber, True)


def w2v(mu: PhaseDensity, nu: PhaseDensity,
        marginal_tolerance: float = DEFAULT_MARGINAL_TOLERANCE) -> FiberedDistanceReport:
    """Fibered distance with the x-marginal held fixed (transport in v only)."""
    return _fibered_distance(mu, nu, Axis.X, marginal_tolerance)


def w2x(mu: PhaseDensity, nu: PhaseDensity,
        marginal_tolerance: float = DEFAULT_MARGINAL_TOLERANCE) -> FiberedDistanceReport:
    """Fibered distance with the v-marginal held fixed (transport in x only)."""
    return _fibered_distance(mu, nu, Axis.V, marginal_tolerance)


def w2v_geodesic(mu: PhaseDensity, nu: PhaseDensity, t: float,
                 marginal_tolerance: float = DEFAULT_MARGINAL_TOLERANCE) -> PhaseDensity:
    """Constant-speed interpolation between matched-x-marginal densities.

    Each fiber's atoms travel along straight lines between their positions
    under the monotone coupling; the displaced atoms are splatted back onto
    the grid by linear mass splitting (mass and mean exact per fiber).
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if mu.grid != nu.grid:
        raise ValueError("densities must share a grid")
    dis_mu = disintegrate(mu, Axis.X)
    dis_nu = disintegrate(nu, Axis.X)
    l1 = float(np.sum(np.abs(dis_mu.marginal.p - dis_nu.marginal.p)) * mu.grid.x.spacing)
    if l1 > marginal_tolerance:
        raise MarginalMismatch(f"x-marginals differ by {l1!r} in weighted L1", l1=l1)
    vgrid = mu.grid.v
    centers = vgrid.centers
    rho = np.zeros_like(mu.rho)
    weights = dis_mu.marginal.p  # density values; rows scale back by these
    for i in range(mu.grid.x.n_cells):
        if dis_mu.empty[i] or dis_nu.empty[i]:
            rho[i] = mu.rho[i]
            continue
        fib_mu = Marginal1D(vgrid, dis_mu.conditionals[i], mass_tolerance=1e-6)
        fib_nu = Marginal1D(vgrid, dis_nu.conditionals[i], mass_tolerance=1e-6)
        ft = quantile_ot_1d(fib_mu, fib_nu)
        pos = (1.0 - t) * centers[ft.src_idx] + t * centers[ft.tgt_idx]
        cond_mass = splat_linear(pos, ft.seg_mass, vgrid)
        rho[i] = weights[i] * cond_mass / vgrid.spacing
    return PhaseDensity(mu.grid, rho, mu.mass_tolerance)
