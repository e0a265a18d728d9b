"""Discrete phase-space measures: grids, densities, particle clouds, marginals.

Cell-centered uniform tensor grids with midpoint quadrature throughout. A
density array rho[i, j] stores the value at (x_i, v_j), x index outer. The
truncated rectangle stands in for the whole plane; every routine that can
lose mass at the edge reports it instead of hiding it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

MASS_TOLERANCE = 1e-10
FIBER_FLOOR = 1e-14          # fibers with less marginal mass are treated as empty
ENTROPY_FLOOR = 1e-300       # guards log(0) only, never perturbs entropy values
GRAD_FLOOR_REL = 1e-12       # default v_log_gradient floor, relative to max(rho)


class Axis(enum.Enum):
    X = "x"
    V = "v"


def _frozen(a):
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Grid1D:
    """Uniform 1D grid of cell centers on [lower, upper]."""

    lower: float
    upper: float
    n_cells: int
    spacing: float = field(init=False)
    centers: np.ndarray = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        if self.n_cells < 4:
            raise ValueError(f"n_cells must be >= 4, got {self.n_cells}")
        spacing = (self.upper - self.lower) / self.n_cells
        if not spacing > 0:
            raise ValueError("grid needs upper > lower")
        centers = self.lower + (np.arange(self.n_cells) + 0.5) * spacing
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "centers", _frozen(centers))


@dataclass(frozen=True)
class PhaseGrid:
    x: Grid1D
    v: Grid1D

    @property
    def cell_area(self):
        return self.x.spacing * self.v.spacing

    @property
    def shape(self):
        return (self.x.n_cells, self.v.n_cells)


@dataclass(frozen=True)
class PhaseDensity:
    """Nonnegative cell-centered density with total mass 1 (midpoint rule)."""

    grid: PhaseGrid
    rho: np.ndarray
    mass_tolerance: float = MASS_TOLERANCE

    def __post_init__(self):
        rho = _frozen(self.rho)
        if rho.shape != self.grid.shape:
            raise ValueError(f"rho shape {rho.shape} != grid shape {self.grid.shape}")
        if np.any(rho < 0):
            raise ValueError("rho must be nonnegative")
        mass = rho.sum() * self.grid.cell_area
        if abs(mass - 1.0) > self.mass_tolerance:
            raise ValueError(f"mass {mass!r} deviates from 1 beyond {self.mass_tolerance}")
        object.__setattr__(self, "rho", rho)

    def mass(self):
        return float(self.rho.sum() * self.grid.cell_area)

    def boundary_mass_fraction(self):
        """Mass share in the outermost cell ring; the truncation observable."""
        r = self.rho
        edge = r[0, :].sum() + r[-1, :].sum() + r[1:-1, 0].sum() + r[1:-1, -1].sum()
        return float(edge * self.grid.cell_area)


@dataclass(frozen=True)
class ParticleCloud:
    """Weighted point masses (x_k, v_k); the exact carrier for particle mode."""

    points: np.ndarray   # shape (n, 2), columns x, v
    weights: np.ndarray  # shape (n,), positive, sums to 1

    def __post_init__(self):
        pts = _frozen(self.points)
        w = _frozen(self.weights)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise ValueError("points must have shape (n, 2) with n >= 1")
        if w.shape != (pts.shape[0],):
            raise ValueError("weights length must match points")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum {w.sum()!r} deviates from 1 beyond 1e-12")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def x(self):
        return self.points[:, 0]

    @property
    def v(self):
        return self.points[:, 1]


@dataclass(frozen=True)
class Marginal1D:
    """1D density on a grid; p[k] is a density value, sum(p)*spacing = 1."""

    grid: Grid1D
    p: np.ndarray
    mass_tolerance: float = MASS_TOLERANCE

    def __post_init__(self):
        p = _frozen(self.p)
        if p.shape != (self.grid.n_cells,):
            raise ValueError("p must match grid size")
        if np.any(p < 0):
            raise ValueError("p must be nonnegative")
        mass = p.sum() * self.grid.spacing
        if abs(mass - 1.0) > self.mass_tolerance:
            raise ValueError(f"marginal mass {mass!r} deviates from 1 beyond {self.mass_tolerance}")
        object.__setattr__(self, "p", p)

    def mass(self):
        return float(self.p.sum() * self.grid.spacing)


@dataclass(frozen=True)
class Disintegration:
    """Marginal along the fixed axis plus one conditional density per fiber.

    conditionals[i, :] is the conditional density on the other axis for fiber
    i of the fixed axis; rows flagged empty carry no mass and are excluded
    from fiber sums.
    """

    axis: Axis
    marginal: Marginal1D
    conditionals: np.ndarray
    empty: np.ndarray  # boolean per fiber

    def __post_init__(self):
        object.__setattr__(self, "conditionals", _frozen(self.conditionals))
        e = np.array(self.empty, dtype=bool)
        e.setflags(write=False)
        object.__setattr__(self, "empty", e)


def marginal(mu: PhaseDensity, axis: Axis) -> Marginal1D:
    """Integrate out the other variable: p[k] = sum rho * (other spacing)."""
    if axis == Axis.X:
        p = mu.rho.sum(axis=1) * mu.grid.v.spacing
        return Marginal1D(mu.grid.x, p, mu.mass_tolerance)
    p = mu.rho.sum(axis=0) * mu.grid.x.spacing
    return Marginal1D(mu.grid.v, p, mu.mass_tolerance)


def disintegrate(mu: PhaseDensity, axis: Axis) -> Disintegration:
    """Split mu into the marginal over `axis` and conditional fiber densities."""
    marg = marginal(mu, axis)
    if axis == Axis.X:
        rho = mu.rho                       # fibers are rows, live on the v grid
        fiber_spacing = mu.grid.v.spacing
    else:
        rho = mu.rho.T
        fiber_spacing = mu.grid.x.spacing
    fiber_mass = rho.sum(axis=1) * fiber_spacing     # mass density along the axis
    fiber_mass_abs = fiber_mass * marg.grid.spacing  # actual mass per fiber
    empty = fiber_mass_abs <= FIBER_FLOOR
    cond = np.zeros_like(rho)
    keep = ~empty
    cond[keep] = rho[keep] / fiber_mass[keep, None]
    return Disintegration(axis, marg, cond, empty)


def second_moments(mu) -> tuple:
    """(m2_x, m2_v) by midpoint quadrature or weighted particle sums."""
    if isinstance(mu, ParticleCloud):
        m2x = float(np.sum(mu.weights * mu.x**2))
        m2v = float(np.sum(mu.weights * mu.v**2))
        return m2x, m2v
    xc = mu.grid.x.centers
    vc = mu.grid.v.centers
    area = mu.grid.cell_area
    m2x = float(np.sum(mu.rho * xc[:, None] ** 2) * area)
    m2v = float(np.sum(mu.rho * vc[None, :] ** 2) * area)
    return m2x, m2v


def entropy(mu: PhaseDensity) -> float:
    """sum rho log rho * cellarea with the 0 log 0 = 0 convention."""
    r = mu.rho
    pos = r > 0
    return float(np.sum(r[pos] * np.log(np.maximum(r[pos], ENTROPY_FLOOR))) * mu.grid.cell_area)


def log_gradient_1d(p: np.ndarray, spacing: float, floor: float) -> np.ndarray:
    """d/ds log(max(p, floor)): central differences, one-sided at the ends.

    Entries where p <= floor are zeroed; they carry negligible measure in any
    weighted L2 norm this feeds.
    """
    logp = np.log(np.maximum(p, floor))
    g = np.empty_like(logp)
    g[1:-1] = (logp[2:] - logp[:-2]) / (2.0 * spacing)
    g[0] = (logp[1] - logp[0]) / spacing
    g[-1] = (logp[-1] - logp[-2]) / spacing
    g[p <= floor] = 0.0
    return g


def v_log_gradient(mu: PhaseDensity, floor: float | None = None) -> np.ndarray:
    """Discrete grad_v log rho, the velocity score of the density.

    Parameters
    ----------
    mu : PhaseDensity
    floor : float, optional
        Stabilization floor; defaults to GRAD_FLOOR_REL * max(rho).
    """
    if floor is None:
        floor = GRAD_FLOOR_REL * float(mu.rho.max())
    if not floor > 0:
        raise ValueError("floor must be positive")
    dv = mu.grid.v.spacing
    logr = np.log(np.maximum(mu.rho, floor))
    g = np.empty_like(logr)
    g[:, 1:-1] = (logr[:, 2:] - logr[:, :-2]) / (2.0 * dv)
    g[:, 0] = (logr[:, 1] - logr[:, 0]) / dv
    g[:, -1] = (logr[:, -1] - logr[:, -2]) / dv
    g[mu.rho <= floor] = 0.0
    return g


# ---------------------------------------------------------------------------
# density dump format: flat little-endian float64, row-major (x outer, v inner),
# with a sidecar "key = value" text header.
# ---------------------------------------------------------------------------

def save_density(mu: PhaseDensity, path, time: float = 0.0, step: int = 0):
    """Write the raw density to `path` and its header to `path + '.header'`."""
    path = str(path)
    data = np.ascontiguousarray(mu.rho, dtype="<f8")
    data.tofile(path)
    g = mu.grid
    lines = [
        f"x_lower = {g.x.lower!r}",
        f"x_upper = {g.x.upper!r}",
        f"x_cells = {g.x.n_cells}",
        f"v_lower = {g.v.lower!r}",
        f"v_upper = {g.v.upper!r}",
        f"v_cells = {g.v.n_cells}",
        f"time = {time!r}",
        f"step = {step}",
    ]
    with open(path + ".header", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_density(path) -> tuple:
    """Read a dump written by save_density; returns (PhaseDensity, time, step)."""
    path = str(path)
    fields = {}
    with open(path + ".header") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    gx = Grid1D(float(fields["x_lower"]), float(fields["x_upper"]), int(fields["x_cells"]))
    gv = Grid1D(float(fields["v_lower"]), float(fields["v_upper"]), int(fields["v_cells"]))
    raw = np.fromfile(path, dtype="<f8").reshape(gx.n_cells, gv.n_cells)
    mu = PhaseDensity(PhaseGrid(gx, gv), raw)
    return mu, float(fields["time"]), int(fields["step"])
