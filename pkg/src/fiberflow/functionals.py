"""Energy functionals on phase-space measures and their velocity slopes.

The total energy splits into a confinement-plus-kinetic part, a pairwise
interaction part, and the entropy; particle clouds carry infinite entropy
by definition, flagged rather than stored as a float inf that could leak
into arithmetic. The linear functionals lin_x and lin_v drive the two
half-steps of the scheme and their difference is the Poisson bracket of
the energy with the second-moment functional, which is what the residual
check below verifies by finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .phase_space import (
    Marginal1D,
    ParticleCloud,
    PhaseDensity,
    Axis,
    entropy,
    marginal,
    v_log_gradient,
)

_FD_EPS = 1e-4
_FD_TOL = 1e-6
_SYM_TOL = 1e-12
_SAMPLE_POINTS = np.linspace(-2.0, 2.0, 9)


@dataclass(frozen=True)
class PotentialSpec:
    """Confinement potential with analytic value and gradient evaluators.

    kind: "zero" | "harmonic" | "double_well" | "polynomial"
      harmonic:    V(x) = lam * x^2 / 2
      double_well: V(x) = a * (x^2 - b)^2
      polynomial:  V(x) = sum c_k x^k, coefficients ascending
    """

    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in ("zero", "harmonic", "double_well", "polynomial"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        object.__setattr__(self, "params", tuple(self.params))
        # evaluator consistency: analytic gradient vs central differences
        for x in _SAMPLE_POINTS:
            fd = (self.value(x + _FD_EPS) - self.value(x - _FD_EPS)) / (2 * _FD_EPS)
            if abs(fd - self.grad(x)) > _FD_TOL:
                raise ValueError(f"gradient inconsistent with value at x={x}")

    def _p(self):
        return dict(self.params)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "harmonic":
            return 0.5 * self._p()["lam"] * x**2
        if self.kind == "double_well":
            p = self._p()
            return p["a"] * (x**2 - p["b"]) ** 2
        c = self._p()["coefficients"]
        return np.polyval(list(reversed(c)), x)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "harmonic":
            return self._p()["lam"] * x
        if self.kind == "double_well":
            p = self._p()
            return 4.0 * p["a"] * x * (x**2 - p["b"])
        c = self._p()["coefficients"]
        dc = [k * c[k] for k in range(1, len(c))]
        if not dc:
            return np.zeros_like(x)
        return np.polyval(list(reversed(dc)), x)

    def curvature(self, x):
        """Second derivative; feeds Lipschitz bounds for the diagnostics."""
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "harmonic":
            return np.full_like(x, self._p()["lam"])
        if self.kind == "double_well":
            p = self._p()
            return 4.0 * p["a"] * (3.0 * x**2 - p["b"])
        c = self._p()["coefficients"]
        ddc = [k * (k - 1) * c[k] for k in range(2, len(c))]
        if not ddc:
            return np.zeros_like(x)
        return np.polyval(list(reversed(ddc)), x)


def harmonic_potential(lam: float) -> PotentialSpec:
    if not lam > 0:
        raise ValueError("lam must be positive")
    return PotentialSpec("harmonic", (("lam", float(lam)),))


def double_well_potential(a: float, b: float) -> PotentialSpec:
    return PotentialSpec("double_well", (("a", float(a)), ("b", float(b))))


def polynomial_potential(coefficients) -> PotentialSpec:
    return PotentialSpec("polynomial", (("coefficients", tuple(float(c) for c in coefficients)),))


def zero_potential() -> PotentialSpec:
    return PotentialSpec("zero")


@dataclass(frozen=True)
class InteractionSpec:
    """Even pairwise kernel W with W(x) = W(-x) enforced by construction.

    kind: "none" | "harmonic" | "polynomial"
      harmonic:   W(x) = kappa * x^2 / 2
      polynomial: even powers only, coefficients ascending over x^0, x^2, ...
    """

    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in ("none", "harmonic", "polynomial"):
            raise ValueError(f"unknown interaction kind {self.kind!r}")
        object.__setattr__(self, "params", tuple(self.params))
        for x in _SAMPLE_POINTS:
            if abs(self.value(x) - self.value(-x)) > _SYM_TOL:
                raise ValueError("interaction kernel must be even")

    def _p(self):
        return dict(self.params)

    @property
    def is_none(self):
        return self.kind == "none"

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "none":
            return np.zeros_like(x)
        if self.kind == "harmonic":
            return 0.5 * self._p()["kappa"] * x**2
        c = self._p()["even_coefficients"]
        return sum(ck * x ** (2 * k) for k, ck in enumerate(c))

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "none":
            return np.zeros_like(x)
        if self.kind == "harmonic":
            return self._p()["kappa"] * x
        c = self._p()["even_coefficients"]
        out = np.zeros_like(x)
        for k, ck in enumerate(c):
            if k > 0:
                out += 2 * k * ck * x ** (2 * k - 1)
        return out

    def curvature(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "none":
            return np.zeros_like(x)
        if self.kind == "harmonic":
            return np.full_like(x, self._p()["kappa"])
        c = self._p()["even_coefficients"]
        out = np.zeros_like(x)
        for k, ck in enumerate(c):
            if k > 0:
                out += 2 * k * (2 * k - 1) * ck * x ** (2 * k - 2)
        return out


def no_interaction() -> InteractionSpec:
    return InteractionSpec("none")


def harmonic_interaction(kappa: float) -> InteractionSpec:
    return InteractionSpec("harmonic", (("kappa", float(kappa)),))


def polynomial_interaction(even_coefficients) -> InteractionSpec:
    return InteractionSpec(
        "polynomial",
        (("even_coefficients", tuple(float(c) for c in even_coefficients)),),
    )


@dataclass(frozen=True)
class ModelSpec:
    """Potential, interaction, friction alpha, and a gradient Lipschitz bound.

    alpha = 0 is legal only for the particle mode; every measure-level
    operation asserts alpha > 0. lipschitz_M bounds both grad V and grad W
    on the working domain and only calibrates diagnostic inequalities.
    """

    potential: PotentialSpec
    interaction: InteractionSpec
    alpha: float
    lipschitz_M: float

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.lipschitz_M < 0:
            raise ValueError("lipschitz_M must be nonnegative")

    def require_friction(self):
        if not self.alpha > 0:
            raise ValueError("this operation needs alpha > 0; alpha = 0 is particle-mode only")


def derive_lipschitz(potential: PotentialSpec, interaction: InteractionSpec, x_lower, x_upper,
                     n_sample: int = 4097) -> float:
    """sup |V''| and |W''| over the truncated domain, by dense sampling.

    Exact for harmonic kinds; for polynomials the sample is dense enough at
    desk scale that the sup is resolved to plotting accuracy. Interaction
    differences x - y range over twice the domain width.
    """
    xs = np.linspace(x_lower, x_upper, n_sample)
    m_v = float(np.max(np.abs(potential.curvature(xs))))
    width = x_upper - x_lower
    ds = np.linspace(-width, width, n_sample)
    m_w = float(np.max(np.abs(interaction.curvature(ds))))
    return max(m_v, m_w)


@dataclass(frozen=True)
class EnergyBreakdown:
    """Itemized energy of a state; internal_finite guards the entropy slot.

    hamiltonian = potential_part + interaction_part + internal_part when the
    entropy is finite; for particle clouds both report math.inf and the flag
    is False, so callers branch before arithmetic.
    """

    potential_part: float
    interaction_part: float
    internal_part: float
    hamiltonian: float
    lin_v: float
    lin_x: float
    internal_finite: bool


def convolved_force(mu, spec: InteractionSpec):
    """(grad W * x-marginal) on the x-grid, or per particle for clouds.

    Direct O(n^2) summation; the harmonic kernel collapses to the exact
    mean-field form kappa * (x - mean), which is the same sum in closed form.
    """
    if isinstance(mu, ParticleCloud):
        if spec.is_none:
            return np.zeros_like(mu.x)
        if spec.kind == "harmonic":
            kappa = dict(spec.params)["kappa"]
            mean = float(np.sum(mu.weights * mu.x))
            return kappa * (mu.x - mean)
        diff = mu.x[:, None] - mu.x[None, :]
        return spec.grad(diff) @ mu.weights
    marg = mu if isinstance(mu, Marginal1D) else marginal(mu, Axis.X)
    xs = marg.grid.centers
    if spec.is_none:
        return np.zeros_like(xs)
    cell_mass = marg.p * marg.grid.spacing
    diff = xs[:, None] - xs[None, :]
    return spec.grad(diff) @ cell_mass


def interaction_energy(mu, spec: InteractionSpec) -> float:
    """(1/2) double integral of W(x - y); includes the diagonal self term."""
    if spec.is_none:
        return 0.0
    if isinstance(mu, ParticleCloud):
        diff = mu.x[:, None] - mu.x[None, :]
        return 0.5 * float(mu.weights @ spec.value(diff) @ mu.weights)
    marg = marginal(mu, Axis.X)
    cell_mass = marg.p * marg.grid.spacing
    diff = marg.grid.centers[:, None] - marg.grid.centers[None, :]
    return 0.5 * float(cell_mass @ spec.value(diff) @ cell_mass)


def energies(mu, spec: ModelSpec) -> EnergyBreakdown:
    """All six energy components by midpoint quadrature or weighted sums."""
    if isinstance(mu, ParticleCloud):
        x, v, w = mu.x, mu.v, mu.weights
        force = spec.potential.grad(x) + convolved_force(mu, spec.interaction)
        potential_part = float(np.sum(w * (spec.potential.value(x) + 0.5 * v**2)))
        inter = interaction_energy(mu, spec.interaction)
        lin_v = float(np.sum(w * v * force))
        lin_x = float(np.sum(w * x * v))
        return EnergyBreakdown(potential_part, inter, math.inf, math.inf,
                               lin_v, lin_x, internal_finite=False)
    xs = mu.grid.x.centers
    vs = mu.grid.v.centers
    area = mu.grid.cell_area
    rho = mu.rho
    vx = spec.potential.value(xs)
    potential_part = float(np.sum(rho * (vx[:, None] + 0.5 * vs[None, :] ** 2)) * area)
    inter = interaction_energy(mu, spec.interaction)
    internal = entropy(mu)
    force = spec.potential.grad(xs) + convolved_force(mu, spec.interaction)
    lin_v = float(np.sum(rho * force[:, None] * vs[None, :]) * area)
    lin_x = float(np.sum(rho * xs[:, None] * vs[None, :]) * area)
    return EnergyBreakdown(potential_part, inter, internal,
                           potential_part + inter + internal,
                           lin_v, lin_x, internal_finite=True)


def v_slope(mu: PhaseDensity, spec: ModelSpec, floor: float | None = None) -> tuple:
    """Velocity slopes (slope_LvaH, slope_H) in the weighted L2 of mu.

    slope_LvaH is the norm of F + alpha*v + alpha*score, the descent rate of
    the drive-plus-energy functional; slope_H drops the drive and measures
    v + score, which vanishes exactly on Gibbs fibers.
    """
    g = v_log_gradient(mu, floor)
    xs = mu.grid.x.centers
    vs = mu.grid.v.centers
    area = mu.grid.cell_area
    force = spec.potential.grad(xs) + convolved_force(mu, spec.interaction)
    field_lvah = force[:, None] + spec.alpha * (vs[None, :] + g)
    field_h = vs[None, :] + g
    slope_lvah = math.sqrt(max(float(np.sum(mu.rho * field_lvah**2) * area), 0.0))
    slope_h = math.sqrt(max(float(np.sum(mu.rho * field_h**2) * area), 0.0))
    return slope_lvah, slope_h


def force_norm_sq(mu: PhaseDensity, spec: ModelSpec) -> float:
    """Squared L2(mu) norm of the x-only force grad V + grad W * marginal."""
    marg = marginal(mu, Axis.X)
    force = spec.potential.grad(marg.grid.centers) + convolved_force(mu, spec.interaction)
    return float(np.sum(marg.p * force**2) * marg.grid.spacing)


def _flow_midpoint(cloud: ParticleCloud, dt: float) -> ParticleCloud:
    # explicit midpoint step of the rotation field (x', v') = (v, -x)
    x, v = cloud.x, cloud.v
    xm = x + 0.5 * dt * v
    vm = v - 0.5 * dt * x
    pts = np.column_stack([x + dt * vm, v - dt * xm])
    return ParticleCloud(pts, cloud.weights)


def poisson_bracket_residual(cloud: ParticleCloud, spec: ModelSpec, dt_fd: float) -> float:
    """|centered FD of (potential + interaction) along the rotation flow
    minus (lin_v - lin_x)|; second order in dt_fd when the bracket identity
    holds."""
    plus = _flow_midpoint(cloud, dt_fd)
    minus = _flow_midpoint(cloud, -dt_fd)

    def hv(c):
        e = energies(c, spec)
        return e.potential_part + e.interaction_part

    fd = (hv(plus) - hv(minus)) / (2.0 * dt_fd)
    e0 = energies(cloud, spec)
    return abs(fd - (e0.lin_v - e0.lin_x))
