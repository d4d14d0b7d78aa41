"""Finite-volume solver for the joint density of (theta, u) when d = 1.

The density obeys

    dp/dt = -d/dtheta (p g2) - d/du (p g1) + lam3 * Laplacian(p)

on a rectangle with no-flux walls. Advection is first-order upwind,
diffusion uses the compact central stencil and time stepping is explicit
Euler, which keeps the scheme conservative and positivity preserving under
the step bound reported by :func:`admissible_dt`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BoundViolation, ConfigError
from .model import FeatureMap, Hyper, loss_gradient_field, phi_loss

RHO_FLOOR = 1e-14


@dataclass
class DensityGrid:
    theta_range: tuple
    u_range: tuple
    p: np.ndarray
    t: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta_range = (float(self.theta_range[0]), float(self.theta_range[1]))
        self.u_range = (float(self.u_range[0]), float(self.u_range[1]))
        if not (self.theta_range[1] > self.theta_range[0] and self.u_range[1] > self.u_range[0]):
            raise ValueError("grid ranges must be nondegenerate")
        self.p = np.asarray(self.p, dtype=float)
        if self.p.ndim != 2:
            raise ValueError("density values must be a 2-D array (n_theta, n_u)")

    @property
    def shape(self):
        return self.p.shape

    @property
    def h_theta(self) -> float:
        return (self.theta_range[1] - self.theta_range[0]) / self.p.shape[0]

    @property
    def h_u(self) -> float:
        return (self.u_range[1] - self.u_range[0]) / self.p.shape[1]

    @property
    def area(self) -> float:
        return self.h_theta * self.h_u

    @property
    def theta(self):
        return self.theta_range[0] + (np.arange(self.p.shape[0]) + 0.5) * self.h_theta

    @property
    def u(self):
        return self.u_range[0] + (np.arange(self.p.shape[1]) + 0.5) * self.h_u

    @property
    def theta_faces(self):
        return self.theta_range[0] + np.arange(self.p.shape[0] + 1) * self.h_theta

    @property
    def u_faces(self):
        return self.u_range[0] + np.arange(self.p.shape[1] + 1) * self.h_u

    def mesh(self):
        return np.meshgrid(self.theta, self.u, indexing="ij")

    def mass(self) -> float:
        return float(self.p.sum() * self.area)

    def with_values(self, p, t=None) -> "DensityGrid":
        return DensityGrid(self.theta_range, self.u_range, p, self.t if t is None else t)

    def normalized(self) -> "DensityGrid":
        return self.with_values(self.p / self.mass())

    def validate(self, tol=1e-9):
        if np.any(self.p < 0) or not np.all(np.isfinite(self.p)):
            raise ValueError("density must be finite and nonnegative")
        if abs(self.mass() - 1.0) > tol:
            raise ValueError(f"density mass {self.mass()} differs from 1")
        return self

    def second_moment(self) -> float:
        TH, U = self.mesh()
        return float(np.sum((TH**2 + U**2) * self.p) * self.area)

    @classmethod
    def from_function(cls, func, theta_range, u_range, n_theta, n_u, t=0.0, normalize=True):
        """Sample ``func(theta, u)`` at cell centers."""
        g = cls(theta_range, u_range, np.zeros((n_theta, n_u)), t)
        TH, U = g.mesh()
        g.p = np.asarray(func(TH, U), dtype=float)
        return g.normalized() if normalize else g

    @classmethod
    def gaussian(cls, theta_range, u_range, n_theta, n_u, mean=(0.0, 0.0), var=(1.0, 1.0), t=0.0):
        m0, m1 = mean
        v0, v1 = var
        return cls.from_function(
            lambda th, u: np.exp(-((th - m0) ** 2) / (2 * v0) - (u - m1) ** 2 / (2 * v1)),
            theta_range, u_range, n_theta, n_u, t,
        )


@dataclass
class Marginals:
    theta: np.ndarray
    rho: np.ndarray
    omega: np.ndarray
    valid: np.ndarray
    h_theta: float

    @property
    def mu(self):
        return self.rho * self.omega


def marginals(grid: DensityGrid, floor=RHO_FLOOR) -> Marginals:
    """Feature density ``rho(theta)`` and conditional mean ``omega(theta) = E[u | theta]``.

    ``omega`` is set to 0 where ``rho`` is below ``floor``.
    """
    rho = grid.p.sum(axis=1) * grid.h_u
    first = grid.p @ grid.u * grid.h_u
    valid = rho > floor
    omega = np.zeros_like(rho)
    omega[valid] = first[valid] / rho[valid]
    return Marginals(grid.theta.copy(), rho, omega, valid, grid.h_theta)


# --------------------------------------------------------------------------
# drift fields


class LinearDrift:
    """``g2 = -a_theta * theta + b_theta`` and ``g1 = -a_u * u + b_u``."""

    def __init__(self, a_theta=0.0, a_u=0.0, b_theta=0.0, b_u=0.0):
        self.a_theta, self.a_u, self.b_theta, self.b_u = a_theta, a_u, b_theta, b_u

    def _g2(self, th, u):
        return -self.a_theta * th + self.b_theta + 0.0 * u

    def _g1(self, th, u):
        return -self.a_u * u + self.b_u + 0.0 * th

    def cells(self, grid):
        TH, U = grid.mesh()
        return self._g1(TH, U), self._g2(TH, U)

    def faces(self, grid):
        key = (grid.theta_range, grid.u_range, grid.p.shape)
        if getattr(self, "_key", None) != key:
            self._key, self._faces = key, self._faces_uncached(grid)
        return self._faces

    def _faces_uncached(self, grid):
        thf, u = np.meshgrid(grid.theta_faces, grid.u, indexing="ij")
        th, uf = np.meshgrid(grid.theta, grid.u_faces, indexing="ij")
        return self._g2(thf, u), self._g1(th, uf)

    def potential(self, grid):
        TH, U = grid.mesh()
        return 0.5 * self.a_theta * TH**2 - self.b_theta * TH + 0.5 * self.a_u * U**2 - self.b_u * U


ZeroDrift = LinearDrift


class ModelDrift:
    """Mean-field drift of the two-level network, recomputed from the grid.

    The network output is ``f(x) = sum_cells h'(theta, x) u p dtheta du`` and
    the loss part of the drift is evaluated with that output, matching
    :func:`nfrepop.model.particle_drifts` in the infinite-particle limit.
    """

    def __init__(self, fmap: FeatureMap, dataset, hp: Hyper):
        if dataset.d != 1:
            raise ConfigError("the grid solver supports d = 1 only")
        self.fmap, self.dataset, self.hp = fmap, dataset, hp
        self._cache_key = None

    def _layout(self, grid):
        key = (grid.theta_range, grid.p.shape[0])
        if key != self._cache_key:
            self._H = self.fmap.features(grid.theta[:, None], self.dataset.X)
            self._cache_key = key
        return self._H

    def network_output(self, grid):
        H = self._layout(grid)
        mu = grid.p @ grid.u * grid.h_u
        return (mu * grid.h_theta) @ H

    def loss_fields(self, grid, thetas):
        f = self.network_output(grid)
        a, b = loss_gradient_field(self.fmap, np.asarray(thetas)[:, None], self.dataset, f)
        return a, b[:, 0]

    def cells(self, grid):
        a, b = self.loss_fields(grid, grid.theta)
        TH, U = grid.mesh()
        g1 = -a[:, None] - 2 * self.hp.lam1 * U
        g2 = -U * b[:, None] - 2 * self.hp.lam2 * TH
        return g1, g2

    def faces(self, grid):
        f = self.network_output(grid)
        a_c, _ = loss_gradient_field(self.fmap, grid.theta[:, None], self.dataset, f)
        _, b_f = loss_gradient_field(self.fmap, grid.theta_faces[:, None], self.dataset, f)
        u, uf = grid.u, grid.u_faces
        v_theta = -u[None, :] * b_f[:, :1] - 2 * self.hp.lam2 * grid.theta_faces[:, None]
        v_u = -a_c[:, None] - 2 * self.hp.lam1 * uf[None, :]
        return v_theta, v_u

    def potential(self, grid):
        """``lam1 u^2 + lam2 theta^2 + ghat(theta) u`` with ``ghat`` from the current grid."""
        a, _ = self.loss_fields(grid, grid.theta)
        TH, U = grid.mesh()
        return self.hp.lam1 * U**2 + self.hp.lam2 * TH**2 + a[:, None] * U


# --------------------------------------------------------------------------
# time stepping


def _outflow_rate(grid, v_theta, v_u, lam3):
    ht, hu = grid.h_theta, grid.h_u
    out = (np.maximum(v_theta[1:], 0) + np.maximum(-v_theta[:-1], 0)) / ht
    out = out + (np.maximum(v_u[:, 1:], 0) + np.maximum(-v_u[:, :-1], 0)) / hu
    return out + 2 * lam3 * (1 / ht**2 + 1 / hu**2)


def admissible_dt(grid, drift, lam3, faces=None) -> float:
    """Largest explicit step that keeps the update stable and nonnegative.

    This is the smaller of ``min(h^2 / (4 lam3), h / max|g|)`` and the
    positivity limit ``1 / max(total outflow rate)`` of the upwind stencil.
    """
    v_theta, v_u = drift.faces(grid) if faces is None else faces
    h = min(grid.h_theta, grid.h_u)
    gmax = max(np.max(np.abs(v_theta)), np.max(np.abs(v_u)))
    bounds = [1.0 / np.max(_outflow_rate(grid, v_theta, v_u, lam3))]
    if lam3 > 0:
        bounds.append(h * h / (4 * lam3))
    if gmax > 0:
        bounds.append(h / gmax)
    return float(min(bounds))


def _fluxes(grid, v_theta, v_u, lam3):
    p = grid.p
    ht, hu = grid.h_theta, grid.h_u
    Ft = np.zeros((p.shape[0] + 1, p.shape[1]))
    vt = v_theta[1:-1]
    Ft[1:-1] = np.maximum(vt, 0) * p[:-1] - np.maximum(-vt, 0) * p[1:] - lam3 * (p[1:] - p[:-1]) / ht
    Fu = np.zeros((p.shape[0], p.shape[1] + 1))
    vu = v_u[:, 1:-1]
    Fu[:, 1:-1] = np.maximum(vu, 0) * p[:, :-1] - np.maximum(-vu, 0) * p[:, 1:] - lam3 * (p[:, 1:] - p[:, :-1]) / hu
    return Ft, Fu


def fp_step(grid: DensityGrid, drift, lam3: float, dtau: float, faces=None) -> DensityGrid:
    """Advance the density by one explicit step of length ``dtau``.

    ``faces`` may carry precomputed face velocities for this grid.
    """
    if faces is None:
        faces = drift.faces(grid)
    limit = admissible_dt(grid, drift, lam3, faces)
    if dtau > limit * (1 + 1e-12):
        raise ConfigError(f"step {dtau:g} violates the CFL/positivity bound; admissible dtau <= {limit:.6g}")
    Ft, Fu = _fluxes(grid, faces[0], faces[1], lam3)
    div = (Ft[1:] - Ft[:-1]) / grid.h_theta + (Fu[:, 1:] - Fu[:, :-1]) / grid.h_u
    return grid.with_values(grid.p - dtau * div, grid.t + dtau)


def evolve(grid, drift, lam3, t_final, dtau=None, safety=0.9, record_times=None):
    """Integrate to ``t_final``; returns the grids at ``record_times`` (plus start and end).

    ``dtau`` defaults to ``safety`` times the admissible step at each step.
    Steps are shortened to land exactly on requested times.
    """
    targets = sorted(set([float(t_final)] + [float(t) for t in (record_times or [])]))
    out = [grid]
    g = grid
    for target in targets:
        while target - g.t > 1e-12:
            faces = drift.faces(g)
            step = dtau if dtau is not None else safety * admissible_dt(g, drift, lam3, faces)
            step = min(step, target - g.t)
            g = fp_step(g, drift, lam3, step, faces)
        g.t = target
        out.append(g)
    return out


# --------------------------------------------------------------------------
# functionals and diagnostics


def entropy_integral(grid) -> float:
    """``int p ln p`` with the ``0 ln 0 = 0`` convention."""
    p = grid.p
    pos = p > 0
    return float(np.sum(p[pos] * np.log(p[pos])) * grid.area)


def free_energy_parts(grid, fmap=None, dataset=None, hp: Hyper = Hyper()):
    TH, U = grid.mesh()
    reg = float(np.sum((hp.lam1 * U**2 + hp.lam2 * TH**2) * grid.p) * grid.area)
    ent = hp.lam3 * entropy_integral(grid)
    loss = 0.0
    if dataset is not None:
        f = ModelDrift(fmap, dataset, hp).network_output(grid)
        loss = float(np.mean(phi_loss(f, dataset.y)[0]))
    return {"loss": loss, "regularizer": reg, "entropy": ent, "total": loss + reg + ent}


def free_energy(grid, fmap=None, dataset=None, hp: Hyper = Hyper()) -> float:
    """Expected loss + quadratic penalties + ``lam3 * int p ln p``.

    With the training weights ``lam1, lam2`` on ``u^2`` and ``theta^2`` this is
    the Lyapunov functional of the grid dynamics driven by :class:`ModelDrift`.
    Pass ``dataset=None`` to drop the loss term.
    """
    return free_energy_parts(grid, fmap, dataset, hp)["total"]


def gaussian_reference_constant(hp: Hyper, d=1) -> float:
    """Minimum of the regularizer-plus-entropy part over all densities.

    The part equals ``lam3 * KL(p || p_hat) + C`` with ``p_hat`` the Gaussian
    ``N(0, lam3 / (2 lam1))`` in ``u`` and ``N(0, lam3 / (2 lam2))`` per theta
    coordinate; this returns ``C``.
    """
    l3 = hp.lam3
    return 0.5 * l3 * np.log(hp.fe_lam1 / (2 * np.pi * l3)) + 0.5 * l3 * d * np.log(hp.fe_lam2 / (2 * np.pi * l3))


def dissipation(grid, drift, lam3) -> float:
    """``int |g p - lam3 grad p|^2 / p`` over cells with positive density."""
    g1, g2 = drift.cells(grid)
    p = grid.p
    dpt, dpu = np.gradient(p, grid.h_theta, grid.h_u)
    pos = p > 0
    jt = g2 * p - lam3 * dpt
    ju = g1 * p - lam3 * dpu
    integrand = np.zeros_like(p)
    integrand[pos] = (jt[pos] ** 2 + ju[pos] ** 2) / p[pos]
    return float(integrand.sum() * grid.area)


@dataclass
class DescentReport:
    times: np.ndarray
    free_energy: np.ndarray
    increments: np.ndarray
    max_increase: float
    dissipation: np.ndarray = field(default_factory=lambda: np.zeros(0))


def check_descent(grids, fmap, dataset, hp: Hyper, drift=None) -> DescentReport:
    """Free-energy sequence along a trajectory and its largest increase."""
    Q = np.array([free_energy(g, fmap, dataset, hp) for g in grids])
    inc = np.diff(Q)
    diss = np.array([dissipation(g, drift, hp.lam3) for g in grids]) if drift is not None else np.zeros(0)
    return DescentReport(
        times=np.array([g.t for g in grids]),
        free_energy=Q,
        increments=inc,
        max_increase=float(inc.max()) if inc.size else 0.0,
        dissipation=diss,
    )


def rho_residual(grid0, grid1, drift, lam3) -> float:
    """Sup-norm mismatch of the feature-density equation between two grids.

    Compares the forward difference of ``rho`` with
    ``-d/dtheta(int p g2 du) + lam3 rho''`` evaluated on ``grid0``. The
    theta derivatives use fourth-order centered stencils, so on smooth
    stationary densities the residual is dominated by the time step and the
    upwind error of the solver rather than by this check. Cells within two of
    the walls are excluded.
    """
    m0 = grid0.p.sum(axis=1) * grid0.h_u
    if m0.size < 5:
        raise ValueError("need at least 5 theta cells")
    dt = grid1.t - grid0.t
    if dt > 0:
        drho = (grid1.p.sum(axis=1) * grid1.h_u - m0) / dt
    elif np.array_equal(grid0.p, grid1.p):
        drho = np.zeros_like(m0)
    else:
        raise ValueError("grids differ but carry the same time stamp")
    _, g2 = drift.cells(grid0)
    A = (grid0.p * g2).sum(axis=1) * grid0.h_u
    h = grid0.h_theta
    dA = (-A[4:] + 8 * A[3:-1] - 8 * A[1:-3] + A[:-4]) / (12 * h)
    d2 = (-m0[4:] + 16 * m0[3:-1] - 30 * m0[2:-2] + 16 * m0[1:-3] - m0[:-4]) / (12 * h * h)
    return float(np.max(np.abs(drho[2:-2] + dA - lam3 * d2)))


def entropy_bound_check(grid, z: float, check=True):
    """Both sides of ``-int p ln p <= 1 + E|(theta,u)|^2 / z + 2 ln(2 pi z)``.

    Raises :class:`BoundViolation` when the inequality fails and ``check``.
    """
    if not z > 0:
        raise ValueError("z must be positive")
    lhs = -entropy_integral(grid)
    rhs = 1.0 + grid.second_moment() / z + 2 * np.log(2 * np.pi * z)
    if check and lhs > rhs:
        raise BoundViolation(f"entropy bound violated: {lhs} > {rhs} at z={z}")
    return lhs, rhs


def second_moment_bound(Q0: float, hp: Hyper, d=1, loss_floor=0.0) -> float:
    """Uniform bound on ``E|(theta, u)|^2`` along a trajectory started with free energy ``Q0``."""
    lam_min = min(hp.fe_lam1, hp.fe_lam2)
    if not lam_min > 0:
        raise ValueError("bound needs lam1 > 0 and lam2 > 0")
    z = 4 * hp.lam3 / lam_min
    return 4 * (Q0 + hp.lam3 + hp.lam3 * (d + 1) * np.log(2 * np.pi * z) - loss_floor) / lam_min


def auto_ranges(hp: Hyper, sds=6.0, omega_max=None):
    """Domain covering ``sds`` standard deviations of the quadratic Gibbs part.

    The u-range is widened by the largest conditional mean the loss can
    induce, ``L1 * B_v / (2 lam1)``.
    """
    if not (hp.lam1 > 0 and hp.lam2 > 0 and hp.lam3 > 0):
        raise ConfigError("auto-sizing needs lam1, lam2, lam3 > 0")
    s_theta = np.sqrt(hp.lam3 / (2 * hp.lam2))
    s_u = np.sqrt(hp.lam3 / (2 * hp.lam1))
    if omega_max is None:
        omega_max = hp.L1 * (hp.B_v if hp.B_v is not None else 1.0) / (2 * hp.lam1)
    return (-sds * s_theta, sds * s_theta), (-sds * s_u - omega_max, sds * s_u + omega_max)


def total_variation(p, q, area=1.0) -> float:
    return float(0.5 * np.sum(np.abs(np.asarray(p) - np.asarray(q))) * area)


def coarsen(grid, ft, fu):
    """Merge ``ft x fu`` blocks of cells (shape must divide evenly)."""
    nt, nu = grid.p.shape
    if nt % ft or nu % fu:
        raise ValueError("coarsening factors must divide the grid shape")
    p = grid.p.reshape(nt // ft, ft, nu // fu, fu).mean(axis=(1, 3))
    return grid.with_values(p)


def histogram_grid(thetas, us, like: DensityGrid) -> DensityGrid:
    """Particle histogram on the cell layout of ``like`` (outliers clipped to edge cells)."""
    nt, nu = like.p.shape
    th = np.clip(np.asarray(thetas).reshape(-1), like.theta_range[0], np.nextafter(like.theta_range[1], -np.inf))
    uu = np.clip(np.asarray(us).reshape(-1), like.u_range[0], np.nextafter(like.u_range[1], -np.inf))
    H, _, _ = np.histogram2d(th, uu, bins=[nt, nu], range=[like.theta_range, like.u_range])
    return like.with_values(H / (H.sum() * like.area))
