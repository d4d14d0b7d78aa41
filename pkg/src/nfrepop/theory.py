"""Checks of the stationary law of the noisy mean-field dynamics (d = 1).

At stationarity the joint density of (theta, u) is the Gibbs law

    p*(theta, u) ∝ exp(-(lam1 u^2 + lam2 theta^2 + ghat(theta) u) / lam3)

with training-convention weights and ``ghat(theta) = mean phi'(f) h'(theta, x)``.
In the half-weight free-energy convention (``lamfe = 2 lam``) the log-density
coefficients are ``-lamfe1 / (2 lam3)``, ``-lamfe2 / (2 lam3)`` and ``-1 / lam3``,
the conditional law of ``u`` is Gaussian with variance ``lam3 / lamfe1`` and
mean ``omega*(theta) = -ghat(theta) / lamfe1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

from .errors import ConfigError
from .meanfield import DensityGrid, Marginals, ModelDrift, auto_ranges, marginals, total_variation
from .model import Ensemble, FeatureMap, Hyper, loss_gradient_field

MASS_FRACTION = 0.99


def mass_rich(weights, fraction=MASS_FRACTION):
    """Boolean mask of the entries holding the top ``fraction`` of total mass."""
    w = np.asarray(weights, dtype=float).reshape(-1)
    order = np.argsort(-w, kind="stable")
    csum = np.cumsum(w[order])
    k = int(np.searchsorted(csum, fraction * csum[-1])) + 1
    mask = np.zeros(w.size, dtype=bool)
    mask[order[:k]] = True
    return mask & (w > 0)


def _weighted_lstsq(A, b, w):
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(A * sw[:, None], b * sw, rcond=None)
    resid = b - A @ coef
    wm = np.sum(w * b) / np.sum(w)
    ss_tot = np.sum(w * (b - wm) ** 2)
    ss_res = np.sum(w * resid**2)
    r2 = 0.0 if ss_tot <= 1e-300 * max(1.0, np.sum(w)) else float(max(0.0, 1.0 - ss_res / ss_tot))
    return coef, r2, resid


# --------------------------------------------------------------------------
# density estimation


def estimate_density(ens: Ensemble, theta_range=None, u_range=None, n_theta=40, n_u=40,
                     method="histogram", bandwidth=None) -> DensityGrid:
    """Histogram or Gaussian-kernel estimate of the particle law on a grid.

    The default range is the particle bounding box padded by 5% (or by 0.5
    when degenerate). ``kde`` smooths the fine histogram with the per-axis
    Scott bandwidth ``std * m**(-1/6)`` unless ``bandwidth`` is given.
    The rule and bandwidth are stored in ``grid.meta``.
    """
    if ens.d != 1:
        raise ConfigError(f"density estimation on a grid needs d = 1, got d = {ens.d}")
    th, u = ens.thetas[:, 0], ens.us

    def span(v, given):
        if given is not None:
            return tuple(given)
        lo, hi = float(v.min()), float(v.max())
        pad = 0.05 * (hi - lo) if hi > lo else 0.5
        return lo - pad, hi + pad

    tr, ur = span(th, theta_range), span(u, u_range)
    H, _, _ = np.histogram2d(th, u, bins=[n_theta, n_u], range=[tr, ur])
    grid = DensityGrid(tr, ur, H)
    meta = {"method": method, "m": ens.m}
    if method == "kde":
        if bandwidth is None:
            bandwidth = (float(np.std(th)) * ens.m ** (-1 / 6), float(np.std(u)) * ens.m ** (-1 / 6))
        bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (2,))
        sig = (bw[0] / grid.h_theta, bw[1] / grid.h_u)
        grid.p = ndimage.gaussian_filter(H, sigma=sig, mode="constant", truncate=4.0)
        meta["bandwidth"] = tuple(float(b) for b in bw)
        meta["rule"] = "scott: std * m^(-1/6)"
    elif method != "histogram":
        raise ConfigError(f"unknown density estimate {method!r}")
    if grid.p.sum() <= 0:
        raise ValueError("no particles fall inside the requested range")
    grid = grid.normalized()
    grid.meta.update(meta)
    return grid


# --------------------------------------------------------------------------
# stationarity regression


@dataclass
class StationarityReport:
    r2: float
    coefficients: np.ndarray
    targets: np.ndarray
    intercept: float
    n_cells: int

    @property
    def relative_errors(self):
        return np.abs(self.coefficients - self.targets) / np.abs(self.targets)

    def as_dict(self):
        names = ("c_uu", "c_thth", "c_cross")
        out = {"r2": self.r2, "intercept": self.intercept, "n_cells": self.n_cells}
        for k, name in enumerate(names):
            out[name] = float(self.coefficients[k])
            out[name + "_target"] = float(self.targets[k])
        return out


def stationarity_targets(hp: Hyper):
    """Target log-density coefficients on ``(u^2, theta^2, ghat * u)``."""
    return np.array([-hp.fe_lam1 / (2 * hp.lam3), -hp.fe_lam2 / (2 * hp.lam3), -1.0 / hp.lam3])


def grid_ghat(grid, fmap, dataset, hp, thetas=None):
    """``ghat(theta) = mean_i phi'(f(x_i), y_i) h'(theta, x_i)`` with ``f`` from the grid."""
    drift = ModelDrift(fmap, dataset, hp)
    a, _ = drift.loss_fields(grid, grid.theta if thetas is None else thetas)
    return a


def stationarity_fit(grid: DensityGrid, fmap=None, dataset=None, hp: Hyper = Hyper(),
                     ghat=None, fraction=MASS_FRACTION) -> StationarityReport:
    """Mass-weighted least squares of ``ln p`` on ``{u^2, theta^2, ghat(theta) u, 1}``.

    Only cells in the top ``fraction`` of mass enter the fit. ``ghat`` may be
    given as an array over theta cells; otherwise it is computed from the
    grid's own network output.
    """
    if not hp.lam3 > 0:
        raise ConfigError("stationarity fit needs lam3 > 0")
    if ghat is None:
        ghat = grid_ghat(grid, fmap, dataset, hp)
    ghat = np.asarray(ghat, dtype=float).reshape(-1)
    TH, U = grid.mesh()
    G = np.broadcast_to(ghat[:, None], TH.shape)
    mass = (grid.p * grid.area).reshape(-1)
    mask = mass_rich(mass, fraction)
    if mask.sum() < 4:
        raise ValueError(f"only {mask.sum()} cells in the fit region; need at least 4")
    A = np.column_stack([(U**2).reshape(-1), (TH**2).reshape(-1), (G * U).reshape(-1), np.ones(mass.size)])
    b = np.log(grid.p.reshape(-1)[mask])
    coef, r2, _ = _weighted_lstsq(A[mask], b, mass[mask])
    return StationarityReport(r2, coef[:3], stationarity_targets(hp), float(coef[3]), int(mask.sum()))


# --------------------------------------------------------------------------
# conditional Gaussian


@dataclass
class ConditionalReport:
    centers: np.ndarray
    counts: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    excess_kurtosis: np.ndarray
    target_var: float

    @property
    def relative_errors(self):
        return np.abs(self.var - self.target_var) / self.target_var

    @property
    def max_relative_error(self) -> float:
        return float(self.relative_errors.max())


def conditional_gaussian_check(source, hp: Hyper, n_bins=30, min_count=200, min_mass=1e-3,
                               theta_range=None, detrend=True) -> ConditionalReport:
    """Per-theta-bin moments of ``u`` against the Gaussian variance ``lam3 / lamfe1``.

    ``source`` is an :class:`Ensemble` (bins need ``min_count`` particles) or a
    :class:`DensityGrid` (each theta cell is a bin; it needs ``min_mass``).
    For particles the conditional variance is estimated from residuals of a
    within-bin linear fit of ``u`` on ``theta`` when ``detrend`` is set, so
    that the slope of ``omega`` across a bin does not inflate it.
    """
    if not hp.lam1 > 0:
        raise ConfigError("conditional variance target needs lam1 > 0")
    target = hp.lam3 / hp.fe_lam1
    rows = []
    if isinstance(source, Ensemble):
        if source.d != 1:
            raise ConfigError("conditional check on particles needs d = 1")
        th, u = source.thetas[:, 0], source.us
        lo, hi = theta_range if theta_range is not None else (th.min(), th.max() + 1e-12)
        edges = np.linspace(lo, hi, n_bins + 1)
        idx = np.clip(np.searchsorted(edges, th, side="right") - 1, 0, n_bins - 1)
        for k in range(n_bins):
            sel = idx == k
            uk = u[sel]
            if uk.size < min_count:
                continue
            if detrend:
                # residuals of a within-bin linear fit remove the drift of omega across the bin
                A = np.column_stack([np.ones(uk.size), th[sel]])
                coef, *_ = np.linalg.lstsq(A, uk, rcond=None)
                resid = uk - A @ coef
                var = resid @ resid / (uk.size - 2)
            else:
                resid = uk - uk.mean()
                var = uk.var(ddof=1)
            rows.append((0.5 * (edges[k] + edges[k + 1]), uk.size, uk.mean(), var,
                         stats.kurtosis(resid, fisher=True, bias=False)))
    elif isinstance(source, DensityGrid):
        u = source.u
        for k, th in enumerate(source.theta):
            w = source.p[k] * source.h_u
            mass = w.sum() * source.h_theta
            if mass < min_mass:
                continue
            w = w / w.sum()
            mu = np.dot(w, u)
            c = u - mu
            var = np.dot(w, c**2)
            kurt = np.dot(w, c**4) / var**2 - 3.0
            rows.append((th, mass, mu, var, kurt))
    else:
        raise TypeError("source must be an Ensemble or a DensityGrid")
    if not rows:
        raise ValueError("no bin meets the occupancy threshold")
    arr = np.array(rows, dtype=float)
    return ConditionalReport(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], target)


# --------------------------------------------------------------------------
# ratio law and near-optimality


@dataclass
class TheoryFitReport:
    slope: float
    intercept: float
    target_slope: float
    residuals: np.ndarray
    mask: np.ndarray
    M: float
    sandwich: bool
    sandwich_sqrt: bool
    extra: dict = field(default_factory=dict)

    @property
    def B8(self) -> float:
        return self.intercept

    @property
    def slope_ratio(self) -> float:
        return self.slope / self.target_slope if self.target_slope != 0 else np.inf


def ratio_law_fit(marg: Marginals, hp: Hyper, fraction=MASS_FRACTION) -> TheoryFitReport:
    """Fit ``omega^2 = s theta^2 + B8`` over mass-rich bins; target ``s = lam2 / (3 lam1)``.

    Also evaluates the sandwich
    ``|mu| / (B8 + s_t M) <= rho <= |mu| / B8`` pointwise for ``|theta| <= M``,
    with ``M`` the largest ``|theta|`` in the region and ``s_t`` the target
    slope, and a square-root variant
    ``|mu| / sqrt(B8 + s_t M^2) <= rho <= |mu| / sqrt(B8)``.
    """
    if not hp.lam1 > 0:
        raise ConfigError("ratio law needs lam1 > 0")
    mask = mass_rich(marg.rho * marg.h_theta, fraction) & marg.valid
    if mask.sum() < 2:
        raise ValueError("fewer than two usable bins")
    th = marg.theta[mask]
    w2 = marg.omega[mask] ** 2
    A = np.column_stack([th**2, np.ones_like(th)])
    coef, r2, resid = _weighted_lstsq(A, w2, marg.rho[mask])
    slope, B8 = float(coef[0]), float(coef[1])
    target = hp.lam2 / (3 * hp.lam1)
    M = float(np.max(np.abs(th)))
    rho, amu = marg.rho[mask], np.abs(marg.mu[mask])
    tol = 1e-12 * rho.max()
    if B8 > 0:
        lit = bool(np.all(amu / (B8 + target * M) <= rho + tol) and np.all(rho <= amu / B8 + tol))
        sq = bool(np.all(amu / np.sqrt(B8 + target * M**2) <= rho + tol) and np.all(rho <= amu / np.sqrt(B8) + tol))
    else:
        lit = sq = False
    return TheoryFitReport(slope, B8, target, resid, mask, M, lit, sq, {"r2": r2})


def population_gap(marg: Marginals) -> float:
    """Total variation between ``rho`` and the efficient population ``|mu| / int|mu|``."""
    amu = np.abs(marg.mu)
    C = amu.sum() * marg.h_theta
    if not C > 0:
        raise ValueError("signed measure vanishes")
    return total_variation(marg.rho, amu / C, marg.h_theta)


def network_output_from_marginals(marg: Marginals, fmap: FeatureMap, dataset):
    H = fmap.features(marg.theta[:, None], dataset.X)
    return (marg.mu * marg.h_theta) @ H


def omega_residual(marg: Marginals, fmap: FeatureMap, dataset, hp: Hyper, fraction=MASS_FRACTION,
                   relative=False) -> float:
    """Sup over mass-rich bins of ``|omega + ghat / lamfe1|``, with ``ghat`` from the marginals.

    With ``relative`` the value is divided by ``max|omega|`` on the same bins.
    """
    if not hp.lam1 > 0:
        raise ConfigError("the fixed-point identity needs lam1 > 0")
    mask = mass_rich(marg.rho * marg.h_theta, fraction) & marg.valid
    f = network_output_from_marginals(marg, fmap, dataset)
    ghat, _ = loss_gradient_field(fmap, marg.theta[mask][:, None], dataset, f)
    res = float(np.max(np.abs(marg.omega[mask] + ghat / hp.fe_lam1)))
    if relative:
        res /= float(np.max(np.abs(marg.omega[mask])))
    return res


def omega_bound(hp: Hyper, B_v=1.0) -> float:
    """Upper bound ``L1 B_v / lamfe1`` on ``|omega*|`` when ``mean_x h'^2 <= B_v^2``."""
    return hp.L1 * B_v / hp.fe_lam1


# --------------------------------------------------------------------------
# self-consistent Gibbs law


def gibbs_grid(ghat, hp: Hyper, theta_range, u_range, n_theta, n_u) -> DensityGrid:
    """Normalized ``exp(-(lam1 u^2 + lam2 theta^2 + ghat(theta) u) / lam3)`` on cell centers."""
    g = DensityGrid(theta_range, u_range, np.zeros((n_theta, n_u)))
    TH, U = g.mesh()
    gh = np.asarray(ghat(g.theta) if callable(ghat) else ghat, dtype=float)
    logp = -(hp.lam1 * U**2 + hp.lam2 * TH**2 + gh[:, None] * U) / hp.lam3
    g.p = np.exp(logp - logp.max())
    return g.normalized()


def gibbs_fixed_point(fmap: FeatureMap, dataset, hp: Hyper, n_theta=200, n_u=200, theta_range=None,
                      u_range=None, damping=0.5, tol=1e-12, max_iter=5000):
    """Gibbs grid whose ``ghat`` is computed from the grid itself.

    Damped fixed-point iteration on ``ghat``. Returns ``(grid, ghat, iterations)``.
    """
    if dataset.d != 1:
        raise ConfigError("the Gibbs grid supports d = 1 only")
    auto_t, auto_u = auto_ranges(hp)
    theta_range = theta_range or auto_t
    u_range = u_range or auto_u
    drift = ModelDrift(fmap, dataset, hp)
    proto = DensityGrid(theta_range, u_range, np.ones((n_theta, n_u)))
    ghat = np.zeros(n_theta)
    for it in range(1, max_iter + 1):
        grid = gibbs_grid(ghat, hp, theta_range, u_range, n_theta, n_u)
        new, _ = drift.loss_fields(grid, proto.theta)
        delta = float(np.max(np.abs(new - ghat)))
        ghat = (1 - damping) * ghat + damping * new
        if delta < tol:
            break
    grid = gibbs_grid(ghat, hp, theta_range, u_range, n_theta, n_u)
    return grid, ghat, it


def gibbs_marginals(ghat, hp: Hyper, theta, h_theta) -> Marginals:
    """Closed-form marginals of the Gibbs law, integrating ``u`` analytically.

    ``rho ∝ exp(-lam2 theta^2 / lam3 + ghat^2 / (4 lam1 lam3))`` and
    ``omega = -ghat / (2 lam1)``.
    """
    ghat = np.asarray(ghat, dtype=float)
    logr = -hp.lam2 * theta**2 / hp.lam3 + ghat**2 / (4 * hp.lam1 * hp.lam3)
    r = np.exp(logr - logr.max())
    r /= r.sum() * h_theta
    return Marginals(np.asarray(theta, dtype=float), r, -ghat / hp.fe_lam1, r > 1e-14, h_theta)


def gibbs_fixed_point_1d(fmap: FeatureMap, dataset, hp: Hyper, theta_range=None, n_theta=2000,
                         damping=0.5, tol=1e-12, max_iter=5000):
    """Fixed point of the Gibbs law on a fine theta grid with ``u`` integrated out exactly.

    Returns ``(marginals, iterations)``.
    """
    theta_range = theta_range or auto_ranges(hp)[0]
    h = (theta_range[1] - theta_range[0]) / n_theta
    theta = theta_range[0] + (np.arange(n_theta) + 0.5) * h
    H = fmap.features(theta[:, None], dataset.X)
    ghat = np.zeros(n_theta)
    for it in range(1, max_iter + 1):
        marg = gibbs_marginals(ghat, hp, theta, h)
        f = (marg.mu * h) @ H
        new, _ = loss_gradient_field(fmap, theta[:, None], dataset, f)
        delta = float(np.max(np.abs(new - ghat)))
        ghat = (1 - damping) * ghat + damping * new
        if delta < tol:
            break
    return gibbs_marginals(ghat, hp, theta, h), it


def fixed_point_defect(grid: DensityGrid, drift, lam3, dtau=None) -> float:
    """Sup-norm change of the density over one explicit step."""
    from .meanfield import admissible_dt, fp_step

    dtau = 0.5 * admissible_dt(grid, drift, lam3) if dtau is None else dtau
    nxt = fp_step(grid, drift, lam3, dtau)
    return float(np.max(np.abs(nxt.p - grid.p)))


__all__ = [
    "ConditionalReport", "StationarityReport", "TheoryFitReport", "conditional_gaussian_check",
    "estimate_density", "fixed_point_defect", "gibbs_fixed_point", "gibbs_fixed_point_1d", "gibbs_grid",
    "gibbs_marginals", "mass_rich", "omega_bound", "omega_residual", "population_gap", "stationarity_fit",
    "stationarity_targets", "ratio_law_fit", "marginals",
]
