"""Sampling-efficiency criterion for feature populations on a 1-D theta grid.

A signed measure ``mu`` is represented by a population ``rho`` through the
weights ``omega = mu / rho``. The criterion ``V(mu, rho) = int omega^2 rho``
controls the mean squared error of an ``m``-node Monte-Carlo network, and by
Cauchy-Schwarz ``V >= (int |mu|)^2`` with equality for ``rho = |mu| / int |mu|``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundViolation, ConfigError

RHO_FLOOR = 1e-14


@dataclass
class SignedMeasureGrid:
    """Values of ``mu`` at the centers of a uniform theta grid starting at ``origin``."""

    origin: float
    h: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if not self.h > 0:
            raise ValueError("cell width must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("measure values must be finite")

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def theta(self):
        return self.origin + (np.arange(self.n) + 0.5) * self.h

    def total_variation(self) -> float:
        return float(np.sum(np.abs(self.values)) * self.h)

    def integral(self) -> float:
        return float(np.sum(self.values) * self.h)

    def same_layout(self, other) -> bool:
        return self.n == other.n and abs(self.h - other.h) <= 1e-12 * self.h and abs(self.origin - other.origin) <= 1e-12 * max(1.0, abs(self.origin))

    @classmethod
    def from_function(cls, func, lo, hi, n):
        h = (hi - lo) / n
        theta = lo + (np.arange(n) + 0.5) * h
        return cls(lo, h, func(theta))


@dataclass
class FeaturePopulation(SignedMeasureGrid):
    """Nonnegative density on the same layout as a :class:`SignedMeasureGrid`."""

    C: float | None = None

    def __post_init__(self):
        super().__post_init__()
        if np.any(self.values < 0):
            raise ValueError("population density must be nonnegative")

    @property
    def rho(self):
        return self.values

    def mass(self) -> float:
        return self.integral()

    def validate(self, tol=1e-9):
        if abs(self.mass() - 1.0) > tol:
            raise ValueError(f"population mass {self.mass()} differs from 1")
        return self

    @classmethod
    def gaussian(cls, like: SignedMeasureGrid, sigma, mean=0.0):
        th = like.theta
        r = np.exp(-0.5 * ((th - mean) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
        return cls(like.origin, like.h, r)


def representation_weights(mu: SignedMeasureGrid, rho: FeaturePopulation, floor=RHO_FLOOR):
    """``omega = mu / rho`` where ``rho`` exceeds ``floor`` and 0 elsewhere."""
    omega = np.zeros(mu.n)
    live = rho.values > floor
    omega[live] = mu.values[live] / rho.values[live]
    return omega, live


def variance_criterion(mu: SignedMeasureGrid, rho: FeaturePopulation, floor=RHO_FLOOR, check=True) -> float:
    """``V = int (mu / rho)^2 rho``.

    Where ``rho`` is below ``floor`` the weight is 0. If ``mu`` carries mass
    there the population cannot represent it and ``V`` is infinite. With
    ``check`` the lower bound ``(int |mu|)^2`` is asserted.
    """
    if not mu.same_layout(rho):
        raise ValueError("measure and population live on different grids")
    omega, live = representation_weights(mu, rho, floor)
    if np.any(np.abs(mu.values[~live]) > 0):
        return float("inf")
    V = float(np.sum(omega[live] ** 2 * rho.values[live]) * rho.h)
    if check:
        lower = mu.total_variation() ** 2
        if V < lower * (1 - 1e-9):
            raise BoundViolation(f"V={V} below (int|mu|)^2={lower}")
    return V


def optimal_population(mu: SignedMeasureGrid) -> FeaturePopulation:
    """``rho = |mu| / int |mu|`` with the normalizer recorded in ``C``."""
    C = mu.total_variation()
    if not C > 0:
        raise ValueError("the measure is identically zero")
    return FeaturePopulation(mu.origin, mu.h, np.abs(mu.values) / C, C=C)


def boxcar_measure(a: float, cells_per_box=40, extent=None, height=None) -> SignedMeasureGrid:
    """Two boxcars on ``|theta - 1| <= a`` and ``|theta + 1| <= a``.

    The default height ``1/(4a)`` gives unit total mass over the support of
    measure ``4a``. ``height=1/(2a)`` gives the unnormalized variant with
    total mass 2. The grid is symmetric about 0 with box edges on cell faces;
    ``extent`` (default ``max(1 + a, 30)``) sets the half-width so that
    Gaussian populations of moderate width keep their mass on the grid.
    """
    if not 0 < a < 1:
        raise ConfigError(f"boxcar half-width must lie in (0, 1), got {a}")
    if cells_per_box < 20:
        raise ConfigError("need at least 20 cells per boxcar to resolve it")
    height = 1.0 / (4 * a) if height is None else float(height)
    h = 2 * a / cells_per_box
    extent = max(1 + a, 30.0) if extent is None else extent
    half = int(np.ceil(extent / h))
    if half * h < 1 + a:
        raise ConfigError("extent does not cover the boxes")
    theta = (np.arange(-half, half) + 0.5) * h
    # cell centers lie strictly inside or outside each box by construction
    vals = np.where((np.abs(theta - 1) < a) | (np.abs(theta + 1) < a), height, 0.0)
    return SignedMeasureGrid(-half * h, h, vals)


def boxcar_gaussian_bound(a: float) -> float:
    """``sqrt(2 pi) e^(1/2) / a``.

    This is the minimum over centered Gaussian populations of ``V`` for the
    height ``1/(2a)`` boxcars (attained near ``sigma = 1``); for the
    unit-mass boxcars the minimum is a quarter of it.
    """
    return float(np.sqrt(2 * np.pi) * np.exp(0.5) / a)


def sampling_error_bound(V: float, Bv: float, m: int) -> float:
    """``V * Bv^2 / m``."""
    if not (V > 0 and Bv > 0 and m > 0):
        raise ValueError("V, Bv and m must be positive")
    return float(V * Bv**2 / m)


def represented_function(mu: SignedMeasureGrid, fmap, X):
    """``f(x) = int h'(theta, x) mu(theta) dtheta`` by midpoint quadrature."""
    H = fmap.features(mu.theta[:, None], X)
    return (mu.values * mu.h) @ H


def sampling_variance(mu: SignedMeasureGrid, rho: FeaturePopulation, fmap, X, m: int) -> float:
    """Exact ``E E_x (fhat - f)^2`` when ``m`` nodes are drawn from the cell distribution of ``rho``."""
    omega, live = representation_weights(mu, rho)
    H = fmap.features(mu.theta[:, None], X)
    w = rho.values * rho.h
    second = np.mean((w * omega**2) @ (H**2))
    f = (w * omega) @ H
    return float((second - np.mean(f**2)) / m)


def sampling_error_mc(mu: SignedMeasureGrid, rho: FeaturePopulation, fmap, X, m: int, n_rep=30, seed=0):
    """Monte-Carlo mean squared error of ``m``-node networks drawn from ``rho``.

    Nodes are drawn from the cells with probabilities ``rho * h`` and carry
    weights ``omega`` at the cell centers, which makes ``fhat`` unbiased for
    the quadrature ``f``. Returns ``(mean, standard_error, per_rep)``.
    """
    omega, _ = representation_weights(mu, rho)
    prob = rho.values * rho.h
    prob = prob / prob.sum()
    H = fmap.features(mu.theta[:, None], X)
    f = (prob * omega) @ H
    rng = np.random.default_rng(seed)
    errs = np.empty(n_rep)
    for r in range(n_rep):
        idx = rng.choice(mu.n, size=m, p=prob)
        fhat = omega[idx] @ H[idx] / m
        errs[r] = np.mean((fhat - f) ** 2)
    return float(errs.mean()), float(errs.std(ddof=1) / np.sqrt(n_rep)), errs
