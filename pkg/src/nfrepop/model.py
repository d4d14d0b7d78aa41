"""Two-level network: feature map, forward pass, objective and drift fields.

The network is ``f(x) = (1/m) sum_j u_j h'(theta_j, x)`` trained on the
logistic loss with l2 penalties ``lam1 * mean(u**2) + lam2 * mean(|theta|**2)``.
The drift fields returned by :func:`particle_drifts` are the per-particle
gradients rescaled by ``-m`` so that a finite ensemble follows the mean-field
velocity field independently of its size.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError

ACTIVATIONS = ("tanh", "sigmoid", "smoothed-relu")


def phi_loss(margin_input, label):
    """Logistic loss ``ln(1 + exp(-y y'))`` and its derivative in ``y'``.

    Works elementwise on arrays. The derivative is bounded by 1 and is
    1/4-Lipschitz.
    """
    z = np.asarray(margin_input, dtype=float)
    y = np.asarray(label, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("phi_loss: non-finite network output")
    if not np.all(np.abs(y) == 1.0):
        raise ValueError("phi_loss: labels must be +1 or -1")
    value = np.logaddexp(0.0, -y * z)
    deriv = -y * expit(-y * z)
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


@dataclass(frozen=True)
class FeatureMap:
    """Activation ``sigma(theta . x)``, optionally normalized per feature.

    In normalized mode each feature is divided by the root of its empirical
    second moment over the supplied inputs (floored at ``eps``), so that
    ``mean_x h'(theta, x)**2 == 1``.
    """

    activation: str = "tanh"
    normalized: bool = False
    eps: float = 1e-12
    gate_width: float = 0.1

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if not self.eps > 0:
            raise ConfigError("normalizer floor must be positive")

    @property
    def mode(self) -> str:
        return "normalized" if self.normalized else "raw"

    def sigma(self, z):
        if self.activation == "tanh":
            return np.tanh(z)
        if self.activation == "sigmoid":
            return expit(z)
        return z * expit(z / self.gate_width)

    def dsigma(self, z):
        if self.activation == "tanh":
            t = np.tanh(z)
            return 1.0 - t * t
        if self.activation == "sigmoid":
            s = expit(z)
            return s * (1.0 - s)
        g = expit(z / self.gate_width)
        return g + (z / self.gate_width) * g * (1.0 - g)

    def _raw(self, thetas, X):
        S = thetas @ X.T
        return S, self.sigma(S)

    def _norms(self, Hraw):
        return np.maximum(np.sqrt(np.mean(Hraw * Hraw, axis=1)), self.eps)

    def features(self, thetas, X):
        """Matrix ``H[j, i] = h'(theta_j, x_i)`` of shape (m, n)."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if thetas.shape[1] != X.shape[1]:
            raise ValueError(f"dimension mismatch: theta has d={thetas.shape[1]}, x has d={X.shape[1]}")
        _, H = self._raw(thetas, X)
        if self.normalized:
            H = H / self._norms(H)[:, None]
        return H

    def project(self, thetas, X, c):
        """Data averages needed by the drift fields.

        Returns ``a[j] = mean_i c_i h'(theta_j, x_i)`` and
        ``b[j] = mean_i c_i grad_theta h'(theta_j, x_i)`` without forming the
        (m, n, d) Jacobian. In normalized mode ``b`` carries the quotient-rule
        term through the per-feature normalizer.
        """
        n = X.shape[0]
        S, Hraw = self._raw(thetas, X)
        D = self.dsigma(S)
        a_raw = Hraw @ c / n
        b_raw = (D * c) @ X / n
        if not self.normalized:
            return a_raw, b_raw
        N = self._norms(Hraw)
        live = np.sqrt(np.mean(Hraw * Hraw, axis=1)) > self.eps
        a = a_raw / N
        # d/dtheta of N = mean_i(h_i sigma'_i x_i) / N
        dN = (Hraw * D) @ X / n / N[:, None]
        b = b_raw / N[:, None] - np.where(live, a_raw / N**2, 0.0)[:, None] * dN
        return a, b


@dataclass(frozen=True)
class Hyper:
    """Regularization weights, noise temperature and step size.

    ``lam1`` and ``lam2`` multiply ``mean(u**2)`` and ``mean(|theta|**2)`` in the
    training objective. The free-energy functional of the mean-field
    dynamics is usually written with ``lam/2`` coefficients on the same
    quadratics; :meth:`from_free_energy` and the ``fe_*`` properties convert.
    """

    lam1: float = 0.0
    lam2: float = 0.0
    lam3: float = 0.0
    dt: float = 0.1
    B_v: float | None = None
    L1: float = 1.0
    L2: float = 0.25
    C1: float | None = None
    C2: float | None = None
    C3: float | None = None

    def __post_init__(self):
        for name in ("lam1", "lam2", "lam3"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be a finite nonnegative number, got {v}")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ConfigError(f"dt must be positive, got {self.dt}")
        for name in ("B_v", "L1", "L2", "C1", "C2", "C3"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{name} must be nonnegative")

    @classmethod
    def from_free_energy(cls, lam1, lam2, lam3, dt=0.1, **kw):
        """Build from weights written as ``lam/2 * u**2`` and ``lam/2 * |theta|**2``."""
        return cls(lam1=lam1 / 2.0, lam2=lam2 / 2.0, lam3=lam3, dt=dt, **kw)

    @property
    def fe_lam1(self) -> float:
        return 2.0 * self.lam1

    @property
    def fe_lam2(self) -> float:
        return 2.0 * self.lam2

    def replace(self, **kw) -> "Hyper":
        from dataclasses import replace

        return replace(self, **kw)


@dataclass
class Ensemble:
    """``m`` particles: hidden weights ``thetas`` (m, d) and top weights ``us`` (m,)."""

    thetas: np.ndarray
    us: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=float))
        self.us = np.asarray(self.us, dtype=float).reshape(-1)
        if self.thetas.shape[0] != self.us.shape[0]:
            raise ValueError("thetas and us disagree on particle count")
        if self.us.shape[0] < 1:
            raise ValueError("ensemble needs at least one particle")
        if not (np.all(np.isfinite(self.thetas)) and np.all(np.isfinite(self.us))):
            raise ValueError("ensemble contains non-finite entries")

    @property
    def m(self) -> int:
        return self.us.shape[0]

    @property
    def d(self) -> int:
        return self.thetas.shape[1]

    def copy(self) -> "Ensemble":
        return Ensemble(self.thetas.copy(), self.us.copy(), dict(self.meta))


def _check(ens, dataset):
    if dataset is None or dataset.n == 0:
        raise ValueError("dataset is empty")
    if ens.d != dataset.d:
        raise ValueError(f"dimension mismatch: ensemble d={ens.d}, dataset d={dataset.d}")


def _norm_source(fmap, dataset, X):
    if not fmap.normalized:
        return None
    if dataset is None or dataset.n == 0:
        raise ValueError("normalized features need a nonempty dataset")
    return dataset.X


def feature_value(fmap: FeatureMap, theta, x, dataset=None) -> float:
    """``h'(theta, x)``; the dataset supplies the normalizer in normalized mode."""
    theta = np.asarray(theta, dtype=float).reshape(1, -1)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if theta.shape[1] != x.shape[1]:
        raise ValueError("dimension mismatch between theta and x")
    raw = fmap.sigma(theta @ x.T)[0, 0]
    if not fmap.normalized:
        return float(raw)
    Xd = _norm_source(fmap, dataset, x)
    if Xd.shape[1] != x.shape[1]:
        raise ValueError("dimension mismatch between x and dataset")
    N = max(np.sqrt(np.mean(fmap.sigma(Xd @ theta[0]) ** 2)), fmap.eps)
    return float(raw / N)


def hidden(ens: Ensemble, fmap: FeatureMap, X, dataset=None):
    """Hidden-layer outputs (m, n) at inputs ``X``, normalized with ``dataset`` stats."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != ens.d:
        raise ValueError(f"dimension mismatch: ensemble d={ens.d}, input d={X.shape[1]}")
    if not fmap.normalized:
        return fmap.sigma(ens.thetas @ X.T)
    Xd = _norm_source(fmap, dataset, X)
    N = fmap._norms(fmap.sigma(ens.thetas @ Xd.T))
    return fmap.sigma(ens.thetas @ X.T) / N[:, None]


def predict(ens: Ensemble, fmap: FeatureMap, X, dataset=None):
    """Network outputs for every row of ``X``."""
    return ens.us @ hidden(ens, fmap, X, dataset) / ens.m


def forward(ens: Ensemble, fmap: FeatureMap, x, dataset=None) -> float:
    """``(1/m) sum_j u_j h'(theta_j, x)`` at a single input."""
    return float(predict(ens, fmap, np.asarray(x, dtype=float).reshape(1, -1), dataset)[0])


def empirical_loss(ens, fmap, dataset) -> float:
    _check(ens, dataset)
    f = predict(ens, fmap, dataset.X, dataset)
    value, _ = phi_loss(f, dataset.y)
    return float(np.mean(value))


def objective(ens: Ensemble, fmap: FeatureMap, dataset, hp: Hyper) -> float:
    """Empirical logistic risk plus the two l2 penalties."""
    _check(ens, dataset)
    loss = empirical_loss(ens, fmap, dataset)
    r1 = np.mean(ens.us**2)
    r2 = np.mean(np.sum(ens.thetas**2, axis=1))
    return float(loss + hp.lam1 * r1 + hp.lam2 * r2)


def particle_drifts(ens: Ensemble, fmap: FeatureMap, dataset, hp: Hyper):
    """Velocity field ``(g1, g2)`` evaluated at every particle.

    ``g1[j] = -mean_i phi'_i h'(theta_j, x_i) - 2 lam1 u_j`` and
    ``g2[j] = -u_j mean_i phi'_i grad h'(theta_j, x_i) - 2 lam2 theta_j``,
    which equal ``-m`` times the gradient of :func:`objective`.
    """
    _check(ens, dataset)
    X = dataset.X
    H = fmap.features(ens.thetas, X)
    f = ens.us @ H / ens.m
    _, dphi = phi_loss(f, dataset.y)
    a, b = fmap.project(ens.thetas, X, dphi)
    g1 = -a - 2.0 * hp.lam1 * ens.us
    g2 = -ens.us[:, None] * b - 2.0 * hp.lam2 * ens.thetas
    return g1, g2


def loss_gradient_field(fmap: FeatureMap, thetas, dataset, f):
    """``(mean_i phi'(f_i, y_i) h'(theta, x_i), mean_i phi'_i grad h'(theta, x_i))``.

    ``f`` holds the network outputs at the training inputs. This is the
    data-dependent part of the drift evaluated at arbitrary ``thetas``,
    used by the grid solver and the stationarity checks.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    _, dphi = phi_loss(f, dataset.y)
    return fmap.project(thetas, dataset.X, dphi)
