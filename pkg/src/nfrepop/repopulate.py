"""Feature repopulation: resample hidden units from a trained population and refit the top layer.

A trained ensemble defines a population of hidden weights. A new, usually
smaller, hidden layer is drawn from that population (plain resampling,
resampling weighted by ``|u|`` or a Gaussian-kernel smoothing of the
population), its top weights are started at zero and trained alone on the
convex top-layer objective. The baseline draws hidden weights from ``N(0, I)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergedTraining
from .model import Ensemble, FeatureMap, Hyper, hidden, phi_loss

METHODS = ("empirical", "importance", "kde")
ARMS = ("random",) + METHODS


def importance_weights(ens: Ensemble, return_flag=False):
    """``w_j ∝ |u_j|``; uniform with a warning when every ``u_j`` is zero."""
    a = np.abs(ens.us)
    total = a.sum()
    degenerate = not total > 0
    if degenerate:
        warnings.warn("all top weights are zero; falling back to uniform importance", RuntimeWarning, stacklevel=2)
        w = np.full(ens.m, 1.0 / ens.m)
    else:
        w = a / total
    return (w, degenerate) if return_flag else w


@dataclass
class DensityModel:
    method: str
    source: np.ndarray
    weights: np.ndarray
    bandwidth: np.ndarray | None = None
    seed: int = 0
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown density model {self.method!r}; expected one of {METHODS}")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")
        if self.bandwidth is not None and not np.all(self.bandwidth > 0):
            raise ValueError("kde bandwidth must be positive")

    @property
    def d(self) -> int:
        return self.source.shape[1]


def kde_bandwidth(thetas, scale=1.0):
    """Per-dimension ``scale * std * m**(-1/(d+4))``; zero spreads fall back to 1."""
    m, d = thetas.shape
    std = thetas.std(axis=0, ddof=1)
    std = np.where(std > 0, std, 1.0)
    return scale * std * m ** (-1.0 / (d + 4))


def fit_density(ens: Ensemble, method="empirical", seed=0, bandwidth_scale=1.0) -> DensityModel:
    """Density model of the hidden weights of ``ens``."""
    if method not in METHODS:
        raise ConfigError(f"unknown density model {method!r}; expected one of {METHODS}")
    src = ens.thetas.copy()
    flags = {}
    bw = None
    if method == "importance":
        w, flags["degenerate_importance"] = importance_weights(ens, return_flag=True)
    else:
        w = np.full(ens.m, 1.0 / ens.m)
    if method == "kde":
        if ens.m < 2:
            raise ConfigError("kde needs at least two source particles")
        bw = kde_bandwidth(src, bandwidth_scale)
        flags["bandwidth_rule"] = f"{bandwidth_scale} * std * m^(-1/(d+4))"
    return DensityModel(method, src, w, bw, seed, flags)


def sample_features(model: DensityModel, m_prime: int, seed=0) -> np.ndarray:
    """``m_prime`` i.i.d. hidden weights drawn from ``model``."""
    if int(m_prime) < 1:
        raise ConfigError("m' must be a positive integer")
    rng = np.random.default_rng([int(seed), 0x7265706F70])
    idx = rng.choice(model.source.shape[0], size=int(m_prime), p=model.weights)
    out = model.source[idx].copy()
    if model.method == "kde":
        out += model.bandwidth * rng.standard_normal(out.shape)
    return out


def random_features(m_prime: int, d: int, seed=0, scale=1.0) -> np.ndarray:
    """Task-independent ``N(0, scale^2 I)`` hidden weights."""
    if int(m_prime) < 1:
        raise ConfigError("m' must be a positive integer")
    rng = np.random.default_rng([int(seed), 0x7265706F70])
    return scale * rng.standard_normal((int(m_prime), d))


# --------------------------------------------------------------------------
# top-layer training


@dataclass
class TopLayerResult:
    us: np.ndarray
    objectives: np.ndarray
    losses: np.ndarray
    record_steps: np.ndarray
    grad_norm: float
    dt: float


def _top_objective(H, u, y, lam1):
    f = u @ H / u.size
    val, dphi = phi_loss(f, y)
    return float(np.mean(val)), float(np.mean(val) + lam1 * np.mean(u**2)), dphi


def top_layer_step_bound(H, lam1) -> float:
    """Largest step for which the scaled top-layer gradient step is a descent step.

    With drifts scaled by ``m'`` the curvature is at most
    ``L = lambda_max(H H^T) / (4 n m') + 2 lam1`` and any ``dt < 2 / L`` decreases the objective.
    """
    m, n = H.shape
    smax = np.linalg.norm(H, 2) if H.size else 0.0
    L = smax**2 / (4.0 * n * m) + 2.0 * lam1
    return float(2.0 / L) if L > 0 else np.inf


def train_top_layer(thetas, fmap: FeatureMap, dataset, hp: Hyper, steps=500, dt=None, u0=None,
                    record_every=1, target_loss=None) -> TopLayerResult:
    """Gradient descent on ``u`` with ``thetas`` frozen; the objective is convex in ``u``.

    Drifts are scaled by ``m'`` as in particle training. ``dt`` defaults to
    half of :func:`top_layer_step_bound`; larger steps than the bound are
    refused. Training stops early once the data loss reaches
    ``target_loss`` when that is given. The objective is checked to be
    non-increasing at every step.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[1] != dataset.d:
        raise ValueError(f"dimension mismatch: features d={thetas.shape[1]}, data d={dataset.d}")
    ens = Ensemble(thetas, np.zeros(thetas.shape[0]))
    H = hidden(ens, fmap, dataset.X, dataset)
    m = H.shape[0]
    bound = top_layer_step_bound(H, hp.lam1)
    if dt is None:
        dt = 0.5 * bound
    elif dt >= bound:
        raise ConfigError(f"top-layer step dt={dt} exceeds the descent bound 2/L={bound:.6g}")
    u = np.zeros(m) if u0 is None else np.asarray(u0, dtype=float).copy()
    y = dataset.y
    loss, obj, dphi = _top_objective(H, u, y, hp.lam1)
    objs, losses, rec = [obj], [loss], [0]
    grad = np.zeros(m)
    for t in range(1, steps + 1):
        grad = H @ dphi / dataset.n + 2.0 * hp.lam1 * u
        u = u - dt * grad
        if not np.all(np.isfinite(u)):
            raise DivergedTraining(f"top-layer weights diverged at step {t}; step bound 2/L={bound:.6g}", step=t)
        new_loss, new_obj, dphi = _top_objective(H, u, y, hp.lam1)
        if new_obj > obj + 1e-12 * max(1.0, abs(obj)):
            raise DivergedTraining(
                f"top-layer objective increased at step {t} ({obj} -> {new_obj}); step bound 2/L={bound:.6g}", step=t
            )
        obj, loss = new_obj, new_loss
        if t % record_every == 0 or t == steps:
            objs.append(obj)
            losses.append(loss)
            rec.append(t)
        if target_loss is not None and loss <= target_loss:
            if rec[-1] != t:
                objs.append(obj)
                losses.append(loss)
                rec.append(t)
            break
    grad = H @ dphi / dataset.n + 2.0 * hp.lam1 * u
    return TopLayerResult(u, np.array(objs), np.array(losses), np.array(rec), float(np.linalg.norm(grad)), float(dt))


def classification_error(ens: Ensemble, fmap: FeatureMap, test, train) -> float:
    """Misclassification rate of ``sign(f)`` on ``test``; normalizers come from ``train``."""
    f = ens.us @ hidden(ens, fmap, test.X, train) / ens.m
    return float(np.mean(np.where(f >= 0, 1.0, -1.0) != test.y))


# --------------------------------------------------------------------------
# comparison pipeline


@dataclass
class ArmResult:
    name: str
    train_loss: np.ndarray
    test_error: np.ndarray
    record_steps: np.ndarray

    @property
    def mean_test_error(self) -> float:
        return float(self.test_error.mean())

    @property
    def std_test_error(self) -> float:
        return float(self.test_error.std(ddof=1)) if self.test_error.size > 1 else 0.0

    @property
    def mean_train_loss(self):
        return self.train_loss.mean(axis=0)

    @property
    def std_train_loss(self):
        return self.train_loss.std(axis=0, ddof=1) if self.train_loss.shape[0] > 1 else np.zeros(self.train_loss.shape[1])


@dataclass
class ComparisonReport:
    seeds: list
    m_prime: int
    arms: dict
    config: dict = field(default_factory=dict)

    def rows(self):
        """Flat rows ``(arm, seed, step, train_loss, test_error)`` for the metrics writer."""
        out = []
        for name, arm in self.arms.items():
            for s, seed in enumerate(self.seeds):
                for k, step in enumerate(arm.record_steps):
                    out.append((name, seed, int(step), float(arm.train_loss[s, k]), float(arm.test_error[s])))
        return out


def run_comparison(trained: Ensemble, m_prime: int, method="empirical", seeds=range(10), train=None, test=None,
                   hp: Hyper = Hyper(), fmap: FeatureMap = FeatureMap(), steps=500, record_every=25,
                   arms=None, random_scale=1.0, bandwidth_scale=1.0) -> ComparisonReport:
    """Train top layers on random and repopulated hidden layers for each seed.

    ``arms`` defaults to ``("random", method)``. Every arm draws its hidden
    weights from the same per-seed generator stream, starts from ``u = 0``
    and gets the same step budget, so differences come from the feature
    distribution alone.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 1:
        raise ConfigError("need at least one seed")
    if train is None or test is None:
        raise ConfigError("need train and test datasets")
    if trained.d != train.d or test.d != train.d:
        raise ValueError("trained ensemble and datasets disagree on dimension")
    arms = tuple(arms) if arms is not None else ("random", method)
    for a in arms:
        if a not in ARMS:
            raise ConfigError(f"unknown arm {a!r}; expected one of {ARMS}")
    models = {a: fit_density(trained, a, bandwidth_scale=bandwidth_scale) for a in arms if a != "random"}
    results = {}
    for a in arms:
        curves, errs, rec = [], [], None
        for seed in seeds:
            if a == "random":
                th = random_features(m_prime, train.d, seed, random_scale)
            else:
                th = sample_features(models[a], m_prime, seed)
            res = train_top_layer(th, fmap, train, hp, steps=steps, record_every=record_every)
            curves.append(res.losses)
            errs.append(classification_error(Ensemble(th, res.us), fmap, test, train))
            rec = res.record_steps
        results[a] = ArmResult(a, np.array(curves), np.array(errs), rec)
    cfg = {"method": method, "steps": steps, "record_every": record_every, "lam1": hp.lam1,
           "activation": fmap.activation, "mode": fmap.mode, "random_scale": random_scale}
    return ComparisonReport(seeds, int(m_prime), results, cfg)


def empirical_efficiency(ens: Ensemble, fmap: FeatureMap, dataset) -> float:
    """``sum_j (u_j s_j)^2`` where ``s_j`` is the empirical std of hidden node ``j``.

    Rescaling each node output to unit variance moves ``s_j`` into the top
    weight. Nodes with zero variance are dropped with a warning.
    """
    if dataset is None or dataset.n == 0:
        raise ValueError("dataset is empty")
    H = hidden(ens, fmap, dataset.X, dataset)
    s = H.std(axis=1)
    live = s > 1e-12
    if not np.all(live):
        warnings.warn(f"{int((~live).sum())} hidden nodes have zero variance and are excluded", RuntimeWarning,
                      stacklevel=2)
    return float(np.sum((ens.us[live] * s[live]) ** 2))


@dataclass
class EfficiencyPair:
    trained: float
    random: float
    trained_error: float
    random_error: float
    trained_loss: float
    random_loss: float


def efficiency_comparison(trained: Ensemble, fmap: FeatureMap, train, test, hp: Hyper, seed=0, steps=5000,
                          random_scale=1.0) -> EfficiencyPair:
    """Efficiency of a trained network and of a random-feature network fitted to the same training loss.

    The random arm draws ``m`` hidden weights from ``N(0, random_scale^2 I)``
    and trains its top layer until its data loss reaches that of ``trained``
    (or the step budget runs out).
    """
    f = trained.us @ hidden(trained, fmap, train.X, train) / trained.m
    target = float(np.mean(phi_loss(f, train.y)[0]))
    th = random_features(trained.m, trained.d, seed, random_scale)
    res = train_top_layer(th, fmap, train, hp, steps=steps, record_every=steps, target_loss=target)
    rnd = Ensemble(th, res.us)
    return EfficiencyPair(
        trained=empirical_efficiency(trained, fmap, train),
        random=empirical_efficiency(rnd, fmap, train),
        trained_error=classification_error(trained, fmap, test, train),
        random_error=classification_error(rnd, fmap, test, train),
        trained_loss=target,
        random_loss=float(res.losses[-1]),
    )
