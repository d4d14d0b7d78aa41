"""Particle training: full-batch gradient descent and its noisy variant."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergedTraining
from .model import Ensemble, Hyper, objective, particle_drifts

MODES = ("GD", "NGD")


@dataclass(frozen=True)
class InitSpec:
    """Gaussian initial law for the particles.

    When ``dirac_u`` is set every top weight starts at that constant,
    i.e. ``p0(u | theta)`` is a point mass.
    """

    theta_mean: float = 0.0
    theta_scale: float = 1.0
    u_mean: float = 0.0
    u_scale: float = 1.0
    dirac_u: float | None = None


@dataclass(frozen=True)
class TrainerConfig:
    mode: str = "NGD"
    steps: int = 100
    seed: int = 0
    record_every: int = 10
    init: InitSpec = InitSpec()
    train_thetas: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        if self.record_every < 1:
            raise ConfigError("record_every must be positive")


@dataclass
class Snapshot:
    step: int
    ensemble: Ensemble
    objective: float


@dataclass
class Trajectory:
    snapshots: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def final(self) -> Ensemble:
        return self.snapshots[-1].ensemble

    @property
    def steps(self):
        return [s.step for s in self.snapshots]

    @property
    def objectives(self):
        return np.array([s.objective for s in self.snapshots])


def step_generator(seed: int, step: int) -> np.random.Generator:
    """Counter-based stream for one step.

    Philox keyed by ``seed`` with the step index in the high counter word,
    so the noise of particle ``j`` at step ``t`` depends only on
    ``(seed, t, j)`` and runs can resume from any step.
    """
    key = int(seed) & 0xFFFFFFFFFFFFFFFF
    bitgen = np.random.Philox(key=[key, 0x6E66_7265_706F_7021], counter=[0, 0, int(step), 0])
    return np.random.Generator(bitgen)


def init_ensemble(m: int, d: int, init: InitSpec = InitSpec(), seed: int = 0) -> Ensemble:
    if m < 1 or d < 1:
        raise ConfigError("m and d must be positive")
    rng = np.random.Generator(np.random.Philox(key=[int(seed) & 0xFFFFFFFFFFFFFFFF, 0x696E_6974]))
    z = rng.standard_normal((m, d + 1))
    thetas = init.theta_mean + init.theta_scale * z[:, :d]
    if init.dirac_u is not None:
        us = np.full(m, float(init.dirac_u))
    else:
        us = init.u_mean + init.u_scale * z[:, d]
    if not (np.all(np.isfinite(thetas)) and np.all(np.isfinite(us))):
        raise ConfigError("initial law produces non-finite particles; reduce the init scales")
    return Ensemble(thetas, us)


def check_step_size(hp: Hyper):
    if hp.dt * max(2.0 * hp.lam1, 2.0 * hp.lam2) >= 1.0:
        raise ConfigError(
            f"step size dt={hp.dt} overshoots the l2 penalty: need dt * max(2 lam1, 2 lam2) < 1"
        )


def ngd_step(ens: Ensemble, fmap, dataset, hp: Hyper, mode="NGD", rng=None, step=None,
             train_thetas=True) -> Ensemble:
    """One synchronous (noisy) gradient step on every particle.

    All drifts are evaluated on the incoming ensemble. In NGD mode each
    coordinate receives ``sqrt(2 lam3 dt)`` standard-normal noise drawn from
    ``rng`` as one (m, d+1) block; column 0 feeds ``u``.
    """
    g1, g2 = particle_drifts(ens, fmap, dataset, hp)
    if not (np.all(np.isfinite(g1)) and np.all(np.isfinite(g2))):
        raise DivergedTraining(f"non-finite drift at step {step}", step=step)
    dt = hp.dt
    us = ens.us + dt * g1
    thetas = ens.thetas + dt * g2 if train_thetas else ens.thetas.copy()
    if mode == "NGD" and hp.lam3 > 0:
        if rng is None:
            raise ConfigError("NGD step needs a random generator")
        noise = rng.standard_normal((ens.m, ens.d + 1))
        scale = np.sqrt(2.0 * hp.lam3 * dt)
        us = us + scale * noise[:, 0]
        if train_thetas:
            thetas = thetas + scale * noise[:, 1:]
    if not (np.all(np.isfinite(us)) and np.all(np.isfinite(thetas))):
        raise DivergedTraining(f"non-finite parameters after step {step}", step=step)
    return Ensemble(thetas, us, dict(ens.meta))


def _finite_objective(ens, fmap, dataset, hp, step):
    with np.errstate(over="ignore", invalid="ignore"):
        q = objective(ens, fmap, dataset, hp)
    if not np.isfinite(q):
        raise DivergedTraining(f"objective is not finite at step {step}", step=step)
    return q


def train(ens0: Ensemble, cfg: TrainerConfig, fmap, dataset, hp: Hyper, start_step=0,
          callback=None) -> Trajectory:
    """Run ``cfg.steps`` steps (from ``start_step`` when resuming) and record snapshots.

    Snapshots are taken at the start, every ``record_every`` steps and at
    the end. GD mode ignores ``hp.lam3``. A non-finite recorded objective
    raises :class:`DivergedTraining`.
    """
    if cfg.mode == "NGD" and not hp.lam3 > 0:
        raise ConfigError("NGD mode needs lam3 > 0")
    if cfg.mode == "GD":
        hp = hp.replace(lam3=0.0)
    check_step_size(hp)
    if start_step > cfg.steps:
        raise ConfigError("start_step beyond the configured horizon")
    t0 = time.perf_counter()
    ens = ens0.copy()
    traj = Trajectory(meta={"mode": cfg.mode, "seed": cfg.seed, "m": ens.m, "d": ens.d})
    traj.snapshots.append(Snapshot(start_step, ens.copy(), _finite_objective(ens, fmap, dataset, hp, start_step)))
    for t in range(start_step, cfg.steps):
        rng = step_generator(cfg.seed, t) if cfg.mode == "NGD" else None
        ens = ngd_step(ens, fmap, dataset, hp, cfg.mode, rng, step=t, train_thetas=cfg.train_thetas)
        done = t + 1
        if done % cfg.record_every == 0 or done == cfg.steps:
            snap = Snapshot(done, ens.copy(), _finite_objective(ens, fmap, dataset, hp, done))
            traj.snapshots.append(snap)
            if callback is not None:
                callback(snap)
    traj.meta["wall_seconds"] = time.perf_counter() - t0
    return traj
