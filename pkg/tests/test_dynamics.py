from __future__ import annotations

import numpy as np
import pytest

from nfrepop.data import Dataset, teacher_1d
from nfrepop.dynamics import (
    InitSpec,
    TrainerConfig,
    check_step_size,
    init_ensemble,
    ngd_step,
    step_generator,
    train,
)
from nfrepop.errors import ConfigError, DivergedTraining
from nfrepop.model import Ensemble, FeatureMap, Hyper, objective, particle_drifts


@pytest.fixture
def problem():
    ds = teacher_1d(100, seed=0)
    ens = init_ensemble(200, 1, InitSpec(), seed=1)
    return ens, FeatureMap(), ds


def zero_drift_case(m):
    # odd activation + mirrored inputs with equal labels: the loss gradient cancels at u = 0
    ds = Dataset(np.array([[1.0], [-1.0]]), [1.0, 1.0])
    ens = Ensemble(np.random.default_rng(0).standard_normal((m, 1)), np.zeros(m))
    return ens, ds


class TestStep:
    def test_gd_is_deterministic_update(self, problem):
        ens, fm, ds = problem
        hp = Hyper(lam1=0.05, lam2=0.01, lam3=0.0, dt=0.3)
        g1, g2 = particle_drifts(ens, fm, ds, hp)
        out = ngd_step(ens, fm, ds, hp, mode="GD")
        np.testing.assert_array_equal(out.us, ens.us + hp.dt * g1)
        np.testing.assert_array_equal(out.thetas, ens.thetas + hp.dt * g2)

    def test_ngd_with_zero_temperature_matches_gd(self, problem):
        ens, fm, ds = problem
        hp = Hyper(lam1=0.05, lam2=0.01, lam3=0.0, dt=0.3)
        a = ngd_step(ens, fm, ds, hp, mode="NGD", rng=step_generator(0, 0))
        b = ngd_step(ens, fm, ds, hp, mode="GD")
        np.testing.assert_array_equal(a.us, b.us)
        np.testing.assert_array_equal(a.thetas, b.thetas)

    def test_zero_drift_is_exact(self):
        ens, ds = zero_drift_case(10)
        g1, g2 = particle_drifts(ens, FeatureMap(), ds, Hyper())
        assert np.all(g1 == 0) and np.all(g2 == 0)

    def test_noise_variance(self):
        m = 100_000
        ens, ds = zero_drift_case(m)
        hp = Hyper(lam3=0.2, dt=0.1)
        out = ngd_step(ens, FeatureMap(), ds, hp, mode="NGD", rng=step_generator(3, 0))
        target = 2 * hp.lam3 * hp.dt
        for inc in (out.us - ens.us, out.thetas[:, 0] - ens.thetas[:, 0]):
            assert abs(inc.var() / target - 1) <= 0.05

    def test_same_seed_bit_identical(self, problem):
        ens, fm, ds = problem
        hp = Hyper(lam1=0.05, lam2=0.01, lam3=0.05, dt=0.3)
        a = ngd_step(ens, fm, ds, hp, rng=step_generator(9, 4))
        b = ngd_step(ens, fm, ds, hp, rng=step_generator(9, 4))
        np.testing.assert_array_equal(a.us, b.us)
        np.testing.assert_array_equal(a.thetas, b.thetas)

    def test_streams_differ_by_step(self):
        a = step_generator(1, 0).standard_normal(4)
        b = step_generator(1, 1).standard_normal(4)
        assert not np.array_equal(a, b)

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_nan_drift_names_step(self, problem):
        ens, fm, ds = problem
        bad = ens.copy()
        bad.us[0] = 1e308
        with pytest.raises(DivergedTraining) as info:
            ngd_step(bad, fm, ds, Hyper(lam1=1.0, dt=0.1), mode="GD", step=17)
        assert info.value.step == 17

    def test_ngd_needs_rng(self, problem):
        ens, fm, ds = problem
        with pytest.raises(ConfigError):
            ngd_step(ens, fm, ds, Hyper(lam3=0.1), mode="NGD")


class TestStepGuard:
    @pytest.mark.parametrize("lam1,lam2,dt", [(0.5, 0.0, 1.0), (0.0, 1.0, 0.6), (5.0, 5.0, 0.1)])
    def test_overshoot_rejected(self, lam1, lam2, dt):
        with pytest.raises(ConfigError):
            check_step_size(Hyper(lam1=lam1, lam2=lam2, dt=dt))

    def test_ok(self):
        check_step_size(Hyper(lam1=0.05, lam2=0.01, dt=0.5))


class TestTrainerConfig:
    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            TrainerConfig(mode="SGD")

    def test_ngd_needs_temperature(self, problem):
        ens, fm, ds = problem
        with pytest.raises(ConfigError):
            train(ens, TrainerConfig(mode="NGD", steps=1), fm, ds, Hyper(lam3=0.0))


class TestTrain:
    def test_zero_steps(self, problem):
        ens, fm, ds = problem
        traj = train(ens, TrainerConfig(mode="GD", steps=0), fm, ds, Hyper())
        assert traj.steps == [0]
        np.testing.assert_array_equal(traj.final.us, ens.us)

    @pytest.mark.parametrize("steps,every", [(10, 3), (12, 4), (1, 5), (7, 1)])
    def test_snapshot_count(self, problem, steps, every):
        ens, fm, ds = problem
        traj = train(ens, TrainerConfig(mode="NGD", steps=steps, record_every=every), fm, ds,
                     Hyper(lam3=0.01, dt=0.1))
        assert len(traj.snapshots) == int(np.ceil(steps / every)) + 1
        assert all(np.diff(traj.steps) > 0)
        assert traj.steps[0] == 0 and traj.steps[-1] == steps

    def test_recorded_objective_recomputes(self, problem):
        ens, fm, ds = problem
        hp = Hyper(lam1=0.05, lam2=0.01, lam3=0.05, dt=0.3)
        traj = train(ens, TrainerConfig(mode="NGD", steps=20, record_every=5), fm, ds, hp)
        for snap in traj.snapshots:
            assert snap.objective == objective(snap.ensemble, fm, ds, hp)

    def test_gd_equals_ngd_at_zero_temperature(self, problem):
        ens, fm, ds = problem
        hp = Hyper(lam1=0.05, lam2=0.01, lam3=0.0, dt=0.3)
        a = train(ens, TrainerConfig(mode="GD", steps=15, seed=1), fm, ds, hp).final
        b = train(ens, TrainerConfig(mode="GD", steps=15, seed=2), fm, ds, hp.replace(lam3=0.4)).final
        np.testing.assert_array_equal(a.us, b.us)
        np.testing.assert_array_equal(a.thetas, b.thetas)

    def test_top_layer_descent(self, problem):
        ens, fm, ds = problem
        hp = Hyper(lam1=0.05, dt=0.5)
        traj = train(ens, TrainerConfig(mode="GD", steps=200, record_every=1, train_thetas=False), fm, ds, hp)
        q = traj.objectives
        assert np.all(np.diff(q) <= 1e-14)
        np.testing.assert_array_equal(traj.final.thetas, ens.thetas)

    def test_resume_bit_identical(self, problem):
        ens, fm, ds = problem
        hp = Hyper(lam1=0.05, lam2=0.01, lam3=0.05, dt=0.3)
        full = train(ens, TrainerConfig(mode="NGD", steps=30, seed=5), fm, ds, hp).final
        half = train(ens, TrainerConfig(mode="NGD", steps=12, seed=5), fm, ds, hp).final
        rest = train(half, TrainerConfig(mode="NGD", steps=30, seed=5), fm, ds, hp, start_step=12).final
        np.testing.assert_array_equal(full.us, rest.us)
        np.testing.assert_array_equal(full.thetas, rest.thetas)

    def test_dirac_coupling(self):
        # particles sharing theta and a constant initial u stay identical under GD
        ds = teacher_1d(80, seed=2)
        base = init_ensemble(50, 1, InitSpec(dirac_u=0.3), seed=3)
        thetas = np.vstack([base.thetas, base.thetas[:10]])
        ens = Ensemble(thetas, np.full(60, 0.3))
        out = train(ens, TrainerConfig(mode="GD", steps=50), FeatureMap(), ds, Hyper(lam1=0.05, lam2=0.01, dt=0.3)).final
        np.testing.assert_array_equal(out.us[50:], out.us[:10])
        np.testing.assert_array_equal(out.thetas[50:], out.thetas[:10])

    def test_dirac_init(self):
        ens = init_ensemble(20, 2, InitSpec(dirac_u=1.5), seed=0)
        assert np.all(ens.us == 1.5)

    def test_init_validation(self):
        with pytest.raises(ConfigError):
            init_ensemble(0, 1)
