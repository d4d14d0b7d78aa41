"""Command-line entry point: ``nfrepop <command> [--config FILE] [--out DIR] [--set key=value ...]``.

Commands: ``datagen``, ``train``, ``pde``, ``theory``, ``criterion``, ``repop``.
Each run writes ``metrics.tsv`` and ``manifest.json`` (plus command-specific
artifacts) to the output directory. Exit codes: 0 success, 2 configuration
error, 3 numeric divergence, 4 I/O error. Failures print one JSON line on
stderr.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import criterion as crit
from . import data as data_mod
from . import dynamics, meanfield, repopulate, theory
from .errors import ArtifactFormatError, ConfigError, DivergedTraining, IdxFormatError
from .io import (
    MetricsWriter,
    load_checkpoint,
    load_config_file,
    merge_config,
    save_checkpoint,
    save_grid,
    set_path,
    write_manifest,
)
from .model import FeatureMap, Hyper, empirical_loss, objective

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

DATA = {
    "kind": "teacher_1d",
    "n": 200,
    "flip": 0.1,
    "synthetic": {"d_total": 100, "d_informative": 4, "d_redundant": 10, "d_repeated": 10, "d_noise": 76,
                  "n_train": 500, "n_test": 500, "class_sep": 1.0},
    "path": None,
    "test_path": None,
    "label_column": "y",
    "images": None,
    "labels": None,
    "binarize": None,
    "standardize": False,
}
MODEL = {"activation": "tanh", "normalized": False}
HYPER = {"lam1": 0.05, "lam2": 0.01, "lam3": 0.05, "dt": 0.5, "convention": "training"}
INIT = {"theta_mean": 0.0, "theta_scale": 1.0, "u_mean": 0.0, "u_scale": 1.0, "dirac_u": None}
TRAINER = {"mode": "NGD", "steps": 400, "record_every": 50, "m": 5000, "init": INIT, "checkpoint": True}

DEFAULTS = {
    "datagen": {"seed": 0, "data": {**DATA, "kind": "synthetic"}},
    "train": {"seed": 0, "data": DATA, "model": MODEL, "hyper": HYPER, "trainer": TRAINER},
    "pde": {
        "seed": 0, "data": DATA, "model": MODEL, "hyper": HYPER,
        "grid": {"n_theta": 100, "n_u": 100, "theta_range": None, "u_range": None, "drift": "model",
                 "linear": [0.0, 0.0], "init_mean": [0.0, 0.0], "init_var": [1.0, 1.0], "t_final": 1.0,
                 "record_times": [], "safety": 0.9, "dump": True},
    },
    "theory": {
        "seed": 0, "data": DATA, "model": MODEL, "hyper": {**HYPER, "lam1": 0.1, "lam2": 0.02, "convention": "free_energy"},
        "trainer": TRAINER,
        "theory": {"source": "particles", "checkpoint": None, "n_bins": 20, "min_count": 200,
                   "n_theta": 200, "n_u": 200},
    },
    "criterion": {"seed": 0, "criterion": {"a": [0.05, 0.1, 0.2], "sigmas": [0.5, 1.0, 2.0, 4.0],
                                           "cells_per_box": 40, "height": "unit"}},
    "repop": {
        "seed": 0, "data": {**DATA, "kind": "synthetic"}, "model": MODEL,
        "hyper": {**HYPER, "lam1": 1e-3, "lam2": 1e-3, "lam3": 0.0, "dt": 0.5},
        "source": {"m": 100, "steps": 2000, "init": INIT},
        "repop": {"m_prime": 10, "method": "empirical", "arms": None, "seeds": list(range(10)), "steps": 500,
                  "record_every": 25, "random_scale": 1.0},
    },
}
COMMANDS = tuple(DEFAULTS)


# --------------------------------------------------------------------------
# builders


def build_hyper(h: dict) -> Hyper:
    if h["convention"] == "training":
        return Hyper(lam1=h["lam1"], lam2=h["lam2"], lam3=h["lam3"], dt=h["dt"])
    if h["convention"] == "free_energy":
        return Hyper.from_free_energy(h["lam1"], h["lam2"], h["lam3"], dt=h["dt"])
    raise ConfigError("hyper.convention must be 'training' or 'free_energy'")


def build_model(mcfg: dict) -> FeatureMap:
    return FeatureMap(activation=mcfg["activation"], normalized=bool(mcfg["normalized"]))


def build_data(dcfg: dict, seed: int):
    """Returns ``(train, test_or_None)``."""
    kind = dcfg["kind"]
    if kind == "teacher_1d":
        train = data_mod.teacher_1d(int(dcfg["n"]), seed, dcfg["flip"])
        test = None
    elif kind == "synthetic":
        train, test = data_mod.generate_synthetic(data_mod.SynthConfig(**dcfg["synthetic"], seed=seed))
    elif kind == "delimited":
        if not dcfg["path"]:
            raise ConfigError("data.path is required for delimited data")
        train = data_mod.load_delimited(dcfg["path"], dcfg["label_column"])
        test = data_mod.load_delimited(dcfg["test_path"], dcfg["label_column"]) if dcfg["test_path"] else None
    elif kind == "idx":
        if not (dcfg["images"] and dcfg["labels"]):
            raise ConfigError("data.images and data.labels are required for idx data")
        if dcfg["binarize"] is None:
            raise ConfigError("data.binarize must be given for idx data ('parity' or 'one-vs-rest:K')")
        train = data_mod.load_idx(dcfg["images"], dcfg["labels"], dcfg["binarize"])
        test = None
    else:
        raise ConfigError(f"unknown data.kind {kind!r}")
    if dcfg["standardize"]:
        train, stats = data_mod.standardize(train)
        if test is not None:
            test, _ = data_mod.standardize(test, stats)
    return train, test


def build_init(icfg: dict) -> dynamics.InitSpec:
    return dynamics.InitSpec(**icfg)


# --------------------------------------------------------------------------
# commands


def cmd_datagen(cfg, out: Path, args):
    train, test = build_data(cfg["data"], cfg["seed"])
    arts = []
    w = MetricsWriter(out / "metrics.tsv", "datagen", ["split", "n", "d", "positive_fraction"])
    for name, ds in (("train", train), ("test", test)):
        if ds is None:
            continue
        data_mod.save_delimited(ds, out / f"{name}.csv")
        arts.append(f"{name}.csv")
        w.write(name, ds.n, ds.d, float(np.mean(ds.y > 0)))
    return arts, {}


def _train_setup(cfg):
    train_ds, _ = build_data(cfg["data"], cfg["seed"])
    fmap = build_model(cfg["model"])
    hp = build_hyper(cfg["hyper"])
    t = cfg["trainer"]
    tcfg = dynamics.TrainerConfig(mode=t["mode"], steps=int(t["steps"]), seed=int(cfg["seed"]),
                                  record_every=int(t["record_every"]), init=build_init(t["init"]))
    return train_ds, fmap, hp, tcfg


def cmd_train(cfg, out: Path, args):
    ds, fmap, hp, tcfg = _train_setup(cfg)
    start = 0
    if args.resume:
        ens0, start, seed, hyper, _ = load_checkpoint(args.resume)
        if seed != tcfg.seed:
            raise ConfigError(f"checkpoint seed {seed} differs from config seed {tcfg.seed}")
    else:
        ens0 = dynamics.init_ensemble(int(cfg["trainer"]["m"]), ds.d, tcfg.init, tcfg.seed)
    w = MetricsWriter(out / "metrics.tsv", "train", ["step", "objective", "loss", "mean_u2", "mean_theta2"])
    arts = ["metrics.tsv"]
    run_hp = hp.replace(lam3=0.0) if tcfg.mode == "GD" else hp

    def record(snap):
        e = snap.ensemble
        w.write(snap.step, snap.objective, empirical_loss(e, fmap, ds), float(np.mean(e.us**2)),
                float(np.mean(np.sum(e.thetas**2, axis=1))))
        if cfg["trainer"]["checkpoint"]:
            save_checkpoint(out / "checkpoint.bin", e, snap.step, tcfg.seed, run_hp)

    record(dynamics.Snapshot(start, ens0, objective(ens0, fmap, ds, run_hp)))
    traj = dynamics.train(ens0, tcfg, fmap, ds, hp, start_step=start, callback=record)
    if cfg["trainer"]["checkpoint"]:
        arts.append("checkpoint.bin")
    return arts, {"wall_seconds": traj.meta["wall_seconds"], "start_step": start}


def cmd_pde(cfg, out: Path, args):
    g = cfg["grid"]
    hp = build_hyper(cfg["hyper"])
    fmap = build_model(cfg["model"])
    ds = None
    if g["drift"] == "model":
        ds, _ = build_data(cfg["data"], cfg["seed"])
        drift = meanfield.ModelDrift(fmap, ds, hp)
    elif g["drift"] == "linear":
        a = g["linear"]
        drift = meanfield.LinearDrift(a[0], a[1])
    elif g["drift"] == "zero":
        drift = meanfield.LinearDrift()
    else:
        raise ConfigError("grid.drift must be 'model', 'linear' or 'zero'")
    tr, ur = g["theta_range"], g["u_range"]
    if tr is None or ur is None:
        at, au = meanfield.auto_ranges(hp)
        tr, ur = tr or at, ur or au
    grid = meanfield.DensityGrid.gaussian(tr, ur, int(g["n_theta"]), int(g["n_u"]), g["init_mean"], g["init_var"])
    grids = meanfield.evolve(grid, drift, hp.lam3, g["t_final"], safety=g["safety"], record_times=g["record_times"])
    w = MetricsWriter(out / "metrics.tsv", "pde", ["t", "mass", "free_energy", "second_moment", "entropy"])
    arts = ["metrics.tsv"]
    for k, gr in enumerate(grids):
        w.write(gr.t, gr.mass(), meanfield.free_energy(gr, fmap, ds, hp), gr.second_moment(),
                -meanfield.entropy_integral(gr))
        if g["dump"]:
            name = f"grid_{k:03d}.bin"
            save_grid(out / name, gr)
            arts.append(name)
    return arts, {}


def cmd_theory(cfg, out: Path, args):
    ds, fmap, hp, tcfg = _train_setup(cfg)
    th = cfg["theory"]
    w = MetricsWriter(out / "metrics.tsv", "theory", ["report", "key", "value"])
    if th["source"] == "gibbs":
        grid, _, iters = theory.gibbs_fixed_point(fmap, ds, hp, int(th["n_theta"]), int(th["n_u"]))
        cond_src = grid
        w.write("source", "fixed_point_iterations", iters)
    elif th["source"] == "particles":
        if th["checkpoint"]:
            ens, *_ = load_checkpoint(th["checkpoint"])
        else:
            ens0 = dynamics.init_ensemble(int(cfg["trainer"]["m"]), ds.d, tcfg.init, tcfg.seed)
            ens = dynamics.train(ens0, tcfg, fmap, ds, hp).final
        grid = theory.estimate_density(ens, n_theta=int(th["n_bins"]), n_u=int(th["n_bins"]))
        cond_src = ens
    else:
        raise ConfigError("theory.source must be 'particles' or 'gibbs'")
    st = theory.stationarity_fit(grid, fmap, ds, hp)
    for k, v in st.as_dict().items():
        w.write("stationarity", k, v)
    cond = theory.conditional_gaussian_check(cond_src, hp, n_bins=int(th["n_bins"]), min_count=int(th["min_count"]))
    w.write("conditional", "target_var", cond.target_var)
    w.write("conditional", "max_relative_error", cond.max_relative_error)
    for c, v in zip(cond.centers, cond.var):
        w.write("conditional", f"var@{c:.4f}", v)
    marg = meanfield.marginals(grid)
    fit = theory.ratio_law_fit(marg, hp)
    for k, v in (("slope", fit.slope), ("target_slope", fit.target_slope), ("B8", fit.B8),
                 ("sandwich", fit.sandwich), ("sandwich_sqrt", fit.sandwich_sqrt)):
        w.write("ratio_law", k, v)
    w.write("fixed_point", "omega_residual_relative", theory.omega_residual(marg, fmap, ds, hp, relative=True))
    w.write("population", "gap_tv", theory.population_gap(marg))
    return ["metrics.tsv"], {}


def cmd_criterion(cfg, out: Path, args):
    c = cfg["criterion"]
    w = MetricsWriter(out / "metrics.tsv", "criterion", ["a", "population", "sigma", "V", "gaussian_bound"])
    for a in c["a"]:
        height = None if c["height"] == "unit" else 1.0 / (2 * a)
        mu = crit.boxcar_measure(a, int(c["cells_per_box"]), height=height)
        bound = crit.boxcar_gaussian_bound(a)
        w.write(a, "optimal", "", crit.variance_criterion(mu, crit.optimal_population(mu)), bound)
        for s in c["sigmas"]:
            V = crit.variance_criterion(mu, crit.FeaturePopulation.gaussian(mu, s))
            w.write(a, "gaussian", s, V, bound)
    return ["metrics.tsv"], {}


def cmd_repop(cfg, out: Path, args):
    train_ds, test_ds = build_data(cfg["data"], cfg["seed"])
    if test_ds is None:
        raise ConfigError("repop needs a dataset with a test split")
    fmap = build_model(cfg["model"])
    hp = build_hyper(cfg["hyper"]).replace(lam3=0.0)
    s = cfg["source"]
    src_cfg = dynamics.TrainerConfig(mode="GD", steps=int(s["steps"]), seed=int(cfg["seed"]),
                                     record_every=int(s["steps"]) or 1, init=build_init(s["init"]))
    ens0 = dynamics.init_ensemble(int(s["m"]), train_ds.d, src_cfg.init, src_cfg.seed)
    source = dynamics.train(ens0, src_cfg, fmap, train_ds, hp).final
    save_checkpoint(out / "source.bin", source, src_cfg.steps, src_cfg.seed, hp)
    r = cfg["repop"]
    rep = repopulate.run_comparison(source, int(r["m_prime"]), r["method"], r["seeds"], train_ds, test_ds, hp, fmap,
                                    steps=int(r["steps"]), record_every=int(r["record_every"]), arms=r["arms"],
                                    random_scale=r["random_scale"])
    w = MetricsWriter(out / "metrics.tsv", "repop", ["arm", "seed", "step", "train_loss", "test_error"])
    for row in rep.rows():
        w.write(*row)
    summary = {a: {"mean_test_error": res.mean_test_error, "std_test_error": res.std_test_error}
               for a, res in rep.arms.items()}
    return ["metrics.tsv", "source.bin"], {"summary": summary}


HANDLERS = {"datagen": cmd_datagen, "train": cmd_train, "pde": cmd_pde, "theory": cmd_theory,
            "criterion": cmd_criterion, "repop": cmd_repop}


# --------------------------------------------------------------------------
# entry point


def _parser():
    p = argparse.ArgumentParser(prog="nfrepop", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file (unknown keys are rejected)")
        sp.add_argument("--out", default=f"runs/{name}", help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a scalar config entry, e.g. hyper.lam3=0.1")
        sp.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        if name == "train":
            sp.add_argument("--resume", help="checkpoint to resume from")
        if name == "criterion":
            sp.add_argument("--boxcar", metavar="a=VALUE", help="evaluate a single boxcar half-width")
    return p


def resolve_config(command, args) -> dict:
    cfg = copy.deepcopy(DEFAULTS[command])
    if args.config:
        cfg = merge_config(cfg, load_config_file(args.config))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        cfg = merge_config(cfg, set_path(cfg, key, raw))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if command == "criterion" and getattr(args, "boxcar", None):
        key, _, raw = args.boxcar.partition("=")
        if key != "a" or not raw:
            raise ConfigError("--boxcar expects a=VALUE")
        try:
            cfg["criterion"]["a"] = [float(raw)]
        except ValueError as exc:
            raise ConfigError(f"--boxcar value {raw!r} is not a number") from exc
    return cfg


def _fail(code, exc):
    record = {"status": "error", "exit_code": code, "kind": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, DivergedTraining) and exc.step is not None:
        record["step"] = exc.step
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        if args.print_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return EXIT_OK
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        arts, extra = HANDLERS[args.command](cfg, out, args)
        extra = dict(extra)
        extra["wall_seconds_total"] = time.perf_counter() - t0
        write_manifest(out, args.command, cfg, cfg["seed"], arts, extra)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (DivergedTraining, FloatingPointError) as exc:
        return _fail(EXIT_DIVERGED, exc)
    except (OSError, IdxFormatError, ArtifactFormatError) as exc:
        return _fail(EXIT_IO, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
