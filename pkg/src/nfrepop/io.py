"""On-disk formats: checkpoints, grid dumps, metrics tables, run manifests and configs.

Checkpoints and grid dumps share one layout: ASCII ``key=value`` header
lines, a line ``END``, then a little-endian float64 payload. Metrics are
tab-separated text with a ``#`` schema line followed by a column header.
"""
from __future__ import annotations

import copy
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np

from .errors import ArtifactFormatError, ConfigError
from .meanfield import DensityGrid
from .model import Ensemble, Hyper

CHECKPOINT_MAGIC = "nfrepop-checkpoint"
GRID_MAGIC = "nfrepop-grid"
FORMAT_VERSION = 1
METRICS_VERSION = 1


# --------------------------------------------------------------------------
# header + payload containers


def _write_container(path, magic, header: dict, payload: np.ndarray):
    lines = [f"{magic} v{FORMAT_VERSION}"] + [f"{k}={v}" for k, v in header.items()] + ["END", ""]
    data = np.ascontiguousarray(payload, dtype="<f8").tobytes()
    Path(path).write_bytes("\n".join(lines).encode("ascii") + data)


def _read_container(path, magic):
    raw = Path(path).read_bytes()
    marker = b"\nEND\n"
    cut = raw.find(marker)
    if cut < 0:
        raise ArtifactFormatError(f"{path}: missing header terminator")
    lines = raw[:cut].decode("ascii").split("\n")
    first = lines[0].split()
    if len(first) != 2 or first[0] != magic:
        raise ArtifactFormatError(f"{path}: not a {magic} file")
    version = int(first[1].lstrip("v"))
    if version != FORMAT_VERSION:
        raise ArtifactFormatError(f"{path}: unsupported format version {version}")
    header = dict(line.split("=", 1) for line in lines[1:])
    payload = np.frombuffer(raw[cut + len(marker):], dtype="<f8")
    return header, payload


def save_checkpoint(path, ens: Ensemble, step: int, seed: int, hp: Hyper, extra=None):
    """Particle table ``[u, theta_1..theta_d]`` per row plus the state needed to resume.

    Noise for step ``t`` is drawn from a generator keyed by ``(seed, t)``, so
    the pair ``(seed, step)`` is the complete generator state.
    """
    hyper = {k: getattr(hp, k) for k in ("lam1", "lam2", "lam3", "dt")}
    header = {
        "m": ens.m,
        "d": ens.d,
        "step": int(step),
        "seed": int(seed),
        "rng": f"philox(seed={int(seed)}) counter-keyed by step",
        "hyper": json.dumps(hyper, sort_keys=True),
        "extra": json.dumps(extra or {}, sort_keys=True),
        "payload": f"float64-le rows={ens.m} cols={ens.d + 1}",
    }
    table = np.column_stack([ens.us, ens.thetas])
    _write_container(path, CHECKPOINT_MAGIC, header, table)


def load_checkpoint(path):
    """Returns ``(ensemble, step, seed, hyper_dict, extra)``."""
    header, payload = _read_container(path, CHECKPOINT_MAGIC)
    m, d = int(header["m"]), int(header["d"])
    if payload.size != m * (d + 1):
        raise ArtifactFormatError(f"{path}: payload holds {payload.size} values, expected {m * (d + 1)}")
    table = payload.reshape(m, d + 1)
    ens = Ensemble(table[:, 1:].copy(), table[:, 0].copy())
    return ens, int(header["step"]), int(header["seed"]), json.loads(header["hyper"]), json.loads(header["extra"])


def save_grid(path, grid: DensityGrid):
    header = {
        "theta_range": f"{grid.theta_range[0]!r},{grid.theta_range[1]!r}",
        "u_range": f"{grid.u_range[0]!r},{grid.u_range[1]!r}",
        "n_theta": grid.p.shape[0],
        "n_u": grid.p.shape[1],
        "t": repr(float(grid.t)),
        "payload": "float64-le row-major (theta, u)",
    }
    _write_container(path, GRID_MAGIC, header, grid.p)


def load_grid(path) -> DensityGrid:
    header, payload = _read_container(path, GRID_MAGIC)
    nt, nu = int(header["n_theta"]), int(header["n_u"])
    if payload.size != nt * nu:
        raise ArtifactFormatError(f"{path}: payload holds {payload.size} values, expected {nt * nu}")
    tr = tuple(float(v) for v in header["theta_range"].split(","))
    ur = tuple(float(v) for v in header["u_range"].split(","))
    return DensityGrid(tr, ur, payload.reshape(nt, nu).copy(), float(header["t"]))


# --------------------------------------------------------------------------
# metrics


class MetricsWriter:
    """Append-only tab-separated table; each row is flushed as it is written."""

    def __init__(self, path, command: str, columns):
        self.path = Path(path)
        self.columns = list(columns)
        with self.path.open("w") as fh:
            fh.write(f"# nfrepop-metrics v{METRICS_VERSION} command={command}\n")
            fh.write("\t".join(self.columns) + "\n")

    def write(self, *values):
        if len(values) != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} values, got {len(values)}")
        with self.path.open("a") as fh:
            fh.write("\t".join(_fmt(v) for v in values) + "\n")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    return str(v)


def read_metrics(path):
    """Returns ``(columns, rows)`` with numeric fields converted where possible."""
    lines = Path(path).read_text().splitlines()
    body = [ln for ln in lines if not ln.startswith("#")]
    columns = body[0].split("\t")
    rows = []
    for ln in body[1:]:
        vals = []
        for tok in ln.split("\t"):
            try:
                vals.append(int(tok))
            except ValueError:
                try:
                    vals.append(float(tok))
                except ValueError:
                    vals.append(tok)
        rows.append(vals)
    return columns, rows


# --------------------------------------------------------------------------
# config


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def _type_ok(default, value):
    if default is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, (int, float)):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list) or value is None
    if isinstance(default, dict):
        return isinstance(value, dict)
    return True


def merge_config(defaults: dict, user: dict, where="config") -> dict:
    """Overlay ``user`` on ``defaults``; unknown keys and type mismatches raise :class:`ConfigError`."""
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        path = f"{where}.{key}"
        if key not in defaults:
            raise ConfigError(f"unknown key {path!r}; allowed: {sorted(defaults)}")
        dv = defaults[key]
        if not _type_ok(dv, value) and value is not None:
            raise ConfigError(f"{path} expects {type(dv).__name__}, got {type(value).__name__}")
        if isinstance(dv, dict) and dv:
            out[key] = merge_config(dv, value, path)
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_path(cfg: dict, dotted: str, raw: str):
    """Apply a ``key.sub=value`` override; ``value`` is parsed as JSON when possible."""
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = {}
    cur = node
    for k in keys[:-1]:
        cur[k] = {}
        cur = cur[k]
    cur[keys[-1]] = value
    return node


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def versions() -> dict:
    import scipy

    from . import __version__

    return {
        "nfrepop": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "platform": platform.platform(),
    }


def write_manifest(out_dir, command, cfg, seed, artifacts, extra=None):
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "versions": versions(),
        "metrics_version": METRICS_VERSION,
        "format_version": FORMAT_VERSION,
        "artifacts": sorted(artifacts),
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
