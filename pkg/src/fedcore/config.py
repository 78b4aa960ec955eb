"""Flat TOML experiment configuration.

Every key is optional and typed; unknown keys and out-of-range values raise
``ConfigError`` naming the key. The original text is kept so it can be copied
verbatim into run summaries.
"""

from __future__ import annotations

import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .datasets import InputStrategy, generate_synthetic, load_csv, partition
from .exceptions import ConfigError, ParameterError
from .game import AccuracyModel
from .learning import Arch, TrainConfig
from .mechanism import EXACT_MAX_PLAYERS, MechanismConfig, Mode
from .seeding import sub_seed

__all__ = ["ExperimentConfig", "load_config", "parse_config", "KEYS"]

_MODES = ("exact", "sampled", "vcg_only")
_KINDS = ("truthful", "noise", "removal", "labelflip", "quit")


def _open01(x):
    return 0.0 < x < 1.0


def _int_list(lo=1):
    def check(v):
        return isinstance(v, list) and all(isinstance(x, int) and not isinstance(x, bool) and x >= lo for x in v)

    return check


def _m_grid(v):
    return isinstance(v, list) and len(v) > 0 and all(
        v_ == "all" or (isinstance(v_, int) and not isinstance(v_, bool) and v_ >= 1) for v_ in v
    )


def _choice_list(choices):
    return lambda v: isinstance(v, list) and len(v) > 0 and all(isinstance(x, str) and x in choices for x in v)


def _degrees(v):
    return isinstance(v, list) and len(v) > 0 and all(
        isinstance(x, (int, float)) and not isinstance(x, bool) and 0.0 <= x <= 1.0 for x in v
    )


def _strategy_list(v):
    if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
        return False
    try:
        [InputStrategy.parse(x) for x in v]
    except ParameterError:
        return False
    return True


# key -> (type, default, check, description)
KEYS = {
    # mechanism
    "n": (int, 4, lambda v: 1 <= v <= 30, "number of participants"),
    "rounds": (int, 5, lambda v: v >= 1, "federated rounds T"),
    "mode": (str, "sampled", lambda v: v in _MODES, "exact | sampled | vcg_only"),
    "delta": (float, 0.3, _open01, "probable-core violation level"),
    "Delta": (float, 0.3, _open01, "sampling failure probability"),
    "C": (float, 1.0, lambda v: v > 0, "sample-size constant"),
    "m": (int, None, lambda v: v >= 1, "fixed coalition sample count (overrides the formula)"),
    "b0": (float, 2.0, lambda v: v >= 0, "server budget"),
    "k": (float, 2.0, lambda v: v > 0, "valuation constant shared by all participants"),
    "phi0": (float, 0.01, lambda v: v > 0, "reputation floor"),
    "eval_repeats": (int, 1, lambda v: v >= 1, "bootstrap repeats per accuracy"),
    "seed": (int, 0, lambda v: True, "master seed"),
    "backend": (str, "trained", lambda v: v in ("trained", "analytic"), "trained | analytic"),
    "audit": (bool, False, lambda v: True, "report core accuracy outside exact mode"),
    "n_jobs": (int, 1, lambda v: v >= 1, "threads for training and coalition evaluation"),
    "strategies": (list, [], _strategy_list, "per-participant strategy strings, padded with truthful"),
    # training
    "model": (str, "logistic", lambda v: v in ("logistic", "mlp"), "logistic | mlp"),
    "hidden": (int, 16, lambda v: v >= 1, "mlp hidden units"),
    "batch_size": (int, 32, lambda v: v >= 1, "SGD batch size"),
    "local_epochs": (int, 1, lambda v: v >= 0, "local epochs per round"),
    "learning_rate": (float, 0.1, lambda v: v >= 0, "SGD step size"),
    "l2": (float, 0.0, lambda v: v >= 0, "L2 penalty"),
    # data
    "dataset": (str, "synthetic", lambda v: v in ("synthetic", "csv"), "synthetic | csv"),
    "n_samples": (int, 400, lambda v: v >= 2, "synthetic sample count"),
    "n_features": (int, 4, lambda v: v >= 1, "synthetic feature count"),
    "n_classes": (int, 2, lambda v: v >= 2, "synthetic class count"),
    "class_separation": (float, 3.0, lambda v: v >= 0, "synthetic class-mean spacing"),
    "csv_path": (str, None, lambda v: len(v) > 0, "CSV file for dataset = csv"),
    "label_column": (str, "label", lambda v: len(v) > 0, "label column name"),
    "test_fraction": (float, 0.2, _open01, "server test-set share"),
    # analytic oracle
    "oracle_a_max": (float, 0.95, lambda v: 0 <= v <= 1, "oracle accuracy ceiling"),
    "oracle_c1": (float, 0.5, lambda v: v >= 0, "oracle size term"),
    "oracle_c2": (float, 0.2, lambda v: v >= 0, "oracle harm term"),
    "oracle_noise": (float, 0.0, lambda v: v >= 0, "oracle evaluation noise std"),
    # output
    "out": (str, "out", lambda v: len(v) > 0, "output directory"),
    "plots": (bool, True, lambda v: True, "write SVG plots"),
    # validate
    "m_grid": (list, [10, 30, 60, "all"], _m_grid, "sample counts for validate"),
    "validate_repeats": (int, 1, lambda v: v >= 1, "seeds averaged per validate row"),
    # sweep
    "sweep_modes": (list, ["vcg_only", "exact", "sampled"], _choice_list(_MODES), "modes for sweep"),
    "sweep_strategies": (list, ["noise", "removal", "labelflip"], _choice_list(_KINDS), "strategy kinds for sweep"),
    "sweep_degrees": (list, [0.0, 0.25, 0.5, 0.75, 1.0], _degrees, "false degrees for sweep"),
    "sweep_repeats": (int, 10, lambda v: v >= 1, "seeds per sweep cell"),
    "deviator": (int, 0, lambda v: v >= 0, "participant that deviates in sweep"),
    # bench
    "bench_n": (list, [4, 6, 8, 10, 12], _int_list(1), "participant counts for bench"),
    "bench_modes": (list, ["exact", "sampled"], _choice_list(_MODES), "modes for bench"),
    "bench_rounds": (int, 1, lambda v: v >= 1, "rounds timed per bench cell"),
}

EXACT_BENCH_MAX = 14
VALIDATE_MAX = 12


def _coerce(key, value):
    typ, _, check, _ = KEYS[key]
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if typ is bool:
        ok = isinstance(value, bool)
    elif typ is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, typ)
    if not ok:
        raise ConfigError(key, f"expected {typ.__name__}, got {type(value).__name__} {value!r}")
    if typ is float and not math.isfinite(value):
        raise ConfigError(key, f"must be finite, got {value!r}")
    if not check(value):
        raise ConfigError(key, f"invalid value {value!r} ({KEYS[key][3]})")
    return value


@dataclass
class ExperimentConfig:
    """Validated key values plus the original text."""

    values: dict
    text: str = ""
    base_dir: Path = Path(".")

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def mechanism_config(self, **overrides):
        v = {**self.values, **overrides}
        train = TrainConfig(v["batch_size"], v["local_epochs"], v["learning_rate"], v["l2"])
        return MechanismConfig(
            n=v["n"], rounds=v["rounds"], delta=v["delta"], Delta=v["Delta"], C=v["C"], b0=v["b0"],
            k=v["k"], phi0=v["phi0"], train=train, mode=Mode.parse(v["mode"]),
            eval_repeats=v["eval_repeats"], seed=v["seed"], m=v["m"], audit=v["audit"], n_jobs=v["n_jobs"],
        )

    def strategies(self, n=None):
        n = self.n if n is None else n
        given = [InputStrategy.parse(s) for s in self.values["strategies"]]
        return given + [InputStrategy.truthful()] * (n - len(given))

    def oracle_model(self):
        return AccuracyModel(self.oracle_a_max, self.oracle_c1, self.oracle_c2, self.oracle_noise)

    def csv_file(self):
        p = Path(self.csv_path)
        return p if p.is_absolute() else self.base_dir / p

    def load_dataset(self):
        if self.dataset == "csv":
            return load_csv(self.csv_file(), self.label_column)
        return generate_synthetic(
            self.n_samples, self.n_features, self.n_classes, self.class_separation, sub_seed(self.seed, "dataset")
        )

    def federation(self, n=None):
        """``(shards, test)`` for ``n`` participants (default: the configured ``n``)."""
        data = self.load_dataset()
        return partition(data, self.n if n is None else n, self.test_fraction, sub_seed(self.seed, "partition"))

    def arch(self, d, C):
        return Arch.mlp(d, self.hidden, C) if self.model == "mlp" else Arch.logistic(d, C)

    def effective(self):
        return dict(self.values)


def parse_config(text, overrides=None, base_dir="."):
    """Parse and validate TOML ``text``; ``overrides`` (key -> value) win over the file."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<toml>", str(exc)) from None
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    values = {}
    for key, value in raw.items():
        if key not in KEYS:
            raise ConfigError(key, "unknown configuration key")
        if isinstance(value, dict):
            raise ConfigError(key, "tables are not allowed; the configuration is flat")
        values[key] = _coerce(key, value)
    for key, (_, default, _, _) in KEYS.items():
        values.setdefault(key, list(default) if isinstance(default, list) else default)
    cfg = ExperimentConfig(values, text, Path(base_dir))
    _cross_check(cfg)
    return cfg


def _cross_check(cfg):
    n = cfg.n
    if cfg.mode == "exact" and n > EXACT_MAX_PLAYERS:
        raise ConfigError("mode", f"exact mode needs n <= {EXACT_MAX_PLAYERS}, got n = {n}")
    if "exact" in cfg.sweep_modes and n > EXACT_MAX_PLAYERS:
        raise ConfigError("sweep_modes", f"exact mode needs n <= {EXACT_MAX_PLAYERS}, got n = {n}")
    if len(cfg.values["strategies"]) > n:
        raise ConfigError("strategies", f"{len(cfg.values['strategies'])} strategies for {n} participants")
    if cfg.m is not None and cfg.m > (1 << n) - 1:
        raise ConfigError("m", f"at most {(1 << n) - 1} nonempty coalitions exist for n = {n}")
    if cfg.deviator >= n:
        raise ConfigError("deviator", f"participant {cfg.deviator} does not exist for n = {n}")
    if cfg.dataset == "csv":
        if cfg.csv_path is None:
            raise ConfigError("csv_path", "required when dataset = csv")
        if not cfg.csv_file().is_file():
            raise ConfigError("csv_path", f"file not found: {cfg.csv_file()}")
    if cfg.dataset == "synthetic" and cfg.n_samples < cfg.n_classes:
        raise ConfigError("n_samples", "must be at least n_classes")
    out = Path(cfg.out)
    parent = out
    while not parent.exists():
        parent = parent.parent
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise ConfigError("out", f"{out} is not writable")


def load_config(path, overrides=None):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, overrides, path.parent)
