"""Command-line front end: ``fedcore {simulate,validate,sweep,bench} --config FILE``.

Exit codes: 0 success, 1 configuration error (nothing is written), 2 runtime
or mechanism error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import EXACT_BENCH_MAX, VALIDATE_MAX, load_config
from .datasets import InputStrategy
from .exceptions import CapabilityError, ConfigError, MechanismError, ParameterError
from .mechanism import make_backend, run_exact_vs_sampled, run_simulation
from .svgplot import write_line_chart

ROUNDS_HEADER = ["round", "participant", "v_i", "pi_i", "p_i", "P_i", "R_i", "eps", "core_accuracy"]
VALIDATION_HEADER = ["m", "sigma2_error", "core_accuracy", "time_ms"]
SWEEP_HEADER = ["mode", "strategy", "degree", "mean_utility", "std_utility"]
BENCH_HEADER = ["n", "mode", "coalitions_evaluated", "round_time_ms"]


def _num(x):
    return "" if x is None else repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _summary_base(cfg, command):
    return {"command": command, "version": __version__, "config_text": cfg.text, "config": cfg.effective()}


class _Prepared:
    """Everything loaded before the first write, so config problems exit cleanly."""

    def __init__(self, cfg, n=None):
        self.cfg = cfg
        self.federations = {}
        if cfg.backend == "trained":
            try:
                for k in [cfg.n] if n is None else n:
                    self.federations[k] = cfg.federation(k)
            except ParameterError as exc:
                key = "csv_path" if cfg.dataset == "csv" else "n_samples"
                raise ConfigError(key, str(exc)) from None
            except OSError as exc:
                raise ConfigError("csv_path", str(exc)) from None

    def backend(self, mcfg, strategies):
        cfg = self.cfg
        if cfg.backend == "analytic":
            return make_backend("analytic", strategies, mcfg, model=cfg.oracle_model())
        shards, test = self.federations[mcfg.n]
        return make_backend("trained", strategies, mcfg, (shards, test), cfg.arch(test.n_features, test.n_classes))


# --- commands ----------------------------------------------------------------------


def cmd_simulate(cfg, out):
    prep = _Prepared(cfg)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.mechanism_config()
    result = run_simulation(mcfg, backend=prep.backend(mcfg, cfg.strategies()))
    rows = []
    for r in result.reports:
        for i in range(mcfg.n):
            rows.append([
                r.round, i, _num(r.valuations[i]), _num(r.surplus.pi[i]), _num(r.payments[i]),
                _num(r.accumulated_payments[i]), _num(r.reputations[i]), _num(r.eps), _num(r.core_accuracy),
            ])
    _write_csv(out / "rounds.csv", ROUNDS_HEADER, rows)
    summary = _summary_base(cfg, "simulate")
    summary.update({
        "strategies": [str(s) for s in cfg.strategies()],
        "accumulated_payments": result.accumulated_payments.tolist(),
        "accumulated_utility": result.accumulated_utility.tolist(),
        "reputations": result.reputations.tolist(),
        "rounds": [
            {
                "round": r.round,
                "coalition_count": r.coalition_count,
                "global_accuracy": r.global_accuracy,
                "eps": r.eps,
                "sigma2": r.surplus.sigma2,
                "pi0": r.surplus.pi0,
                "budget_spent": r.budget_spent,
                "core_accuracy": r.core_accuracy,
                "wall_times_ms": {k: v * 1e3 for k, v in r.wall_times.items()},
            }
            for r in result.reports
        ],
    })
    _write_json(out / "summary.json", summary)
    if cfg.plots:
        util = result.utility_series()
        rounds = [r.round for r in result.reports]
        write_line_chart(
            out / "utility.svg", [(f"participant {i}", rounds, util[:, i]) for i in range(mcfg.n)],
            title="Accumulated utility", xlabel="round", ylabel="utility",
        )
        write_line_chart(
            out / "accuracy.svg", [("global model", rounds, [r.global_accuracy for r in result.reports])],
            title="Global model accuracy", xlabel="round", ylabel="accuracy",
        )
    return 0


def cmd_validate(cfg, out):
    n = cfg.n
    if n > VALIDATE_MAX:
        raise ConfigError("n", f"validate compares against the exact program and needs n <= {VALIDATE_MAX}")
    prep = _Prepared(cfg)
    total = (1 << n) - 1
    grid = sorted({total if m == "all" else min(m, total) for m in cfg.m_grid})
    out.mkdir(parents=True, exist_ok=True)
    acc = {m: [] for m in grid}
    for r in range(cfg.validate_repeats):
        mcfg = cfg.mechanism_config(seed=cfg.seed + r)
        for row in run_exact_vs_sampled(mcfg, grid, backend=prep.backend(mcfg, cfg.strategies())):
            acc[row.m].append(row)
    rows = []
    for m in grid:
        rs = acc[m]
        rows.append([
            m,
            _num(np.mean([x.sigma2_error for x in rs])),
            _num(np.mean([x.core_accuracy for x in rs])),
            _num(np.mean([x.time_ms for x in rs])),
        ])
    _write_csv(out / "validation.csv", VALIDATION_HEADER, rows)
    summary = _summary_base(cfg, "validate")
    summary["m_grid"] = grid
    _write_json(out / "summary.json", summary)
    if cfg.plots:
        write_line_chart(
            out / "validation_sigma2.svg", [("|sampled - exact|", grid, [float(r[1]) for r in rows])],
            title="sigma^2 error vs samples", xlabel="m", ylabel="sigma^2 error",
        )
        write_line_chart(
            out / "validation_core_accuracy.svg", [("sampled", grid, [float(r[2]) for r in rows])],
            title="Core accuracy vs samples", xlabel="m", ylabel="core accuracy",
        )
    return 0


def _deviator_profile(cfg, kind, degree):
    profile = cfg.strategies()
    profile[cfg.deviator] = InputStrategy(kind, degree if kind not in ("truthful", "quit") else 0.0)
    return profile


def cmd_sweep(cfg, out):
    prep = _Prepared(cfg)
    out.mkdir(parents=True, exist_ok=True)
    rows, cells = [], {}
    for mode in cfg.sweep_modes:
        for kind in cfg.sweep_strategies:
            for degree in cfg.sweep_degrees:
                profile = _deviator_profile(cfg, kind, degree)
                utils = []
                for r in range(cfg.sweep_repeats):
                    mcfg = cfg.mechanism_config(mode=mode, seed=cfg.seed + r)
                    res = run_simulation(mcfg, backend=prep.backend(mcfg, profile))
                    utils.append(res.accumulated_utility[cfg.deviator])
                mean, std = float(np.mean(utils)), float(np.std(utils))
                cells.setdefault(mode, {}).setdefault(kind, []).append((degree, mean))
                rows.append([mode, kind, _num(degree), _num(mean), _num(std)])
    _write_csv(out / "sweep.csv", SWEEP_HEADER, rows)
    summary = _summary_base(cfg, "sweep")
    summary["deviator"] = cfg.deviator
    _write_json(out / "summary.json", summary)
    if cfg.plots:
        for mode, by_kind in cells.items():
            series = [(kind, [d for d, _ in pts], [u for _, u in pts]) for kind, pts in by_kind.items()]
            write_line_chart(
                out / f"sweep_{mode}.svg", series,
                title=f"Deviator utility ({mode})", xlabel="false degree", ylabel="mean accumulated utility",
            )
    return 0


def cmd_bench(cfg, out):
    ns = sorted(set(cfg.bench_n))
    prep = _Prepared(cfg, ns)
    out.mkdir(parents=True, exist_ok=True)
    rows, series, skipped = [], {}, []
    for n in ns:
        for mode in cfg.bench_modes:
            if mode == "exact" and n > EXACT_BENCH_MAX:
                skipped.append({"n": n, "mode": mode})
                continue
            mcfg = cfg.mechanism_config(n=n, mode=mode, rounds=cfg.bench_rounds, m=None, audit=False)
            res = run_simulation(mcfg, backend=prep.backend(mcfg, [InputStrategy.truthful()] * n))
            ms = float(np.mean([sum(r.wall_times.values()) for r in res.reports])) * 1e3
            count = res.reports[0].coalition_count
            rows.append([n, mode, count, _num(ms)])
            series.setdefault(mode, []).append((n, ms))
    _write_csv(out / "bench.csv", BENCH_HEADER, rows)
    summary = _summary_base(cfg, "bench")
    summary["skipped"] = skipped
    _write_json(out / "summary.json", summary)
    if cfg.plots:
        write_line_chart(
            out / "bench.svg", [(mode, [n for n, _ in p], [t for _, t in p]) for mode, p in series.items()],
            title="Round time", xlabel="participants n", ylabel="round time (ms, log10)", logy=True,
        )
    return 0


COMMANDS = {"simulate": cmd_simulate, "validate": cmd_validate, "sweep": cmd_sweep, "bench": cmd_bench}


def build_parser():
    parser = argparse.ArgumentParser(prog="fedcore", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat TOML configuration file")
        p.add_argument("--out", help="output directory (overrides `out`)")
        p.add_argument("--seed", type=int, help="master seed (overrides `seed`)")
        p.add_argument("--plots", choices=["on", "off"], help="write SVG plots (overrides `plots`)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {"out": args.out, "seed": args.seed}
    if args.plots is not None:
        overrides["plots"] = args.plots == "on"
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, Path(cfg.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (MechanismError, CapabilityError, ParameterError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
