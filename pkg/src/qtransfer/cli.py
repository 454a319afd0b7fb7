"""Command-line runner.

Settings are resolved in this order, later ones winning: built-in defaults,
``--preset``, ``--config`` file, individual flags. Every run writes its data
files and a ``manifest.json`` into the ``--out`` directory.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, analysis, demon, lindblad, model, trajectory
from .config import ConfigError, RunConfig, preset
from .core import DegenerateStateError, projector
from .rng import PRNG_ALGORITHM, child_seed, make_rng

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_NUMERIC_ERRORS = (
    ArithmeticError,
    lindblad.StabilityError,
    lindblad.NonConvergenceError,
    DegenerateStateError,
    analysis.PostselectionUndefinedError,
    analysis.InsufficientStatisticsError,
    RuntimeError,
)


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return format(float(x), ".17g")


class Writer:
    """Emit tables as CSV or JSON into one directory and remember digests."""

    def __init__(self, out: Path, format: str):
        self.out = out
        self.format = format
        self.files: dict[str, str] = {}
        out.mkdir(parents=True, exist_ok=True)

    def _digest(self, path: Path) -> None:
        self.files[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()

    def table(self, name: str, columns: dict[str, "np.ndarray | list"]) -> Path:
        names = list(columns)
        rows = list(zip(*(list(columns[k]) for k in names))) if names else []
        if self.format == "csv":
            path = self.out / f"{name}.csv"
            lines = [f"# schema: {','.join(names)}", ",".join(names)]
            lines += [",".join(fmt(v) for v in row) for row in rows]
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        else:
            path = self.out / f"{name}.json"
            data = {"schema": names, "rows": [[_json_value(v) for v in row] for row in rows]}
            path.write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")
        self._digest(path)
        return path

    def document(self, name: str, data: dict) -> Path:
        path = self.out / f"{name}.json"
        path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_value) + "\n", encoding="utf-8")
        self._digest(path)
        return path

    def manifest(self, cfg: RunConfig, command: str, duration: float) -> Path:
        data = {
            "command": command,
            "config": cfg.to_dict(),
            "version": __version__,
            "prng": PRNG_ALGORITHM,
            "time_unit": cfg.time_unit,
            "wall_clock_seconds": duration,
            "outputs": dict(sorted(self.files.items())),
        }
        path = self.out / "manifest.json"
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _json_value(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.ndarray):
        return [_json_value(x) for x in v]
    return v


# -- subcommands ----------------------------------------------------------------


def _dt(cfg: RunConfig, default: float) -> float:
    return cfg.dt if cfg.dt is not None else default


def cmd_lindblad(cfg: RunConfig, w: Writer) -> None:
    p = cfg.params
    ts = lindblad.integrate(p, projector(cfg.psi0), _dt(cfg, 1e-3), cfg.t_max, sample_dt=cfg.sample_dt)
    w.table("lindblad", {"t": ts.times * cfg.time_scale, **ts.values})


def cmd_trajectory(cfg: RunConfig, w: Writer) -> None:
    seed = child_seed(cfg.master_seed, 0)
    kind = cfg.unraveling_kind
    if kind.kind is trajectory.UnravelingKind.COUNTING:
        rec = trajectory.run_counting_trajectory(
            cfg.params, cfg.psi0, cfg.t_max, cfg.sample_dt, seed, _dt(cfg, trajectory.DEFAULT_DT), cfg.jump_method
        )
    else:
        dt = _dt(cfg, trajectory.DEFAULT_HOMODYNE_DT)
        rec = trajectory.run_homodyne_trajectory(cfg.params, cfg.psi0, cfg.t_max, dt, seed, kind, cfg.sample_dt)
    w.table("trajectory", {"t": rec.sample_times * cfg.time_scale, **rec.observables})
    w.table(
        "events",
        {
            "t_jump": [e.time * cfg.time_scale for e in rec.events],
            "channel": [e.channel.value for e in rec.events],
        },
    )


def _ensemble(cfg: RunConfig, keep_samples: bool = False) -> trajectory.EnsembleResult:
    return trajectory.run_ensemble(
        cfg.params,
        cfg.psi0,
        cfg.n_traj,
        cfg.t_max,
        cfg.sample_dt,
        cfg.master_seed,
        kind=cfg.unraveling_kind,
        dt=cfg.dt,
        workers=cfg.workers,
        keep_samples=keep_samples,
        method=cfg.jump_method,
    )


def cmd_ensemble(cfg: RunConfig, w: Writer) -> None:
    res = _ensemble(cfg)
    cols = {"t": res.times * cfg.time_scale}
    for k in trajectory.OBSERVABLES:
        cols[f"{k}_mean"] = res.mean[k]
        cols[f"{k}_stderr"] = res.stderr[k]
    w.table("ensemble", cols)
    counts = res.jump_counts
    cols = {"bin_start": res.times[:-1] * cfg.time_scale, "bin_end": res.times[1:] * cfg.time_scale}
    cols.update({lb.value: counts[lb] for lb in counts})
    w.table("jump_counts", cols)


def cmd_histogram(cfg: RunConfig, w: Writer) -> None:
    res = _ensemble(cfg)
    if cfg.eff1 < 1 or cfg.eff2 < 1:
        rng = make_rng(child_seed(cfg.master_seed, cfg.n_traj))
        res = analysis.thin_by_efficiency(res, cfg.eff1, cfg.eff2, rng)
    h = analysis.jump_histogram(res, cfg.bin_width)
    w.table(
        "histogram",
        {
            "bin_start": h.edges[:-1] * cfg.time_scale,
            "bin_end": h.edges[1:] * cfg.time_scale,
            "count_q1": h.count_local1,
            "count_q2": h.count_local2,
            "frac_q1": h.fraction_local1,
            "frac_q2": h.fraction_local2,
            "low_stats_flag": h.low_stats,
        },
    )


def cmd_postselect(cfg: RunConfig, w: Writer) -> None:
    p = cfg.params
    ts = lindblad.integrate(p, projector(cfg.psi0), 1e-3, cfg.t_max, sample_dt=cfg.sample_dt, keep_states=True)
    lme = analysis.postselect_lme(ts)
    res = _ensemble(replace(cfg, unraveling="counting", beta=None), keep_samples=True)
    cols = {k: [] for k in ("n1_traj", "n2_traj", "n1_traj_stderr", "n2_traj_stderr", "survival_traj")}
    for t in res.times:
        try:
            e = analysis.postselect_trajectories(res, float(t))
            vals = (e.mean_n1, e.mean_n2, e.stderr_n1, e.stderr_n2, e.surviving_fraction)
        except analysis.InsufficientStatisticsError:
            vals = (math.nan,) * 4 + (0.0,)
        for k, v in zip(cols, vals):
            cols[k].append(v)
    w.table("postselect", {"t": lme.times * cfg.time_scale, "n1": lme.n1, "n2": lme.n2, "survival": lme.survival, **cols})


def cmd_analytic(cfg: RunConfig, w: Writer) -> None:
    p = cfg.params
    if cfg.initial_state != "eg":
        raise ConfigError("initial_state", "analytic solution is for the initial state eg")
    if not p.zero_temperature:
        raise ConfigError("nth1", "analytic solution requires zero temperature")
    n_steps = int(round(cfg.t_max / cfg.sample_dt))
    times = np.arange(n_steps + 1) * cfg.sample_dt
    pops = np.array([model.analytic_populations(p, t) for t in times])
    surv = np.array([model.survival_probability(p, t) for t in times])
    w.table("analytic", {"t": times * cfg.time_scale, "n1": pops[:, 0], "n2": pops[:, 1], "survival": surv})
    fid = model.transfer_fidelity_infinite(p) if p.omega1 == p.omega2 else None
    w.document("analytic_summary", {"fidelity_infinite": fid})


def cmd_demon(cfg: RunConfig, w: Writer) -> None:
    dc = cfg.demon
    res = demon.run_demon_ensemble(
        dc, cfg.n_traj, cfg.t_max, cfg.master_seed, cfg.psi0, _dt(cfg, trajectory.DEFAULT_DT), cfg.workers
    )
    n_cycles, n_done = res.per_trajectory_cycles()
    w.table(
        "ledger",
        {
            "trial": np.arange(res.n_traj),
            "cold_net": res.ledger[:, 0],
            "hot_net": res.ledger[:, 1],
            "collective_net": res.ledger[:, 2],
            "n_cycles": n_cycles,
            "n_completed_cycles": n_done,
        },
    )
    trial, ts, ph = [], [], []
    for i, tl in enumerate(res.timelines):
        for t, phase in tl:
            trial.append(i)
            ts.append(t * cfg.time_scale)
            ph.append(phase.name.lower())
    w.table("phases", {"trial": trial, "t": ts, "phase": ph})
    w.document(
        "demon_summary",
        {
            "n_traj": res.n_traj,
            "n_cycles": res.n_cycles,
            "mean_net_quanta": res.mean_net_quanta,
            "stderr_net_quanta": res.stderr_net_quanta,
            "outcome_frequencies": {o.value: f for o, f in res.outcome_frequencies().items()},
            "branching_oracle": demon.branching_probabilities(dc),
        },
    )


COMMANDS = {
    "lindblad": cmd_lindblad,
    "trajectory": cmd_trajectory,
    "ensemble": cmd_ensemble,
    "histogram": cmd_histogram,
    "postselect": cmd_postselect,
    "analytic": cmd_analytic,
    "demon": cmd_demon,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qtransfer", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in (*COMMANDS, "preset"):
        sp = sub.add_parser(name)
        if name == "preset":
            sp.add_argument("name")
            sp.add_argument("--out", help="write the preset config to this file instead of stdout")
            continue
        sp.add_argument("--config", help="JSON file with RunConfig keys")
        sp.add_argument("--preset", help="fig2, fig3, fig4 or alt_083")
        sp.add_argument("--seed", type=int, dest="master_seed")
        sp.add_argument("--n-traj", type=int, dest="n_traj")
        sp.add_argument("--t-max", type=float, dest="t_max")
        sp.add_argument("--dt", type=float)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--format", choices=("csv", "json"))
        sp.add_argument("--workers", type=int)
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = preset(args.preset) if args.preset else RunConfig()
    if args.config:
        cfg = RunConfig.load(args.config, cfg)
    overrides = {
        k: getattr(args, k)
        for k in ("master_seed", "n_traj", "t_max", "dt", "out", "format", "workers")
        if getattr(args, k) is not None
    }
    return RunConfig.from_dict(overrides, cfg).validate()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "preset":
            text = preset(args.name).to_json() + "\n"
            if args.out:
                Path(args.out).write_text(text, encoding="utf-8")
            else:
                sys.stdout.write(text)
            return EXIT_OK
        cfg = resolve_config(args)
        w = Writer(Path(cfg.out), cfg.format)
        t0 = time.perf_counter()
        COMMANDS[args.command](cfg, w)
        w.manifest(cfg, args.command, time.perf_counter() - t0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
