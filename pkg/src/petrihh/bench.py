"""Experiment harness: heuristic baselines, hyper-heuristic training, the
commitment ablation and checkpoint evaluation.

Every command writes CSV (for tooling) and markdown (for reading) into the
output directory.  Runs are deterministic for a fixed configuration.
"""
from __future__ import annotations

import argparse
import csv
import fnmatch
import io
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .agent import (GREEDY, SAMPLE, PpoConfig, TrainingDivergedError, evaluate,
                    load_checkpoint, log_to_csv, save_checkpoint, train)
from .env import FLAT, HYPER, EnvConfig, JsspEnv
from .heuristics import RULES, Rule, simulate_with_heuristic
from .jssp import JsspInstance, list_instances, load_instance, validate_schedule

log = logging.getLogger(__name__)

HEADS = ("ta01", "ta11", "ta21", "ta31", "ta41", "ta51", "ta61", "ta71")


class BenchError(RuntimeError):
    pass


@dataclass
class RunConfig:
    instances: Sequence[str] = ("ta01",)
    mode: str = HYPER
    rules: Sequence[str] = tuple(r.name for r in RULES)
    ppo: dict = field(default_factory=dict)
    commitments: Sequence[int] = (1, 5, 1000)
    seeds: Sequence[int] = (0, 1, 2)
    out: Path = Path("results")
    steps: int = 200_000
    select: str = GREEDY
    samples: int = 10
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        self.out = Path(self.out)

    def ppo_config(self, seed: int) -> PpoConfig:
        return PpoConfig.from_dict({**self.ppo, "total_steps": self.steps, "seed": seed})


def expand_names(items: Sequence[str]) -> list[str]:
    """Names (``ta01``), globs over bundled names (``ta*1``), ``heads`` for the
    eight group heads, or file paths; duplicates dropped, order kept."""
    bundled = list_instances()
    names: list = []
    for item in items:
        if item == "heads":
            names.extend(HEADS)
        elif Path(item).is_file():
            names.append(item)
        elif any(c in item for c in "*?["):
            hits = fnmatch.filter(bundled, item)
            if not hits:
                raise BenchError(f"pattern {item!r} matches no bundled instance")
            names.extend(hits)
        else:
            names.append(item)
    return list(dict.fromkeys(names))


def resolve_instances(items: Sequence[str]) -> list[JsspInstance]:
    return [load_instance(name) for name in expand_names(items)]


# ------------------------------------------------------------------ emission

def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def to_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def to_markdown(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def _num(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    return f"{x:.2f}"


def gap_percent(hh: float, best: float) -> float:
    return (hh - best) / best * 100.0


@dataclass
class ResultRow:
    instance: str
    size: str
    makespans: dict  # rule name -> makespan
    hh: Optional[float] = None

    @property
    def heur_avg(self) -> float:
        return float(np.mean(list(self.makespans.values())))

    @property
    def best(self) -> int:
        return min(self.makespans.values())

    @property
    def gap(self) -> Optional[float]:
        return None if self.hh is None else gap_percent(self.hh, self.best)

    def cells(self, rules) -> list:
        return [self.instance, self.size, *[self.makespans[r] for r in rules],
                _num(self.heur_avg), self.best, _num(self.hh), _num(self.gap)]


def heuristic_row(inst: JsspInstance, rules: Sequence[str]) -> ResultRow:
    out = {}
    for name in rules:
        schedule, ms = simulate_with_heuristic(inst, Rule.parse(name))
        report = validate_schedule(inst, schedule)
        if not report.feasible or report.makespan != ms:
            raise BenchError(f"{inst.name}/{name}: rollout schedule failed validation")
        out[Rule.parse(name).name] = ms
    return ResultRow(inst.name, inst.size, out)


def _heuristic_job(args):
    name, rules = args
    try:
        return heuristic_row(load_instance(name), rules), None
    except Exception as err:  # noqa: BLE001 - reported per instance, run continues
        return None, f"{name}: {type(err).__name__}: {err}"


def _pool_map(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


# ------------------------------------------------------------------ commands

def cmd_heuristics(cfg: RunConfig) -> tuple[list[ResultRow], list[str]]:
    rules = [Rule.parse(r).name for r in cfg.rules]
    results = _pool_map(_heuristic_job, [(item, rules) for item in expand_names(cfg.instances)],
                        cfg.workers)
    rows = [r for r, _ in results if r is not None]
    errors = [e for _, e in results if e is not None]
    header = ["instance", "size", *rules, "heur_avg", "best_heuristic", "ours", "gap"]
    table = [r.cells(rules) for r in rows]
    if rows:
        avg = ["average", "--", *[_num(float(np.mean([r.makespans[k] for r in rows]))) for k in rules],
               _num(float(np.mean([r.heur_avg for r in rows]))),
               _num(float(np.mean([r.best for r in rows]))), "", ""]
        table_md = table + [avg]
    else:
        table_md = table
    _write(cfg.out / "results.csv", to_csv(header, table))
    _write(cfg.out / "results.md", to_markdown(header, table_md))
    for e in errors:
        log.error("heuristics failed: %s", e)
    return rows, errors


@dataclass
class TrainOutcome:
    instance: str
    mode: str
    commitment: int
    seed: int
    makespan: Optional[int]
    log_csv: str
    params: object = None
    error: Optional[str] = None


def train_one(inst: JsspInstance, mode: str, commitment: int, ppo: PpoConfig) -> TrainOutcome:
    env_cfg = EnvConfig(mode=mode, commitment=commitment, seed=ppo.seed)
    try:
        res = train(lambda: JsspEnv(inst, env_cfg), ppo)
    except TrainingDivergedError as err:
        return TrainOutcome(inst.name, mode, env_cfg.commitment, ppo.seed, None,
                            log_to_csv(err.log), error=str(err))
    env = JsspEnv(inst, env_cfg)
    ms = evaluate(res.params, env, GREEDY)
    report = validate_schedule(inst, env.schedule())
    if not report.feasible:
        raise BenchError(f"{inst.name}: trained policy produced an infeasible schedule")
    return TrainOutcome(inst.name, mode, env_cfg.commitment, ppo.seed, ms, res.log_csv(), res.params)


def _train_job(args):
    return train_one(*args)


def cmd_train(cfg: RunConfig, commitment: Optional[int] = None) -> list[TrainOutcome]:
    instances = resolve_instances(cfg.instances)
    if len(instances) != 1:
        raise BenchError("train takes exactly one instance per run")
    inst = instances[0]
    x = commitment if commitment is not None else (list(cfg.commitments) or [5])[0]
    jobs = [(inst, cfg.mode, x, cfg.ppo_config(s)) for s in cfg.seeds]
    outcomes = _pool_map(_train_job, jobs, cfg.workers)
    best = heuristic_row(inst, [r.name for r in RULES]).best
    multi = len(outcomes) > 1
    rows = []
    for o in outcomes:
        suffix = f"_seed{o.seed}" if multi else ""
        _write(cfg.out / f"training_log{suffix}.csv", o.log_csv)
        if o.params is not None:
            cfg.out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(cfg.out / f"checkpoint{suffix}.npz", o.params,
                            {"instance": inst.name, "mode": o.mode, "commitment": o.commitment,
                             "seed": o.seed})
        rows.append([o.instance, o.mode, o.commitment, o.seed,
                     "" if o.makespan is None else o.makespan, best,
                     "" if o.makespan is None else _num(gap_percent(o.makespan, best)),
                     "ok" if o.error is None else f"failed: {o.error}"])
    header = ["instance", "mode", "commitment", "seed", "greedy_makespan", "best_heuristic",
              "gap", "status"]
    _write(cfg.out / "train_report.csv", to_csv(header, rows))
    _write(cfg.out / "train_report.md", to_markdown(header, rows))
    return outcomes


def cmd_ablate_commitment(cfg: RunConfig) -> tuple[list[dict], list[str]]:
    instances = resolve_instances(cfg.instances)
    xs = list(cfg.commitments)
    jobs = [(i, cfg.mode, x, cfg.ppo_config(s)) for i in instances for x in xs for s in cfg.seeds]
    outcomes = _pool_map(_train_job, jobs, cfg.workers)
    errors = [f"{o.instance}/x={o.commitment}/seed={o.seed}: {o.error}"
              for o in outcomes if o.error is not None]
    per_seed = [[o.instance, o.commitment, o.seed, "" if o.makespan is None else o.makespan]
                for o in outcomes]
    table = []
    for inst in instances:
        row = {"instance": inst.name, "size": inst.size}
        for x in xs:
            vals = [o.makespan for o in outcomes
                    if o.instance == inst.name and o.commitment == x and o.makespan is not None]
            row[x] = {"mean": float(np.mean(vals)) if vals else None,
                      "best": min(vals) if vals else None, "runs": vals}
        table.append(row)
    header = ["instance", "size"] + [f"x={x} mean" for x in xs] + [f"x={x} best" for x in xs]
    rows = [[r["instance"], r["size"], *[_num(r[x]["mean"]) for x in xs],
             *[_num(r[x]["best"]) for x in xs]] for r in table]
    avg = ["average", "--"]
    for key in ("mean", "best"):
        for x in xs:
            vals = [r[x][key] for r in table if r[x][key] is not None]
            avg.append(_num(float(np.mean(vals))) if vals else "")
    _write(cfg.out / "ablation.csv", to_csv(header, rows + [avg]))
    _write(cfg.out / "ablation_runs.csv", to_csv(["instance", "commitment", "seed", "makespan"], per_seed))
    _write(cfg.out / "ablation.md", to_markdown(header, rows + [avg]))
    for o in outcomes:
        _write(cfg.out / "logs" / f"{o.instance}_x{o.commitment}_seed{o.seed}.csv", o.log_csv)
    return table, errors


def cmd_eval(checkpoint, instance, mode: str = GREEDY, samples: int = 10, seed: int = 0,
             out: Optional[Path] = None, env_mode: Optional[str] = None,
             commitment: Optional[int] = None) -> dict:
    inst = instance if isinstance(instance, JsspInstance) else load_instance(instance)
    params, header = load_checkpoint(checkpoint)
    env_cfg = EnvConfig(mode=env_mode or header.get("mode", HYPER),
                        commitment=commitment or header.get("commitment", 5),
                        record_trace=out is not None)
    env = JsspEnv(inst, env_cfg)
    if header["obs_dim"] != env.obs_dim or header["n_actions"] != env.n_actions:
        raise BenchError(
            f"checkpoint width {header['obs_dim']}x{header['n_actions']} does not match "
            f"{inst.name} ({env.obs_dim}x{env.n_actions})")
    rng = np.random.default_rng(seed)
    runs = [evaluate(params, env, mode, rng) for _ in range(1 if mode == GREEDY else samples)]
    result = {"instance": inst.name, "mode": mode, "makespans": runs, "min": min(runs),
              "median": float(np.median(runs))}
    if out is not None:
        out = Path(out)
        schedule = env.schedule()
        report = validate_schedule(inst, schedule)
        if not report.feasible:
            raise BenchError("evaluated schedule failed validation")
        _write(out / "trace.csv", env.trace_csv())
        _write(out / "gantt.csv", schedule.to_csv())
        _write(out / "net.dot", env.to_dot())
        _write(out / "eval.csv", to_csv(["instance", "mode", "run", "makespan"],
                                        [[inst.name, mode, i, m] for i, m in enumerate(runs)]))
    return result


# ----------------------------------------------------------------------- CLI

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="petrihh", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--instances", nargs="+", default=["ta01"],
                        help="names, globs over bundled instances, 'heads', or file paths")
        sp.add_argument("--out", type=Path, default=Path("results"))
        sp.add_argument("--workers", type=int, default=1)

    def training(sp, commit_default):
        sp.add_argument("--mode", choices=[HYPER, FLAT], default=HYPER)
        sp.add_argument("--commit", type=int, nargs="+", default=commit_default)
        sp.add_argument("--steps", type=int, default=200_000, help="env decisions")
        sp.add_argument("--seed", type=int, nargs="+", default=[0])
        sp.add_argument("--ppo", nargs="*", default=[], metavar="KEY=VALUE",
                        help="PpoConfig overrides, e.g. lr=1e-3 ent_coef=0")

    h = sub.add_parser("heuristics", help="rollout makespan of every rule")
    common(h)
    h.add_argument("--rules", nargs="+", default=[r.name for r in RULES])

    t = sub.add_parser("train", help="train the hyper-heuristic (or flat) agent")
    common(t)
    training(t, [5])

    a = sub.add_parser("ablate-commitment", help="train and evaluate for several commitments")
    common(a)
    training(a, [1, 5, 1000])
    a.set_defaults(seed=[0, 1, 2])

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--instances", nargs=1, default=["ta01"])
    e.add_argument("--select", choices=[GREEDY, SAMPLE], default=GREEDY)
    e.add_argument("--samples", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--mode", choices=[HYPER, FLAT], default=None)
    e.add_argument("--commit", type=int, default=None)
    e.add_argument("--out", type=Path, default=None)
    return p


def _parse_overrides(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        key, _, value = item.partition("=")
        if not _:
            raise BenchError(f"override {item!r} is not KEY=VALUE")
        for cast in (int, float):
            try:
                out[key] = cast(value)
                break
            except ValueError:
                continue
        else:
            out[key] = {"true": True, "false": False}.get(value.lower(), value)
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "heuristics":
            rows, errors = cmd_heuristics(RunConfig(instances=args.instances, rules=args.rules,
                                                    out=args.out, workers=args.workers))
            sys.stdout.write((args.out / "results.md").read_text())
            return 1 if errors else 0
        if args.command in ("train", "ablate-commitment"):
            cfg = RunConfig(instances=args.instances, mode=args.mode, commitments=args.commit,
                            seeds=args.seed, steps=args.steps, out=args.out,
                            ppo=_parse_overrides(args.ppo), workers=args.workers)
            if args.command == "train":
                outcomes = cmd_train(cfg)
                sys.stdout.write((args.out / "train_report.md").read_text())
                return 1 if any(o.error for o in outcomes) else 0
            _, errors = cmd_ablate_commitment(cfg)
            sys.stdout.write((args.out / "ablation.md").read_text())
            return 1 if errors else 0
        res = cmd_eval(args.checkpoint, args.instances[0], args.select, args.samples,
                       args.seed, args.out, args.mode, args.commit)
        print(f"{res['instance']} {res['mode']}: makespans {res['makespans']} "
              f"min {res['min']} median {res['median']}")
        return 0
    except (BenchError, FileNotFoundError, ValueError) as err:
        log.error("%s", err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
