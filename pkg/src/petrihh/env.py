"""Scheduling environment over the Petri net.

Two action modes share one simulator:

* ``hyper``: the action is a rule index; the rule dispatches for up to
  ``commitment`` consecutive decision points before control returns.
* ``flat``: the action is a controllable transition id, guard-masked.

The reward is zero except on the terminal step, where it is
``-makespan / reward_scale``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .heuristics import N_RULES, RULES, Rule, select_in, simulate_with_heuristic
from .jssp import JsspInstance, Schedule, extract_schedule, instance_to_net
from .petri import NetSimulator, to_dot

HYPER = "hyper"
FLAT = "flat"


class EpisodeDoneError(RuntimeError):
    pass


class InvalidActionError(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    mode: str = HYPER
    commitment: int = 5
    reward_scale: Optional[float] = None  # None: SPT rollout makespan of the instance
    seed: int = 0
    record_trace: bool = False

    def __post_init__(self):
        if self.mode not in (HYPER, FLAT):
            raise ValueError(f"mode must be {HYPER!r} or {FLAT!r}")
        if self.commitment < 1:
            raise ValueError("commitment must be >= 1")
        if self.mode == FLAT and self.commitment != 1:
            object.__setattr__(self, "commitment", 1)
        if self.reward_scale is not None and not self.reward_scale > 0:
            raise ValueError("reward_scale must be positive")


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


TRACE_HEADER = ["decision_idx", "clock", "rule_or_transition", "fired_transition", "job", "machine"]


class JsspEnv:
    def __init__(self, instance: JsspInstance, config: Optional[EnvConfig] = None, **kw):
        config = config if config is not None else EnvConfig()
        if kw:
            config = replace(config, **kw)
        self.instance = instance
        self.config = config
        self.net = instance_to_net(instance)
        self._scale = config.reward_scale
        self._total_time = float(instance.total_time)
        inst, net = instance, self.net
        caps = np.ones(net.n_places)
        for j in range(inst.n_jobs):
            caps[net.queue_place[j]] = inst.seq_length(j)
            caps[net.done_place[j]] = inst.seq_length(j)
        for mk in range(inst.n_machines):
            caps[net.buffer_place[mk]] = max(1, sum(row.count(mk) for row in inst.machines))
        self._caps = caps
        self._seq = np.array([inst.seq_length(j) for j in range(inst.n_jobs)], dtype=float)
        self.sim: Optional[NetSimulator] = None
        self.reset()

    # -- spaces
    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def n_actions(self) -> int:
        return N_RULES if self.mode == HYPER else self.net.n_controllable

    @property
    def obs_dim(self) -> int:
        return self.net.n_places + self.instance.n_machines + 2 * self.instance.n_jobs + 1

    def action_mask(self) -> np.ndarray:
        if self.mode == HYPER:
            return np.ones(N_RULES, dtype=bool)
        return self.sim.guard_mask()

    @property
    def reward_scale(self) -> float:
        if self._scale is None:
            self._scale = float(simulate_with_heuristic(self.instance, Rule.SPT)[1])
        return self._scale

    # -- episode control
    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self.config = replace(self.config, seed=seed)
        self.sim = NetSimulator(self.net)
        self.sim.settle()
        self.done = self.sim.terminal()
        self.decisions = 0
        self.step_calls = 0
        self.trace: list = []
        _ = self.reward_scale
        return self.observe()

    def observe(self) -> np.ndarray:
        net, inst = self.net, self.instance
        toks = self.sim.marking.tokens
        clock = self.sim.clock
        total = self._total_time
        counts = np.fromiter((len(q) for q in toks), dtype=float, count=net.n_places) / self._caps
        busy = np.zeros(inst.n_machines)
        for mk, p in enumerate(net.busy_place):
            if toks[p]:
                front = toks[p][0]
                busy[mk] = max(0, front.entry_time + net.delay(front) - clock) / total
        done_ops = np.fromiter((len(toks[p]) for p in net.done_place), dtype=int, count=inst.n_jobs)
        work = np.fromiter((net.work_suffix[j][k] for j, k in enumerate(done_ops)),
                           dtype=float, count=inst.n_jobs) / total
        ops_left = (self._seq - done_ops) / self._seq
        return np.concatenate([counts, busy, work, ops_left, [min(1.0, clock / total)]])

    def _dispatch(self, tid: int, label) -> None:
        job, machine = self.net.select_pairs[tid]
        if self.config.record_trace:
            self.trace.append((self.decisions, self.sim.clock, label, tid, job, machine))
        self.sim.fire(tid)
        self.sim.settle()
        self.decisions += 1
        self.done = self.sim.terminal()

    def _result(self, fired: int) -> StepResult:
        reward = -self.makespan / self.reward_scale if self.done else 0.0
        info = {"clock": self.sim.clock, "decisions_made": self.decisions,
                "env_actions_fired": fired, "mask": self.action_mask()}
        if self.done:
            info["makespan"] = self.makespan
        return StepResult(self.observe(), reward, self.done, info)

    def step(self, action: int) -> StepResult:
        if self.mode == FLAT:
            return self.step_flat(action)
        if self.done:
            raise EpisodeDoneError("step() after the episode finished; call reset()")
        if not 0 <= int(action) < N_RULES:
            raise InvalidActionError(f"rule index {action} outside [0, {N_RULES})")
        rule = RULES[int(action)]
        self.step_calls += 1
        fired = 0
        for _ in range(self.config.commitment):
            self._dispatch(select_in(rule, self.sim), rule.name)
            fired += 1
            if self.done:
                break
        return self._result(fired)

    def step_flat(self, tid: int) -> StepResult:
        if self.done:
            raise EpisodeDoneError("step after the episode finished; call reset()")
        tid = int(tid)
        if not 0 <= tid < self.net.n_controllable or tid not in self.sim.ctrl_enabled:
            raise InvalidActionError(f"transition {tid} is masked by the guard function")
        self.step_calls += 1
        self._dispatch(tid, f"t{tid}")
        return self._result(1)

    # -- read-outs
    @property
    def makespan(self) -> int:
        if not self.done:
            raise RuntimeError("makespan is defined at the terminal state only")
        return self.sim.clock

    def schedule(self) -> Schedule:
        return extract_schedule(self.net, self.sim.events)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        w.writerows(self.trace)
        return buf.getvalue()

    def to_dot(self) -> str:
        return to_dot(self.net, self.sim.marking, name=self.instance.name or "jssp")

    def clone(self) -> "JsspEnv":
        other = object.__new__(JsspEnv)
        other.__dict__.update(self.__dict__)
        other.sim = self.sim.copy()
        other.trace = list(self.trace)
        return other
