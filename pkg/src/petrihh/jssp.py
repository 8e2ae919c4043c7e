"""Job-shop instances, Taillard I/O, compilation to a timed colored Petri net,
and schedule checking."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .petri import (Marking, NetSimulator, PetriNet, Place, PlaceKind, Token,
                    Transition, TransitionKind)


class ParseError(ValueError):
    def __init__(self, msg: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class InstanceError(ValueError):
    pass


class IncompleteScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class JsspInstance:
    """``machines[j][k]`` (0-indexed) and ``times[j][k]`` of operation k of job j."""

    machines: tuple
    times: tuple
    n_machines: int
    name: str = ""

    def __post_init__(self):
        machines = tuple(tuple(int(x) for x in row) for row in self.machines)
        times = tuple(tuple(int(x) for x in row) for row in self.times)
        object.__setattr__(self, "machines", machines)
        object.__setattr__(self, "times", times)
        if not machines:
            raise InstanceError("instance needs at least one job")
        if self.n_machines < 1:
            raise InstanceError("instance needs at least one machine")
        if len(machines) != len(times):
            raise InstanceError("machine and time tables disagree on job count")
        for j, (ms, ps) in enumerate(zip(machines, times)):
            if len(ms) != len(ps) or not ms:
                raise InstanceError(f"job {j}: bad operation list")
            for m, p in zip(ms, ps):
                if not 0 <= m < self.n_machines:
                    raise InstanceError(f"job {j}: machine {m} out of range")
                if p <= 0:
                    raise InstanceError(f"job {j}: processing time {p} must be > 0")

    @classmethod
    def from_ops(cls, ops: Sequence[Sequence[tuple]], n_machines: Optional[int] = None,
                 name: str = "") -> "JsspInstance":
        """Build from per-job lists of ``(machine, time)`` pairs."""
        machines = [[m for m, _ in job] for job in ops]
        times = [[p for _, p in job] for job in ops]
        if n_machines is None:
            if not any(machines):
                raise InstanceError("instance needs at least one operation")
            n_machines = 1 + max(m for row in machines for m in row)
        return cls(machines, times, n_machines, name)

    @property
    def n_jobs(self) -> int:
        return len(self.machines)

    @property
    def n_ops(self) -> int:
        return sum(len(row) for row in self.machines)

    @property
    def total_time(self) -> int:
        return sum(sum(row) for row in self.times)

    def ops(self, j: int) -> list[tuple[int, int]]:
        return list(zip(self.machines[j], self.times[j]))

    def seq_length(self, j: int) -> int:
        return len(self.machines[j])

    @property
    def size(self) -> str:
        return f"{self.n_jobs}x{self.n_machines}"


# ---------------------------------------------------------------- Taillard I/O

_LABELS = {"times", "machines"}


def parse_taillard(text: str, strict: bool = True, name: str = "") -> JsspInstance:
    """Parse the Taillard layout: ``n m``, an n x m time matrix, then an n x m
    matrix of 1-indexed machines.  Lines starting with ``#`` are comments; bare
    ``Times``/``Machines`` header lines are tolerated."""
    rows: list[tuple[int, list[str]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.lower().rstrip(":") in _LABELS:
            continue
        rows.append((lineno, line.split()))
    if not rows:
        raise ParseError("empty instance text")
    lineno, head = rows[0]
    if len(head) < 2:
        raise ParseError("header must be 'n_jobs n_machines'", lineno)
    n, m = (_int(tok, lineno) for tok in head[:2])
    if n < 1 or m < 1:
        raise ParseError("job and machine counts must be positive", lineno)
    if strict and len(head) > 2:
        # the original distribution appends seed/bounds on the header line
        for tok in head[2:]:
            _int(tok, lineno)
    body = rows[1:]
    if len(body) < 2 * n:
        raise ParseError(f"expected {2 * n} matrix rows, found {len(body)}",
                         body[-1][0] if body else lineno)
    if strict and len(body) > 2 * n:
        raise ParseError("trailing content after machine matrix", body[2 * n][0])
    times, machines = [], []
    for i, (ln, toks) in enumerate(body[:2 * n]):
        if len(toks) != m:
            raise ParseError(f"expected {m} entries, found {len(toks)}", ln)
        vals = [_int(tok, ln) for tok in toks]
        if i < n:
            if any(v <= 0 for v in vals):
                raise ParseError("processing times must be positive", ln)
            times.append(vals)
        else:
            if any(not 1 <= v <= m for v in vals):
                raise ParseError(f"machine index out of range 1..{m}", ln)
            if len(set(vals)) != len(vals):
                raise ParseError("duplicate machine within a job", ln)
            machines.append([v - 1 for v in vals])
    return JsspInstance(machines, times, m, name)


def _int(tok: str, lineno: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"not an integer: {tok!r}", lineno) from None


def serialize_taillard(inst: JsspInstance) -> str:
    lens = {len(row) for row in inst.machines}
    if lens != {inst.n_machines}:
        raise InstanceError("Taillard layout needs exactly one operation per machine per job")
    lines = [f"{inst.n_jobs} {inst.n_machines}"]
    lines += [" ".join(map(str, row)) for row in inst.times]
    lines += [" ".join(str(m + 1) for m in row) for row in inst.machines]
    return "\n".join(lines) + "\n"


def data_dir() -> Path:
    return Path(str(resources.files("petrihh") / "data" / "taillard"))


def list_instances() -> list[str]:
    return sorted(p.stem for p in data_dir().glob("ta*.txt"))


def load_instance(name_or_path: Union[str, Path]) -> JsspInstance:
    """Load a bundled Taillard instance by name (``ta01``) or any file path."""
    path = Path(name_or_path)
    if not path.exists():
        path = data_dir() / f"{name_or_path}.txt"
        if not path.exists():
            raise FileNotFoundError(f"no instance file or bundled instance {name_or_path!r}")
    return parse_taillard(path.read_text(), name=path.stem)


def random_instance(n_jobs: int, n_machines: int, seed=None, low: int = 1,
                    high: int = 9) -> JsspInstance:
    """Uniform integer times in [low, high], a random machine permutation per job."""
    rng = np.random.default_rng(seed)
    machines = [rng.permutation(n_machines).tolist() for _ in range(n_jobs)]
    times = rng.integers(low, high + 1, size=(n_jobs, n_machines)).tolist()
    return JsspInstance(machines, times, n_machines, f"rand{n_jobs}x{n_machines}")


# ------------------------------------------------------------- net compilation

@dataclass
class JsspNet(PetriNet):
    """Petri net compiled from an instance, with lookup tables for the
    JSSP-specific places.

    Per job: a queue place with one colored token per operation, a ready place
    (one resource token while the job has no operation in progress) and a
    completed place.  Per machine: a buffer, an idle-resource place and a busy
    place.  Controllable ``select(j, m)`` moves the front operation of job j to
    machine m's buffer; ``start(m)`` pulls the buffer head onto an idle
    machine; ``complete(j, m)`` fires once the token has sojourned for its
    processing time, freeing the machine and releasing job j.
    """

    instance: Optional[JsspInstance] = None
    queue_place: tuple = ()
    ready_place: tuple = ()
    done_place: tuple = ()
    buffer_place: tuple = ()
    idle_place: tuple = ()
    busy_place: tuple = ()
    select_pairs: tuple = ()  # (job, machine) per controllable transition id
    start_tids: frozenset = frozenset()
    complete_tids: frozenset = frozenset()
    work_suffix: tuple = field(default=(), repr=False)  # work_suffix[j][k] = sum of times[j][k:]


def instance_to_net(inst: JsspInstance) -> JsspNet:
    n, m = inst.n_jobs, inst.n_machines
    places: list[Place] = []

    def add(kind, name):
        places.append(Place(len(places), kind, name))
        return len(places) - 1

    queue = tuple(add(PlaceKind.JOB_QUEUE, f"J{j}") for j in range(n))
    ready = tuple(add(PlaceKind.RESOURCE_IDLE, f"ready{j}") for j in range(n))
    done = tuple(add(PlaceKind.COMPLETED, f"done{j}") for j in range(n))
    buffer = tuple(add(PlaceKind.MACHINE_BUFFER, f"buf{k}") for k in range(m))
    idle = tuple(add(PlaceKind.RESOURCE_IDLE, f"idle{k}") for k in range(m))
    busy = tuple(add(PlaceKind.MACHINE_BUSY, f"M{k}") for k in range(m))

    pairs = sorted({(j, mk) for j in range(n) for mk in inst.machines[j]})
    transitions: list[Transition] = []

    def add_t(**kw):
        transitions.append(Transition(id=len(transitions), **kw))
        return len(transitions) - 1

    for j, mk in pairs:
        add_t(kind=TransitionKind.CONTROLLABLE, inputs=(queue[j], ready[j]),
              outputs=(buffer[mk],), color_filter=j, machine_filter=mk,
              name=f"select J{j}->M{mk}", job=j, machine=mk)
    starts = [add_t(kind=TransitionKind.COLOR_ROUTING, inputs=(buffer[mk], idle[mk]),
                    outputs=(busy[mk],), name=f"start M{mk}", machine=mk)
              for mk in range(m)]
    completes = [add_t(kind=TransitionKind.TIMED_COMPLETION, inputs=(busy[mk],),
                       outputs=(done[j], idle[mk], ready[j]), color_filter=j,
                       name=f"finish J{j}@M{mk}", job=j, machine=mk)
                 for j, mk in pairs]

    tokens: list = [()] * len(places)
    for j in range(n):
        tokens[queue[j]] = tuple(Token(j, k, 0) for k in range(inst.seq_length(j)))
        tokens[ready[j]] = (Token(None, None, 0),)
    for mk in range(m):
        tokens[idle[mk]] = (Token(None, None, 0),)

    suffix = tuple(tuple(int(x) for x in np.cumsum(row[::-1])[::-1]) + (0,)
                   for row in inst.times)
    return JsspNet(places=places, transitions=transitions, initial=Marking(tokens, 0),
                   op_time=inst.times, op_machine=inst.machines, instance=inst,
                   queue_place=queue, ready_place=ready, done_place=done,
                   buffer_place=buffer, idle_place=idle, busy_place=busy,
                   select_pairs=tuple(pairs), start_tids=frozenset(starts),
                   complete_tids=frozenset(completes), work_suffix=suffix)


# ------------------------------------------------------------------ schedules

@dataclass
class Schedule:
    """``entries[(j, k)] = (machine, start, end)``."""

    entries: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def rows(self) -> list[tuple[int, int, int, int, int]]:
        return [(j, k, m, s, e) for (j, k), (m, s, e) in sorted(self.entries.items())]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["job", "op", "machine", "start", "end"])
        w.writerows(self.rows())
        return buf.getvalue()

    @classmethod
    def from_starts(cls, inst: JsspInstance, starts: dict) -> "Schedule":
        return cls({(j, k): (inst.machines[j][k], s, s + inst.times[j][k])
                    for (j, k), s in starts.items()})


def makespan(schedule: Schedule) -> int:
    if not schedule.entries:
        raise ValueError("makespan of an empty schedule")
    return max(e for _, _, e in schedule.entries.values())


def extract_schedule(net: JsspNet, events: Iterable[tuple]) -> Schedule:
    """Start = clock at the machine-start firing, end = clock at the
    completion firing."""
    starts, ends, machine = {}, {}, {}
    for clock, tid, tok in events:
        if tid in net.start_tids:
            starts[(tok.color, tok.op)] = clock
            machine[(tok.color, tok.op)] = net.transitions[tid].machine
        elif tid in net.complete_tids:
            ends[(tok.color, tok.op)] = clock
    return Schedule({key: (machine[key], s, ends[key]) for key, s in starts.items()
                     if key in ends})


@dataclass
class ValidationReport:
    precedence_violations: list
    overlap_violations: list
    duration_violations: list
    makespan: int

    @property
    def feasible(self) -> bool:
        return not (self.precedence_violations or self.overlap_violations
                    or self.duration_violations)


def validate_schedule(inst: JsspInstance, schedule: Schedule) -> ValidationReport:
    missing = [(j, k) for j in range(inst.n_jobs) for k in range(inst.seq_length(j))
               if (j, k) not in schedule.entries]
    if missing:
        raise IncompleteScheduleError(f"{len(missing)} operations unscheduled, e.g. {missing[0]}")
    ent = schedule.entries
    durations = []
    for j in range(inst.n_jobs):
        for k in range(inst.seq_length(j)):
            m, s, e = ent[(j, k)]
            if e - s != inst.times[j][k] or m != inst.machines[j][k] or s < 0:
                durations.append((j, k))
    precedence = []
    for j in range(inst.n_jobs):
        for k in range(inst.seq_length(j) - 1):
            if ent[(j, k + 1)][1] < ent[(j, k)][1] + inst.times[j][k]:
                precedence.append((j, k))
    by_machine: dict = {}
    for (j, k) in sorted(ent):
        by_machine.setdefault(inst.machines[j][k], []).append((j, k))
    overlaps = []
    for mk, ops in sorted(by_machine.items()):
        for a in range(len(ops)):
            sa = ent[ops[a]][1]
            ea = sa + inst.times[ops[a][0]][ops[a][1]]
            for b in range(a + 1, len(ops)):
                sb = ent[ops[b]][1]
                eb = sb + inst.times[ops[b][0]][ops[b][1]]
                if sa < eb and sb < ea:
                    overlaps.append((ops[a], ops[b], mk))
    return ValidationReport(precedence, overlaps, durations, makespan(schedule))


def simulate_actions(inst: JsspInstance, choose) -> tuple[Schedule, int, NetSimulator]:
    """Roll the net to terminal, asking ``choose(sim)`` for each controllable
    transition to fire."""
    net = instance_to_net(inst)
    sim = NetSimulator(net)
    sim.settle()
    while not sim.terminal():
        if not sim.ctrl_enabled:
            raise RuntimeError("net stalled before reaching the terminal marking")
        sim.fire(choose(sim))
        sim.settle()
    return extract_schedule(net, sim.events), sim.clock, sim
