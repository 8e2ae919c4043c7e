"""Colored timed Petri net core.

A net is static structure (places, transitions, per-operation tables).  A
:class:`Marking` is the dynamic state: one FIFO token tuple per place plus the
clock.  The free functions are value-like (they return new markings); the
:class:`NetSimulator` mutates a private marking and tracks enabling
incrementally, which is what the environment and the heuristic rollouts use.

Firing convention: the token at the front of the *first* input place is the
primary token.  The first output place receives the primary token (re-stamped
with the current clock) when it is colored; every other output receives a
fresh uncolored resource token.  Uncolored tokens on secondary inputs are
consumed.  Colored tokens are therefore only ever moved, never created or
destroyed.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np


class PetriNetError(Exception):
    pass


class StructureError(PetriNetError):
    """Unknown place/transition id or a marking that does not fit the net."""


class NotEnabledError(PetriNetError):
    """Attempt to fire a transition that is not enabled."""


class LivelockError(PetriNetError):
    pass


class PlaceKind(enum.Enum):
    JOB_QUEUE = "job_queue"
    MACHINE_BUFFER = "machine_buffer"
    MACHINE_BUSY = "machine_busy"
    COMPLETED = "completed"
    RESOURCE_IDLE = "resource_idle"


class TransitionKind(enum.Enum):
    CONTROLLABLE = "controllable"
    COLOR_ROUTING = "color_routing"
    TIMED_COMPLETION = "timed_completion"


class Token(NamedTuple):
    color: Optional[int]  # job id; None for resource tokens
    op: Optional[int]  # operation index within the job
    entry_time: int


@dataclass(frozen=True)
class Place:
    id: int
    kind: PlaceKind
    name: str = ""


@dataclass(frozen=True)
class Transition:
    id: int
    kind: TransitionKind
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]
    color_filter: Optional[int] = None
    machine_filter: Optional[int] = None  # front token's operation must run on this machine
    name: str = ""
    job: Optional[int] = None
    machine: Optional[int] = None

    @property
    def timed(self) -> bool:
        return self.kind is TransitionKind.TIMED_COMPLETION


@dataclass(eq=True)
class Marking:
    tokens: list  # list[tuple[Token, ...]], one FIFO per place
    clock: int = 0

    def copy(self) -> "Marking":
        return Marking(list(self.tokens), self.clock)

    def counts(self) -> np.ndarray:
        return np.fromiter((len(q) for q in self.tokens), dtype=np.int64, count=len(self.tokens))

    def color_counts(self) -> dict:
        out: dict = {}
        for q in self.tokens:
            for tok in q:
                if tok.color is not None:
                    out[tok.color] = out.get(tok.color, 0) + 1
        return out


@dataclass
class PetriNet:
    """Static net structure.

    ``op_time[color][op]`` and ``op_machine[color][op]`` give the processing
    time and machine of the operation a colored token stands for; timed
    transitions take their delay from the front token through ``op_time``.
    Controllable transitions must occupy ids ``0 .. n_controllable - 1`` so a
    guard mask can be indexed by transition id.
    """

    places: list[Place]
    transitions: list[Transition]
    initial: Marking
    op_time: Sequence[Sequence[int]] = ()
    op_machine: Sequence[Sequence[int]] = ()
    consumers: list = field(init=False, repr=False)
    n_controllable: int = field(init=False)

    def __post_init__(self):
        n_places = len(self.places)
        for i, p in enumerate(self.places):
            if p.id != i:
                raise StructureError(f"place at index {i} has id {p.id}")
        consumers: list[list[int]] = [[] for _ in range(n_places)]
        for i, t in enumerate(self.transitions):
            if t.id != i:
                raise StructureError(f"transition at index {i} has id {t.id}")
            if not t.inputs:
                raise StructureError(f"transition {i} has no input place")
            for p in t.inputs + t.outputs:
                if not 0 <= p < n_places:
                    raise StructureError(f"transition {i} references unknown place {p}")
            if t.timed:
                busy = [p for p in t.inputs if self.places[p].kind is PlaceKind.MACHINE_BUSY]
                if len(busy) != 1:
                    raise StructureError(f"timed transition {i} needs exactly one machine_busy input")
            for p in set(t.inputs):
                consumers[p].append(i)
        self.consumers = [tuple(c) for c in consumers]
        ctrl = [t.id for t in self.transitions if t.kind is TransitionKind.CONTROLLABLE]
        if ctrl != list(range(len(ctrl))):
            raise StructureError("controllable transitions must take the lowest ids")
        self.n_controllable = len(ctrl)
        check_marking(self, self.initial)

    @property
    def n_places(self) -> int:
        return len(self.places)

    @property
    def n_transitions(self) -> int:
        return len(self.transitions)

    def delay(self, token: Token) -> int:
        return self.op_time[token.color][token.op]

    def is_terminal(self, marking: Marking) -> bool:
        """All colored tokens sit in completed places."""
        for place, q in zip(self.places, marking.tokens):
            if place.kind is not PlaceKind.COMPLETED:
                for tok in q:
                    if tok.color is not None:
                        return False
        return True


def check_marking(net: PetriNet, marking: Marking) -> None:
    if len(marking.tokens) != net.n_places:
        raise StructureError(
            f"marking has {len(marking.tokens)} places, net has {net.n_places}")


def _transition(net: PetriNet, tid: int) -> Transition:
    if not 0 <= tid < net.n_transitions:
        raise StructureError(f"unknown transition id {tid}")
    return net.transitions[tid]


def is_enabled(net: PetriNet, marking: Marking, tid: int) -> bool:
    t = _transition(net, tid)
    toks = marking.tokens
    for p in t.inputs:
        if not toks[p]:
            return False
    front = toks[t.inputs[0]][0]
    if t.color_filter is not None and front.color != t.color_filter:
        return False
    if t.machine_filter is not None:
        if front.color is None or net.op_machine[front.color][front.op] != t.machine_filter:
            return False
    if t.timed:
        return marking.clock - front.entry_time >= net.delay(front)
    return True


def enabled_transitions(net: PetriNet, marking: Marking) -> set[int]:
    check_marking(net, marking)
    return {t.id for t in net.transitions if is_enabled(net, marking, t.id)}


def _fire_inplace(net: PetriNet, marking: Marking, t: Transition) -> Token:
    toks = marking.tokens
    primary = toks[t.inputs[0]][0]
    for p in t.inputs:
        toks[p] = toks[p][1:]
    clock = marking.clock
    for i, p in enumerate(t.outputs):
        if i == 0 and primary.color is not None:
            tok = Token(primary.color, primary.op, clock)
        else:
            tok = Token(None, None, clock)
        toks[p] = toks[p] + (tok,)
    return primary


def fire(net: PetriNet, marking: Marking, tid: int) -> Marking:
    check_marking(net, marking)
    if not is_enabled(net, marking, tid):
        raise NotEnabledError(f"transition {tid} ({net.transitions[tid].name}) is not enabled")
    out = marking.copy()
    _fire_inplace(net, out, net.transitions[tid])
    return out


def next_event_time(net: PetriNet, marking: Marking) -> Optional[int]:
    """Earliest time at which a timed transition becomes enabled, or None."""
    best = None
    toks = marking.tokens
    for t in net.transitions:
        if not t.timed:
            continue
        ready_at = _timed_ready_at(net, toks, t)
        if ready_at is not None and (best is None or ready_at < best):
            best = ready_at
    return best


def _timed_ready_at(net: PetriNet, toks, t: Transition) -> Optional[int]:
    for p in t.inputs:
        if not toks[p]:
            return None
    front = toks[t.inputs[0]][0]
    if t.color_filter is not None and front.color != t.color_filter:
        return None
    return front.entry_time + net.delay(front)


def advance_clock(net: PetriNet, marking: Marking) -> tuple[Marking, bool]:
    """Jump to the next completion event.  Returns ``(marking, stalled)``."""
    check_marking(net, marking)
    when = next_event_time(net, marking)
    if when is None:
        return marking.copy(), True
    out = marking.copy()
    out.clock = max(marking.clock, when)
    return out, False


def guard_mask(net: PetriNet, marking: Marking) -> np.ndarray:
    mask = np.zeros(net.n_controllable, dtype=bool)
    for tid in range(net.n_controllable):
        mask[tid] = is_enabled(net, marking, tid)
    return mask


def run_autonomous(net: PetriNet, marking: Marking) -> Marking:
    sim = NetSimulator(net, marking)
    sim.settle()
    return sim.marking


class NetSimulator:
    """Mutable simulation state with incremental enabling.

    Produces exactly the same trajectories as the free functions (firing
    order is ascending transition id) but only re-evaluates transitions whose
    input places changed.
    """

    def __init__(self, net: PetriNet, marking: Optional[Marking] = None):
        self.net = net
        self.marking = (marking if marking is not None else net.initial).copy()
        check_marking(net, self.marking)
        self.ctrl_enabled: set[int] = set()
        self.auto_enabled: set[int] = set()
        self.events: list[tuple[int, int, Token]] = []  # (clock, tid, primary token)
        self.record = True
        n = net.n_places
        # color-filtered consumers are indexed by color so a busy place with
        # many per-job completion transitions stays cheap to update
        self._plain = [[] for _ in range(n)]
        self._by_color: list[dict] = [{} for _ in range(n)]
        for p, cons in enumerate(net.consumers):
            for tid in cons:
                t = net.transitions[tid]
                if t.color_filter is not None and t.inputs[0] == p:
                    self._by_color[p].setdefault(t.color_filter, []).append(tid)
                else:
                    self._plain[p].append(tid)
        self._timed_places = sorted({
            t.inputs[0] for t in net.transitions if t.timed})
        self._completed = [pl.kind is PlaceKind.COMPLETED for pl in net.places]
        colored = [tok.color is not None for q in self.marking.tokens for tok in q]
        self._n_colored = sum(colored)
        self._n_tokens = len(colored)
        self._n_done = sum(
            1 for p, q in enumerate(self.marking.tokens) if self._completed[p]
            for tok in q if tok.color is not None)
        self._recheck(range(net.n_transitions))

    def copy(self) -> "NetSimulator":
        other = object.__new__(NetSimulator)
        other.__dict__.update(self.__dict__)
        other.marking = self.marking.copy()
        other.ctrl_enabled = set(self.ctrl_enabled)
        other.auto_enabled = set(self.auto_enabled)
        other.events = list(self.events)
        return other

    @property
    def clock(self) -> int:
        return self.marking.clock

    def _recheck(self, tids) -> None:
        net, marking = self.net, self.marking
        nc = net.n_controllable
        for tid in tids:
            target = self.ctrl_enabled if tid < nc else self.auto_enabled
            if is_enabled(net, marking, tid):
                target.add(tid)
            else:
                target.discard(tid)

    def _fronts(self, places) -> list:
        toks = self.marking.tokens
        return [toks[p][0].color if toks[p] else None for p in places]

    def _affected(self, places, old_fronts) -> set[int]:
        toks = self.marking.tokens
        out: set[int] = set()
        for p, old in zip(places, old_fronts):
            out.update(self._plain[p])
            by_color = self._by_color[p]
            if by_color:
                out.update(by_color.get(old, ()))
                if toks[p]:
                    out.update(by_color.get(toks[p][0].color, ()))
        return out

    def is_enabled(self, tid: int) -> bool:
        return tid in self.ctrl_enabled or tid in self.auto_enabled

    def fire(self, tid: int) -> Token:
        t = _transition(self.net, tid)
        if not self.is_enabled(tid):
            raise NotEnabledError(f"transition {tid} ({t.name}) is not enabled")
        touched = t.inputs + t.outputs
        before = self._fronts(touched)
        primary = _fire_inplace(self.net, self.marking, t)
        self._n_tokens += len(t.outputs) - len(t.inputs)
        if primary.color is not None:
            self._n_done += (bool(t.outputs) and self._completed[t.outputs[0]]) - self._completed[t.inputs[0]]
        if self.record:
            self.events.append((self.marking.clock, tid, primary))
        self._recheck(self._affected(touched, before))
        return primary

    def advance(self) -> bool:
        """Advance the clock to the next completion event; False if stalled."""
        toks = self.marking.tokens
        net = self.net
        best = None
        for p in self._timed_places:
            if toks[p]:
                front = toks[p][0]
                when = front.entry_time + net.delay(front)
                if best is None or when < best:
                    best = when
        if best is None:
            return False
        if best > self.marking.clock:
            self.marking.clock = best
            fronts = self._fronts(self._timed_places)
            self._recheck(self._affected(self._timed_places, fronts))
        return True

    def settle(self) -> None:
        """Fire autonomous transitions and advance time until a decision is
        needed or the net is terminal (or stalled)."""
        limit = self.net.n_transitions * max(1, self._n_tokens)
        same_clock = 0
        while True:
            while self.auto_enabled:
                self.fire(min(self.auto_enabled))
                same_clock += 1
                if same_clock > limit:
                    raise LivelockError(
                        f"{same_clock} firings at clock {self.clock} without time progress")
            if self.ctrl_enabled or self.terminal():
                return
            before = self.marking.clock
            if not self.advance():
                return
            if self.marking.clock > before:
                same_clock = 0
            elif not self.auto_enabled:
                return

    def guard_mask(self) -> np.ndarray:
        mask = np.zeros(self.net.n_controllable, dtype=bool)
        if self.ctrl_enabled:
            mask[list(self.ctrl_enabled)] = True
        return mask

    def terminal(self) -> bool:
        return self._n_done == self._n_colored


def to_dot(net: PetriNet, marking: Optional[Marking] = None, name: str = "net") -> str:
    """Graphviz rendering: places as circles labelled with token counts,
    transitions as bars, controllable transitions double-bordered."""
    marking = marking if marking is not None else net.initial
    lines = [f"digraph {name} {{", "  rankdir=TB;", f'  label="clock={marking.clock}";']
    for p in net.places:
        n = len(marking.tokens[p.id])
        lines.append(f'  p{p.id} [shape=circle, label="{p.name}\\n{n}"];')
    for t in net.transitions:
        periph = 2 if t.kind is TransitionKind.CONTROLLABLE else 1
        style = "filled" if t.timed else "solid"
        lines.append(
            f'  t{t.id} [shape=box, height=0.1, width=0.6, peripheries={periph}, '
            f'style={style}, label="{t.name}"];')
        for p in t.inputs:
            lines.append(f"  p{p} -> t{t.id};")
        for p in t.outputs:
            lines.append(f"  t{t.id} -> p{p};")
    lines.append("}")
    return "\n".join(lines) + "\n"
