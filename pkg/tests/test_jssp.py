import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from petrihh.jssp import (IncompleteScheduleError, InstanceError, JsspInstance,
                          ParseError, Schedule, instance_to_net, list_instances,
                          load_instance, makespan, parse_taillard, random_instance,
                          serialize_taillard, simulate_actions, validate_schedule)
from petrihh.petri import PlaceKind, guard_mask


def test_parse_minimal(one_by_one):
    assert one_by_one.n_jobs == 1 and one_by_one.n_machines == 1
    assert one_by_one.ops(0) == [(0, 5)]


def test_parse_two_by_two(two_by_two):
    assert two_by_two.ops(0) == [(0, 3), (1, 2)]
    assert two_by_two.ops(1) == [(1, 2), (0, 4)]


def test_parse_ta01():
    inst = load_instance("ta01")
    assert (inst.n_jobs, inst.n_machines, inst.n_ops) == (15, 15, 225)
    assert all(inst.seq_length(j) == 15 for j in range(15))


def test_bundled_instances_complete():
    names = list_instances()
    assert names[0] == "ta01" and names[-1] == "ta80" and len(names) == 80
    sizes = {n: load_instance(n).size for n in ("ta11", "ta21", "ta31", "ta41", "ta51", "ta61", "ta71")}
    assert sizes == {"ta11": "20x15", "ta21": "20x20", "ta31": "30x15", "ta41": "30x20",
                     "ta51": "50x15", "ta61": "50x20", "ta71": "100x20"}


def test_parse_comments_and_labels():
    text = "# a comment\n1 1 99 7\nTimes\n5\nMachines\n1\n"
    assert parse_taillard(text).ops(0) == [(0, 5)]


@pytest.mark.parametrize("text, line", [
    ("2 2\n3 2\n2\n1 2\n2 1", 3),          # short row
    ("2 2\n3 0\n2 4\n1 2\n2 1", 2),        # zero time
    ("2 2\n3 2\n2 4\n1 3\n2 1", 4),        # machine out of range
    ("2 2\n3 2\n2 4\n1 1\n2 1", 4),        # duplicate machine
    ("2 2\n3 x\n2 4\n1 2\n2 1", 2),        # not an integer
    ("2 2\n3 2\n2 4\n1 2\n2 1\n7 7", 6),   # trailing content
])
def test_parse_errors_carry_line(text, line):
    with pytest.raises(ParseError) as err:
        parse_taillard(text)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_parse_lenient_allows_trailing():
    inst = parse_taillard("1 1\n5\n1\nextra", strict=False)
    assert inst.n_ops == 1


def test_parse_empty():
    with pytest.raises(ParseError):
        parse_taillard("# nothing\n")


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6))
def test_round_trip(n, m, seed):
    inst = random_instance(n, m, seed)
    back = parse_taillard(serialize_taillard(inst))
    assert back.machines == inst.machines and back.times == inst.times


def test_instance_invariants():
    with pytest.raises(InstanceError):
        JsspInstance.from_ops([[(0, 0)]])
    with pytest.raises(InstanceError):
        JsspInstance.from_ops([[(2, 1)]], n_machines=2)
    with pytest.raises(InstanceError):
        JsspInstance.from_ops([])


def test_random_instance_ranges():
    inst = random_instance(6, 5, seed=3)
    assert all(1 <= p <= 9 for row in inst.times for p in row)
    assert all(sorted(row) == list(range(5)) for row in inst.machines)
    assert random_instance(6, 5, seed=3) == inst


def test_net_structure(two_by_two):
    net = instance_to_net(two_by_two)
    assert net.n_controllable == 4
    queues = [p.id for p in net.places if p.kind is PlaceKind.JOB_QUEUE]
    assert [len(net.initial.tokens[p]) for p in queues] == [2, 2]
    assert guard_mask(net, net.initial).sum() == 2


def test_controllable_count_is_distinct_pairs():
    # job 0 visits machine 0 only; job 1 visits both
    inst = JsspInstance.from_ops([[(0, 2)], [(1, 1), (0, 3)]])
    assert instance_to_net(inst).n_controllable == 3


def test_net_one_by_one_makespan(one_by_one):
    schedule, clock, _ = simulate_actions(one_by_one, lambda sim: min(sim.ctrl_enabled))
    assert clock == 5 and makespan(schedule) == 5


def test_validate_examples(one_by_one):
    rep = validate_schedule(one_by_one, Schedule.from_starts(one_by_one, {(0, 0): 0}))
    assert rep.feasible and rep.makespan == 5
    inst = JsspInstance.from_ops([[(0, 3)], [(0, 3)]])
    rep = validate_schedule(inst, Schedule.from_starts(inst, {(0, 0): 0, (1, 0): 1}))
    assert len(rep.overlap_violations) == 1 and not rep.feasible
    assert rep.overlap_violations[0][2] == 0


def test_validate_precedence(two_by_two):
    starts = {(0, 0): 0, (0, 1): 1, (1, 0): 0, (1, 1): 3}
    rep = validate_schedule(two_by_two, Schedule.from_starts(two_by_two, starts))
    assert rep.precedence_violations == [(0, 0)]


def test_validate_incomplete(two_by_two):
    with pytest.raises(IncompleteScheduleError):
        validate_schedule(two_by_two, Schedule.from_starts(two_by_two, {(0, 0): 0}))


def test_makespan_examples():
    assert makespan(Schedule({(0, 0): (0, 0, 5)})) == 5
    assert makespan(Schedule({(0, 0): (0, 0, 3), (1, 0): (1, 0, 7)})) == 7
    with pytest.raises(ValueError):
        makespan(Schedule())


def test_schedule_csv(two_by_two):
    starts = {(0, 0): 0, (0, 1): 3, (1, 0): 0, (1, 1): 3}
    text = Schedule.from_starts(two_by_two, starts).to_csv()
    lines = text.splitlines()
    assert lines[0] == "job,op,machine,start,end"
    assert lines[1:] == ["0,0,0,0,3", "0,1,1,3,5", "1,0,1,0,2", "1,1,0,3,7"]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6))
def test_random_trajectories_are_feasible(n, m, seed):
    inst = random_instance(n, m, seed)
    rng = np.random.default_rng(seed)
    fired = []

    def choose(sim):
        t = int(rng.choice(sorted(sim.ctrl_enabled)))
        fired.append(t)
        return t

    schedule, clock, _ = simulate_actions(inst, choose)
    rep = validate_schedule(inst, schedule)
    assert rep.feasible
    assert makespan(schedule) == clock == rep.makespan
    assert len(fired) == inst.n_ops
