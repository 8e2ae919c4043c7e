"""
Walking a job shop through its Petri net
========================================

"""

# a 2-job, 2-machine instance in Taillard layout
from petrihh.jssp import parse_taillard, instance_to_net, extract_schedule
inst = parse_taillard("2 2\n3 2\n2 4\n1 2\n2 1", name="tiny")
net = instance_to_net(inst)
print(net.n_places, "places,", net.n_transitions, "transitions,",
      net.n_controllable, "controllable")

# the guard mask lists which select transitions may fire right now
from petrihh.petri import NetSimulator
sim = NetSimulator(net)
sim.settle()
print("initial mask:", sim.guard_mask().astype(int))

# fire the lowest enabled select each time and let the net run on its own
while not sim.terminal():
    tid = min(sim.ctrl_enabled)
    print(f"t={sim.clock:>2}  fire {net.transitions[tid].name}")
    sim.fire(tid)
    sim.settle()

schedule = extract_schedule(net, sim.events)
print("makespan", sim.clock)
print(schedule.to_csv())

# the net in Graphviz form, current marking included
from petrihh.petri import to_dot
print(to_dot(net, sim.marking)[:300], "...")
