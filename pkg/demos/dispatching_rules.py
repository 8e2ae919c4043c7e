"""
Seven dispatching rules on a Taillard instance
==============================================

"""

from petrihh.jssp import load_instance, validate_schedule
from petrihh.heuristics import RULES, simulate_with_heuristic
inst = load_instance("ta01")
print(inst.name, inst.size, inst.n_ops, "operations")

# every rule rolls the net out to completion; each schedule is checked
for rule in RULES:
    schedule, ms = simulate_with_heuristic(inst, rule)
    report = validate_schedule(inst, schedule)
    print(f"{rule.name:5s} {ms:5d}  feasible={report.feasible}")

# the next-operation SPT from textbooks behaves differently here
print("SPT (next op)", simulate_with_heuristic(inst, "SPT", textbook=True)[1])
