"""
Training a rule-selecting PPO agent
===================================

A short run on a small random instance; pass a larger budget and a
Taillard instance for real experiments (see the CLI).
"""

import numpy as np
from petrihh.jssp import random_instance
from petrihh.env import JsspEnv
from petrihh.heuristics import heuristic_makespans
from petrihh.agent import PpoConfig, train, evaluate

inst = random_instance(8, 6, seed=4)
static = heuristic_makespans(inst)
print("single rules:", static)

# hyper mode: the action is a rule index, held for 3 decisions
cfg = PpoConfig(total_steps=20_000, rollout_length=512, minibatch_size=128, seed=0)
result = train(lambda: JsspEnv(inst, commitment=3), cfg,
               callback=lambda row: print(row["update_idx"], row["greedy_makespan"]))

env = JsspEnv(inst, commitment=3)
print("greedy makespan", evaluate(result.params, env, "greedy"),
      "best single rule", min(static.values()))
rng = np.random.default_rng(0)
print("sampled", [evaluate(result.params, env, "sample", rng) for _ in range(5)])
