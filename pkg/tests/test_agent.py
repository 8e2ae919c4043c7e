import math

import numpy as np
import pytest

from oracles import central_difference, gae_series, max_rel_error
from petrihh.agent import (CheckpointError, PolicyParams, PpoConfig, TrainingDivergedError,
                           compute_gae, entropy, evaluate, forward, init_params,
                           load_checkpoint, masked_log_softmax, ppo_loss, save_checkpoint,
                           select_action, train)
from petrihh.env import FLAT, JsspEnv
from petrihh.heuristics import RULES, simulate_with_heuristic
from petrihh.jssp import random_instance


def zero_actor(obs_dim, n_actions, bias=None):
    p = init_params(obs_dim, n_actions, hidden=(4,), seed=0)
    p["actor.1.W"][:] = 0.0
    p["actor.1.b"][:] = 0.0 if bias is None else bias
    return p


# ----------------------------------------------------------- distribution

def test_uniform_logits():
    probs, value = forward(zero_actor(3, 7), np.ones(3))
    assert np.allclose(probs, 1 / 7, atol=1e-15) and math.isfinite(value)


def test_single_bit_mask():
    mask = np.zeros(7, bool)
    mask[4] = True
    probs, _ = forward(init_params(3, 7, seed=1), np.ones(3), mask)
    assert probs[4] == 1.0 and probs.sum() == 1.0


def test_all_masked_raises():
    with pytest.raises(ValueError):
        forward(init_params(3, 7, seed=1), np.ones(3), np.zeros(7, bool))


def test_width_mismatch_raises():
    with pytest.raises(ValueError):
        forward(init_params(3, 7, seed=1), np.ones(4))


def test_probs_normalised_and_masked():
    rng = np.random.default_rng(0)
    for seed in range(50):
        p = init_params(5, 6, hidden=(8,), seed=seed)
        for k in p:
            p[k] = p[k] + rng.normal(0, 2, p[k].shape)
        mask = rng.random(6) < 0.5
        mask[rng.integers(6)] = True
        probs, _ = forward(p, rng.normal(size=5), mask)
        assert abs(probs.sum() - 1) < 1e-9
        assert np.all(probs[~mask] == 0.0)


def test_masked_log_softmax_minus_inf():
    out = masked_log_softmax(np.array([[1.0, 2.0, 3.0]]), np.array([[True, False, True]]))
    assert out[0, 1] == -np.inf


def test_greedy_selection():
    assert select_action(np.array([0.1, 0.7, 0.2]), "greedy") == 1
    assert select_action(np.array([0.4, 0.2, 0.4]), "greedy") == 0


def test_one_hot_sample():
    rng = np.random.default_rng(0)
    p = np.array([0.0, 0.0, 1.0, 0.0])
    assert all(select_action(p, "sample", rng) == 2 for _ in range(1000))


def test_zero_probability_never_sampled():
    rng = np.random.default_rng(1)
    p = np.array([0.5, 0.0, 0.5, 0.0])
    draws = {select_action(p, "sample", rng) for _ in range(5000)}
    assert draws == {0, 2}


def test_sampling_frequencies_within_three_sigma():
    rng = np.random.default_rng(123)
    p = np.array([0.05, 0.25, 0.1, 0.4, 0.2])
    n = 100_000
    counts = np.bincount([select_action(p, "sample", rng) for _ in range(n)], minlength=5)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_entropy_bounds():
    assert abs(entropy(np.full(7, 1 / 7)) - math.log(7)) < 1e-9
    assert entropy(np.array([0.0, 1.0])) == 0.0


# ----------------------------------------------------------------- GAE

def test_gae_lambda_zero_is_td():
    r, v = [0.5, -1.0, 2.0], [0.3, 0.1, -0.4]
    adv = compute_gae(r, v, [False, False, True], 0.9, 0.0).advantages
    td = [r[0] + 0.9 * v[1] - v[0], r[1] + 0.9 * v[2] - v[1], r[2] - v[2]]
    assert np.max(np.abs(adv - td)) <= 1e-12


def test_gae_monte_carlo_limit():
    r = [1.0, 0.0, -2.0, 3.0]
    est = compute_gae(r, [0.0] * 4, [False, False, False, True], 1.0, 1.0)
    assert np.max(np.abs(est.advantages - [2.0, 1.0, 1.0, 3.0])) <= 1e-12


def test_gae_matches_series():
    r, v = [0.2, -0.7, 1.3], [0.5, -0.25, 0.8]
    est = compute_gae(r, v, [False, False, True], 0.97, 0.9)
    assert np.max(np.abs(est.advantages - gae_series(r, v, 0.97, 0.9))) <= 1e-12
    assert np.allclose(est.returns, est.advantages + v, atol=1e-12)


def test_gae_resets_at_episode_boundary():
    est = compute_gae([1.0, 5.0], [0.0, 0.0], [True, True], 1.0, 1.0)
    assert est.advantages.tolist() == [1.0, 5.0]


def test_gae_bootstrap_mid_episode():
    est = compute_gae([0.0], [0.0], [False], 1.0, 1.0, last_value=2.5)
    assert est.advantages[0] == 2.5


def test_gae_length_mismatch():
    with pytest.raises(ValueError):
        compute_gae([1.0, 2.0], [0.0], [True, True], 1.0, 1.0)


# ------------------------------------------------------------------ loss

def toy_batch(params, rng, B=6, perturb=0.4, masked=True):
    d, A = params.obs_dim, params.n_actions
    obs = rng.normal(size=(B, d))
    masks = np.ones((B, A), bool)
    if masked and A > 2:
        masks[rng.random((B, A)) < 0.3] = False
        masks[np.arange(B), rng.integers(A, size=B)] = True
    probs = np.stack([forward(params, o, m)[0] for o, m in zip(obs, masks)])
    actions = np.array([rng.choice(np.flatnonzero(m)) for m in masks])
    old_logp = np.log(probs[np.arange(B), actions]) + rng.normal(0, perturb, B)
    return {"obs": obs, "actions": actions, "old_logp": old_logp, "masks": masks,
            "advantages": rng.normal(size=B), "returns": rng.normal(size=B)}


def test_on_policy_ratio_is_one():
    rng = np.random.default_rng(0)
    params = init_params(3, 4, hidden=(5,), seed=0)
    batch = toy_batch(params, rng, perturb=0.0)
    cfg = PpoConfig(vf_coef=0.0, ent_coef=0.0)
    loss, diag, _ = ppo_loss(params, batch, cfg, with_grad=False)
    assert diag["clip_frac"] == 0.0
    assert loss == pytest.approx(-batch["advantages"].mean(), abs=1e-12)


def test_clip_arithmetic():
    # one sample, logits from a zero net: pi(a) = 1/2, so old_logp sets the ratio
    params = zero_actor(1, 2)
    for k in list(params):
        if k.startswith("critic"):
            params[k][:] = 0.0
    batch = {"obs": np.zeros((1, 1)), "actions": np.array([0]), "masks": np.ones((1, 2), bool),
             "old_logp": np.array([math.log(0.5 / 1.5)]), "advantages": np.array([2.0]),
             "returns": np.array([0.0])}
    loss, diag, _ = ppo_loss(params, batch, PpoConfig(vf_coef=0.0, ent_coef=0.0))
    assert loss == pytest.approx(-1.2 * 2.0)
    assert diag["clip_frac"] == 1.0


@pytest.mark.parametrize("term, cfg", [
    ("policy", dict(vf_coef=0.0, ent_coef=0.0)),
    ("value", dict(vf_coef=0.7, ent_coef=0.0)),
    ("entropy", dict(vf_coef=0.0, ent_coef=0.3)),
])
def test_gradient_terms_match_finite_differences(term, cfg):
    rng = np.random.default_rng(7)
    worst = 0.0
    for seed in range(10):
        params = init_params(3, 4, hidden=(5,), seed=seed)
        batch = toy_batch(params, rng)
        c = PpoConfig(**cfg)
        if term != "policy":
            batch["advantages"] = np.zeros_like(batch["advantages"])
        _, _, grads = ppo_loss(params, batch, c)
        num = central_difference(lambda: ppo_loss(params, batch, c, with_grad=False)[0], params)
        keys = [k for k in num if np.abs(num[k]).max() > 0 or np.abs(grads[k]).max() > 0]
        assert keys
        worst = max(worst, max_rel_error({k: grads[k] for k in keys}, {k: num[k] for k in keys}))
    assert worst < 1e-4


def test_gradient_four_weight_net():
    # 2 inputs -> 2 logits with no hidden layer: four actor weights
    params = init_params(2, 2, hidden=(), seed=3)
    assert params["actor.0.W"].size == 4
    rng = np.random.default_rng(3)
    batch = toy_batch(params, rng, B=5, masked=False)
    cfg = PpoConfig()
    _, _, grads = ppo_loss(params, batch, cfg)
    num = central_difference(lambda: ppo_loss(params, batch, cfg, with_grad=False)[0], params)
    assert max_rel_error(grads, num) < 1e-4


def test_nan_loss_raises():
    params = init_params(2, 3, hidden=(4,), seed=0)
    rng = np.random.default_rng(0)
    batch = toy_batch(params, rng)
    batch["returns"][0] = np.nan
    with pytest.raises(TrainingDivergedError):
        ppo_loss(params, batch, PpoConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(gamma=1.5)
    with pytest.raises(ValueError):
        PpoConfig(clip_eps=0.0)
    assert PpoConfig.from_dict({"lr": 1e-3, "unknown": 1}).lr == 1e-3


# -------------------------------------------------------------- training

class Bandit:
    """Two contexts, two actions; the action equal to the context pays 1."""

    obs_dim, n_actions = 2, 2

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)
        self.context = 0
        self.makespan = None

    def action_mask(self):
        return np.ones(2, bool)

    def reset(self):
        self.context = int(self.rng.integers(2))
        return np.eye(2)[self.context]

    def step(self, a):
        from petrihh.env import StepResult
        r = 1.0 if a == self.context else 0.0
        self.makespan = 1.0 - r
        return StepResult(np.eye(2)[self.context], r, True, {"env_actions_fired": 1})


def test_bandit_learns_better_action():
    counter = iter(range(1000))
    cfg = PpoConfig(total_steps=20_000, rollout_length=512, minibatch_size=128,
                    hidden=(16,), keep_best=False, seed=0)
    result = train(lambda: Bandit(next(counter)), cfg)
    assert result.log[-1]["steps"] <= 20_000
    for c in (0, 1):
        probs, _ = forward(result.params, np.eye(2)[c])
        assert probs[c] > 0.99


def test_one_by_one_is_reward_invariant(one_by_one):
    cfg = PpoConfig(total_steps=300, rollout_length=100, minibatch_size=50, epochs=4,
                    hidden=(8, 8), seed=0)
    result = train(lambda: JsspEnv(one_by_one), cfg)
    rewards = {row["mean_ep_reward"] for row in result.log}
    assert rewards == {-1.0}
    assert all(math.isfinite(row["loss"]) for row in result.log)
    assert all(abs(row["entropy"] - math.log(7)) < 0.05 for row in result.log)


def test_training_is_deterministic():
    inst = random_instance(4, 3, seed=0)
    cfg = PpoConfig(total_steps=600, rollout_length=200, minibatch_size=32, epochs=2,
                    hidden=(8,), seed=3)
    a = train(lambda: JsspEnv(inst, commitment=2), cfg)
    b = train(lambda: JsspEnv(inst, commitment=2), cfg)
    assert a.log_csv() == b.log_csv()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_flat_mode_training_respects_mask():
    inst = random_instance(3, 3, seed=1)
    seen = []

    class Spy(JsspEnv):
        def step(self, action):
            seen.append(bool(self.action_mask()[action]))
            return super().step(action)

    cfg = PpoConfig(total_steps=200, rollout_length=100, minibatch_size=25, epochs=2,
                    hidden=(8,), seed=0)
    train(lambda: Spy(inst, mode=FLAT), cfg)
    assert seen and all(seen)


def test_constant_logit_policy_matches_heuristic():
    inst = random_instance(5, 4, seed=6)
    env = JsspEnv(inst, commitment=3)
    for rule in RULES:
        bias = np.zeros(7)
        bias[int(rule)] = 50.0
        params = zero_actor(env.obs_dim, 7, bias)
        ms = evaluate(params, env, "greedy")
        assert ms == simulate_with_heuristic(inst, rule)[1]
        assert ms == evaluate(params, env, "greedy")
        assert ms == evaluate(params, env, "sample", np.random.default_rng(0))


# ------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip(tmp_path):
    params = init_params(6, 7, hidden=(5, 5), seed=2)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, params, {"instance": "x"})
    back, header = load_checkpoint(path, obs_dim=6, n_actions=7)
    assert header["instance"] == "x" and isinstance(back, PolicyParams)
    assert set(back) == set(params)
    assert all(np.array_equal(back[k], params[k]) for k in params)


def test_checkpoint_rejects_width(tmp_path):
    path = tmp_path / "ck.npz"
    save_checkpoint(path, init_params(6, 7, seed=2))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, obs_dim=9)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, n_actions=3)
