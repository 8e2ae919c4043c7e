"""Actor-critic PPO in plain numpy.

Actor and critic are separate tanh MLPs.  Gradients of the full clipped loss
are derived by hand (see ``ppo_loss``) and checked against finite
differences in the test-suite.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

CHECKPOINT_VERSION = 1
GREEDY = "greedy"
SAMPLE = "sample"
LOG_HEADER = ["update_idx", "steps", "mean_ep_reward", "loss", "policy_loss",
              "value_loss", "entropy", "clip_frac", "greedy_makespan"]


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg: str, log: Optional[list] = None, diagnostics: Optional[dict] = None):
        super().__init__(msg)
        self.log = log or []
        self.diagnostics = diagnostics or {}


class CheckpointError(ValueError):
    pass


@dataclass
class PpoConfig:
    gamma: float = 1.0
    lam: float = 0.95
    clip_eps: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    lr: float = 3e-4
    rollout_length: int = 2048  # env decisions per update
    epochs: int = 10
    minibatch_size: int = 256
    total_steps: int = 200_000  # env decisions
    selection: str = SAMPLE  # behaviour policy during collection
    hidden: tuple = (64, 64)
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    keep_best: bool = True  # return the params with the best greedy makespan seen
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("gamma and lam must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.selection not in (GREEDY, SAMPLE):
            raise ValueError(f"selection must be {GREEDY!r} or {SAMPLE!r}")
        self.hidden = tuple(int(h) for h in self.hidden)

    @classmethod
    def from_dict(cls, d: dict) -> "PpoConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ------------------------------------------------------------------ networks

class PolicyParams(dict):
    """Flat mapping ``name -> array``: ``actor.{i}.W``/``.b`` and
    ``critic.{i}.W``/``.b``, layer i mapping activations of layer i-1."""

    @property
    def obs_dim(self) -> int:
        return self["actor.0.W"].shape[0]

    @property
    def n_actions(self) -> int:
        return self[f"actor.{self.depth - 1}.W"].shape[1]

    @property
    def depth(self) -> int:
        return sum(1 for k in self if k.startswith("actor.") and k.endswith(".W"))

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.items()})

    def finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values())


def _orthogonal(rng, shape, gain):
    a = rng.standard_normal(shape)
    q, r = np.linalg.qr(a if shape[0] >= shape[1] else a.T)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return gain * q[:shape[0], :shape[1]]


def init_params(obs_dim: int, n_actions: int, hidden: Sequence[int] = (64, 64),
                seed=None) -> PolicyParams:
    rng = np.random.default_rng(seed)
    params = PolicyParams()
    for net, out, head_gain in (("actor", n_actions, 0.01), ("critic", 1, 1.0)):
        widths = [obs_dim, *hidden, out]
        for i in range(len(widths) - 1):
            gain = head_gain if i == len(widths) - 2 else math.sqrt(2)
            params[f"{net}.{i}.W"] = _orthogonal(rng, (widths[i], widths[i + 1]), gain)
            params[f"{net}.{i}.b"] = np.zeros(widths[i + 1])
    return params


def _mlp_forward(params, net, x):
    acts = [x]
    n = sum(1 for k in params if k.startswith(net + ".") and k.endswith(".W"))
    for i in range(n):
        z = acts[-1] @ params[f"{net}.{i}.W"] + params[f"{net}.{i}.b"]
        acts.append(np.tanh(z) if i < n - 1 else z)
    return acts


def _mlp_backward(params, net, acts, dout, grads):
    n = len(acts) - 1
    d = dout
    for i in reversed(range(n)):
        grads[f"{net}.{i}.W"] = acts[i].T @ d
        grads[f"{net}.{i}.b"] = d.sum(axis=0)
        if i > 0:
            d = (d @ params[f"{net}.{i}.W"].T) * (1.0 - acts[i] ** 2)


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log-probabilities with masked entries at -inf."""
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("every action is masked")
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    return z - lse


def forward(params: PolicyParams, obs: np.ndarray, mask: Optional[np.ndarray] = None
            ) -> tuple[np.ndarray, float]:
    """Action probabilities (masked entries exactly 0) and state value for a
    single observation."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (params.obs_dim,):
        raise ValueError(f"observation width {obs.shape} does not match network input {params.obs_dim}")
    logits = _mlp_forward(params, "actor", obs[None])[-1]
    if mask is None:
        mask = np.ones(logits.shape[1], dtype=bool)
    probs = np.exp(masked_log_softmax(logits, np.asarray(mask)[None]))[0]
    value = float(_mlp_forward(params, "critic", obs[None])[-1][0, 0])
    return probs, value


def select_action(probs: np.ndarray, mode: str = GREEDY, rng=None) -> int:
    if mode == GREEDY:
        return int(np.argmax(probs))
    if mode != SAMPLE:
        raise ValueError(f"unknown selection mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng()
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    if idx >= len(probs) or probs[idx] == 0:
        idx = int(np.flatnonzero(probs)[-1])
    return idx


def entropy(probs: np.ndarray) -> float:
    p = probs[probs > 0]
    return float(-(p * np.log(p)).sum())


# ----------------------------------------------------------------- estimators

@dataclass
class Advantage:
    advantages: np.ndarray
    returns: np.ndarray


def compute_gae(rewards, values, dones, gamma: float, lam: float,
                last_value: float = 0.0) -> Advantage:
    """``dones[t]`` marks that the episode ended after step t (bootstrap 0);
    ``last_value`` bootstraps a rollout cut mid-episode."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError("rewards, values and dones must have equal length")
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in reversed(range(len(rewards))):
        if dones[t]:
            next_value, running = 0.0, 0.0
        else:
            next_value = values[t + 1] if t + 1 < len(values) else last_value
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return Advantage(adv, adv + values)


# ----------------------------------------------------------------------- loss

def ppo_loss(params: PolicyParams, batch: dict, cfg: PpoConfig, with_grad: bool = True):
    """Clipped-surrogate loss ``-L_clip + c1 * mse(V, R) - c2 * H``.

    ``batch`` holds ``obs`` (B, d), ``actions`` (B,), ``old_logp`` (B,),
    ``advantages`` (B,), ``returns`` (B,) and ``masks`` (B, A).  Advantages
    are used as given (normalize before calling).
    """
    obs = np.asarray(batch["obs"], dtype=float)
    actions = np.asarray(batch["actions"], dtype=int)
    adv = np.asarray(batch["advantages"], dtype=float)
    returns = np.asarray(batch["returns"], dtype=float)
    masks = np.asarray(batch["masks"], dtype=bool)
    B = len(actions)
    if B == 0:
        raise ValueError("empty batch")
    rows = np.arange(B)

    a_acts = _mlp_forward(params, "actor", obs)
    logp_all = masked_log_softmax(a_acts[-1], masks)
    probs = np.exp(logp_all)
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - np.asarray(batch["old_logp"], dtype=float))
    eps = cfg.clip_eps
    clipped = np.clip(ratio, 1 - eps, 1 + eps)
    s1, s2 = ratio * adv, clipped * adv
    policy_loss = -np.minimum(s1, s2).mean()

    safe_logp = np.where(masks, logp_all, 0.0)
    ent = -(probs * safe_logp).sum(axis=1)

    c_acts = _mlp_forward(params, "critic", obs)
    values = c_acts[-1][:, 0]
    value_loss = ((values - returns) ** 2).mean()
    loss = policy_loss + cfg.vf_coef * value_loss - cfg.ent_coef * ent.mean()

    diag = {"loss": float(loss), "policy_loss": float(policy_loss),
            "value_loss": float(value_loss), "entropy": float(ent.mean()),
            "clip_frac": float(np.mean(np.abs(ratio - 1) > eps)),
            "approx_kl": float(np.mean(np.asarray(batch["old_logp"]) - logp))}
    if not np.isfinite(loss):
        raise TrainingDivergedError("non-finite PPO loss", diagnostics=diag)
    if not with_grad:
        return float(loss), diag, None

    # d(-min(s1, s2))/dlogp_a: the surrogate passes gradient only where the
    # unclipped term is the active minimum
    active = s1 <= s2
    dlogp = -(adv * ratio * active) / B
    onehot = np.zeros_like(probs)
    onehot[rows, actions] = 1.0
    dlogits = dlogp[:, None] * (onehot - probs)
    # dH/dz_j = -p_j (log p_j + H)
    dlogits += (cfg.ent_coef / B) * probs * (safe_logp + ent[:, None])
    dvalues = (2.0 * cfg.vf_coef / B) * (values - returns)

    grads: dict = {}
    _mlp_backward(params, "actor", a_acts, dlogits, grads)
    _mlp_backward(params, "critic", c_acts, dvalues[:, None], grads)
    return float(loss), diag, grads


# ------------------------------------------------------------------ optimizer

class Adam:
    def __init__(self, params: PolicyParams, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-5):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: PolicyParams, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ------------------------------------------------------------------- training

def evaluate(params: PolicyParams, env, mode: str = GREEDY, rng=None) -> int:
    """One full episode with the given selection mode; returns the makespan."""
    obs = env.reset()
    done = False
    while not done:
        probs, _ = forward(params, obs, env.action_mask())
        res = env.step(select_action(probs, mode, rng))
        obs, done = res.observation, res.done
    return env.makespan


@dataclass
class TrainResult:
    params: PolicyParams
    log: list
    best_makespan: Optional[int] = None
    final_params: Optional[PolicyParams] = None

    def log_csv(self) -> str:
        return log_to_csv(self.log)


def log_to_csv(log: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for row in log:
        w.writerow([_fmt(row[k]) for k in LOG_HEADER])
    return buf.getvalue()


def _fmt(x):
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def train(env_factory: Callable[[], object], cfg: Optional[PpoConfig] = None,
          callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Collect commitment-aggregated transitions and run PPO updates until
    ``cfg.total_steps`` env decisions have been taken.

    After every update the greedy policy is rolled out once; with
    ``keep_best`` the returned params are those with the lowest greedy
    makespan seen (ties keep the later, more trained params).
    """
    cfg = cfg if cfg is not None else PpoConfig()
    rng = np.random.default_rng(cfg.seed)
    env = env_factory()
    eval_env = env_factory()
    params = init_params(env.obs_dim, env.n_actions, cfg.hidden, rng)
    opt = Adam(params, cfg.lr)
    log: list = []
    best_ms, best_params = None, params.copy()

    obs = env.reset()
    ep_return = 0.0
    decisions = 0
    update = 0
    while decisions < cfg.total_steps:
        buf = {k: [] for k in ("obs", "actions", "old_logp", "values", "rewards", "dones", "masks")}
        finished: list = []
        start = decisions
        while decisions - start < cfg.rollout_length and decisions < cfg.total_steps:
            mask = env.action_mask()
            probs, value = forward(params, obs, mask)
            a = select_action(probs, cfg.selection, rng)
            res = env.step(a)
            buf["obs"].append(obs)
            buf["actions"].append(a)
            buf["old_logp"].append(math.log(probs[a]))
            buf["values"].append(value)
            buf["rewards"].append(res.reward)
            buf["dones"].append(res.done)
            buf["masks"].append(mask)
            decisions += res.info["env_actions_fired"]
            ep_return += res.reward
            if res.done:
                finished.append(ep_return)
                ep_return = 0.0
                obs = env.reset()
            else:
                obs = res.observation
        last_value = 0.0 if buf["dones"][-1] else forward(params, obs, env.action_mask())[1]
        est = compute_gae(buf["rewards"], buf["values"], buf["dones"], cfg.gamma, cfg.lam, last_value)
        data = {"obs": np.asarray(buf["obs"]), "actions": np.asarray(buf["actions"]),
                "old_logp": np.asarray(buf["old_logp"]), "masks": np.asarray(buf["masks"]),
                "advantages": est.advantages, "returns": est.returns}
        n = len(data["actions"])
        stats = {k: [] for k in ("loss", "policy_loss", "value_loss", "entropy", "clip_frac")}
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            for lo in range(0, n, cfg.minibatch_size):
                idx = order[lo:lo + cfg.minibatch_size]
                mb = {k: v[idx] for k, v in data.items()}
                if cfg.normalize_advantages and len(idx) > 1:
                    a = mb["advantages"]
                    mb["advantages"] = (a - a.mean()) / (a.std() + 1e-8)
                try:
                    _, diag, grads = ppo_loss(params, mb, cfg)
                except TrainingDivergedError as err:
                    err.log = log
                    raise
                clip_grad_norm(grads, cfg.max_grad_norm)
                opt.step(params, grads)
                for k in stats:
                    stats[k].append(diag[k])
        if not params.finite():
            raise TrainingDivergedError("parameters became non-finite", log=log)
        ms = evaluate(params, eval_env, GREEDY)
        if best_ms is None or ms <= best_ms:
            best_ms, best_params = ms, params.copy()
        row = {"update_idx": update, "steps": decisions,
               "mean_ep_reward": float(np.mean(finished)) if finished else float("nan"),
               **{k: float(np.mean(v)) for k, v in stats.items()},
               "greedy_makespan": ms}
        log.append(row)
        if callback is not None:
            callback(row)
        update += 1
    final = params
    chosen = best_params if cfg.keep_best else final
    return TrainResult(chosen, log, best_ms, final)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: PolicyParams, meta: Optional[dict] = None) -> None:
    header = {"version": CHECKPOINT_VERSION, "obs_dim": params.obs_dim,
              "n_actions": params.n_actions, **(meta or {})}
    arrays = {k: v for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True, default=str)), **arrays)


def load_checkpoint(path, obs_dim: Optional[int] = None, n_actions: Optional[int] = None
                    ) -> tuple[PolicyParams, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "__header__" not in data:
            raise CheckpointError(f"{path}: missing checkpoint header")
        header = json.loads(str(data["__header__"]))
        params = PolicyParams({k: data[k].astype(float) for k in data.files if k != "__header__"})
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    if obs_dim is not None and header["obs_dim"] != obs_dim:
        raise CheckpointError(
            f"checkpoint expects observation width {header['obs_dim']}, instance gives {obs_dim}")
    if n_actions is not None and header["n_actions"] != n_actions:
        raise CheckpointError(
            f"checkpoint has {header['n_actions']} actions, environment has {n_actions}")
    return params, header
