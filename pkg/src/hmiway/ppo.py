"""PPO kernels: categorical policy/value networks, rollouts, GAE and the clipped update."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import MLP, Adam

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class PPOConfig:
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    gamma: float = 0.99
    lam: float = 0.95
    ent_coef: float = 0.01
    lr: float = 3e-4
    vf_lr: float = 1e-3
    max_kl: float | None = 0.05
    normalize_advantages: bool = True
    max_grad_norm: float | None = 0.5

    def __post_init__(self):
        if not 0.0 <= self.clip < 1.0:
            raise ValueError("clip ratio must lie in [0, 1)")
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.lam <= 1.0):
            raise ValueError("gamma and lambda must lie in (0, 1]")
        if self.epochs < 1 or self.minibatch < 1:
            raise ValueError("epochs and minibatch must be positive")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class PolicyNet:
    """Categorical policy head and a separate value head, each one 32-unit hidden layer."""

    def __init__(self, obs_dim: int, n_actions: int, hidden: int = 32,
                 rng: np.random.Generator | None = None, seed: int | None = 0):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.hidden = hidden
        self.pi = MLP([obs_dim, hidden, n_actions], rng=rng)
        # small final layer keeps the initial policy close to uniform
        self.pi.view("W1")[:] *= 0.01
        self.v = MLP([obs_dim, hidden, 1], rng=rng)
        self.pi_opt: Adam | None = None
        self.v_opt: Adam | None = None

    def log_probs(self, obs) -> np.ndarray:
        return log_softmax(self.pi(np.asarray(obs, dtype=np.float64)))

    def action_probs(self, obs) -> np.ndarray:
        return np.exp(self.log_probs(obs))

    def value(self, obs) -> np.ndarray:
        out = self.v(np.asarray(obs, dtype=np.float64))
        return out[..., 0]

    def act(self, obs, rng: np.random.Generator, greedy: bool = False):
        lp = self.log_probs(obs)
        if greedy:
            a = int(np.argmax(lp))
        else:
            a = int(rng.choice(self.n_actions, p=np.exp(lp)))
        return a, float(lp[a])

    def entropy(self, obs) -> np.ndarray:
        lp = self.log_probs(obs)
        return -(np.exp(lp) * lp).sum(axis=-1)

    def copy(self) -> PolicyNet:
        other = PolicyNet.__new__(PolicyNet)
        other.obs_dim, other.n_actions, other.hidden = self.obs_dim, self.n_actions, self.hidden
        other.pi = MLP(self.pi.sizes, self.pi.activation)
        other.pi.set_params(self.pi.params.copy())
        other.v = MLP(self.v.sizes, self.v.activation)
        other.v.set_params(self.v.params.copy())
        other.pi_opt = other.v_opt = None
        return other


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    actions: np.ndarray
    logps: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_value: float = 0.0
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    infos: list = field(default_factory=list)
    episode_returns: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)


def collect_rollouts(task, policy, n_steps: int, seed: int | None = None,
                     rng: np.random.Generator | None = None,
                     episode_seeds=None) -> RolloutBuffer:
    """Run ``policy`` in ``task`` for exactly ``n_steps`` transitions, auto-resetting.

    ``task`` follows ``reset(seed) -> obs`` / ``step(a) -> (obs, r, done, info)``.
    Episode seeds are drawn from ``seed`` unless ``episode_seeds`` is given.
    """
    if callable(task) and not hasattr(task, "step"):
        task = task()
    ss = np.random.SeedSequence(seed)
    act_ss, ep_ss = ss.spawn(2)
    rng = rng if rng is not None else np.random.default_rng(act_ss)
    if episode_seeds is None:
        ep_rng = np.random.default_rng(ep_ss)
        episode_seeds = iter(lambda: int(ep_rng.integers(2**31 - 1)), None)
    else:
        episode_seeds = iter(episode_seeds)
    obs_dim = policy.obs_dim
    obs_buf = np.zeros((n_steps, obs_dim))
    actions = np.zeros(n_steps, dtype=np.int64)
    logps = np.zeros(n_steps)
    rewards = np.zeros(n_steps)
    dones = np.zeros(n_steps, dtype=bool)
    infos = []
    ep_returns = []
    if n_steps == 0:
        return RolloutBuffer(obs_buf, actions, logps, rewards, np.zeros(0), dones)
    obs = task.reset(next(episode_seeds))
    ep_ret = 0.0
    for t in range(n_steps):
        obs_buf[t] = obs
        a, lp = policy.act(obs, rng)
        actions[t], logps[t] = a, lp
        try:
            obs, r, done, info = task.step(a)
        except Exception as exc:
            raise RuntimeError(f"environment failure at rollout step {t}: {exc}") from exc
        rewards[t] = r
        dones[t] = done
        infos.append(info)
        ep_ret += r
        if done:
            ep_returns.append(ep_ret)
            ep_ret = 0.0
            if t + 1 < n_steps:
                obs = task.reset(next(episode_seeds))
    values = policy.value(obs_buf)
    last_value = 0.0 if dones[-1] else float(policy.value(obs))
    return RolloutBuffer(obs_buf, actions, logps, rewards, values, dones, last_value,
                         infos=infos, episode_returns=ep_returns)


def compute_advantages(buf: RolloutBuffer, gamma: float, lam: float) -> RolloutBuffer:
    """GAE(lambda); ``done[t]`` cuts bootstrapping after step ``t``."""
    T = len(buf)
    adv = np.zeros(T)
    last = 0.0
    for t in reversed(range(T)):
        if buf.dones[t]:
            next_v, carry = 0.0, 0.0
        else:
            next_v = buf.last_value if t == T - 1 else buf.values[t + 1]
            carry = last
        delta = buf.rewards[t] + gamma * next_v - buf.values[t]
        last = delta + gamma * lam * carry
        adv[t] = last
    buf.advantages = adv
    buf.returns = adv + buf.values
    return buf


def ppo_gradients(policy: PolicyNet, obs, actions, old_logps, adv, clip: float, ent_coef: float):
    """Loss and policy-parameter gradient of the clipped surrogate with entropy bonus."""
    logits, cache = policy.pi.forward(obs)
    lp_all = log_softmax(logits)
    p = np.exp(lp_all)
    M = len(actions)
    idx = np.arange(M)
    lp = lp_all[idx, actions]
    ratio = np.exp(lp - old_logps)
    if clip == 0.0:
        # ratio pinned to 1: nothing moves, regardless of rounding in the ratio
        clipped = np.ones(M, dtype=bool)
    else:
        clipped = ((adv > 0) & (ratio >= 1.0 + clip)) | ((adv < 0) & (ratio <= 1.0 - clip))
    surr = np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)
    ent = -(p * lp_all).sum(axis=1)
    loss = -surr.mean() - ent_coef * ent.mean()
    if clip == 0.0:
        ent_coef = 0.0
    coef = np.where(clipped, 0.0, -ratio * adv)
    onehot = np.zeros_like(p)
    onehot[idx, actions] = 1.0
    g_logits = coef[:, None] * (onehot - p) + ent_coef * p * (lp_all + ent[:, None])
    g_logits /= M
    grad, _ = policy.pi.backward(cache, g_logits)
    stats = {"clip_frac": float(clipped.mean()), "entropy": float(ent.mean()),
             "approx_kl": float(np.mean(old_logps - lp))}
    return float(loss), grad, stats


def ppo_update(buf: RolloutBuffer, policy: PolicyNet, config: PPOConfig,
               rng: np.random.Generator) -> dict:
    if buf.advantages is None:
        raise ValueError("compute_advantages must run before ppo_update")
    if policy.pi_opt is None:
        policy.pi_opt = Adam(policy.pi.n_params, lr=config.lr, max_grad_norm=config.max_grad_norm)
        policy.v_opt = Adam(policy.v.n_params, lr=config.vf_lr, max_grad_norm=config.max_grad_norm)
    policy.pi_opt.lr = config.lr
    policy.v_opt.lr = config.vf_lr
    adv = buf.advantages
    if config.normalize_advantages and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    T = len(buf)
    stats = {"clip_frac": [], "entropy": [], "approx_kl": [], "policy_loss": [], "value_loss": []}
    epochs_run = 0
    early_stop = False
    for _ in range(config.epochs):
        order = rng.permutation(T)
        for start in range(0, T, config.minibatch):
            mb = order[start:start + config.minibatch]
            loss, grad, st = ppo_gradients(policy, buf.obs[mb], buf.actions[mb], buf.logps[mb],
                                           adv[mb], config.clip, config.ent_coef)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged("non-finite PPO loss or gradient")
            if np.any(grad):
                policy.pi_opt.step(policy.pi.params, grad)
                policy.pi.touch()
            v, vcache = policy.v.forward(buf.obs[mb])
            err = v[:, 0] - buf.returns[mb]
            vgrad, _ = policy.v.backward(vcache, (err / len(mb))[:, None])
            policy.v_opt.step(policy.v.params, vgrad)
            policy.v.touch()
            for k in ("clip_frac", "entropy", "approx_kl"):
                stats[k].append(st[k])
            stats["policy_loss"].append(loss)
            stats["value_loss"].append(float(0.5 * np.mean(err ** 2)))
        epochs_run += 1
        if config.max_kl is not None:
            kl = float(np.mean(buf.logps - policy.log_probs(buf.obs)[np.arange(T), buf.actions]))
            if kl > config.max_kl:
                early_stop = True
                log.debug("PPO early stop: KL %.4f > %.4f", kl, config.max_kl)
                break
    out = {k: float(np.mean(v)) if v else 0.0 for k, v in stats.items()}
    out.update(epochs=epochs_run, early_stopped=early_stop)
    return out


def train_ppo(task, policy: PolicyNet, config: PPOConfig, total_steps: int, n_steps: int = 2048,
              seed: int = 0, callback=None) -> list[dict]:
    """Alternate rollouts and PPO updates until ``total_steps`` transitions are used."""
    ss = np.random.SeedSequence(seed)
    history = []
    done_steps = 0
    k = 0
    while done_steps < total_steps:
        step_seed, upd_seed = ss.spawn(2)
        ss = step_seed.spawn(1)[0]
        n = min(n_steps, total_steps - done_steps)
        buf = collect_rollouts(task, policy, n, seed=int(step_seed.generate_state(1)[0]))
        compute_advantages(buf, config.gamma, config.lam)
        stats = ppo_update(buf, policy, config, np.random.default_rng(upd_seed))
        done_steps += n
        k += 1
        row = {"update": k, "steps": done_steps,
               "mean_return": float(np.mean(buf.episode_returns)) if buf.episode_returns else float("nan"),
               **stats}
        if buf.infos and "breakdown" in buf.infos[0]:
            br = np.array([i["breakdown"] for i in buf.infos])
            row["breakdown_mean"] = br.mean(axis=0).tolist()
        history.append(row)
        if callback is not None:
            callback(row)
    return history


def save_policy(path, policy: PolicyNet, meta: dict | None = None):
    from .nn import save_checkpoint

    info = {"kind": "policy", "obs_dim": policy.obs_dim, "n_actions": policy.n_actions,
            "hidden": policy.hidden, **(meta or {})}
    return save_checkpoint(path, {"pi": policy.pi, "v": policy.v}, info)


def load_policy(path) -> tuple[PolicyNet, dict]:
    from .nn import load_checkpoint

    mods, meta = load_checkpoint(path)
    if meta.get("kind") != "policy":
        raise ValueError(f"{path}: not a policy checkpoint")
    policy = PolicyNet(meta["obs_dim"], meta["n_actions"], meta["hidden"], seed=0)
    policy.pi.set_params(mods["pi"].params)
    policy.v.set_params(mods["v"].params)
    return policy, meta
