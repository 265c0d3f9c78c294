"""Latent trait learning: pooled context encoder plus a latent-conditioned AIRL reward.

The encoder summarises a pool of same-driver segments into a Gaussian over a
small latent z.  A reward f(s,a,s',z) = g(s,a,z) + gamma*h(s',z) - h(s,z) and
the policy pi(a|s,z) form the discriminator D = exp(f) / (exp(f) + pi).
Training alternates PPO generator rounds with joint discriminator/encoder
updates on four losses: the adversarial cross-entropy, a mutual-information
bound on generated trajectories, a label contrastive term and a unit-Gaussian
prior term.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cognitive import AIAction, DriverProfile, HumanAction
from .dataset import ACTION_HZ, FEATURE_EXTRA, Dataset, PooledBatch, pooled_batches, step_features
from .env import HMIwayEnv, ScenarioConfig
from .nn import MLP, Adam, LSTMEncoder, load_checkpoint, load_optimizers, save_checkpoint
from .ppo import PPOConfig, PolicyNet, collect_rollouts, compute_advantages, ppo_update

log = logging.getLogger(__name__)

MODES = ("unsupervised", "driver_id", "preference")
LOSS_WEIGHTS = (1.0, 5.0, 10.0, 1e-4)
_LOG2PI = float(np.log(2.0 * np.pi))


class ContractError(ValueError):
    pass


class TrainingAborted(FloatingPointError):
    pass


@dataclass
class TraitConfig:
    latent_dim: int = 2
    hidden: int = 128
    pool_size: int = 8
    window: float = 20.0
    gamma: float = 0.99
    margin: float = 1.0
    weights: tuple = LOSS_WEIGHTS
    disc_lr: float = 5e-4
    disc_updates: int = 2
    gen_lr: float = 1e-2
    gen_steps: int = 500
    budget: int = 100_000
    pools_per_round: int = 8
    labeled_pools_per_round: int = 8
    reward_hidden: int = 32
    policy_hidden: int = 32
    ent_coef: float = 0.01
    # a long-memory forget gate lets the final state summarise the whole window
    forget_bias: float = 3.0
    mode: str = "driver_id"
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown supervision mode {self.mode!r}; expected one of {MODES}")
        if self.latent_dim < 1 or self.pool_size < 1 or self.gen_steps < 1:
            raise ValueError("latent_dim, pool_size and gen_steps must be positive")
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != 4:
            raise ValueError("four loss weights expected")

    @property
    def window_steps(self) -> int:
        return int(round(self.window * ACTION_HZ))


@dataclass
class LatentTrait:
    mu: np.ndarray
    log_sigma: np.ndarray
    z: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)


@dataclass
class LossReport:
    L1: float
    L2: float
    L3: float
    L4: float
    weights: tuple = LOSS_WEIGHTS
    notes: list = field(default_factory=list)

    @property
    def total(self) -> float:
        w = self.weights
        return w[0] * self.L1 + w[1] * self.L2 + w[2] * self.L3 + w[3] * self.L4

    def as_dict(self) -> dict:
        return {"L1": self.L1, "L2": self.L2, "L3": self.L3, "L4": self.L4, "total": self.total}


class RewardNets:
    """Base reward g(s,a,z) and shaping potential h(s,z)."""

    def __init__(self, obs_dim: int, n_actions: int, latent_dim: int, hidden: int = 32,
                 gamma: float = 0.99, rng: np.random.Generator | None = None):
        self.obs_dim, self.n_actions, self.latent_dim = obs_dim, n_actions, latent_dim
        self.gamma = gamma
        self.g = MLP([obs_dim + n_actions + latent_dim, hidden, hidden, 1], rng=rng)
        self.h = MLP([obs_dim + latent_dim, hidden, 1], rng=rng)

    def _onehot(self, a):
        out = np.zeros((len(a), self.n_actions))
        out[np.arange(len(a)), a] = 1.0
        return out

    def forward(self, s, a, s2, z, done=None):
        s, s2, z = np.atleast_2d(s), np.atleast_2d(s2), np.atleast_2d(z)
        a = np.atleast_1d(np.asarray(a, dtype=np.int64))
        cont = np.ones(len(a)) if done is None else 1.0 - np.asarray(done, dtype=np.float64)
        gv, gc = self.g.forward(np.concatenate([s, self._onehot(a), z], axis=1))
        h0, hc0 = self.h.forward(np.concatenate([s, z], axis=1))
        h1, hc1 = self.h.forward(np.concatenate([s2, z], axis=1))
        f = gv[:, 0] + self.gamma * cont * h1[:, 0] - h0[:, 0]
        return f, {"g": gc, "h0": hc0, "h1": hc1, "cont": cont}

    def f(self, s, a, s2, z, done=None) -> np.ndarray:
        return self.forward(s, a, s2, z, done)[0]

    def g_value(self, s, a, z) -> np.ndarray:
        s, z = np.atleast_2d(s), np.atleast_2d(z)
        a = np.atleast_1d(np.asarray(a, dtype=np.int64))
        return self.g(np.concatenate([s, self._onehot(a), z], axis=1))[:, 0]

    def h_value(self, s, z) -> np.ndarray:
        s, z = np.atleast_2d(s), np.atleast_2d(z)
        return self.h(np.concatenate([s, z], axis=1))[:, 0]

    def backward(self, cache, grad_f):
        """Returns (g grad, h grad, grad wrt z) for upstream ``grad_f`` per tuple."""
        gf = np.asarray(grad_f, dtype=np.float64)[:, None]
        gg, gin = self.g.backward(cache["g"], gf)
        hg1, hin1 = self.h.backward(cache["h1"], gf * self.gamma * cache["cont"][:, None])
        hg0, hin0 = self.h.backward(cache["h0"], -gf)
        L = self.latent_dim
        dz = gin[:, -L:] + hin1[:, -L:] + hin0[:, -L:]
        return gg, hg0 + hg1, dz

    def touch(self):
        self.g.touch()
        self.h.touch()


def policy_log_prob(policy: PolicyNet, s, a, z) -> np.ndarray:
    s, z = np.atleast_2d(s), np.atleast_2d(z)
    a = np.atleast_1d(np.asarray(a, dtype=np.int64))
    lp = policy.log_probs(np.concatenate([s, z], axis=1))
    return lp[np.arange(len(a)), a]


def discriminator_logit(f, log_pi) -> np.ndarray:
    log_pi = np.asarray(log_pi, dtype=np.float64)
    if np.any(np.isneginf(log_pi)):
        raise ContractError("policy assigns zero probability to an observed action")
    return np.asarray(f, dtype=np.float64) - log_pi


def discriminator_prob(s, a, s2, z, nets: RewardNets, policy: PolicyNet, done=None) -> np.ndarray:
    """D = exp(f) / (exp(f) + pi(a|s,z)), evaluated as a logistic of f - log pi."""
    logit = discriminator_logit(nets.f(s, a, s2, z, done), policy_log_prob(policy, s, a, z))
    return np.exp(-np.logaddexp(0.0, -logit))


def kl_to_standard_normal(mu, log_sigma) -> np.ndarray:
    mu, ls = np.asarray(mu), np.asarray(log_sigma)
    return 0.5 * np.sum(mu * mu + np.exp(2 * ls) - 1.0 - 2.0 * ls, axis=-1)


def contrastive_loss(z: np.ndarray, labels, margin: float = 1.0):
    """Summed pair loss and its gradient wrt ``z``; pairs with a ``None`` label are skipped."""
    z = np.asarray(z, dtype=np.float64)
    idx = [k for k, y in enumerate(labels) if y is not None]
    grad = np.zeros_like(z)
    pairs = [(j, k) for n, j in enumerate(idx) for k in idx[n + 1:]]
    if not pairs:
        return 0.0, grad, 0
    total = 0.0
    for j, k in pairs:
        diff = z[j] - z[k]
        d = float(np.sqrt(diff @ diff))
        if labels[j] == labels[k]:
            total += d * d
            gj = 2.0 * diff
        else:
            gap = margin - d
            if gap <= 0.0:
                continue
            total += gap * gap
            gj = -2.0 * gap * diff / max(d, 1e-12)
        grad[j] += gj
        grad[k] -= gj
    return total, grad, len(pairs)


# encoder helpers

def encode_pools(encoder: LSTMEncoder, pools: np.ndarray):
    """Encode stacked pools ``(P, M, T, D)``: run each member, average hidden states, apply heads."""
    P, M, T, D = pools.shape
    h, rcache = encoder.run(pools.reshape(P * M, T, D))
    pooled = h.reshape(P, M, -1).mean(axis=1)
    mu, ls, hcache = encoder.heads(pooled)
    return mu, ls, {"run": rcache, "heads": hcache, "P": P, "M": M}


def encode_pools_backward(encoder: LSTMEncoder, cache, g_mu, g_ls) -> np.ndarray:
    grad, dpooled = encoder.heads_backward(cache["heads"], g_mu, g_ls)
    M = cache["M"]
    dh = np.repeat(dpooled / M, M, axis=0)
    return grad + encoder.run_backward(cache["run"], dh)


def encode_pooled(batch: PooledBatch, encoder: LSTMEncoder,
                  rng: np.random.Generator | None = None) -> LatentTrait:
    segs = np.asarray(batch.segments)
    ids = batch.labels.get("member_ids")
    if ids is not None and len(set(ids)) > 1:
        raise ContractError("pool mixes driver ids")
    mu, ls, _ = encode_pools(encoder, segs[None])
    mu, ls = mu[0], ls[0]
    eps = rng.standard_normal(mu.shape) if rng is not None else np.zeros_like(mu)
    return LatentTrait(mu, ls, mu + np.exp(ls) * eps)


def _pad(seqs: list[np.ndarray]):
    T = max(len(s) for s in seqs)
    D = seqs[0].shape[1]
    out = np.zeros((len(seqs), T, D))
    mask = np.zeros((len(seqs), T))
    for k, s in enumerate(seqs):
        out[k, :len(s)] = s
        mask[k, :len(s)] = 1.0
    return out, mask


@dataclass
class GeneratedBatch:
    """Policy rollouts used as the negative class and for the information term."""

    s: np.ndarray
    a: np.ndarray
    s2: np.ndarray
    done: np.ndarray
    z: np.ndarray
    sequences: list            # per episode (T_k, feature_dim) encoder inputs
    seq_z: np.ndarray          # conditioning z per episode


class TraitModel:
    def __init__(self, obs_dim: int, config: TraitConfig | None = None, seed: int = 0):
        self.config = cfg = config or TraitConfig()
        self.obs_dim = obs_dim
        self.n_actions = len(HumanAction)
        rng = np.random.default_rng(seed)
        self.encoder = LSTMEncoder(obs_dim + FEATURE_EXTRA, cfg.hidden, cfg.latent_dim, rng=rng,
                                   forget_bias=cfg.forget_bias)
        self.rewards = RewardNets(obs_dim, self.n_actions, cfg.latent_dim, cfg.reward_hidden,
                                  cfg.gamma, rng=rng)
        self.policy = PolicyNet(obs_dim + cfg.latent_dim, self.n_actions, cfg.policy_hidden, rng=rng)
        self.opts = {
            "encoder": Adam(self.encoder.n_params, lr=cfg.disc_lr),
            "g": Adam(self.rewards.g.n_params, lr=cfg.disc_lr),
            "h": Adam(self.rewards.h.n_params, lr=cfg.disc_lr),
        }
        self.round = 0
        self.history: list[dict] = []

    def modules(self) -> dict:
        return {"encoder": self.encoder, "g": self.rewards.g, "h": self.rewards.h,
                "pi": self.policy.pi, "v": self.policy.v}

    def optimizers(self) -> dict:
        out = dict(self.opts)
        if self.policy.pi_opt is not None:
            out["pi"] = self.policy.pi_opt
            out["v"] = self.policy.v_opt
        return out

    def save(self, path, meta: dict | None = None) -> Path:
        m = {"config": _config_dict(self.config), "obs_dim": self.obs_dim, "round": self.round,
             "history": self.history, **(meta or {})}
        return save_checkpoint(path, self.modules(), m, self.optimizers())

    @classmethod
    def load(cls, path) -> TraitModel:
        mods, meta = load_checkpoint(path)
        cfg = meta["config"]
        cfg["weights"] = tuple(cfg["weights"])
        model = cls(meta["obs_dim"], TraitConfig(**cfg))
        for name, m in model.modules().items():
            m.set_params(mods[name].params)
        opts = load_optimizers(path)
        for k in ("encoder", "g", "h"):
            if k in opts:
                model.opts[k] = opts[k]
        if "pi" in opts:
            model.policy.pi_opt, model.policy.v_opt = opts["pi"], opts["v"]
        model.round = meta["round"]
        model.history = meta.get("history", [])
        return model


def _config_dict(cfg: TraitConfig) -> dict:
    d = asdict(cfg)
    d["weights"] = list(cfg.weights)
    return d


def _expert_tuples(pools: np.ndarray, obs_dim: int):
    """(s, a, s') from consecutive steps of every pool member, grouped by pool."""
    P, M, T, _ = pools.shape
    s = pools[:, :, :-1, :obs_dim].reshape(P, -1, obs_dim)
    s2 = pools[:, :, 1:, :obs_dim].reshape(P, -1, obs_dim)
    a = pools[:, :, :-1, obs_dim:obs_dim + len(HumanAction)].argmax(axis=-1).reshape(P, -1)
    return s, a, s2


def _pool_labels(batches: list[PooledBatch], mode: str) -> list:
    labels = []
    for b in batches:
        if mode == "unsupervised" or not b.labels.get("labeled", False):
            labels.append(None)
        elif mode == "driver_id":
            labels.append(b.driver_id)
        else:
            labels.append(b.labels.get("preference"))
    return labels


def loss_and_grads(model: TraitModel, expert: list[PooledBatch], gen: GeneratedBatch,
                   mode: str, rng: np.random.Generator, need_grad: bool = True):
    """All four losses on one batch; gradients for encoder, g and h when ``need_grad``."""
    cfg = model.config
    if not expert or gen is None or len(gen.a) == 0:
        raise ContractError("both expert and generated samples are required")
    enc, nets, pol = model.encoder, model.rewards, model.policy
    pools = np.stack([b.segments for b in expert])
    P, M, T, _ = pools.shape
    mu, ls, ecache = encode_pools(enc, pools)
    eps = rng.standard_normal(mu.shape)
    sig = np.exp(ls)
    z = mu + sig * eps
    notes = []

    # adversarial term
    s_e, a_e, s2_e = _expert_tuples(pools, model.obs_dim)
    n_per = s_e.shape[1]
    z_e = np.repeat(z, n_per, axis=0)
    s_e, a_e, s2_e = s_e.reshape(-1, model.obs_dim), a_e.reshape(-1), s2_e.reshape(-1, model.obs_dim)
    f_e, fc_e = nets.forward(s_e, a_e, s2_e, z_e)
    l_e = discriminator_logit(f_e, policy_log_prob(pol, s_e, a_e, z_e))
    f_g, fc_g = nets.forward(gen.s, gen.a, gen.s2, gen.z, gen.done)
    l_g = discriminator_logit(f_g, policy_log_prob(pol, gen.s, gen.a, gen.z))
    L1 = float(np.mean(np.logaddexp(0.0, -l_e)) + np.mean(np.logaddexp(0.0, l_g)))

    # information term on generated episodes, conditioning z held fixed
    seqs, mask = _pad(gen.sequences)
    hq, qrun = enc.run(seqs, mask)
    mu_q, ls_q, qheads = enc.heads(hq)
    sq = np.exp(ls_q)
    r = (gen.seq_z - mu_q) / sq
    L2 = float(np.mean(np.sum(ls_q + 0.5 * r * r + 0.5 * _LOG2PI, axis=1)))

    labels = _pool_labels(expert, mode)
    if mode == "unsupervised":
        L3, gz3 = 0.0, np.zeros_like(mu)
    else:
        # on the pooled means: a hinge on sampled z is noise-dominated and rewards wider sigma
        L3, gz3, n_pairs = contrastive_loss(mu, labels, cfg.margin)
        if sum(y is not None for y in labels) < 2:
            notes.append("fewer than two labeled pools; contrastive term skipped")

    L4 = float(np.mean(kl_to_standard_normal(mu, ls)))
    report = LossReport(L1, L2, L3, L4, cfg.weights, notes)
    if not need_grad:
        return report, None
    if not np.isfinite(report.total):
        raise TrainingAborted(f"non-finite loss {report.as_dict()}")

    w1, w2, w3, w4 = cfg.weights
    ne, ng = len(l_e), len(l_g)
    d_le = -w1 * np.exp(-np.logaddexp(0.0, l_e)) / ne      # -sigmoid(-l)
    d_lg = w1 * np.exp(-np.logaddexp(0.0, -l_g)) / ng      # sigmoid(l)
    gg_e, gh_e, dz_e = nets.backward(fc_e, d_le)
    gg_g, gh_g, _ = nets.backward(fc_g, d_lg)
    gz = dz_e.reshape(P, n_per, -1).sum(axis=1)
    g_mu = gz + w3 * gz3 + w4 * mu / P
    g_ls = gz * sig * eps + w4 * (np.exp(2 * ls) - 1.0) / P
    enc_grad = encode_pools_backward(enc, ecache, g_mu, g_ls)

    K = len(gen.sequences)
    gq_mu = -w2 * r / sq / K
    gq_ls = w2 * (1.0 - r * r) / K
    qgrad, dhq = enc.heads_backward(qheads, gq_mu, gq_ls)
    enc_grad = enc_grad + qgrad + enc.run_backward(qrun, dhq)
    grads = {"encoder": enc_grad, "g": gg_e + gg_g, "h": gh_e + gh_g}
    return report, grads


def compute_losses(model: TraitModel, expert: list[PooledBatch], gen: GeneratedBatch,
                   mode: str, rng: np.random.Generator) -> LossReport:
    return loss_and_grads(model, expert, gen, mode, rng, need_grad=False)[0]


def discriminator_update(model: TraitModel, expert: list[PooledBatch], gen: GeneratedBatch,
                         rng: np.random.Generator, n_updates: int | None = None,
                         mode: str | None = None) -> LossReport:
    """Gradient steps on encoder, g and h jointly; returns the last pre-step report."""
    n = model.config.disc_updates if n_updates is None else n_updates
    mode = mode or model.config.mode
    report = None
    for _ in range(n):
        report, grads = loss_and_grads(model, expert, gen, mode, rng)
        for k, bad in grads.items():
            if not np.all(np.isfinite(bad)):
                raise TrainingAborted(f"non-finite gradient for {k}; losses {report.as_dict()}")
        model.opts["encoder"].step(model.encoder.params, grads["encoder"])
        model.opts["g"].step(model.rewards.g.params, grads["g"])
        model.opts["h"].step(model.rewards.h.params, grads["h"])
        model.encoder.touch()
        model.rewards.touch()
    return report


class GeneratorTask:
    """Environment view for the trait-conditioned policy; rewarded by the learned f."""

    def __init__(self, model: TraitModel, config: ScenarioConfig | None = None,
                 reward_fn=None):
        self.model = model
        self.config = config
        self.envs: dict[int, HMIwayEnv] = {}
        self.queue: list[tuple[DriverProfile, np.ndarray]] = []
        self._k = 0
        self.obs_dim = model.obs_dim + model.config.latent_dim
        self.n_actions = len(HumanAction)
        self.reward_fn = reward_fn
        self._env = None
        self._z = None
        self._obs = None

    def assign(self, items: list[tuple[DriverProfile, np.ndarray]]) -> None:
        self.queue = list(items)
        self._k = 0

    def reset(self, seed=None):
        prof, z = self.queue[self._k % len(self.queue)]
        self._k += 1
        env = self.envs.get(prof.driver_id)
        if env is None:
            env = self.envs[prof.driver_id] = HMIwayEnv(self.config, prof)
        self._env, self._z = env, np.asarray(z, dtype=np.float64)
        self._obs = env.reset(seed)[0]
        return np.concatenate([self._obs, self._z])

    def step(self, a):
        (obs, _), rb, done, info = self._env.step(a, AIAction.NO_ALERT)
        applied = info["applied"]
        if self.reward_fn is not None:
            r = float(self.reward_fn(self._obs, applied, obs, self._z, done))
        else:
            r = float(self.model.rewards.f(self._obs, [applied], obs, self._z, [float(done)])[0])
        info.update(s=self._obs, s2=obs, z=self._z)
        self._obs = obs
        return np.concatenate([obs, self._z]), r, done, info


def _generated_batch(buf, obs_dim: int) -> GeneratedBatch:
    infos = buf.infos
    s = np.array([i["s"] for i in infos])
    s2 = np.array([i["s2"] for i in infos])
    a = np.array([i["applied"] for i in infos], dtype=np.int64)
    z = np.array([i["z"] for i in infos])
    done = np.array([float(i["crash"] or i["road_end"]) for i in infos])
    seqs, seq_z = [], []
    start = 0
    ends = list(np.flatnonzero(buf.dones) + 1)
    if not ends or ends[-1] != len(infos):
        ends.append(len(infos))
    for end in ends:
        seqs.append(step_features(s[start:end], a[start:end]))
        seq_z.append(z[start])
        start = end
    return GeneratedBatch(s, a, s2, done, z, seqs, np.array(seq_z))


def generator_update(model: TraitModel, task: GeneratorTask, steps: int, seed: int,
                     ppo: PPOConfig | None = None):
    """Collect ``steps`` rollouts under the frozen reward and take one PPO update."""
    cfg = model.config
    ppo = ppo or PPOConfig(lr=cfg.gen_lr, ent_coef=cfg.ent_coef, gamma=cfg.gamma,
                           minibatch=min(256, steps))
    ss = np.random.SeedSequence(seed)
    roll_ss, upd_ss = ss.spawn(2)
    buf = collect_rollouts(task, model.policy, steps, seed=int(roll_ss.generate_state(1)[0]))
    compute_advantages(buf, ppo.gamma, ppo.lam)
    stats = ppo_update(buf, model.policy, ppo, np.random.default_rng(upd_ss))
    stats["mean_f"] = float(np.mean(buf.rewards))
    return _generated_batch(buf, model.obs_dim), stats


def _round_pools(dataset: Dataset, cfg: TraitConfig, rng, cache: dict) -> list[PooledBatch]:
    report: list = []
    pools = pooled_batches(dataset, cfg.pool_size, cfg.window, rng, report=report,
                           feature_cache=cache)[:cfg.pools_per_round]
    if cfg.labeled_pools_per_round:
        lab = pooled_batches(dataset, cfg.pool_size, cfg.window, rng, labeled_only=True,
                             report=report, feature_cache=cache)
        pools += lab[:cfg.labeled_pools_per_round]
    if not pools:
        raise ContractError("dataset yields no pools; check pool size and window")
    return pools


def train(dataset: Dataset, config: TraitConfig | None = None, seed: int = 0,
          env_config: ScenarioConfig | None = None, out_dir=None, resume: bool = False,
          max_rounds: int | None = None, callback=None) -> TraitModel:
    """Alternate generator and discriminator rounds until the step budget is used.

    With ``out_dir`` the model is checkpointed to ``latest.npz`` after every
    round (and ``round_XXXXX.npz`` every ``checkpoint_every`` rounds);
    ``resume`` continues from ``latest.npz`` and reproduces the uninterrupted
    run exactly.
    """
    cfg = config or TraitConfig()
    obs_dim = dataset.env_spec.get("driver_obs_dim") or dataset.trajectories[0].obs.shape[1]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume and out is not None and (out / "latest.npz").exists():
        model = TraitModel.load(out / "latest.npz")
        log.info("resuming trait training at round %d", model.round)
    else:
        model = TraitModel(obs_dim, cfg, seed)
    cfg = model.config
    n_rounds = max(1, cfg.budget // cfg.gen_steps)
    task = GeneratorTask(model, env_config)
    cache: dict = {}
    stop = n_rounds if max_rounds is None else min(n_rounds, model.round + max_rounds)
    while model.round < stop:
        k = model.round
        rss = np.random.SeedSequence([seed, k])
        pool_ss, z_ss, gen_ss, disc_ss = rss.spawn(4)
        pools = _round_pools(dataset, cfg, np.random.default_rng(pool_ss), cache)
        zrng = np.random.default_rng(z_ss)
        items = []
        for b in pools:
            lt = encode_pooled(b, model.encoder, zrng)
            items.append((dataset.profile(b.driver_id), lt.z))
        task.assign(items)
        gen, gstats = generator_update(model, task, cfg.gen_steps,
                                       int(gen_ss.generate_state(1)[0]))
        report = discriminator_update(model, pools, gen, np.random.default_rng(disc_ss))
        model.round += 1
        row = {"round": model.round, "env_steps": model.round * cfg.gen_steps,
               **report.as_dict(), "gen_entropy": gstats["entropy"], "mean_f": gstats["mean_f"]}
        model.history.append(row)
        if callback is not None:
            callback(row)
        if out is not None:
            model.save(out / "latest.npz")
            if model.round % cfg.checkpoint_every == 0 or model.round == n_rounds:
                model.save(out / f"round_{model.round:05d}.npz")
    return model


# embeddings and cluster statistics

def embed_driver(dataset: Dataset, driver_id: int, encoder: LSTMEncoder, n_pools: int,
                 rng: np.random.Generator, pool_size: int = 8,
                 window: float = 20.0) -> list[LatentTrait]:
    """Encode ``n_pools`` random pools of one driver's segments."""
    out: list[LatentTrait] = []
    cache: dict = {}
    while len(out) < n_pools:
        pools = pooled_batches(dataset, pool_size, window, rng, feature_cache=cache,
                               driver_ids={driver_id})
        if not pools:
            raise ContractError(f"driver {driver_id} has too little data for pools of {pool_size}")
        need = n_pools - len(out)
        chosen = pools[:need]
        mu, ls, _ = encode_pools(encoder, np.stack([b.segments for b in chosen]))
        eps = rng.standard_normal(mu.shape)
        z = mu + np.exp(ls) * eps
        out += [LatentTrait(mu[k], ls[k], z[k]) for k in range(len(chosen))]
    return out


def gaussian_kl_diag(mu0, var0, mu1, var1) -> float:
    """KL(N(mu0, diag var0) || N(mu1, diag var1))."""
    mu0, var0, mu1, var1 = map(np.asarray, (mu0, var0, mu1, var1))
    d = mu1 - mu0
    return float(0.5 * np.sum(var0 / var1 + d * d / var1 - 1.0 + np.log(var1 / var0)))


def pairwise_cluster_kl(embeddings: dict, floor: float = 1e-8, report: list | None = None):
    """Symmetrized KL between diagonal Gaussians fitted per driver.

    Returns ``(names, matrix, average over distinct pairs)``.
    """
    names = sorted(embeddings)
    stats = {}
    for n in names:
        x = np.atleast_2d(np.asarray(embeddings[n], dtype=np.float64))
        if len(x) < 2:
            raise ContractError(f"{n}: need at least two embeddings")
        var = x.var(axis=0)
        if np.any(var < floor):
            msg = f"{n}: degenerate variance floored at {floor:g}"
            log.warning(msg)
            if report is not None:
                report.append(msg)
            var = np.maximum(var, floor)
        stats[n] = (x.mean(axis=0), var)
    K = len(names)
    mat = np.zeros((K, K))
    for i in range(K):
        for j in range(i + 1, K):
            (m0, v0), (m1, v1) = stats[names[i]], stats[names[j]]
            mat[i, j] = mat[j, i] = gaussian_kl_diag(m0, v0, m1, v1) + gaussian_kl_diag(m1, v1, m0, v0)
    avg = float(mat[np.triu_indices(K, 1)].mean()) if K > 1 else 0.0
    return names, mat, avg


def export_embeddings_csv(path, embeddings: dict[str, list[LatentTrait]]) -> Path:
    path = Path(path)
    dim = next((len(v[0].mu) for v in embeddings.values() if v), 2)
    cols = [f"{k}_{j}" for k in ("mu", "log_sigma", "z") for j in range(dim)]
    rows = [",".join(["driver", *cols])]
    for name in sorted(embeddings):
        for lt in embeddings[name]:
            vals = [*lt.mu, *lt.log_sigma, *lt.z]
            rows.append(",".join([name] + [repr(float(v)) for v in vals]))
    path.write_text("\n".join(rows) + "\n")
    return path
