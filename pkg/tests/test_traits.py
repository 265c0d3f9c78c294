from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _fd import fd_grad, rel_error
from hmiway.dataset import PooledBatch, generate_dataset, step_features
from hmiway.env import ScenarioConfig
from hmiway.traits import (
    LOSS_WEIGHTS,
    ContractError,
    GeneratedBatch,
    GeneratorTask,
    LatentTrait,
    LossReport,
    RewardNets,
    TraitConfig,
    TraitModel,
    compute_losses,
    contrastive_loss,
    discriminator_logit,
    discriminator_prob,
    discriminator_update,
    embed_driver,
    encode_pooled,
    export_embeddings_csv,
    gaussian_kl_diag,
    generator_update,
    kl_to_standard_normal,
    loss_and_grads,
    pairwise_cluster_kl,
    policy_log_prob,
    train,
)

OBS = 3
TINY = TraitConfig(hidden=6, reward_hidden=5, policy_hidden=4, pool_size=2)


def _pool(rng, driver_id, M=2, T=4, labeled=True):
    segs = np.stack([step_features(rng.standard_normal((T, OBS)), rng.integers(5, size=T))
                     for _ in range(M)])
    return PooledBatch(segs, driver_id,
                       {"driver_id": driver_id, "labeled": labeled, "preference": "low"})


def _gen(rng, n=7, L=2):
    s, s2 = rng.standard_normal((n, OBS)), rng.standard_normal((n, OBS))
    a = rng.integers(5, size=n)
    z = np.repeat(rng.standard_normal((2, L)), [4, n - 4], axis=0)
    done = np.zeros(n)
    done[3] = 1.0
    seqs = [step_features(s[:4], a[:4]), step_features(s[4:], a[4:])]
    return GeneratedBatch(s, a, s2, done, z, seqs, z[[0, 4]])


def test_discriminator_balanced_when_f_equals_log_pi():
    rng = np.random.default_rng(0)
    m = TraitModel(OBS, TINY, seed=0)
    s, z = rng.standard_normal((5, OBS)), rng.standard_normal((5, 2))
    a = rng.integers(5, size=5)
    lp = policy_log_prob(m.policy, s, a, z)
    assert np.all(discriminator_logit(lp, lp) == 0.0)


def test_discriminator_matches_direct_formula():
    rng = np.random.default_rng(1)
    m = TraitModel(OBS, TINY, seed=1)
    s, s2, z = rng.standard_normal((4, OBS)), rng.standard_normal((4, OBS)), rng.standard_normal((4, 2))
    a = rng.integers(5, size=4)
    f = m.rewards.f(s, a, s2, z)
    pi = np.exp(policy_log_prob(m.policy, s, a, z))
    np.testing.assert_allclose(discriminator_prob(s, a, s2, z, m.rewards, m.policy),
                               np.exp(f) / (np.exp(f) + pi), rtol=1e-12)


def test_discriminator_limits_and_zero_pi():
    assert 1.0 - float(np.exp(-np.logaddexp(0.0, -discriminator_logit(800.0, -1.0)))) < 1e-12
    with pytest.raises(ContractError):
        discriminator_logit(0.0, -np.inf)


def test_reward_shaping_telescopes():
    rng = np.random.default_rng(2)
    nets = RewardNets(OBS, 5, 2, hidden=8, gamma=0.9, rng=rng)
    T = 12
    s = rng.standard_normal((T + 1, OBS))
    a = rng.integers(5, size=T)
    z = np.tile(rng.standard_normal(2), (T, 1))
    f = nets.f(s[:-1], a, s[1:], z)
    g = nets.g_value(s[:-1], a, z)
    disc = 0.9 ** np.arange(T)
    h = nets.h_value(s, np.tile(z[0], (T + 1, 1)))
    lhs = float(np.sum(disc * (f - g)))
    assert lhs == pytest.approx(0.9 ** T * h[-1] - h[0], abs=1e-12)


def test_l3_trivial_cases():
    z = np.array([[0.3, 0.1], [0.3, 0.1]])
    assert contrastive_loss(z, [1, 1])[0] == 0.0
    far = np.array([[0.0, 0.0], [2.0, 0.0]])
    assert contrastive_loss(far, [0, 1], margin=1.0)[0] == 0.0
    assert contrastive_loss(far, [None, 1])[2] == 0


def test_l3_is_summed_over_pairs():
    z = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.3]])
    # same (0,1): 0.25; cross (0,2): (1-0.3)^2; cross (1,2): (1-sqrt(.34))^2
    expected = 0.25 + 0.7 ** 2 + (1 - math.sqrt(0.34)) ** 2
    assert contrastive_loss(z, ["a", "a", "b"])[0] == pytest.approx(expected, abs=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_l3_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((5, 2)) * 0.6
    labels = list(rng.integers(3, size=5))
    _, g, _ = contrastive_loss(z, labels)
    num = np.zeros_like(z)
    for j in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[j] += 1e-6
        zm[j] -= 1e-6
        num[j] = (contrastive_loss(zp, labels)[0] - contrastive_loss(zm, labels)[0]) / 2e-6
    np.testing.assert_allclose(g, num, atol=1e-5)


def test_l4_zero_and_positive():
    assert kl_to_standard_normal(np.zeros(2), np.zeros(2)) == 0.0
    rng = np.random.default_rng(0)
    assert np.all(kl_to_standard_normal(rng.standard_normal((20, 2)), rng.standard_normal((20, 2))) > 0)


def test_weighted_total_bookkeeping():
    r = LossReport(1.5, 2.0, 0.25, 30.0, LOSS_WEIGHTS)
    assert r.total == 1.5 + 5.0 * 2.0 + 10.0 * 0.25 + 1e-4 * 30.0


def test_gaussian_kl_closed_form():
    assert gaussian_kl_diag([0, 0], [1, 1], [10, 0], [1, 1]) == pytest.approx(50.0)
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4000, 2))
    a = (a - a.mean(axis=0)) / a.std(axis=0)
    emb = {"A": a, "B": a + [10.0, 0.0], "C": a.copy()}
    names, mat, _ = pairwise_cluster_kl(emb)
    assert mat[names.index("A"), names.index("B")] == pytest.approx(100.0, rel=1e-12)
    assert mat[names.index("A"), names.index("C")] == 0.0


def test_cluster_kl_degenerate_floor():
    report = []
    pairwise_cluster_kl({"A": np.zeros((3, 2)), "B": np.ones((3, 2))}, report=report)
    assert len(report) == 2
    with pytest.raises(ContractError):
        pairwise_cluster_kl({"A": np.zeros((1, 2)), "B": np.ones((3, 2))})


@pytest.mark.parametrize("mode", ["driver_id", "unsupervised"])
@pytest.mark.parametrize("seed", [0, 1])
def test_loss_gradients_fd(mode, seed):
    rng = np.random.default_rng(seed)
    m = TraitModel(OBS, TINY, seed=seed)
    for mod in (m.encoder,):
        mod.view("Wmu")[:] = rng.uniform(-1, 1, mod.view("Wmu").shape)
        mod.view("Wls")[:] = rng.uniform(-0.3, 0.3, mod.view("Wls").shape)
        mod.touch()
    expert = [_pool(rng, d) for d in (0, 1, 0)]
    gen = _gen(rng)

    def loss():
        return compute_losses(m, expert, gen, mode, np.random.default_rng(99)).total

    _, grads = loss_and_grads(m, expert, gen, mode, np.random.default_rng(99))
    for key, mod in (("encoder", m.encoder), ("g", m.rewards.g), ("h", m.rewards.h)):
        touch = (lambda mod=mod: (mod.touch(), m.rewards.touch()))
        idx = np.sort(rng.choice(mod.n_params, min(60, mod.n_params), replace=False))
        assert rel_error(grads[key][idx], fd_grad(loss, mod.params, touch, idx)) < 1e-4, key


def test_unsupervised_has_no_l3():
    rng = np.random.default_rng(3)
    m = TraitModel(OBS, TINY, seed=3)
    rep = compute_losses(m, [_pool(rng, 0), _pool(rng, 1)], _gen(rng), "unsupervised", rng)
    assert rep.L3 == 0.0


def test_single_labeled_pool_reports_skip():
    rng = np.random.default_rng(3)
    m = TraitModel(OBS, TINY, seed=3)
    rep = compute_losses(m, [_pool(rng, 0), _pool(rng, 1, labeled=False)], _gen(rng), "driver_id", rng)
    assert rep.L3 == 0.0 and rep.notes


def test_losses_need_both_sources():
    m = TraitModel(OBS, TINY, seed=0)
    with pytest.raises(ContractError):
        compute_losses(m, [], _gen(np.random.default_rng(0)), "driver_id", np.random.default_rng(0))


def test_discriminator_updates_reduce_loss():
    rng = np.random.default_rng(4)
    m = TraitModel(OBS, TraitConfig(hidden=6, reward_hidden=5, policy_hidden=4, disc_lr=5e-3), seed=4)
    expert = [_pool(rng, d) for d in (0, 1, 0, 1)]
    gen = _gen(rng)
    first = compute_losses(m, expert, gen, "driver_id", np.random.default_rng(0)).total
    for k in range(50):
        discriminator_update(m, expert, gen, np.random.default_rng(0), n_updates=1)
    assert compute_losses(m, expert, gen, "driver_id", np.random.default_rng(0)).total < first


def test_zero_learning_rate_freezes_parameters():
    rng = np.random.default_rng(5)
    m = TraitModel(OBS, TraitConfig(hidden=6, reward_hidden=5, policy_hidden=4, disc_lr=0.0), seed=5)
    before = [mod.params.copy() for mod in (m.encoder, m.rewards.g, m.rewards.h)]
    discriminator_update(m, [_pool(rng, 0), _pool(rng, 1)], _gen(rng), rng)
    for b, mod in zip(before, (m.encoder, m.rewards.g, m.rewards.h)):
        np.testing.assert_array_equal(b, mod.params)


def test_encode_pooled_identical_members_and_contract():
    rng = np.random.default_rng(6)
    m = TraitModel(OBS, TINY, seed=6)
    b = _pool(rng, 0, M=1)
    twin = PooledBatch(np.concatenate([b.segments, b.segments]), 0)
    a1, a2 = encode_pooled(b, m.encoder), encode_pooled(twin, m.encoder)
    np.testing.assert_allclose(a1.mu, a2.mu, atol=1e-14)
    bad = PooledBatch(twin.segments, 0, {"member_ids": [0, 1]})
    with pytest.raises(ContractError):
        encode_pooled(bad, m.encoder)


def test_config_validation():
    with pytest.raises(ValueError):
        TraitConfig(mode="weird")
    with pytest.raises(ValueError):
        TraitConfig(weights=(1.0, 2.0))


SCEN = ScenarioConfig(episode_steps=20, max_vehicles=4)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(["Lisa", "Bart"], 200, seed=0, config=SCEN, labeled_fraction=0.5)


def _train_cfg(**kw):
    base = dict(hidden=8, reward_hidden=8, policy_hidden=8, pool_size=2, window=2.0,
                gen_steps=40, budget=200, pools_per_round=2, labeled_pools_per_round=2,
                checkpoint_every=2)
    base.update(kw)
    return TraitConfig(**base)


def test_entropy_only_generator_spreads_policy(tiny_data):
    m = TraitModel(35, _train_cfg(gen_lr=3e-2, ent_coef=0.5), seed=0)
    m.policy.pi.view("b1")[:] = [3.0, 0.0, 0.0, 0.0, 0.0]
    m.policy.pi.touch()
    task = GeneratorTask(m, SCEN, reward_fn=lambda *args: 0.0)
    task.assign([(tiny_data.profile(0), np.zeros(2))])
    obs = np.zeros(37)
    before = float(m.policy.entropy(obs))
    for k in range(5):
        generator_update(m, task, 40, seed=k)
    assert float(m.policy.entropy(obs)) > before


def test_generator_deterministic(tiny_data):
    outs = []
    for _ in range(2):
        m = TraitModel(35, _train_cfg(), seed=1)
        task = GeneratorTask(m, SCEN)
        task.assign([(tiny_data.profile(2), np.array([0.5, -0.5]))])
        gen, _ = generator_update(m, task, 40, seed=3)
        outs.append((gen.a.copy(), m.policy.pi.params.copy()))
    np.testing.assert_array_equal(outs[0][0], outs[1][0])
    np.testing.assert_array_equal(outs[0][1], outs[1][1])


def test_train_checkpoints_and_resume_bit_exact(tmp_path, tiny_data):
    cfg = _train_cfg()
    full = train(tiny_data, cfg, seed=2, env_config=SCEN, out_dir=tmp_path / "a")
    assert full.round == 5
    assert sorted(p.name for p in (tmp_path / "a").glob("round_*.npz")) == [
        "round_00002.npz", "round_00004.npz", "round_00005.npz"]
    train(tiny_data, cfg, seed=2, env_config=SCEN, out_dir=tmp_path / "b", max_rounds=3)
    resumed = train(tiny_data, cfg, seed=2, env_config=SCEN, out_dir=tmp_path / "b", resume=True)
    for name, mod in full.modules().items():
        np.testing.assert_array_equal(mod.params, resumed.modules()[name].params)
    assert full.history == resumed.history


def test_embed_driver_determinism_and_zero_heads(tmp_path, tiny_data):
    m = TraitModel(35, _train_cfg(), seed=0)
    a = embed_driver(tiny_data, 0, m.encoder, 4, np.random.default_rng(1), 2, 2.0)
    b = embed_driver(tiny_data, 0, m.encoder, 4, np.random.default_rng(1), 2, 2.0)
    assert len(a) == 4
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.z, y.z)
    for n in ("Wmu", "bmu", "Wls", "bls"):
        m.encoder.view(n)[:] = 0.0
    m.encoder.touch()
    zero = embed_driver(tiny_data, 0, m.encoder, 3, np.random.default_rng(1), 2, 2.0)
    assert all(np.all(t.mu == 0) for t in zero)
    with pytest.raises(ContractError):
        embed_driver(tiny_data, 0, m.encoder, 3, np.random.default_rng(1), 500, 2.0)
    path = export_embeddings_csv(tmp_path / "e.csv", {"Lisa": a})
    lines = path.read_text().splitlines()
    assert lines[0] == "driver,mu_0,mu_1,log_sigma_0,log_sigma_1,z_0,z_1" and len(lines) == 5


def test_latent_trait_sigma_positive():
    lt = LatentTrait(np.zeros(2), np.array([-50.0, 3.0]), np.zeros(2))
    assert np.all(lt.sigma > 0)
