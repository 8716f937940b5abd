import numpy as np
import pytest

from shapley_machine import nn, returns as rt, trainer
from shapley_machine.config import RunConfig, VariantFlags


def make_cfg(**overrides):
    base = dict(
        env_name="pursuit", n_agents=3, grid_size=7, episode_limit=12,
        variant="shapley_machine", buffer_size=4, max_env_steps=200,
        eval_interval=1, eval_episodes=4, checkpoint_interval=1000,
        history_window=3, embedding_dim=4, hidden_dim=16,
    )
    base.update(overrides)
    return RunConfig(**base)


def fresh_batch(cfg, seed=0, episodes=4, prepare=True):
    learner = trainer.Learner(cfg, seed)
    batch = learner.collect(episodes)
    if prepare:
        learner.prepare(batch)
    return learner, batch


def synthetic_episode(rng, n=3, T=8, controlled=(0, 1)):
    """Hand-built record with random values, for math-level tests."""
    from shapley_machine.teammates import TeamComposition

    uncontrolled = {s: "greedy_chase#0" for s in range(n) if s not in controlled}
    comp = TeamComposition(n, list(controlled), uncontrolled)
    mask = np.zeros(n, dtype=bool)
    mask[list(controlled)] = True
    return trainer.EpisodeRecord(
        windows=rng.normal(size=(n, T + 1, 6)),
        obs_norm=rng.normal(size=(n, T, 4)),
        actions=rng.integers(0, 5, size=(n, T)),
        behavior_logp=rng.normal(size=(n, T)) * 0.1,
        embeddings=rng.normal(size=(n, T + 1, 2)),
        values=rng.normal(size=(n, T + 1)),
        rewards_raw=rng.normal(size=T),
        controlled=mask,
        composition=comp,
    )


# ---------------------------------------------------------------------------
# shaped rewards

def test_shaped_reward_alpha_zero_is_team_reward_bitwise():
    rng = np.random.default_rng(0)
    ep = synthetic_episode(rng)
    for t in range(ep.length):
        for agent in range(3):
            assert trainer.shaped_reward(ep, agent, t, 0.0, 0.99) == ep.rewards_raw[t]


def test_shaped_reward_zero_when_values_bellman_flat():
    # V_j(s_t) = gamma * V_j(s_{t+1}) for all j: the shaping term vanishes
    rng = np.random.default_rng(1)
    ep = synthetic_episode(rng)
    gamma = 0.9
    values = np.zeros_like(ep.values)
    values[:, -1] = rng.normal(size=3)
    for t in range(ep.values.shape[1] - 2, -1, -1):
        values[:, t] = gamma * values[:, t + 1]
    ep.values = values
    for t in range(ep.length):
        for agent in range(3):
            got = trainer.shaped_reward(ep, agent, t, 1.0, gamma)
            assert got == pytest.approx(ep.rewards_raw[t], abs=1e-12)


def test_shaped_reward_conservation_under_exact_team_bellman():
    # sum_j V_j(s_t) = R_t + gamma sum_j V_j(s_{t+1}) exactly, alpha=1, no
    # standardization: the per-agent rewards sum back to the team reward
    rng = np.random.default_rng(2)
    n, T, gamma = 3, 10, 0.95
    ep = synthetic_episode(rng, n=n, T=T)
    rewards = rng.uniform(0, 1, size=T)
    values = rng.normal(size=(n, T + 1))
    team_required = np.zeros(T + 1)
    team_required[T] = values[:, T].sum()
    for t in range(T - 1, -1, -1):
        team_required[t] = rewards[t] + gamma * team_required[t + 1]
    # shift agent 0's value so columns sum to the required team value
    values[0] = team_required - values[1:].sum(axis=0)
    ep.rewards_raw = rewards
    ep.values = values
    for t in range(T):
        total = sum(trainer.shaped_reward(ep, i, t, 1.0, gamma) for i in range(n))
        assert abs(total - rewards[t]) < 1e-10


def test_shaping_terms_match_scalar_op():
    rng = np.random.default_rng(3)
    ep = synthetic_episode(rng)
    terms = trainer.shaping_terms(ep, 0.9, "all")
    for t in range(ep.length):
        for agent in range(3):
            want = ep.rewards_raw[t] - 0.5 * terms[agent, t]
            got = trainer.shaped_reward(ep, agent, t, 0.5, 0.9)
            assert got == pytest.approx(want, abs=1e-12)


# ---------------------------------------------------------------------------
# losses on live rollouts

def test_critic_loss_zero_when_values_equal_targets():
    cfg = make_cfg()
    learner, batch = fresh_batch(cfg)
    for ep in batch:
        x, _ = learner._critic_rows(batch, 0)
    for ep in batch:
        values, _ = learner.nets.critic.forward(
            np.concatenate([ep.windows[:, : ep.length], ep.embeddings[:, : ep.length]], axis=2)
            .reshape(ep.n_agents * ep.length, -1)
        )
        ep.critic_targets = values[:, 0].reshape(ep.n_agents, ep.length)
    for agent in range(3):
        assert learner.critic_loss(batch, agent) == pytest.approx(0.0, abs=1e-18)


def test_critic_loss_matches_bruteforce_average():
    cfg = make_cfg()
    learner, batch = fresh_batch(cfg)
    agent = 1
    total, count = 0.0, 0
    for ep in batch:
        for t in range(ep.length):
            x = np.concatenate([ep.windows[agent, t], ep.embeddings[agent, t]])
            v, _ = learner.nets.critic.forward(x)
            total += 0.5 * (float(v[0]) - ep.critic_targets[agent, t]) ** 2
            count += 1
    assert learner.critic_loss(batch, agent) == pytest.approx(total / count, rel=1e-10)


def test_poam_and_banzhaf_targets_match_when_m_covers_episode():
    cfg_p = make_cfg(variant="poam", m=0)
    learner_p, batch_p = fresh_batch(cfg_p, seed=5)
    cfg_b = make_cfg(variant="banzhaf_machine", m=cfg_p.episode_limit)
    learner_b, batch_b = fresh_batch(cfg_b, seed=5)
    for ep_p, ep_b in zip(batch_p, batch_b):
        np.testing.assert_array_equal(ep_p.critic_targets, ep_b.critic_targets)


def test_efficiency_loss_zero_on_consistent_values():
    cfg = make_cfg()
    learner, batch = fresh_batch(cfg)
    ep = batch.episodes[0]
    # force the critic-summed values to equal the targets by rewriting targets
    x = np.concatenate([ep.windows, ep.embeddings], axis=2)
    values, _ = learner.nets.critic.forward(x.reshape(-1, x.shape[2]))
    summed = values[:, 0].reshape(ep.n_agents, -1).sum(axis=0)
    ep.eff_targets = summed[: ep.length]
    for t in range(ep.length):
        assert learner.efficiency_loss(ep, t) == pytest.approx(0.0, abs=1e-16)


def test_efficiency_loss_invariant_under_agent_permutation():
    cfg = make_cfg()
    learner, batch = fresh_batch(cfg)
    ep = batch.episodes[0]
    perm = np.array([2, 0, 1])
    permuted = trainer.EpisodeRecord(
        windows=ep.windows[perm], obs_norm=ep.obs_norm[perm], actions=ep.actions[perm],
        behavior_logp=ep.behavior_logp[perm], embeddings=ep.embeddings[perm],
        values=ep.values[perm], rewards_raw=ep.rewards_raw,
        controlled=ep.controlled[perm], composition=ep.composition,
    )
    permuted.eff_targets = ep.eff_targets
    for t in range(ep.length):
        assert learner.efficiency_loss(ep, t) == pytest.approx(
            learner.efficiency_loss(permuted, t), abs=1e-12
        )


def test_policy_loss_ratio_one_means_negative_advantage_mean():
    cfg = make_cfg(entropy_coef=0.0)
    learner, batch = fresh_batch(cfg)
    agent = 0
    rows = learner._policy_rows(batch, agent)
    assert rows is not None
    x, actions, _, adv = rows
    logits, _ = learner.nets.actor.forward(x)
    live_logp = trainer._log_softmax(logits)[np.arange(len(actions)), actions]
    # overwrite stored behavior log-probs so the ratio is exactly 1
    i = 0
    for ep in batch:
        if not ep.controlled[agent]:
            continue
        T = ep.length
        ep.behavior_logp[agent] = live_logp[i : i + T]
        i += T
    assert learner.policy_loss(batch, agent) == pytest.approx(-adv.mean(), abs=1e-12)


def test_policy_loss_zero_when_advantages_zero():
    cfg = make_cfg(entropy_coef=0.0)
    learner, batch = fresh_batch(cfg)
    for ep in batch:
        ep.advantages = np.zeros_like(ep.advantages)
    for agent in range(3):
        assert learner.policy_loss(batch, agent) == pytest.approx(0.0, abs=1e-15)


def test_clipped_branch_kills_surrogate_gradient():
    cfg = make_cfg(entropy_coef=0.0, clip_epsilon=0.2)
    learner, batch = fresh_batch(cfg)
    agent = 0
    rows = learner._policy_rows(batch, agent)
    x, actions, _, adv = rows
    logits, _ = learner.nets.actor.forward(x)
    live_logp = trainer._log_softmax(logits)[np.arange(len(actions)), actions]
    # force every ratio to 1 + 2*eps with positive advantages: fully clipped
    i = 0
    for ep in batch:
        if not ep.controlled[agent]:
            continue
        T = ep.length
        ep.behavior_logp[agent] = live_logp[i : i + T] - np.log(1.4)
        ep.advantages[agent] = np.abs(ep.advantages[agent]) + 0.1
        i += T

    def loss():
        return learner.policy_loss(batch, agent)

    grads = nn.finite_difference_gradients(loss, learner.nets.actor.blocks[:1], eps=1e-5)
    assert np.max(np.abs(grads[0])) < 1e-8


def test_agent_model_loss_uniform_decoder_nll_floor():
    cfg = make_cfg()
    learner, batch = fresh_batch(cfg)
    # zero decoders: uniform action logits and zero obs prediction
    for block in learner.nets.dec_act.blocks + learner.nets.dec_obs.blocks:
        block.values[:] = 0.0
    agent = 0
    x, obs_t, act_t, mask = learner._ed_rows(batch, agent)
    expected = float(np.mean((obs_t**2).sum(axis=1) + (cfg.n_agents - 1) * np.log(5.0)))
    assert learner.agent_model_loss(batch, agent) == pytest.approx(expected, rel=1e-9)


def test_total_loss_equals_component_sum():
    cfg = make_cfg()
    learner, batch = fresh_batch(cfg)
    want = sum(learner.policy_loss(batch, a) for a in range(3))
    want += cfg.beta1 * sum(learner.critic_loss(batch, a) for a in range(3))
    want += cfg.beta2 * learner.efficiency_loss_mean(batch)
    assert learner.total_loss(batch) == pytest.approx(want, rel=1e-12)


def test_total_loss_beta1_only():
    cfg = make_cfg(variant="banzhaf_machine", entropy_coef=0.0)
    learner, batch = fresh_batch(cfg)
    for ep in batch:
        ep.advantages = np.zeros_like(ep.advantages)
    want = cfg.beta1 * sum(learner.critic_loss(batch, a) for a in range(3))
    assert learner.total_loss(batch) == pytest.approx(want, abs=1e-12)


# ---------------------------------------------------------------------------
# variant identity (the ablation equivalence)

def test_sm_with_neutral_flags_equals_poam_bitwise():
    T = 12
    for seed in range(20):
        cfg_sm = make_cfg(variant="shapley_machine", alpha=0.0, beta2=0.0, m=T)
        cfg_poam = make_cfg(variant="poam")
        learner_sm, batch_sm = fresh_batch(cfg_sm, seed=seed)
        learner_poam, batch_poam = fresh_batch(cfg_poam, seed=seed)
        loss_sm = learner_sm.total_loss(batch_sm)
        loss_poam = learner_poam.total_loss(batch_poam)
        assert loss_sm == pytest.approx(loss_poam, abs=1e-12)


# ---------------------------------------------------------------------------
# stop-gradient contracts

def test_targets_insensitive_to_critic_parameters():
    cfg = make_cfg()
    learner, batch = fresh_batch(cfg)
    before = [ep.critic_targets.copy() for ep in batch]
    adv_before = [ep.advantages.copy() for ep in batch]
    for block in learner.nets.critic.blocks:
        block.values += 0.05
    for ep, tgt, adv in zip(batch, before, adv_before):
        np.testing.assert_array_equal(ep.critic_targets, tgt)
        np.testing.assert_array_equal(ep.advantages, adv)


def test_policy_loss_insensitive_to_critic_perturbation():
    cfg = make_cfg()
    learner, batch = fresh_batch(cfg)
    losses = [learner.policy_loss(batch, a) for a in range(3)]
    for block in learner.nets.critic.blocks:
        block.values += 0.1
    after = [learner.policy_loss(batch, a) for a in range(3)]
    np.testing.assert_array_equal(losses, after)


def test_shaping_term_detached_from_current_critic():
    cfg = make_cfg(alpha=0.5)
    learner, batch = fresh_batch(cfg)
    shaped_before = [ep.shaped.copy() for ep in batch]
    for block in learner.nets.critic.blocks:
        block.values += 0.1
    for ep, s in zip(batch, shaped_before):
        np.testing.assert_array_equal(ep.shaped, s)


# ---------------------------------------------------------------------------
# gradient integrity of the update path

def gradcheck_blocks(loss_fn, blocks, analytic, rtol=1e-4):
    numeric = nn.finite_difference_gradients(loss_fn, blocks, eps=1e-5)
    for b, a, g in zip(blocks, analytic, numeric):
        err = np.abs(a - g)
        bound = rtol * (np.abs(a) + np.abs(g)) + 2e-6
        assert np.all(err <= bound), f"{b.name}: worst {err.max():.2e}"


def test_actor_gradients_match_finite_differences():
    cfg = make_cfg(hidden_dim=8, history_window=2, embedding_dim=2)
    learner, batch = fresh_batch(cfg, seed=3)

    def loss():
        return sum(learner.policy_loss(batch, a) for a in range(3))

    learner.opt_ac.zero_grads()
    learner.accumulate_actor_grads(batch)
    analytic = [b.grads.copy() for b in learner.nets.actor.blocks]
    learner.opt_ac.zero_grads()
    gradcheck_blocks(loss, learner.nets.actor.blocks, analytic)


def test_critic_gradients_match_finite_differences_including_efficiency():
    cfg = make_cfg(hidden_dim=8, history_window=2, embedding_dim=2)
    learner, batch = fresh_batch(cfg, seed=4)

    def loss():
        total = cfg.beta1 * sum(learner.critic_loss(batch, a) for a in range(3))
        total += cfg.beta2 * learner.efficiency_loss_mean(batch)
        return total

    learner.opt_ac.zero_grads()
    learner.accumulate_critic_grads(batch)
    analytic = [b.grads.copy() for b in learner.nets.critic.blocks]
    learner.opt_ac.zero_grads()
    gradcheck_blocks(loss, learner.nets.critic.blocks, analytic)


def test_encoder_decoder_gradients_match_finite_differences():
    cfg = make_cfg(hidden_dim=8, history_window=2, embedding_dim=3)
    learner, batch = fresh_batch(cfg, seed=6)

    # every agent contributes the same number of rows, so the mean of
    # per-agent means equals the row mean the update path uses
    def loss():
        return float(np.mean([learner.agent_model_loss(batch, a) for a in range(3)]))

    learner.opt_ed.zero_grads()
    learner.accumulate_ed_grads(batch)
    analytic = [b.grads.copy() for b in learner.nets.ed_blocks]
    learner.opt_ed.zero_grads()
    gradcheck_blocks(loss, learner.nets.ed_blocks, analytic)


# ---------------------------------------------------------------------------
# pipeline behavior

def test_only_controlled_agents_receive_policy_rows():
    cfg = make_cfg()
    learner, batch = fresh_batch(cfg)
    for agent in range(3):
        rows = learner._policy_rows(batch, agent)
        expected = sum(ep.length for ep in batch if ep.controlled[agent])
        if expected == 0:
            assert rows is None
        else:
            assert len(rows[1]) == expected


def test_nonfinite_batch_skipped_and_counted():
    cfg = make_cfg()
    learner, batch = fresh_batch(cfg)
    for ep in batch:
        ep.advantages[:] = np.nan
    metrics = learner._update_actor_critic(batch)
    assert metrics["skipped"] == cfg.epochs


def test_update_changes_parameters_and_losses_finite():
    cfg = make_cfg()
    learner, batch = fresh_batch(cfg)
    before = np.concatenate([b.values.copy() for b in learner.nets.all_blocks])
    metrics = learner.update(batch)
    after = np.concatenate([b.values for b in learner.nets.all_blocks])
    assert not np.array_equal(before, after)
    assert np.isfinite(metrics["policy_loss"])
    assert np.isfinite(metrics["critic_loss"])
    assert np.isfinite(metrics["ed_loss"])
    assert metrics["skipped"] == 0


def test_train_deterministic_metrics(tmp_path):
    cfg = make_cfg(max_env_steps=150, eval_episodes=3)
    trainer.train(cfg, seed=7, out_dir=tmp_path / "a")
    trainer.train(cfg, seed=7, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a == b


def test_checkpoint_roundtrip_through_learner(tmp_path):
    cfg = make_cfg(max_env_steps=100, eval_episodes=2)
    out = trainer.train(cfg, seed=8, out_dir=tmp_path / "run")
    restored = trainer.Learner(cfg, 8)
    restored.load_checkpoint(out["checkpoint"])
    src = out["learner"]
    for a, b in zip(src.nets.all_blocks, restored.nets.all_blocks):
        np.testing.assert_array_equal(a.values, b.values)
    e1 = src.evaluate(4)
    e2 = restored.evaluate(4)
    assert e1 == e2


def test_random_baseline_runs():
    cfg = make_cfg()
    stats = trainer.random_baseline(cfg, 9, 10)
    assert 0.0 <= stats["mean_return"] <= 1.0


def test_variant_flags():
    sm = VariantFlags.from_name("shapley_machine")
    assert sm.use_shaped_reward and sm.use_efficiency_loss and sm.critic_target == "ttd"
    poam = VariantFlags.from_name("poam")
    assert not poam.use_shaped_reward and poam.critic_target == "td_lambda_full"
    bz = VariantFlags.from_name("banzhaf_machine")
    assert not bz.use_efficiency_loss and bz.critic_target == "ttd"
    with pytest.raises(Exception):
        VariantFlags.from_name("qmix")


def test_trajectory_targets_use_stated_m():
    cfg = make_cfg(m=2)
    learner, batch = fresh_batch(cfg, seed=11)
    ep = batch.episodes[0]
    dones = np.zeros(ep.length, dtype=bool)
    dones[-1] = True
    traj = rt.Trajectory(ep.rewards_std, ep.values, dones, per_agent_rewards=ep.shaped)
    want = rt.ttd_target_array(traj, 0, rt.ReturnConfig(cfg.gamma, cfg.td_lambda, 2),
                               reward_source="per_agent")
    np.testing.assert_allclose(ep.critic_targets[0], want, atol=1e-12)
