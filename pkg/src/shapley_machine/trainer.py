"""Training pipeline for the three credit-assignment variants.

All three run independent PPO with parameter sharing, agent-modeling
embeddings, and per-agent critics trained on every team slot:

  shapley_machine - shaped per-agent rewards, truncated lambda-return critic
                    targets (m components), and the efficiency regression
                    pulling the summed values toward the team return.
  banzhaf_machine - team reward, truncated targets, no efficiency loss.
  poam            - team reward, full-horizon lambda-return targets.

Targets, advantages, and shaped rewards are computed once per collected
batch from rollout-time values and stored as plain arrays, so no gradient
can reach value parameters through them (the stop-gradient contract).
Rollouts cycle a fixed set of logical environment instances sequentially;
every stream of randomness descends from the run seed, so fixed configs
reproduce byte-identical metrics.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import envs as envs_mod
from . import nn
from . import returns as rt
from . import teammates as tm
from .config import RunConfig, VariantFlags, config_hash, config_text

EPS = 1e-8


class RunningNorm:
    """Per-dimension running mean/variance (Welford over batches)."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4

    def update(self, rows: np.ndarray) -> None:
        rows = np.atleast_2d(rows)
        batch_count = rows.shape[0]
        if batch_count == 0:
            return
        batch_mean = rows.mean(axis=0)
        batch_var = rows.var(axis=0)
        delta = batch_mean - self.mean
        total = self.count + batch_count
        self.mean = self.mean + delta * batch_count / total
        m_a = self.var * self.count
        m_b = batch_var * batch_count
        self.var = (m_a + m_b + delta**2 * self.count * batch_count / total) / total
        self.count = total

    def normalize(self, rows: np.ndarray, clip: float = 10.0) -> np.ndarray:
        return np.clip((rows - self.mean) / np.sqrt(self.var + EPS), -clip, clip)

    def state_blocks(self, prefix: str) -> list:
        return [
            nn.ParameterBlock(f"{prefix}.mean", self.mean.shape, self.mean),
            nn.ParameterBlock(f"{prefix}.var", self.var.shape, self.var),
            nn.ParameterBlock(f"{prefix}.count", (1,), np.array([self.count])),
        ]

    def load_state(self, loaded: dict, prefix: str) -> None:
        self.mean = loaded[f"{prefix}.mean"].copy()
        self.var = loaded[f"{prefix}.var"].copy()
        self.count = float(loaded[f"{prefix}.count"][0])


class RunningScale:
    """Running standard deviation of a scalar stream (mean not subtracted)."""

    def __init__(self):
        self.sumsq = 0.0
        self.count = 1e-4

    def update(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64).ravel()
        self.sumsq += float(np.sum(values * values))
        self.count += values.size

    @property
    def scale(self) -> float:
        return float(np.sqrt(self.sumsq / self.count + EPS))

    def state_blocks(self, prefix: str) -> list:
        arr = np.array([self.sumsq, self.count])
        return [nn.ParameterBlock(f"{prefix}.state", (2,), arr)]

    def load_state(self, loaded: dict, prefix: str) -> None:
        self.sumsq, self.count = (float(x) for x in loaded[f"{prefix}.state"])


@dataclass
class EpisodeRecord:
    """One rollout episode with everything the update step needs."""

    windows: np.ndarray        # (n, T+1, window_dim) history features
    obs_norm: np.ndarray       # (n, T, obs_dim) normalized observations
    actions: np.ndarray        # (n, T) int
    behavior_logp: np.ndarray  # (n, T); zero rows for uncontrolled slots
    embeddings: np.ndarray     # (n, T+1, emb_dim)
    values: np.ndarray         # (n, T+1) rollout critic values, bootstrap col
    rewards_raw: np.ndarray    # (T,) team reward
    controlled: np.ndarray     # (n,) bool
    composition: tm.TeamComposition

    # attached by Learner.prepare()
    rewards_std: np.ndarray | None = None
    shaped: np.ndarray | None = None          # (n, T) per-agent reward stream
    critic_targets: np.ndarray | None = None  # (n, T)
    advantages: np.ndarray | None = None      # (n, T)
    eff_targets: np.ndarray | None = None     # (T,)

    @property
    def length(self) -> int:
        return self.rewards_raw.shape[0]

    @property
    def n_agents(self) -> int:
        return self.values.shape[0]


@dataclass
class RolloutBatch:
    episodes: list
    reward_scale: float = 1.0
    shaping_scale: float = 1.0
    alpha_effective: float = 0.0

    def __iter__(self):
        return iter(self.episodes)

    def __len__(self):
        return len(self.episodes)


def shaped_reward(
    episode: EpisodeRecord,
    agent: int,
    t: int,
    alpha: float,
    gamma: float,
    reward_scale: float | None = None,
    shaping_scale: float | None = None,
    teammates: str = "all",
) -> float:
    """Per-agent reward: team reward minus the alpha-scaled sum of the other
    agents' one-step value deltas, each stream standardized by its running
    scale when one is given.  Values enter as constants."""
    values = episode.values
    if teammates == "all":
        others = [j for j in range(episode.n_agents) if j != agent]
    else:
        others = [j for j in np.flatnonzero(episode.controlled) if j != agent]
    delta = float(sum(values[j, t] - gamma * values[j, t + 1] for j in others))
    r = float(episode.rewards_raw[t])
    if reward_scale is not None:
        r = r / reward_scale
    if shaping_scale is not None:
        delta = delta / shaping_scale
    return r - alpha * delta


def shaping_terms(episode: EpisodeRecord, gamma: float, teammates: str = "all") -> np.ndarray:
    """Raw shaping deltas for every (agent, t); vectorized counterpart of the
    term inside shaped_reward."""
    values = episode.values
    step_delta = values[:, :-1] - gamma * values[:, 1:]  # (n, T)
    if teammates == "all":
        total = step_delta.sum(axis=0, keepdims=True)
        out = total - step_delta
    else:
        mask = episode.controlled.astype(np.float64)[:, None]
        total = (step_delta * mask).sum(axis=0, keepdims=True)
        out = total - step_delta * mask
    return out


def _one_hot(indices: np.ndarray, depth: int) -> np.ndarray:
    out = np.zeros(indices.shape + (depth,))
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class AgentNetworks:
    """The shared actor, critic, agent-modeling encoder, and two decoders."""

    def __init__(self, cfg: RunConfig, obs_dim: int, n_actions: int, rng: np.random.Generator):
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.n_agents = cfg.n_agents
        self.history = cfg.history_window
        self.emb_dim = cfg.embedding_dim
        self.id_onehot = cfg.agent_id_onehot
        feat = obs_dim + (cfg.n_agents if cfg.agent_id_onehot else 0) + n_actions
        self.feat_dim = feat
        self.window_dim = cfg.history_window * feat
        hid = (cfg.hidden_dim, cfg.hidden_dim)
        ortho = cfg.use_orthogonal_init
        self.actor = nn.Mlp(
            "actor",
            nn.MlpSpec(self.window_dim + self.emb_dim, hid, n_actions,
                       activation="relu", layer_norm=True, orthogonal_init=ortho,
                       final_gain=0.01),
            rng,
        )
        self.critic = nn.Mlp(
            "critic",
            nn.MlpSpec(self.window_dim + self.emb_dim, hid, 1,
                       activation="relu", layer_norm=True, orthogonal_init=ortho),
            rng,
        )
        self.encoder = nn.Mlp(
            "encoder",
            nn.MlpSpec(self.window_dim, (cfg.hidden_dim,), self.emb_dim,
                       activation="relu", layer_norm=True, orthogonal_init=ortho),
            rng,
        )
        others = cfg.n_agents - 1
        self.dec_obs = nn.Mlp(
            "dec_obs",
            nn.MlpSpec(self.emb_dim, hid, others * obs_dim,
                       activation="relu", orthogonal_init=ortho),
            rng,
        )
        self.dec_act = nn.Mlp(
            "dec_act",
            nn.MlpSpec(self.emb_dim, hid, others * n_actions,
                       activation="relu", orthogonal_init=ortho),
            rng,
        )

    @property
    def ac_blocks(self) -> list:
        return self.actor.blocks + self.critic.blocks

    @property
    def ed_blocks(self) -> list:
        return self.encoder.blocks + self.dec_obs.blocks + self.dec_act.blocks

    @property
    def all_blocks(self) -> list:
        return self.ac_blocks + self.ed_blocks


class Learner:
    """Owns networks, optimizers, running statistics, and the update rule."""

    def __init__(self, cfg: RunConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.flags: VariantFlags = cfg.flags()
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        (init_ss, env_ss, policy_ss, mate_ss, eval_ss, team_ss) = ss.spawn(6)
        self.env_seed_rng = np.random.default_rng(env_ss)
        self.policy_rng = np.random.default_rng(policy_ss)
        self.mate_rng = np.random.default_rng(mate_ss)
        self.team_rng = np.random.default_rng(team_ss)
        # fixed children so every evaluate() call replays the same benchmark
        self.eval_children = eval_ss.spawn(4)

        self.envs = [self._make_env() for _ in range(cfg.num_parallel_envs)]
        probe = self.envs[0]
        self.n_actions = probe.n_actions
        self.obs_dim = probe.obs_dim
        self.nets = AgentNetworks(cfg, self.obs_dim, self.n_actions,
                                  np.random.default_rng(init_ss))
        self.opt_ac = nn.Adam(self.nets.ac_blocks, lr=cfg.lr, beta1=cfg.optim_alpha,
                              eps=cfg.optim_eps)
        self.opt_ed = nn.Adam(self.nets.ed_blocks, lr=cfg.ed_lr, beta1=cfg.optim_alpha,
                              eps=cfg.optim_eps)
        self.obs_norm = RunningNorm(self.obs_dim)
        self.reward_scale = RunningScale()
        self.shaping_scale = RunningScale()
        self.pool = tm.build_pool(cfg.pool_kinds(), cfg.pool_noise)
        self.pool_by_id = {p.id: p for p in self.pool}
        self.env_steps = 0
        self.episode_counter = 0
        self.return_cfg = rt.ReturnConfig(cfg.gamma, cfg.td_lambda, cfg.effective_m())

    def _make_env(self):
        cfg = self.cfg
        kwargs = dict(n_agents=cfg.n_agents, episode_limit=cfg.episode_limit)
        if cfg.env_name == "pursuit":
            kwargs.update(grid_size=cfg.grid_size, visibility_radius=cfg.visibility_radius)
        return envs_mod.make_env(cfg.env_name, **kwargs)

    # ------------------------------------------------------------------
    # feature building

    def _norm_obs(self, obs_rows: np.ndarray, update: bool) -> np.ndarray:
        if not self.cfg.use_obs_norm:
            return obs_rows
        if update:
            self.obs_norm.update(obs_rows)
        return self.obs_norm.normalize(obs_rows)

    def _step_features(self, obs_norm_rows: np.ndarray, prev_action_onehot: np.ndarray) -> np.ndarray:
        parts = [obs_norm_rows]
        if self.cfg.agent_id_onehot:
            parts.append(np.eye(self.cfg.n_agents))
        parts.append(prev_action_onehot)
        return np.concatenate(parts, axis=1)

    def _window_from_history(self, feat_history: list) -> np.ndarray:
        h = self.cfg.history_window
        n = self.cfg.n_agents
        chunks = []
        for k in range(h - 1, -1, -1):
            idx = len(feat_history) - 1 - k
            if idx < 0:
                chunks.append(np.zeros((n, self.nets.feat_dim)))
            else:
                chunks.append(feat_history[idx])
        return np.concatenate(chunks, axis=1)

    # ------------------------------------------------------------------
    # rollouts

    def _rollout_episode(self, env, composition, env_seed, greedy, rng_policy, rng_mate,
                         update_norm) -> EpisodeRecord:
        cfg = self.cfg
        n = cfg.n_agents
        obs = np.stack(env.reset(int(env_seed)))
        prev_act = np.zeros((n, self.n_actions))
        feat_history: list = []
        windows, embeddings = [], []
        obs_norm_steps, actions_steps, logp_steps, rewards = [], [], [], []

        done = False
        while not done:
            obs_n = self._norm_obs(obs, update_norm)
            feat_history.append(self._step_features(obs_n, prev_act))
            window = self._window_from_history(feat_history)
            emb, _ = self.nets.encoder.forward(window)
            actions = np.zeros(n, dtype=np.int64)
            logps = np.zeros(n)
            controlled_rows = composition.controlled_slots
            actor_in = np.concatenate([window[controlled_rows], emb[controlled_rows]], axis=1)
            logits, _ = self.nets.actor.forward(actor_in)
            dist = nn.Categorical(logits)
            if greedy:
                chosen = np.argmax(dist.probs, axis=1)
            else:
                chosen = dist.sample(rng_policy)
            lp = dist.log_prob(chosen)
            for row, slot in enumerate(controlled_rows):
                actions[slot] = chosen[row]
                logps[slot] = lp[row]
            for slot, pol_id in composition.uncontrolled_assignments.items():
                view = env.policy_view(slot, full_state=cfg.uncontrolled_obs == "full")
                actions[slot] = tm.act_uncontrolled(self.pool_by_id[pol_id], view, rng_mate)

            windows.append(window)
            embeddings.append(emb)
            obs_norm_steps.append(obs_n)
            actions_steps.append(actions)
            logp_steps.append(logps)

            obs_list, reward, done = env.step(actions)
            obs = np.stack(obs_list)
            rewards.append(reward)
            prev_act = _one_hot(actions, self.n_actions)

        # bootstrap slot: features of the post-terminal observation
        obs_n = self._norm_obs(obs, update_norm)
        feat_history.append(self._step_features(obs_n, prev_act))
        window = self._window_from_history(feat_history)
        emb, _ = self.nets.encoder.forward(window)
        windows.append(window)
        embeddings.append(emb)

        windows_arr = np.stack(windows, axis=1)        # (n, T+1, W)
        emb_arr = np.stack(embeddings, axis=1)         # (n, T+1, E)
        T = len(rewards)
        critic_in = np.concatenate([windows_arr, emb_arr], axis=2).reshape(n * (T + 1), -1)
        values, _ = self.nets.critic.forward(critic_in)
        values = values.reshape(n, T + 1)
        values[:, T] = 0.0  # both environments terminate every episode

        controlled = np.zeros(n, dtype=bool)
        controlled[composition.controlled_slots] = True
        return EpisodeRecord(
            windows=windows_arr,
            obs_norm=np.stack(obs_norm_steps, axis=1),
            actions=np.stack(actions_steps, axis=1),
            behavior_logp=np.stack(logp_steps, axis=1),
            embeddings=emb_arr,
            values=values,
            rewards_raw=np.array(rewards),
            controlled=controlled,
            composition=composition,
        )

    def collect(self, n_episodes: int) -> RolloutBatch:
        episodes = []
        for _ in range(n_episodes):
            env = self.envs[self.episode_counter % len(self.envs)]
            comp = tm.sample_team(self.team_rng, self.cfg.n_agents, self.pool)
            env_seed = self.env_seed_rng.integers(1 << 62)
            ep = self._rollout_episode(env, comp, env_seed, greedy=False,
                                       rng_policy=self.policy_rng, rng_mate=self.mate_rng,
                                       update_norm=self.cfg.use_obs_norm)
            self.episode_counter += 1
            self.env_steps += ep.length
            episodes.append(ep)
        return RolloutBatch(episodes)

    # ------------------------------------------------------------------
    # target preparation (everything here is a constant w.r.t. gradients)

    def alpha_now(self) -> float:
        alpha = self.cfg.alpha
        warmup = self.cfg.alpha_warmup_steps
        if warmup > 0:
            alpha = alpha * min(1.0, self.env_steps / warmup)
        return alpha

    def prepare(self, batch: RolloutBatch) -> RolloutBatch:
        cfg = self.cfg
        standardize = cfg.standardise_rewards
        if standardize:
            for ep in batch:
                self.reward_scale.update(ep.rewards_raw)
            if self.flags.use_shaped_reward:
                for ep in batch:
                    self.shaping_scale.update(shaping_terms(ep, cfg.gamma, cfg.shaping_teammates))
        r_scale = self.reward_scale.scale if standardize else 1.0
        s_scale = self.shaping_scale.scale if standardize else 1.0
        alpha = self.alpha_now()
        batch.reward_scale = r_scale
        batch.shaping_scale = s_scale
        batch.alpha_effective = alpha

        m_cfg = self.return_cfg
        for ep in batch:
            T = ep.length
            ep.rewards_std = ep.rewards_raw / r_scale
            if self.flags.use_shaped_reward:
                terms = shaping_terms(ep, cfg.gamma, cfg.shaping_teammates) / s_scale
                ep.shaped = ep.rewards_std[None, :] - alpha * terms
            else:
                ep.shaped = np.repeat(ep.rewards_std[None, :], ep.n_agents, axis=0)
            dones = np.zeros(T, dtype=bool)
            dones[-1] = True
            traj = rt.Trajectory(ep.rewards_std, ep.values, dones, per_agent_rewards=ep.shaped)
            if self.flags.critic_target == "ttd":
                cfg_t = m_cfg
            else:
                cfg_t = rt.ReturnConfig(cfg.gamma, cfg.td_lambda, max(T, 1))
            ep.critic_targets = np.stack(
                [rt.ttd_target_array(traj, a, cfg_t, reward_source="per_agent")
                 for a in range(ep.n_agents)]
            )
            ep.advantages = np.stack(
                [rt.gae(traj, a, m_cfg, reward_source="per_agent")
                 for a in range(ep.n_agents)]
            )
            if self.flags.use_efficiency_loss:
                team_traj = rt.Trajectory(ep.rewards_std, ep.values.sum(axis=0)[None, :], dones)
                ep.eff_targets = rt.ttd_target_array(team_traj, 0, cfg_t)

        if cfg.use_adv_std:
            rows = np.concatenate(
                [ep.advantages[ep.controlled].ravel() for ep in batch]
            )
            mean, std = rows.mean(), rows.std()
            for ep in batch:
                ep.advantages = (ep.advantages - mean) / (std + EPS)
        return batch

    # ------------------------------------------------------------------
    # loss values (the update path shares these row builders)

    def _policy_rows(self, batch: RolloutBatch, agent: int):
        wins, embs, acts, logps, advs = [], [], [], [], []
        for ep in batch:
            if not ep.controlled[agent]:
                continue
            T = ep.length
            wins.append(ep.windows[agent, :T])
            embs.append(ep.embeddings[agent, :T])
            acts.append(ep.actions[agent])
            logps.append(ep.behavior_logp[agent])
            advs.append(ep.advantages[agent])
        if not wins:
            return None
        x = np.concatenate([np.concatenate(wins), np.concatenate(embs)], axis=1)
        return x, np.concatenate(acts), np.concatenate(logps), np.concatenate(advs)

    def _critic_rows(self, batch: RolloutBatch, agent: int):
        wins = np.concatenate([ep.windows[agent, : ep.length] for ep in batch])
        embs = np.concatenate([ep.embeddings[agent, : ep.length] for ep in batch])
        targets = np.concatenate([ep.critic_targets[agent] for ep in batch])
        return np.concatenate([wins, embs], axis=1), targets

    def _ppo_surrogate(self, logits, actions, old_logp, advantages):
        logp = _log_softmax(logits)
        probs = np.exp(logp)
        rows = np.arange(len(actions))
        logp_a = logp[rows, actions]
        ratio = np.exp(logp_a - old_logp)
        clipped = np.clip(ratio, 1.0 - self.cfg.clip_epsilon, 1.0 + self.cfg.clip_epsilon)
        s1 = ratio * advantages
        s2 = clipped * advantages
        use1 = s1 <= s2
        surr = np.where(use1, s1, s2)
        entropy = -(probs * logp).sum(axis=1)
        inside = (ratio > 1.0 - self.cfg.clip_epsilon) & (ratio < 1.0 + self.cfg.clip_epsilon)
        dsurr_dratio = np.where(use1, advantages, advantages * inside)
        return logp, probs, logp_a, ratio, surr, entropy, dsurr_dratio

    def policy_loss(self, batch: RolloutBatch, agent: int) -> float:
        """Clipped-surrogate PPO loss with entropy bonus for one controlled agent."""
        rows = self._policy_rows(batch, agent)
        if rows is None:
            return 0.0
        x, actions, old_logp, adv = rows
        logits, _ = self.nets.actor.forward(x)
        _, _, _, _, surr, entropy, _ = self._ppo_surrogate(logits, actions, old_logp, adv)
        return float(-surr.mean() - self.cfg.entropy_coef * entropy.mean())

    def critic_loss(self, batch: RolloutBatch, agent: int) -> float:
        x, targets = self._critic_rows(batch, agent)
        values, _ = self.nets.critic.forward(x)
        return float(0.5 * np.mean((values[:, 0] - targets) ** 2))

    def efficiency_loss(self, episode: EpisodeRecord, t: int) -> float:
        """Half squared gap between the team return target and the summed values
        at step t; bootstrap sums inside the target are constants."""
        if episode.eff_targets is None:
            raise ValueError("episode has no efficiency targets (variant without them?)")
        x = np.concatenate([episode.windows[:, t], episode.embeddings[:, t]], axis=1)
        values, _ = self.nets.critic.forward(x)
        return float(0.5 * (episode.eff_targets[t] - values[:, 0].sum()) ** 2)

    def efficiency_loss_mean(self, batch: RolloutBatch) -> float:
        totals, count = 0.0, 0
        for ep in batch:
            for t in range(ep.length):
                totals += self.efficiency_loss(ep, t)
                count += 1
        return totals / max(count, 1)

    def agent_model_loss(self, batch: RolloutBatch, agent: int) -> float:
        """Observation-reconstruction MSE plus action NLL for the other slots."""
        x, obs_t, act_t, mask = self._ed_rows(batch, agent)
        emb, _ = self.nets.encoder.forward(x)
        pred_obs, _ = self.nets.dec_obs.forward(emb)
        logits, _ = self.nets.dec_act.forward(emb)
        n_other = self.cfg.n_agents - 1
        mse = ((pred_obs - obs_t) ** 2).reshape(len(x), n_other, -1).sum(axis=2)
        logp = _log_softmax(logits.reshape(len(x), n_other, self.n_actions))
        nll = -np.take_along_axis(logp, act_t[:, :, None], axis=2)[:, :, 0]
        per_row = (mse * mask).sum(axis=1) + (nll * mask).sum(axis=1)
        return float(per_row.mean())

    def _ed_rows(self, batch: RolloutBatch, agent: int):
        wins, obs_t, act_t = [], [], []
        others = [j for j in range(self.cfg.n_agents) if j != agent]
        for ep in batch:
            T = ep.length
            wins.append(ep.windows[agent, :T])
            obs_t.append(ep.obs_norm[others, :, :].transpose(1, 0, 2).reshape(T, -1))
            act_t.append(ep.actions[others, :].T)
        x = np.concatenate(wins)
        mask = np.ones((len(x), len(others)))
        return x, np.concatenate(obs_t), np.concatenate(act_t), mask

    def total_loss(self, batch: RolloutBatch) -> float:
        """Variant total: sum of controlled policy losses, beta1-weighted critic
        losses over all slots, and (Shapley Machine only) beta2-weighted
        efficiency."""
        total = 0.0
        for agent in range(self.cfg.n_agents):
            total += self.policy_loss(batch, agent)
        for agent in range(self.cfg.n_agents):
            total += self.cfg.beta1 * self.critic_loss(batch, agent)
        if self.flags.use_efficiency_loss and self.cfg.beta2 > 0:
            total += self.cfg.beta2 * self.efficiency_loss_mean(batch)
        return total

    # ------------------------------------------------------------------
    # updates

    def accumulate_actor_grads(self, batch: RolloutBatch) -> dict:
        """One forward/backward pass of the policy objective; grads accumulate
        into the actor blocks.  Returns the loss value and mean entropy."""
        cfg = self.cfg
        x_parts, act_parts, logp_parts, adv_parts, w_parts = [], [], [], [], []
        for a in range(cfg.n_agents):
            rows = self._policy_rows(batch, a)
            if rows is None:
                continue
            x, actions, old_logp, adv = rows
            x_parts.append(x)
            act_parts.append(actions)
            logp_parts.append(old_logp)
            adv_parts.append(adv)
            # per-agent mean weights make the sum over agents of means
            w_parts.append(np.full(len(actions), 1.0 / len(actions)))
        x = np.concatenate(x_parts)
        actions = np.concatenate(act_parts)
        old_logp = np.concatenate(logp_parts)
        adv = np.concatenate(adv_parts)
        weights = np.concatenate(w_parts)

        logits, tape = self.nets.actor.forward(x)
        logp, probs, _, ratio, surr, entropy, dsurr_dratio = self._ppo_surrogate(
            logits, actions, old_logp, adv
        )
        loss = float(-(weights * surr).sum() - cfg.entropy_coef * (weights * entropy).sum())
        dlogp_a = -(weights * dsurr_dratio * ratio)
        rows_idx = np.arange(len(actions))
        dlogits = -probs * dlogp_a[:, None]
        dlogits[rows_idx, actions] += dlogp_a
        dlogits += cfg.entropy_coef * weights[:, None] * probs * (logp + entropy[:, None])
        if np.all(np.isfinite(dlogits)):
            self.nets.actor.backward(tape, dlogits)
        return {"policy_loss": loss, "entropy": float(entropy.mean())}

    def accumulate_critic_grads(self, batch: RolloutBatch) -> dict:
        """One forward/backward pass of beta1*critic + beta2*efficiency; grads
        accumulate into the critic blocks."""
        cfg = self.cfg
        n = cfg.n_agents
        xc_parts, tgt_parts, wc_parts = [], [], []
        for a in range(n):
            xc, targets = self._critic_rows(batch, a)
            xc_parts.append(xc)
            tgt_parts.append(targets)
            wc_parts.append(np.full(len(targets), 1.0 / len(targets)))
        xc = np.concatenate(xc_parts)
        targets = np.concatenate(tgt_parts)
        wc = np.concatenate(wc_parts)

        values, tape_c = self.nets.critic.forward(xc)
        v = values[:, 0]
        critic_loss = float(0.5 * (wc * (v - targets) ** 2).sum())
        dv = cfg.beta1 * wc * (v - targets)

        efficiency_loss = 0.0
        if self.flags.use_efficiency_loss and cfg.beta2 > 0:
            rows_per_agent = len(targets) // n
            v_sum = v.reshape(n, rows_per_agent).sum(axis=0)
            eff_t = np.concatenate([ep.eff_targets for ep in batch])
            gap = eff_t - v_sum
            efficiency_loss = float(0.5 * np.mean(gap**2))
            dv = dv + np.tile(-(cfg.beta2 / len(gap)) * gap, n)

        if np.all(np.isfinite(dv)):
            self.nets.critic.backward(tape_c, dv[:, None])
        return {"critic_loss": critic_loss, "efficiency_loss": efficiency_loss}

    def _update_actor_critic(self, batch: RolloutBatch) -> dict:
        cfg = self.cfg
        metrics = {"policy_loss": 0.0, "critic_loss": 0.0, "efficiency_loss": 0.0,
                   "entropy": 0.0, "skipped": 0}
        for epoch in range(cfg.epochs):
            self.opt_ac.zero_grads()
            actor_m = self.accumulate_actor_grads(batch)
            critic_m = self.accumulate_critic_grads(batch)
            total = (actor_m["policy_loss"] + cfg.beta1 * critic_m["critic_loss"]
                     + cfg.beta2 * critic_m["efficiency_loss"])
            if not np.isfinite(total):
                metrics["skipped"] += 1
                self.opt_ac.zero_grads()
                continue
            try:
                self.opt_ac.step()
            except nn.NonFiniteGradientError:
                metrics["skipped"] += 1
                self.opt_ac.zero_grads()
                continue
            if epoch == 0:
                metrics["entropy"] = actor_m["entropy"]
                metrics["policy_loss"] = actor_m["policy_loss"]
                metrics["critic_loss"] = critic_m["critic_loss"]
                metrics["efficiency_loss"] = critic_m["efficiency_loss"]
        return metrics

    def accumulate_ed_grads(self, batch: RolloutBatch) -> dict:
        """One forward/backward pass of the agent-modeling loss; gradients flow
        from both decoders into the encoder."""
        n = self.cfg.n_agents
        n_other = n - 1
        rows = [self._ed_rows(batch, a) for a in range(n)]
        x = np.concatenate([r[0] for r in rows])
        obs_t = np.concatenate([r[1] for r in rows])
        act_t = np.concatenate([r[2] for r in rows])
        R = len(x)
        emb, tape_e = self.nets.encoder.forward(x)
        pred_obs, tape_o = self.nets.dec_obs.forward(emb)
        logits, tape_a = self.nets.dec_act.forward(emb)
        diff = pred_obs - obs_t
        mse = (diff**2).reshape(R, n_other, -1).sum(axis=(1, 2))
        lsm = _log_softmax(logits.reshape(R, n_other, self.n_actions))
        nll = -np.take_along_axis(lsm, act_t[:, :, None], axis=2)[:, :, 0].sum(axis=1)
        loss = float(np.mean(mse + nll))
        dobs = (2.0 / R) * diff
        probs = np.exp(lsm)
        dlog = probs.copy()
        np.put_along_axis(
            dlog, act_t[:, :, None],
            np.take_along_axis(dlog, act_t[:, :, None], axis=2) - 1.0, axis=2,
        )
        dlog = dlog.reshape(R, n_other * self.n_actions) / R
        if np.isfinite(loss):
            demb = self.nets.dec_obs.backward(tape_o, dobs)
            demb = demb + self.nets.dec_act.backward(tape_a, dlog)
            self.nets.encoder.backward(tape_e, demb)
        return {"ed_loss": loss}

    def _update_encoder_decoder(self, batch: RolloutBatch) -> dict:
        metrics = {"ed_loss": 0.0, "skipped": 0}
        for _ in range(self.cfg.ed_epochs):
            self.opt_ed.zero_grads()
            ed_m = self.accumulate_ed_grads(batch)
            metrics["ed_loss"] = ed_m["ed_loss"]
            if not np.isfinite(ed_m["ed_loss"]):
                metrics["skipped"] += 1
                self.opt_ed.zero_grads()
                continue
            try:
                self.opt_ed.step()
            except nn.NonFiniteGradientError:
                metrics["skipped"] += 1
                self.opt_ed.zero_grads()
        return metrics

    def update(self, batch: RolloutBatch) -> dict:
        metrics = self._update_actor_critic(batch)
        metrics.update(self._update_encoder_decoder(batch))
        return metrics

    # ------------------------------------------------------------------
    # evaluation

    def evaluate(self, episodes: int, policy: str = "greedy") -> dict:
        """Greedy evaluation over freshly sampled compositions with a fixed
        seed stream; never updates running statistics."""
        team_ss, policy_ss, mate_ss, seed_ss = self.eval_children
        rng_team = np.random.default_rng(team_ss)
        rng_policy = np.random.default_rng(policy_ss)
        rng_mate = np.random.default_rng(mate_ss)
        seeds = np.random.default_rng(seed_ss).integers(1 << 62, size=episodes)
        env = self._make_env()
        returns_sum, captures, lengths = [], 0, []
        for e_i in range(episodes):
            comp = tm.sample_team(rng_team, self.cfg.n_agents, self.pool)
            if policy == "random":
                ep = self._random_episode(env, comp, seeds[e_i], rng_policy, rng_mate)
            else:
                ep = self._rollout_episode(env, comp, seeds[e_i], greedy=True,
                                           rng_policy=rng_policy, rng_mate=rng_mate,
                                           update_norm=False)
            total = float(ep.rewards_raw.sum())
            returns_sum.append(total)
            captures += total > 0
            lengths.append(ep.length)
        arr = np.array(returns_sum)
        sem = arr.std(ddof=1) / np.sqrt(len(arr)) if len(arr) > 1 else 0.0
        return {
            "mean_return": float(arr.mean()),
            "ci95": float(1.96 * sem),
            "capture_rate": captures / episodes,
            "mean_length": float(np.mean(lengths)),
        }

    def _random_episode(self, env, composition, env_seed, rng_policy, rng_mate) -> EpisodeRecord:
        cfg = self.cfg
        n = cfg.n_agents
        env.reset(int(env_seed))
        rewards = []
        done = False
        while not done:
            actions = np.zeros(n, dtype=np.int64)
            for slot in range(n):
                if composition.is_controlled(slot):
                    actions[slot] = rng_policy.integers(self.n_actions)
                else:
                    view = env.policy_view(slot, full_state=cfg.uncontrolled_obs == "full")
                    actions[slot] = tm.act_uncontrolled(
                        self.pool_by_id[composition.uncontrolled_assignments[slot]], view, rng_mate
                    )
            _, reward, done = env.step(actions)
            rewards.append(reward)
        T = len(rewards)
        dummy = np.zeros((n, T))
        return EpisodeRecord(
            windows=np.zeros((n, T + 1, 1)), obs_norm=dummy[:, :, None],
            actions=np.zeros((n, T), dtype=np.int64), behavior_logp=dummy,
            embeddings=np.zeros((n, T + 1, 1)), values=np.zeros((n, T + 1)),
            rewards_raw=np.array(rewards), controlled=np.zeros(n, dtype=bool),
            composition=composition,
        )

    # ------------------------------------------------------------------
    # persistence

    def state_blocks(self) -> list:
        return (self.nets.all_blocks
                + self.obs_norm.state_blocks("obs_norm")
                + self.reward_scale.state_blocks("reward_scale")
                + self.shaping_scale.state_blocks("shaping_scale"))

    def save_checkpoint(self, path, extra_meta: dict | None = None) -> None:
        nn.save_checkpoint(path, self.state_blocks())
        meta = {
            "config_hash": config_hash(self.cfg),
            "seed": self.seed,
            "variant": self.cfg.variant,
            "revision": _revision(),
            "env_steps": self.env_steps,
            "deviations": DEVIATION_FLAGS,
            "agent_id_onehot": self.cfg.agent_id_onehot,
        }
        if extra_meta:
            meta.update(extra_meta)
        with open(str(path) + ".meta.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    def load_checkpoint(self, path) -> None:
        expected = nn.manifest_of(self.state_blocks())
        loaded = nn.load_checkpoint(path, expected_manifest=expected)
        nn.restore_blocks(self.nets.all_blocks, loaded)
        self.obs_norm.load_state(loaded, "obs_norm")
        self.reward_scale.load_state(loaded, "reward_scale")
        self.shaping_scale.load_state(loaded, "shaping_scale")


DEVIATION_FLAGS = {
    "grid_env": True,        # discrete grid stands in for continuous 2-D physics
    "scripted_pool": True,   # heuristic teammates stand in for pretrained pools
    "window_encoder": True,  # history windows stand in for recurrent cells
}

METRIC_COLUMNS = [
    "iteration", "env_steps", "test_return", "train_return", "critic_loss",
    "efficiency_loss", "policy_entropy", "mean_shaped_reward", "skipped_batches",
    "variant", "m", "seed",
]


def _revision() -> str:
    from . import __version__

    return f"shapley-machine-{__version__}"


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".12g")
    return str(x)


def train(cfg: RunConfig, seed: int, out_dir) -> dict:
    """Full training run: collect / prepare / update loop with periodic greedy
    evaluation, CSV metrics, and checkpoints.  Returns a summary dict."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    learner = Learner(cfg, seed)

    manifest = {
        "run_id": f"{cfg.variant}-s{seed}-{config_hash(cfg)}",
        "config": config_text(cfg),
        "config_hash": config_hash(cfg),
        "seed": seed,
        "variant": cfg.variant,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "revision": _revision(),
        "deviations": DEVIATION_FLAGS,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    tmp = manifest_path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    os.replace(tmp, manifest_path)

    csv_path = os.path.join(out_dir, "metrics.csv")
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)

    iteration = 0
    test_return = float("nan")
    skipped_total = 0
    with open(csv_path, "w") as csv_fh:
        csv_fh.write(",".join(METRIC_COLUMNS) + "\n")
        while learner.env_steps < cfg.max_env_steps:
            batch = learner.collect(cfg.buffer_size)
            learner.prepare(batch)
            metrics = learner.update(batch)
            iteration += 1
            skipped_total += metrics.get("skipped", 0)

            train_return = float(np.mean([ep.rewards_raw.sum() for ep in batch]))
            mean_shaped = float(np.mean([ep.shaped.mean() for ep in batch]))
            if iteration % cfg.eval_interval == 0:
                stats = learner.evaluate(cfg.eval_episodes)
                test_return = stats["mean_return"]
            row = [iteration, learner.env_steps, test_return, train_return,
                   metrics["critic_loss"], metrics["efficiency_loss"],
                   metrics["entropy"], mean_shaped, skipped_total,
                   cfg.variant, learner.return_cfg.m, seed]
            csv_fh.write(",".join(_fmt(v) for v in row) + "\n")
            csv_fh.flush()

            if iteration % cfg.checkpoint_interval == 0:
                learner.save_checkpoint(os.path.join(ckpt_dir, f"ckpt_{iteration:05d}.bin"),
                                        {"iteration": iteration})
            if cfg.stop_at_test_return > 0 and test_return >= cfg.stop_at_test_return:
                break

    final_ckpt = os.path.join(ckpt_dir, "final.bin")
    learner.save_checkpoint(final_ckpt, {"iteration": iteration})
    completion = {
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "iterations": iteration,
        "env_steps": learner.env_steps,
        "final_test_return": test_return,
    }
    with open(os.path.join(out_dir, "completion.json"), "w") as fh:
        json.dump(completion, fh, indent=2, sort_keys=True)
    return {
        "iterations": iteration,
        "env_steps": learner.env_steps,
        "final_test_return": test_return,
        "csv_path": csv_path,
        "checkpoint": final_ckpt,
        "learner": learner,
    }


def evaluate_checkpoint(cfg: RunConfig, seed: int, checkpoint_path, episodes: int) -> dict:
    learner = Learner(cfg, seed)
    learner.load_checkpoint(checkpoint_path)
    return learner.evaluate(episodes)


def random_baseline(cfg: RunConfig, seed: int, episodes: int) -> dict:
    """Monte Carlo mean return of uniformly random controlled agents under the
    same composition sampling and eval seed stream."""
    learner = Learner(cfg, seed)
    return learner.evaluate(episodes, policy="random")
