"""PPO fine-tuning of the traffic policy against the mixed objective:
the learned realism reward scaled by alpha, plus the policy's original
imitation loss as a supervised anchor.

Rewards are credited per re-plan segment: each segment receives alpha
times the sum of its executed steps' per-step rewards divided by the
total executed step count, so the segment rewards of an episode sum
exactly to alpha times the sequence-mean reward of the executed portion.
The anchor enters as a behavior-cloning loss term (weight bc_weight)
inside every update, which is the loss-level reading of "original
objective plus scaled reward".

Freezing: the encoder or decoder block can be excluded from updates
entirely; frozen parameters stay bit-identical across a run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics, nnet, world
from .errors import ConfigurationError, TrainingError
from .features import FeatureConfig
from .nnet import Mlp, OptimState, adam_step
from .policy import (LOG_2PI, RolloutConfig, TrafficPolicy, bc_dataset,
                     bc_loss_and_grads, dist_backward, dist_forward,
                     gaussian_log_prob, rollout_closed_loop, save_policy)
from .reward import RewardModel, score, step_scores
from .world import HIST_STEPS, AgentTrack, Scenario

FREEZE_MODES = ("none", "encoder", "decoder")


@dataclass(frozen=True)
class FinetuneConfig:
    alpha: float = 0.1
    epochs: int = 70
    clip_ratio: float = 0.2
    gae_lambda: float = 0.95
    discount: float = 0.99
    freeze: str = "none"
    bc_weight: float = 1.0
    lr: float = 3e-4
    value_lr: float = 1e-3
    scenes_per_epoch: int = 8
    ppo_passes: int = 4
    minibatch: int = 256
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    normalize_advantages: bool = True
    bc_batch: int = 256
    seed: int = 0
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    probe_every: int = 1

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if not 0 < self.clip_ratio < 1:
            raise ConfigurationError(
                f"clip_ratio must be in (0, 1), got {self.clip_ratio}")
        if self.freeze not in FREEZE_MODES:
            raise ConfigurationError(
                f"freeze must be one of {FREEZE_MODES}, got {self.freeze!r}")


def init_value_head(policy: TrafficPolicy, seed=1000) -> Mlp:
    return nnet.init_mlp((policy.latent_dim, 32, 1), ("tanh", "linear"), seed)


def executed_subscenario(scenario: Scenario) -> Scenario:
    """The executed portion of a closed-loop log (history prefix dropped)."""
    return Scenario(
        scenario.scene_id, scenario.sample_id + "/exec", scenario.dt,
        scenario.source,
        tuple(AgentTrack(a.agent_id, a.shape, a.states[HIST_STEPS + 1:])
              for a in scenario.agents))


def episode_reward(scenario: Scenario, rm: RewardModel, alpha: float,
                   map_model, steps_per_segment: int) -> np.ndarray:
    """Per-segment reward sequence for one closed-loop episode.

    Segment k gets alpha * (sum of its steps' agent-mean rewards) / T_total,
    so sum(segments) == alpha * score(executed portion) exactly.
    """
    sub = executed_subscenario(scenario)
    per_step = step_scores(rm, sub, map_model).mean(axis=0)   # (T_exec,)
    t_total = per_step.shape[0]
    if t_total % steps_per_segment != 0:
        raise ConfigurationError(
            f"{t_total} executed steps not divisible by segment length "
            f"{steps_per_segment}")
    segments = per_step.reshape(-1, steps_per_segment).sum(axis=1)
    return alpha * segments / t_total


def gae_advantages(rewards, values, discount, lam):
    """Generalized advantage estimation over one trajectory (terminal V=0)."""
    t = len(rewards)
    adv = np.zeros(t)
    last = 0.0
    for k in range(t - 1, -1, -1):
        next_v = values[k + 1] if k + 1 < t else 0.0
        delta = rewards[k] + discount * next_v - values[k]
        last = delta + discount * lam * last
        adv[k] = last
    return adv


@dataclass
class Trajectory:
    features: np.ndarray    # (T, dim)
    actions: np.ndarray     # (T, 2) raw pre-clip samples
    log_probs: np.ndarray   # (T,)
    rewards: np.ndarray     # (T,)


def collect_trajectories(policy, rm, scenes, config: FinetuneConfig, rng):
    """Roll out each scene once; returns (trajectories, scenarios, infos)."""
    trajectories = []
    scenarios = []
    infos = []
    for map_model, context, _gt in scenes:
        sc, info, rec = rollout_closed_loop(
            policy, context, config.rollout, rng, record=True)
        segments = episode_reward(sc, rm, config.alpha, map_model,
                                  info.steps_per_plan)
        per_step = np.repeat(segments / info.steps_per_plan,
                             info.steps_per_plan)
        for i in range(context.n_agents):
            trajectories.append(Trajectory(
                features=rec.features[:, i, :],
                actions=rec.raw_actions[:, i, :],
                log_probs=rec.log_probs[:, i],
                rewards=per_step.copy(),
            ))
        scenarios.append(sc)
        infos.append(info)
    return trajectories, scenarios, infos


def surrogate_upstream(mu, log_std, actions, logp_old, advantages, clip_ratio):
    """Clipped-surrogate loss and its gradients w.r.t. mu and log_std."""
    n = len(actions)
    logp_new = gaussian_log_prob(actions, mu, log_std)
    ratio = np.exp(logp_new - logp_old)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio) * advantages
    loss = -float(np.mean(np.minimum(unclipped, clipped)))
    active = unclipped <= clipped
    dlogp = np.where(active, -advantages * ratio, 0.0) / n
    inv_var = np.exp(-2.0 * log_std)
    z2 = (actions - mu) ** 2 * inv_var
    dmu = dlogp[:, None] * (actions - mu) * inv_var
    dls = dlogp[:, None] * (z2 - 1.0)
    diag = {
        "mean_ratio": float(np.mean(ratio)),
        "clip_fraction": float(np.mean(~active)),
    }
    return loss, dmu, dls, diag


def ppo_update(policy: TrafficPolicy, value_head: Mlp, trajectories,
               config: FinetuneConfig, demo_feats=None, demo_targets=None,
               rng=None, optimizers=None):
    """Clipped-surrogate PPO with GAE; respects the freeze mode.

    Returns a diagnostics dict. Optimizer states persist across calls when
    `optimizers` (dict with enc/dec/value) is supplied.
    """
    rng = rng or np.random.default_rng(config.seed)
    if optimizers is None:
        optimizers = make_optimizers(config)

    feats = np.concatenate([t.features for t in trajectories], axis=0)
    actions = np.concatenate([t.actions for t in trajectories], axis=0)
    logp_old = np.concatenate([t.log_probs for t in trajectories], axis=0)

    latents = nnet.forward(policy.encoder, feats)
    values = nnet.forward(value_head, latents)[:, 0]
    adv_parts, ret_parts = [], []
    off = 0
    for t in trajectories:
        n = len(t.rewards)
        v = values[off:off + n]
        adv = gae_advantages(t.rewards, v, config.discount, config.gae_lambda)
        adv_parts.append(adv)
        ret_parts.append(adv + v)
        off += n
    advantages = np.concatenate(adv_parts)
    returns = np.concatenate(ret_parts)
    if config.normalize_advantages and advantages.std() > 0:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

    n_rows = feats.shape[0]
    diag_acc = {"surrogate": 0.0, "value_loss": 0.0, "bc_loss": 0.0,
                "mean_ratio": 0.0, "clip_fraction": 0.0, "entropy": 0.0}
    n_updates = 0
    for _pass in range(config.ppo_passes):
        order = rng.permutation(n_rows)
        for lo in range(0, n_rows, config.minibatch):
            idx = order[lo:lo + config.minibatch]
            b = len(idx)
            mu, log_std, caches = dist_forward(policy, feats[idx])
            s_loss, dmu, dls, s_diag = surrogate_upstream(
                mu, log_std, actions[idx], logp_old[idx], advantages[idx],
                config.clip_ratio)
            # entropy bonus: H = sum(log_std) + const per row
            ent = float(np.mean(np.sum(log_std, axis=1))) + (1.0 + LOG_2PI)
            dls -= config.entropy_coef / b

            denc, ddec = dist_backward(policy, caches, dmu, dls)

            # value loss on the same rows, through the current encoder
            enc_out, enc_cache = nnet.forward_cached(policy.encoder, feats[idx])
            v_out, v_cache = nnet.forward_cached(value_head, enc_out)
            v_err = v_out[:, 0] - returns[idx]
            v_loss = float(np.mean(v_err ** 2))
            dv = (2.0 * config.value_coef / b) * v_err[:, None]
            dvalue, dlat_v = nnet.backward_cached(value_head, v_cache, dv)
            denc_v, _ = nnet.backward_cached(policy.encoder, enc_cache, dlat_v)
            denc = denc + denc_v

            bc_loss = 0.0
            if config.bc_weight > 0.0 and demo_feats is not None and len(demo_feats):
                pick = rng.choice(len(demo_feats),
                                  size=min(config.bc_batch, len(demo_feats)),
                                  replace=False)
                bc_loss, bde, bdd = bc_loss_and_grads(
                    policy, demo_feats[pick], demo_targets[pick])
                denc = denc + config.bc_weight * bde
                ddec = ddec + config.bc_weight * bdd

            total = s_loss + config.value_coef * v_loss \
                - config.entropy_coef * ent + config.bc_weight * bc_loss
            if not math.isfinite(total):
                raise TrainingError(
                    f"non-finite update loss (surrogate {s_loss}, "
                    f"value {v_loss}, bc {bc_loss})")

            if config.freeze != "encoder":
                policy.encoder.params = adam_step(
                    optimizers["enc"], policy.encoder.params, denc)
            if config.freeze != "decoder":
                policy.decoder.params = adam_step(
                    optimizers["dec"], policy.decoder.params, ddec)
            value_head.params = adam_step(
                optimizers["value"], value_head.params, dvalue)

            diag_acc["surrogate"] += s_loss
            diag_acc["value_loss"] += v_loss
            diag_acc["bc_loss"] += bc_loss
            diag_acc["mean_ratio"] += s_diag["mean_ratio"]
            diag_acc["clip_fraction"] += s_diag["clip_fraction"]
            diag_acc["entropy"] += ent
            n_updates += 1

    return {k: v / max(1, n_updates) for k, v in diag_acc.items()}


def make_optimizers(config: FinetuneConfig):
    return {
        "enc": OptimState(lr=config.lr),
        "dec": OptimState(lr=config.lr),
        "value": OptimState(lr=config.value_lr),
    }


def probe_metrics(policy, rm, probe_scenes, config, seed):
    """fail/real/reward_cost of fresh rollouts on a held-out probe set."""
    rng = np.random.default_rng(seed)
    rollouts, refs, maps = [], [], {}
    for map_model, context, gt in probe_scenes:
        sc, _ = rollout_closed_loop(policy, context, config.rollout, rng)
        rollouts.append(sc)
        refs.append(gt)
        maps[context.scene_id] = map_model
    real, _ = metrics.realism_deviation(rollouts, refs)
    return {
        "fail": metrics.failure_rate(rollouts, maps),
        "real": real,
        "reward_cost": metrics.reward_cost(rm, rollouts, maps),
    }


def finetune_loop(policy: TrafficPolicy, rm: RewardModel, train_scenes,
                  probe_scenes, config: FinetuneConfig,
                  demos=None, out_dir=None, value_head=None):
    """Per epoch: roll out a scene batch, PPO-update, probe held-out metrics.

    Returns (policy, value_head, history) where history has one record per
    probed epoch plus the initial baseline row (epoch -1).
    """
    if not train_scenes:
        raise ConfigurationError("fine-tuning needs at least one train scene")
    rng = np.random.default_rng(config.seed)
    value_head = value_head or init_value_head(policy, seed=config.seed + 1000)
    optimizers = make_optimizers(config)

    demo_feats = demo_targets = None
    if demos and config.bc_weight > 0.0:
        demo_feats, demo_targets = bc_dataset(demos, policy.feature_config)

    history = []
    baseline = probe_metrics(policy, rm, probe_scenes, config, config.seed + 7)
    history.append({"epoch": -1, **baseline})

    for epoch in range(config.epochs):
        lo = (epoch * config.scenes_per_epoch) % len(train_scenes)
        batch = [train_scenes[(lo + i) % len(train_scenes)]
                 for i in range(min(config.scenes_per_epoch, len(train_scenes)))]
        trajectories, _, _ = collect_trajectories(policy, rm, batch, config, rng)
        diag = ppo_update(policy, value_head, trajectories, config,
                          demo_feats, demo_targets, rng, optimizers)
        record = {"epoch": epoch, **{k: diag[k] for k in
                                     ("surrogate", "value_loss", "bc_loss",
                                      "mean_ratio", "clip_fraction")}}
        if (epoch + 1) % config.probe_every == 0 or epoch == config.epochs - 1:
            record.update(probe_metrics(policy, rm, probe_scenes, config,
                                        config.seed + 7))
        history.append(record)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_policy(out / f"policy_epoch{epoch:03d}.ckpt", policy,
                        extra={"epoch": epoch, "freeze": config.freeze})
    return policy, value_head, history


def write_history(path, history):
    import json
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")
