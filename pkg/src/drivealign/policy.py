"""Feature-based stochastic action policy plus the closed-loop rollout
engine with periodic re-planning.

One shared-weight policy controls every agent. The encoder maps the feature
vector to a latent; the decoder maps the latent to Gaussian action
parameters (mean accel, mean yaw rate, per-dim log-stddevs clamped to
[-5, 2]). Plans are autoregressive under the same dynamics used for
execution, so adopting the first few planned steps of each cycle keeps the
executed log exactly replayable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, nnet, world
from .errors import ConfigurationError, ModelError
from .features import FeatureConfig, agent_features
from .nnet import Mlp, OptimState, adam_step
from .world import (HIST_STEPS, LIMITS_DEFAULT, AgentTrack, Scenario,
                    ScenarioContext, WorldLimits, wrap_angle)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)

ENCODER_WIDTHS = (64, 32)
DECODER_WIDTHS = (32,)


@dataclass
class TrafficPolicy:
    feature_config: FeatureConfig
    encoder: Mlp  # features -> latent
    decoder: Mlp  # latent -> (mu_a, mu_w, log_std_a, log_std_w)
    limits: WorldLimits = field(default_factory=WorldLimits)

    @property
    def latent_dim(self):
        return self.encoder.widths[-1]

    def copy(self):
        return TrafficPolicy(self.feature_config, self.encoder.copy(),
                             self.decoder.copy(), self.limits)


def init_policy(seed, feature_config=None, limits=LIMITS_DEFAULT) -> TrafficPolicy:
    cfg = feature_config or FeatureConfig()
    enc = nnet.init_mlp((cfg.dim,) + ENCODER_WIDTHS, ("tanh", "tanh"), seed)
    dec = nnet.init_mlp((ENCODER_WIDTHS[-1],) + DECODER_WIDTHS + (4,),
                        ("tanh", "linear"), seed + 1)
    # start with modest exploration noise: bias the log-std outputs down
    dec.params[-2:] = -1.0
    return TrafficPolicy(cfg, enc, dec, limits)


def dist_forward(policy: TrafficPolicy, feats):
    """(mu, log_std, caches) for a feature batch; log_std hard-clamped."""
    enc_out, enc_cache = nnet.forward_cached(policy.encoder, feats)
    dec_out, dec_cache = nnet.forward_cached(policy.decoder, enc_out)
    mu = dec_out[:, :2]
    raw_ls = dec_out[:, 2:]
    log_std = np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)
    clip_mask = (raw_ls > LOG_STD_MIN) & (raw_ls < LOG_STD_MAX)
    return mu, log_std, (enc_cache, dec_cache, clip_mask)


def dist_backward(policy: TrafficPolicy, caches, dmu, dlog_std):
    """Parameter gradients (encoder, decoder) for upstream on mu/log_std."""
    enc_cache, dec_cache, clip_mask = caches
    dout = np.concatenate([dmu, dlog_std * clip_mask], axis=1)
    ddec, dlatent = nnet.backward_cached(policy.decoder, dec_cache, dout)
    denc, _ = nnet.backward_cached(policy.encoder, enc_cache, dlatent)
    return denc, ddec


def gaussian_log_prob(actions, mu, log_std):
    """Per-row diagonal-Gaussian log density, summed over the two dims."""
    z = (actions - mu) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=1)


def clip_actions(actions, limits: WorldLimits):
    out = np.empty_like(actions)
    out[:, 0] = np.clip(actions[:, 0], -limits.accel_max, limits.accel_max)
    out[:, 1] = np.clip(actions[:, 1], -limits.yaw_rate_max, limits.yaw_rate_max)
    return out


def featurize(context: ScenarioContext, agent_idx: int,
              cfg: FeatureConfig | None = None) -> np.ndarray:
    """Feature vector for one agent at the end of the context history."""
    cfg = cfg or FeatureConfig()
    return agent_features(context.map, context.history, agent_idx, cfg)


@dataclass(frozen=True)
class RolloutConfig:
    horizon_s: float = 10.0
    replan_hz: float = 2.0
    dt: float = world.DT_DEFAULT
    plan_horizon: int = 20

    def __post_init__(self):
        period = 1.0 / self.replan_hz
        steps = period / self.dt
        if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
            raise ConfigurationError(
                f"re-plan period {period}s is not a multiple of dt {self.dt}s")
        cycles = self.horizon_s / period
        if abs(cycles - round(cycles)) > 1e-9 or round(cycles) < 1:
            raise ConfigurationError(
                f"horizon {self.horizon_s}s is not a multiple of the re-plan "
                f"period {period}s")
        if self.plan_horizon < self.steps_per_plan:
            raise ConfigurationError(
                f"plan_horizon {self.plan_horizon} shorter than the executed "
                f"block {self.steps_per_plan}")

    @property
    def steps_per_plan(self):
        return int(round(1.0 / self.replan_hz / self.dt))

    @property
    def n_cycles(self):
        return int(round(self.horizon_s * self.replan_hz))

    @property
    def n_steps(self):
        return self.n_cycles * self.steps_per_plan


@dataclass
class RolloutInfo:
    plan_cycles: int
    executed_steps: int
    steps_per_plan: int


@dataclass
class TrajectoryRecord:
    """Per-step policy data captured during a rollout, for PPO."""

    features: np.ndarray    # (T, M, dim)
    raw_actions: np.ndarray  # (T, M, 2)
    log_probs: np.ndarray   # (T, M)


def _plan_steps(policy, map_model, window, n_steps, rng, dt, use_mean=False):
    """Autoregressively simulate n_steps for all agents from `window`.

    Returns (states (n, M, 4), feats (n, M, dim), raw (n, M, 2), logp (n, M)).
    `window` is mutated to the post-plan rolling history.
    """
    m = window.shape[0]
    cfg = policy.feature_config
    states = np.empty((n_steps, m, 4))
    feats = np.empty((n_steps, m, cfg.dim))
    raw = np.empty((n_steps, m, 2))
    logp = np.empty((n_steps, m))
    for t in range(n_steps):
        f = np.stack([agent_features(map_model, window, i, cfg) for i in range(m)])
        mu, log_std, _ = dist_forward(policy, f)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(log_std))):
            raise ModelError("policy produced non-finite action parameters")
        if use_mean:
            a = mu.copy()
        else:
            a = mu + np.exp(log_std) * rng.standard_normal(size=(m, 2))
        lp = gaussian_log_prob(a, mu, log_std)
        executed = clip_actions(a, policy.limits)
        cur = np.ascontiguousarray(window[:, -1, :])
        nxt = kernels.unicycle_steps(cur, np.ascontiguousarray(executed), dt)
        states[t] = nxt
        feats[t] = f
        raw[t] = a
        logp[t] = lp
        window = np.concatenate([window[:, 1:, :], nxt[:, None, :]], axis=1)
    return states, feats, raw, logp, window


def sample_plan(policy: TrafficPolicy, context: ScenarioContext, rng,
                plan_horizon=20, dt=world.DT_DEFAULT, use_mean=False):
    """Per-agent action sequences of plan_horizon (raw, unclipped samples)."""
    window = context.history.copy()
    _, _, raw, _, _ = _plan_steps(policy, context.map, window, plan_horizon,
                                  rng, dt, use_mean=use_mean)
    return raw


def rollout_closed_loop(policy: TrafficPolicy, context: ScenarioContext,
                        config: RolloutConfig, rng, sample_id="s0",
                        record=False):
    """Plan, execute the first re-plan block, repeat; returns the Scenario
    (history prefix included), a RolloutInfo, and optionally the record."""
    m = context.n_agents
    window = context.history.copy()
    executed = []
    rec_feats, rec_raw, rec_logp = [], [], []
    k = config.steps_per_plan
    for _cycle in range(config.n_cycles):
        plan_window = window.copy()
        states, feats, raw, logp, _ = _plan_steps(
            policy, context.map, plan_window, config.plan_horizon, rng, config.dt)
        executed.append(states[:k])
        if record:
            rec_feats.append(feats[:k])
            rec_raw.append(raw[:k])
            rec_logp.append(logp[:k])
        adopted = states[:k]
        for t in range(k):
            window = np.concatenate(
                [window[:, 1:, :], adopted[t][:, None, :]], axis=1)

    exec_states = np.concatenate(executed, axis=0)  # (n_steps, M, 4)
    full = np.concatenate(
        [context.history, exec_states.transpose(1, 0, 2)], axis=1)
    scenario = Scenario(
        scene_id=context.scene_id,
        sample_id=sample_id,
        dt=config.dt,
        source=world.SOURCE_MODEL,
        agents=tuple(
            AgentTrack(context.agent_ids[i], context.shapes[i], full[i])
            for i in range(m)),
    )
    info = RolloutInfo(plan_cycles=config.n_cycles,
                       executed_steps=exec_states.shape[0],
                       steps_per_plan=k)
    if record:
        rec = TrajectoryRecord(
            features=np.concatenate(rec_feats, axis=0),
            raw_actions=np.concatenate(rec_raw, axis=0),
            log_probs=np.concatenate(rec_logp, axis=0),
        )
        return scenario, info, rec
    return scenario, info


# ---------------------------------------------------------------------------
# behavior cloning

def bc_dataset(demos, cfg: FeatureConfig):
    """(features, target actions) recovered from ground-truth logs.

    Targets invert the Euler update between consecutive states; features use
    the same windows the policy sees at execution time (full history only).
    """
    feats, targets = [], []
    for map_model, gt in demos:
        states = gt.states_stack()
        m, t_total, _ = states.shape
        if t_total < 2:
            raise ConfigurationError(
                f"demonstration {gt.scene_id} shorter than 2 states")
        for t in range(cfg.t_hist, t_total - 1):
            window = states[:, t - cfg.t_hist:t + 1, :]
            for i in range(m):
                feats.append(agent_features(map_model, window, i, cfg))
                accel, yaw = world.invert_step(states[i, t], states[i, t + 1], gt.dt)
                targets.append((accel, yaw))
    return np.asarray(feats), np.asarray(targets)


def bc_loss_and_grads(policy, feats, targets):
    """Mean Gaussian NLL of targets and the (encoder, decoder) gradients."""
    n = len(feats)
    mu, log_std, caches = dist_forward(policy, feats)
    inv_var = np.exp(-2.0 * log_std)
    diff = mu - targets
    nll = 0.5 * diff * diff * inv_var + log_std + 0.5 * LOG_2PI
    loss = float(np.sum(nll) / n)
    dmu = diff * inv_var / n
    dls = (1.0 - diff * diff * inv_var) / n
    denc, ddec = dist_backward(policy, caches, dmu, dls)
    return loss, denc, ddec


@dataclass
class BcConfig:
    epochs: int = 40
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0


def pretrain_bc(policy: TrafficPolicy, demos, config: BcConfig | None = None):
    """Train the policy on demonstrations; returns (policy, per-epoch loss)."""
    config = config or BcConfig()
    if not demos:
        raise ConfigurationError("behavior cloning needs at least 1 demonstration")
    feats, targets = bc_dataset(demos, policy.feature_config)
    rng = np.random.default_rng(config.seed)
    opt_enc = OptimState(lr=config.lr)
    opt_dec = OptimState(lr=config.lr)
    curve = []
    n = len(feats)
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            loss, denc, ddec = bc_loss_and_grads(policy, feats[idx], targets[idx])
            policy.encoder.params = adam_step(opt_enc, policy.encoder.params, denc)
            policy.decoder.params = adam_step(opt_dec, policy.decoder.params, ddec)
            losses.append(loss)
        curve.append(float(np.mean(losses)))
    return policy, curve


# ---------------------------------------------------------------------------
# checkpoints

def save_policy(path, policy: TrafficPolicy, extra: dict | None = None):
    header = {
        "kind": "policy",
        "feature_config": policy.feature_config.to_dict(),
        "limits": {"accel_max": policy.limits.accel_max,
                   "yaw_rate_max": policy.limits.yaw_rate_max},
        "encoder": {"widths": list(policy.encoder.widths),
                    "activations": list(policy.encoder.activations),
                    "seed": policy.encoder.seed},
        "decoder": {"widths": list(policy.decoder.widths),
                    "activations": list(policy.decoder.activations),
                    "seed": policy.decoder.seed},
    }
    if extra:
        header["extra"] = extra
    nnet.save_checkpoint(path, header, [policy.encoder.params,
                                        policy.decoder.params])


def load_policy(path) -> TrafficPolicy:
    header, arrays = nnet.load_checkpoint(path)
    if header.get("kind") != "policy":
        raise ConfigurationError(f"{path}: not a policy checkpoint")
    enc_h, dec_h = header["encoder"], header["decoder"]
    return TrafficPolicy(
        feature_config=FeatureConfig.from_dict(header["feature_config"]),
        encoder=Mlp(tuple(enc_h["widths"]), tuple(enc_h["activations"]),
                    arrays[0], enc_h["seed"]),
        decoder=Mlp(tuple(dec_h["widths"]), tuple(dec_h["activations"]),
                    arrays[1], dec_h["seed"]),
        limits=WorldLimits(**header["limits"]),
    )
