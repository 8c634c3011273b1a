"""Sequence realism scorer trained from pairwise preferences.

The trunk scores every (agent, step) feature row through an all-tanh head
(output included, so per-step rewards live in (-1, 1)); the scenario reward
is the mean over agents and steps, which makes any sequence length
scorable. Training minimizes the pairwise logistic loss
-log sigmoid(r_winner - r_loser) with gradients flowing through both
scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nnet
from .errors import ConfigurationError
from .features import FeatureConfig, scenario_step_features
from .nnet import Mlp, OptimState, adam_step
from .preference import GT_WINNER, read_batch_archive
from .world import MapModel, Scenario

TRUNK_WIDTHS_DEFAULT = (64, 64, 32, 1)
# the full-scale head shape used with large scene encoders
TRUNK_WIDTHS_LARGE = (512, 512, 512, 128, 32, 1)


@dataclass
class RewardModel:
    feature_config: FeatureConfig
    trunk: Mlp   # all-tanh, scalar output

    def copy(self):
        return RewardModel(self.feature_config, self.trunk.copy())


def init_reward_model(seed, feature_config=None,
                      hidden=TRUNK_WIDTHS_DEFAULT) -> RewardModel:
    cfg = feature_config or FeatureConfig()
    widths = (cfg.dim,) + tuple(hidden)
    activations = ("tanh",) * (len(widths) - 1)
    return RewardModel(cfg, nnet.init_mlp(widths, activations, seed))


def step_scores(rm: RewardModel, scenario: Scenario, map_model: MapModel):
    """(M, T) per-agent, per-step rewards."""
    states = scenario.states_stack()
    feats = scenario_step_features(map_model, states, rm.feature_config)
    m, t, dim = feats.shape
    out = nnet.forward(rm.trunk, feats.reshape(m * t, dim))
    return out.reshape(m, t)


def score(rm: RewardModel, scenario: Scenario, map_model: MapModel) -> float:
    """Scenario reward: mean per-step reward over agents and steps."""
    return float(step_scores(rm, scenario, map_model).mean())


def score_rows(rm: RewardModel, rows: np.ndarray) -> float:
    """Mean trunk output over pre-featurized rows (R, dim)."""
    return float(nnet.forward(rm.trunk, rows).mean())


def pair_loss(r_winner: float, r_loser: float) -> float:
    """-log sigmoid(r_winner - r_loser), stable for any finite difference."""
    return float(np.logaddexp(0.0, -(r_winner - r_loser)))


# ---------------------------------------------------------------------------
# training data: featurize each distinct scenario once

@dataclass
class PairData:
    """Resolved preference pairs plus a feature row cache."""

    rows: dict            # key -> (R, dim) float array
    pairs: list           # list of (winner_key, loser_key)
    feature_config: FeatureConfig

    @classmethod
    def from_pairs(cls, pairs, archive_root, feature_config=None, cache=None):
        cfg = feature_config or FeatureConfig()
        rows = cache if cache is not None else {}
        resolved = []
        batches = {}
        for p in pairs:
            if p.batch_id not in batches:
                batches[p.batch_id] = read_batch_archive(archive_root, p.batch_id)
            batch = batches[p.batch_id]
            by_id = {sc.sample_id: sc for sc in batch.scenarios}
            by_id[GT_WINNER] = batch.ground_truth
            for sid in (p.winner, p.loser):
                key = (p.batch_id, sid)
                if key not in rows:
                    sc = by_id[sid]
                    feats = scenario_step_features(
                        batch.map, sc.states_stack(), cfg)
                    m, t, dim = feats.shape
                    rows[key] = feats.reshape(m * t, dim)
            resolved.append(((p.batch_id, p.winner), (p.batch_id, p.loser)))
        return cls(rows=rows, pairs=resolved, feature_config=cfg)

    def __len__(self):
        return len(self.pairs)


@dataclass
class RmTrainConfig:
    epochs: int = 150
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 0.0
    seed: int = 0
    hidden: tuple = TRUNK_WIDTHS_DEFAULT
    # fraction of each scenario's feature rows scored per update; the
    # resulting score estimate is unbiased and cuts the epoch cost
    row_subsample: float = 0.5


def _minibatch_grad(rm, data, batch_pairs, rng=None, row_fraction=1.0):
    """(mean pair loss, trunk gradient) for one minibatch of resolved pairs."""
    keys = []
    for w, l in batch_pairs:
        if w not in keys:
            keys.append(w)
        if l not in keys:
            keys.append(l)
    mats = [data.rows[k] for k in keys]
    if rng is not None and row_fraction < 1.0:
        sub = []
        for m in mats:
            n_keep = max(8, int(round(m.shape[0] * row_fraction)))
            if n_keep >= m.shape[0]:
                sub.append(m)
            else:
                idx = rng.choice(m.shape[0], size=n_keep, replace=False)
                sub.append(m[np.sort(idx)])
        mats = sub
    counts = [m.shape[0] for m in mats]
    stacked = np.concatenate(mats, axis=0)
    y, cache = nnet.forward_cached(rm.trunk, stacked)
    y = y[:, 0]
    offsets = np.concatenate([[0], np.cumsum(counts)])
    means = {k: float(y[offsets[i]:offsets[i + 1]].mean())
             for i, k in enumerate(keys)}

    b = len(batch_pairs)
    loss = 0.0
    coef = {k: 0.0 for k in keys}
    for w, l in batch_pairs:
        delta = means[w] - means[l]
        loss += np.logaddexp(0.0, -delta)
        # d/d delta of softplus(-delta) = -sigmoid(-delta), overflow-safe
        if delta >= 0:
            e = np.exp(-delta)
            s = e / (1.0 + e)
        else:
            s = 1.0 / (1.0 + np.exp(delta))
        coef[w] -= s / b
        coef[l] += s / b
    upstream = np.empty((stacked.shape[0], 1))
    for i, k in enumerate(keys):
        upstream[offsets[i]:offsets[i + 1], 0] = coef[k] / counts[i]
    dparams, _ = nnet.backward_cached(rm.trunk, cache, upstream)
    return float(loss / b), dparams


def train_rm(data: PairData, config: RmTrainConfig | None = None,
             rm: RewardModel | None = None):
    """Adam on the mean pairwise loss; returns (model, per-epoch loss curve)."""
    config = config or RmTrainConfig()
    if len(data) < 1:
        raise ConfigurationError("reward-model training needs at least 1 pair")
    if rm is None:
        rm = init_reward_model(config.seed, data.feature_config, config.hidden)
    rng = np.random.default_rng(config.seed)
    opt = OptimState(lr=config.lr)
    curve = []
    n = len(data)
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            batch = [data.pairs[i] for i in order[lo:lo + config.batch_size]]
            loss, grad = _minibatch_grad(rm, data, batch, rng,
                                         config.row_subsample)
            if config.weight_decay > 0.0:
                grad = grad + config.weight_decay * rm.trunk.params
            rm.trunk.params = adam_step(opt, rm.trunk.params, grad)
            losses.append(loss)
        curve.append(float(np.mean(losses)))
    return rm, curve


def validate_rm(rm: RewardModel, data: PairData) -> float:
    """Fraction of held-out pairs ranked correctly; ties count half."""
    if len(data) == 0:
        raise ConfigurationError("validation needs a non-empty pair set")
    means = {}
    for key in {k for pair in data.pairs for k in pair}:
        means[key] = score_rows(rm, data.rows[key])
    total = 0.0
    for w, l in data.pairs:
        if means[w] > means[l]:
            total += 1.0
        elif means[w] == means[l]:
            total += 0.5
    return total / len(data)


# ---------------------------------------------------------------------------
# learning-curve sweep over training-set sizes

def subsample_pairs(pairs, size, seed):
    if size >= len(pairs):
        return list(pairs)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pairs), size=size, replace=False)
    return [pairs[i] for i in sorted(idx)]


def accuracy_sweep(train_pairs, val_pairs, archive_root, sizes, seeds,
                   feature_config=None, config=None):
    """Train one RM per (size, seed) and report held-out accuracy records."""
    cfg = feature_config or FeatureConfig()
    base = config or RmTrainConfig()
    cache = {}
    val_data = PairData.from_pairs(val_pairs, archive_root, cfg, cache)
    records = []
    for size in sizes:
        for seed in seeds:
            subset = subsample_pairs(train_pairs, size, seed=seed * 7919 + size)
            data = PairData.from_pairs(subset, archive_root, cfg, cache)
            run_cfg = RmTrainConfig(
                epochs=base.epochs, batch_size=base.batch_size, lr=base.lr,
                weight_decay=base.weight_decay, seed=seed, hidden=base.hidden)
            rm, _ = train_rm(data, run_cfg)
            records.append({
                "size": int(size),
                "seed": int(seed),
                "accuracy": validate_rm(rm, val_data),
            })
    return records


def summarize_sweep(records):
    out = []
    for size in sorted({r["size"] for r in records}):
        accs = [r["accuracy"] for r in records if r["size"] == size]
        out.append({
            "size": size,
            "mean": float(np.mean(accs)),
            "variance": float(np.var(accs)),
            "n": len(accs),
        })
    return out


# ---------------------------------------------------------------------------
# checkpoints

def save_rm(path, rm: RewardModel, extra: dict | None = None):
    header = {
        "kind": "reward_model",
        "feature_config": rm.feature_config.to_dict(),
        "trunk": {"widths": list(rm.trunk.widths),
                  "activations": list(rm.trunk.activations),
                  "seed": rm.trunk.seed},
    }
    if extra:
        header["extra"] = extra
    nnet.save_checkpoint(path, header, [rm.trunk.params])


def load_rm(path) -> RewardModel:
    header, arrays = nnet.load_checkpoint(path)
    if header.get("kind") != "reward_model":
        raise ConfigurationError(f"{path}: not a reward-model checkpoint")
    t = header["trunk"]
    return RewardModel(
        feature_config=FeatureConfig.from_dict(header["feature_config"]),
        trunk=Mlp(tuple(t["widths"]), tuple(t["activations"]),
                  arrays[0], t["seed"]),
    )
