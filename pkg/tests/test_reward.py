import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drivealign import preference, reward, world
from drivealign.errors import ConfigurationError
from drivealign.features import FeatureConfig, scenario_step_features
from drivealign.nnet import forward
from drivealign.policy import init_policy
from drivealign.preference import (Label, OracleThresholds, make_batch,
                                   oracle_label, pairs_from_label)
from drivealign.reward import (PairData, RewardModel, RmTrainConfig,
                               init_reward_model, load_rm, pair_loss, save_rm,
                               score, step_scores, train_rm, validate_rm)
from drivealign.scenegen import SceneSpec, generate_scene

from conftest import finite_difference_grad, max_rel_error


def scene_and_scenario(seed=4, n_agents=2):
    m, ctx, gt = generate_scene(SceneSpec(seed=seed, n_agents=n_agents))
    return m, gt


# ---------------------------------------------------------------------------
# pair_loss

def test_pair_loss_equal_rewards_is_ln2():
    assert pair_loss(0.4, 0.4) == pytest.approx(math.log(2.0), abs=1e-15)


def test_pair_loss_saturates():
    assert pair_loss(20.0, 0.0) == pytest.approx(2.0611536e-9, rel=1e-4)
    assert pair_loss(20.0, 0.0) < 1e-8


def test_pair_loss_closed_form_case():
    assert pair_loss(1.0, 0.0) == pytest.approx(math.log(1 + math.exp(-1)),
                                                abs=1e-15)


def test_pair_loss_stable_at_large_gaps():
    assert 0.0 <= pair_loss(700.0, 0.0) < 1e-300
    assert pair_loss(0.0, 700.0) == pytest.approx(700.0)
    assert math.isfinite(pair_loss(-350.0, 350.0))


@given(a=st.floats(-50, 50), b=st.floats(-50, 50))
def test_pair_loss_antisymmetry_bound(a, b):
    total = pair_loss(a, b) + pair_loss(b, a)
    assert total >= 2 * math.log(2.0) - 1e-12
    if a == b:
        assert total == pytest.approx(2 * math.log(2.0), abs=1e-12)


# ---------------------------------------------------------------------------
# score

def test_zero_trunk_scores_zero():
    m, gt = scene_and_scenario()
    rm = init_reward_model(0)
    rm.trunk.params[:] = 0.0
    assert score(rm, gt, m) == 0.0


def test_score_in_tanh_range():
    m, gt = scene_and_scenario()
    rm = init_reward_model(3)
    s = step_scores(rm, gt, m)
    assert np.all(s > -1.0) and np.all(s < 1.0)


def test_score_is_weighted_mean_of_halves():
    m, gt = scene_and_scenario()
    rm = init_reward_model(1)
    s = step_scores(rm, gt, m)
    t = s.shape[1]
    cut = t // 3
    first, second = s[:, :cut], s[:, cut:]
    combined = (first.mean() * first.size + second.mean() * second.size) / s.size
    assert score(rm, gt, m) == pytest.approx(combined, abs=1e-12)


def test_score_matches_naive_per_step_loop():
    m, gt = scene_and_scenario(seed=9)
    rm = init_reward_model(2)
    cfg = rm.feature_config
    states = gt.states_stack()
    total, count = 0.0, 0
    from drivealign.features import agent_features
    for t in range(states.shape[1]):
        lo = max(0, t - cfg.t_hist)
        window = states[:, lo:t + 1, :]
        for i in range(states.shape[0]):
            f = agent_features(m, window, i, cfg)
            total += float(forward(rm.trunk, f)[0])
            count += 1
    assert score(rm, gt, m) == pytest.approx(total / count, abs=1e-10)


def test_score_defined_for_short_sequences():
    m, gt = scene_and_scenario()
    short = world.Scenario(
        gt.scene_id, "short", gt.dt, gt.source,
        tuple(world.AgentTrack(a.agent_id, a.shape, a.states[:2])
              for a in gt.agents))
    assert math.isfinite(score(init_reward_model(0), short, m))


def test_constant_shift_leaves_ordering_and_loss_unchanged(rng):
    s = rng.normal(size=(3, 40))
    c = 0.37
    assert np.mean(s + c) == pytest.approx(np.mean(s) + c)
    r1, r2 = float(np.mean(s)), float(np.mean(s)) - 0.2
    assert pair_loss(r1 + c, r2 + c) == pytest.approx(pair_loss(r1, r2), abs=1e-12)


def test_score_invariant_to_agent_permutation():
    m, gt = scene_and_scenario(seed=15, n_agents=4)
    rm = init_reward_model(5)
    base = score(rm, gt, m)
    perm = [2, 0, 3, 1]
    shuffled = world.Scenario(gt.scene_id, gt.sample_id, gt.dt, gt.source,
                              tuple(gt.agents[i] for i in perm))
    assert score(rm, shuffled, m) == pytest.approx(base, abs=1e-12)


# ---------------------------------------------------------------------------
# training

def labeled_archive(tmp_path, n_scenes=6, n=4, policy_seed=0):
    pol = init_policy(policy_seed)
    all_pairs = []
    ids = []
    for k in range(n_scenes):
        m, ctx, gt = generate_scene(SceneSpec(seed=100 + k, n_agents=2))
        batch, _ = make_batch(pol, ctx, n, np.random.default_rng(500 + k), gt)
        preference.write_batch_archive(tmp_path, batch)
        ids.append(batch.batch_id)
        label = oracle_label(batch)
        all_pairs.extend(pairs_from_label(batch, label))
    preference.write_batch_index(tmp_path, ids)
    return all_pairs


def test_train_rm_gradient_matches_finite_differences(tmp_path, rng):
    pairs = labeled_archive(tmp_path, n_scenes=2)
    data = PairData.from_pairs(pairs[:4], tmp_path)
    rm = init_reward_model(7, hidden=(16, 8, 1))
    loss0, grad = reward._minibatch_grad(rm, data, data.pairs[:4])

    def loss_fn(p):
        trial = RewardModel(rm.feature_config,
                            type(rm.trunk)(rm.trunk.widths, rm.trunk.activations,
                                           p, rm.trunk.seed))
        total = 0.0
        for w, l in data.pairs[:4]:
            rw = reward.score_rows(trial, data.rows[w])
            rl = reward.score_rows(trial, data.rows[l])
            total += pair_loss(rw, rl)
        return total / 4

    coords = rng.choice(rm.trunk.params.size, size=100, replace=False)
    fd = finite_difference_grad(loss_fn, rm.trunk.params, coords)
    assert max_rel_error(grad[coords], fd) < 1e-4


def test_overfit_single_pair(tmp_path):
    # the tanh head bounds per-step rewards to (-1, 1) and the rows shared
    # between winner and loser (their common history prefix) cancel in the
    # score difference, so the single-pair loss floor is
    # softplus(-2 * distinct_fraction); 500 steps should come close to it
    pairs = labeled_archive(tmp_path, n_scenes=1)
    data = PairData.from_pairs(pairs[:1], tmp_path)
    w, l = data.pairs[0]
    wrows, lrows = data.rows[w], data.rows[l]
    shared = sum(np.array_equal(a, b) for a, b in zip(wrows, lrows))
    distinct_frac = 1.0 - shared / len(wrows)
    floor = float(np.logaddexp(0.0, -2.0 * distinct_frac))
    cfg = RmTrainConfig(epochs=500, batch_size=1, lr=1e-2, seed=1,
                        hidden=(16, 8, 1))
    rm, curve = train_rm(data, cfg)
    assert floor <= curve[-1] < floor + 0.01


def smooth_vs_jerky_archive(tmp_path, n_scenes, seed0=300):
    """Batches of two rollouts each: a low-noise one (winner) and a jerky
    one; strictly separable through the history-delta features."""
    smooth_pol = init_policy(0)
    smooth_pol.decoder.params[-2:] = -4.0
    jerky_pol = init_policy(0)
    jerky_pol.decoder.params[-2:] = 0.3
    pairs, ids = [], []
    from drivealign.policy import RolloutConfig, rollout_closed_loop
    from drivealign.preference import ScenarioBatch
    cfg = RolloutConfig(horizon_s=3.0)
    for k in range(n_scenes):
        m, ctx, gt = generate_scene(SceneSpec(seed=seed0 + k, n_agents=2))
        rng = np.random.default_rng(900 + k)
        smooth, _ = rollout_closed_loop(smooth_pol, ctx, cfg, rng, sample_id="s0")
        jerky, _ = rollout_closed_loop(jerky_pol, ctx, cfg, rng, sample_id="s1")
        batch = ScenarioBatch(f"batch-{ctx.scene_id}", ctx.scene_id, m,
                              cfg.dt, (smooth, jerky), gt)
        preference.write_batch_archive(tmp_path, batch)
        ids.append(batch.batch_id)
        pairs.extend(pairs_from_label(batch, Label(batch.batch_id, 0, "oracle")))
    preference.write_batch_index(tmp_path, ids)
    return pairs


def test_train_on_separable_data_generalizes(tmp_path):
    pairs = smooth_vs_jerky_archive(tmp_path, n_scenes=24)
    train, val = pairs[:16], pairs[16:]
    data = PairData.from_pairs(train, tmp_path)
    rm, _ = train_rm(data, RmTrainConfig(epochs=300, lr=3e-3, seed=0))
    val_data = PairData.from_pairs(val, tmp_path)
    assert validate_rm(rm, val_data) > 0.9


def test_swapped_winners_mirror_accuracy(tmp_path):
    pairs = labeled_archive(tmp_path, n_scenes=4)
    split = 2 * len(pairs) // 3
    train, val = pairs[:split], pairs[split:]
    data = PairData.from_pairs(train, tmp_path)
    val_data = PairData.from_pairs(val, tmp_path)

    cfg = RmTrainConfig(epochs=15, lr=1e-3, seed=3, hidden=(16, 8, 1))
    rm_a, _ = train_rm(data, cfg)
    acc = validate_rm(rm_a, val_data)

    # same training run on swapped records, starting from the sign-mirrored
    # init (last-layer weights negated): scores negate exactly
    swapped = [type(p)(p.context_id, p.loser, p.winner, p.labeler, p.batch_id)
               for p in train]
    data_swapped = PairData.from_pairs(swapped, tmp_path)
    rm_b = init_reward_model(cfg.seed, data.feature_config, cfg.hidden)
    from drivealign.nnet import layer_slices
    last = layer_slices(rm_b.trunk.widths)[-1]
    rm_b.trunk.params[last] = -rm_b.trunk.params[last]
    rm_b, _ = train_rm(data_swapped, cfg, rm=rm_b)
    acc_swapped = validate_rm(rm_b, val_data)
    assert acc_swapped == pytest.approx(1.0 - acc, abs=1e-9)


def test_validate_zero_model_is_half(tmp_path):
    pairs = labeled_archive(tmp_path, n_scenes=2)
    data = PairData.from_pairs(pairs, tmp_path)
    rm = init_reward_model(0)
    rm.trunk.params[:] = 0.0
    assert validate_rm(rm, data) == 0.5


def test_validate_perfect_ordering(tmp_path):
    pairs = labeled_archive(tmp_path, n_scenes=2)
    data = PairData.from_pairs(pairs[:5], tmp_path)

    class Fake:
        pass

    # overwrite cached rows with constant features so a linear trunk orders
    # winners above losers deterministically
    rm = init_reward_model(0, hidden=(1,))
    for i, (w, l) in enumerate(data.pairs):
        data.rows[w] = np.full((3, rm.feature_config.dim), 0.9)
        data.rows[l] = np.full((3, rm.feature_config.dim), -0.9)
    rm.trunk.params[:rm.feature_config.dim] = 1.0 / rm.feature_config.dim
    assert validate_rm(rm, data) == 1.0


def test_train_requires_pairs():
    with pytest.raises(ConfigurationError):
        train_rm(PairData(rows={}, pairs=[], feature_config=FeatureConfig()))


def test_rm_checkpoint_round_trip(tmp_path):
    rm = init_reward_model(11)
    path = tmp_path / "rm.ckpt"
    save_rm(path, rm, extra={"train_pairs": 200})
    back = load_rm(path)
    assert np.array_equal(back.trunk.params, rm.trunk.params)
    assert back.feature_config == rm.feature_config
