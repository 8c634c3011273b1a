"""Procedural synthetic scenes and rule-based reference demonstrations.

Maps come in three kinds (straight, curve, merge). Reference drivers use
gap-based car following (IDM) for the longitudinal control and a
proportional heading correction toward a lookahead point on the lane
centerline for the lateral control. The resulting logs are smooth,
failure-free and respect the map speed limit, which makes them usable both
as behavior-cloning demonstrations and as the ground-truth anchor for the
histogram realism metric.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import world
from .errors import ConfigurationError, GenerationError
from .world import (HIST_STEPS, LIMITS_DEFAULT, AgentShape, AgentTrack, Lane,
                    MapModel, Scenario, ScenarioContext, wrap_angle)

ROAD_KINDS = ("straight", "curve", "merge")

CAR_SHAPE = AgentShape(length=4.5, width=2.0)

# IDM car-following constants
IDM_ACCEL = 2.0
IDM_BRAKE = 2.5
IDM_MIN_GAP = 4.0
IDM_HEADWAY = 1.2
IDM_DELTA = 4.0

HEADING_GAIN = 1.5
LAT_ACCEL_COMFORT = 2.5

# driver imperfection: zero-mean control noise added to the rule outputs.
# Keeps demonstrations honestly stochastic, so a cloned policy inherits a
# real noise floor instead of collapsing to near-determinism.
ACCEL_NOISE = 0.25
YAW_NOISE = 0.02


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    n_agents: int = 3
    road_kind: str = "straight"
    episode_len: int = HIST_STEPS + 100
    dt: float = world.DT_DEFAULT

    def __post_init__(self):
        if self.n_agents < 1:
            raise ConfigurationError(f"n_agents must be >= 1, got {self.n_agents}")
        if self.road_kind not in ROAD_KINDS:
            raise ConfigurationError(
                f"road_kind must be one of {ROAD_KINDS}, got {self.road_kind!r}")
        if self.episode_len < HIST_STEPS + 2:
            raise ConfigurationError(
                f"episode_len must be >= {HIST_STEPS + 2}, got {self.episode_len}")


def _polyline(points):
    return np.asarray(points, dtype=np.float64)


def build_map(road_kind: str, rng: np.random.Generator) -> MapModel:
    """Deterministic-in-rng synthetic road of the requested kind."""
    width = 3.6
    speed_limit = float(rng.uniform(9.0, 13.0))
    if road_kind == "straight":
        length = 400.0
        n = 21
        xs = np.linspace(0.0, length, n)
        lanes = (
            Lane(_polyline(np.stack([xs, np.zeros(n)], axis=1)), width),
            Lane(_polyline(np.stack([xs, np.full(n, width)], axis=1)), width),
        )
    elif road_kind == "curve":
        # entry straight, 90-degree left arc, exit straight
        radius = float(rng.uniform(55.0, 90.0))
        entry, exit_len = 120.0, 160.0
        ts = np.linspace(0.0, math.pi / 2, 60)

        def curve_lane(lat):
            # lat > 0 shifts the lane to the outside of the turn
            r = radius + lat
            pre = np.stack([np.linspace(0.0, entry, 7), np.full(7, -lat)], axis=1)
            arc = np.stack([entry + r * np.sin(ts),
                            radius - r * np.cos(ts)], axis=1)
            post = np.stack([np.full(8, entry + r),
                             radius + np.linspace(exit_len / 8, exit_len, 8)],
                            axis=1)
            return Lane(np.concatenate([pre, arc, post], axis=0), width)

        lanes = (curve_lane(0.0), curve_lane(width))
    elif road_kind == "merge":
        # main lane straight along +x; ramp converges and then shares the
        # main centerline so arclength-to-end is a common ordering
        length = 420.0
        merge_x = 140.0
        xs_main = np.linspace(0.0, length, 22)
        main = np.stack([xs_main, np.zeros_like(xs_main)], axis=1)
        n_ramp = 24
        xs_ramp = np.linspace(0.0, merge_x, n_ramp)
        offset = 24.0
        # smooth cubic blend from lateral offset to 0 at the merge point
        frac = xs_ramp / merge_x
        ys_ramp = -offset * (1.0 - 3 * frac ** 2 + 2 * frac ** 3)
        tail = np.stack([np.linspace(merge_x + (length - merge_x) / 14, length, 14),
                         np.zeros(14)], axis=1)
        ramp = np.concatenate(
            [np.stack([xs_ramp, ys_ramp], axis=1), tail], axis=0)
        lanes = (Lane(main, width), Lane(ramp, width))
    else:
        raise ConfigurationError(f"unknown road kind {road_kind!r}")
    return MapModel(lanes=lanes, speed_limit=speed_limit)


@dataclass
class _Driver:
    lane_idx: int
    v_target: float


def _remaining(lane: Lane, x, y):
    _, s, _ = lane.project(x, y)
    return lane.length - s


def _reference_actions(map_model, states, drivers, couple_all, limits,
                       rng=None, dt=world.DT_DEFAULT):
    """One control per agent from the car-following + lane-tracking rules."""
    m = len(drivers)
    rem = np.array([
        _remaining(map_model.lanes[drivers[i].lane_idx], states[i, 0], states[i, 1])
        for i in range(m)
    ])
    actions = np.zeros((m, 2))
    for i in range(m):
        lane = map_model.lanes[drivers[i].lane_idx]
        x, y, v, th = states[i]
        # leader: nearest agent ahead in the shared ordering
        gap = np.inf
        dv = 0.0
        for j in range(m):
            if j == i:
                continue
            if not couple_all and drivers[j].lane_idx != drivers[i].lane_idx:
                continue
            ahead = rem[i] - rem[j]
            if ahead > 0 and ahead < gap:
                gap = ahead - CAR_SHAPE.length
                dv = v - states[j, 2]
        v0 = drivers[i].v_target
        accel = IDM_ACCEL * (1.0 - (v / v0) ** IDM_DELTA)
        if np.isfinite(gap):
            gap = max(gap, 0.1)
            s_star = IDM_MIN_GAP + v * IDM_HEADWAY \
                + v * dv / (2.0 * math.sqrt(IDM_ACCEL * IDM_BRAKE))
            accel = IDM_ACCEL * (1.0 - (v / v0) ** IDM_DELTA - (s_star / gap) ** 2)
        accel = float(np.clip(accel, -limits.accel_max, limits.accel_max))

        _, s, _ = lane.project(x, y)
        look = max(4.0, 0.8 * v)
        tx, ty = lane.point_at(s + look)
        desired = math.atan2(ty - y, tx - x)
        yaw = HEADING_GAIN * wrap_angle(desired - th)
        if rng is not None:
            accel += ACCEL_NOISE * rng.standard_normal()
            yaw += YAW_NOISE * rng.standard_normal()
            accel = float(np.clip(accel, -limits.accel_max, limits.accel_max))
        # hard cap so noise can never push speed past the map limit
        headroom = (map_model.speed_limit - v) / dt
        accel = min(accel, headroom)
        yaw_cap = limits.yaw_rate_max
        if v > 1.0:
            yaw_cap = min(yaw_cap, LAT_ACCEL_COMFORT / v)
        actions[i] = (accel, float(np.clip(yaw, -yaw_cap, yaw_cap)))
    return actions


def _place_agents(spec, map_model, rng, limits):
    """Starting states and drivers with safe spacing in the shared ordering."""
    m = spec.n_agents
    couple_all = spec.road_kind == "merge"
    for _attempt in range(40):
        lane_order = [i % len(map_model.lanes) for i in range(m)]
        rng.shuffle(lane_order)
        drivers = []
        states = np.zeros((m, 4))
        rem_list = []
        ok = True
        for i in range(m):
            lane_idx = lane_order[i]
            lane = map_model.lanes[lane_idx]
            v_target = map_model.speed_limit * rng.uniform(0.72, 0.92)
            s0 = rng.uniform(2.0, max(4.0, lane.length * 0.45))
            x, y = lane.point_at(s0)
            heading = lane.heading_at(s0)
            v_init = v_target * rng.uniform(0.55, 0.85)
            states[i] = (x, y, v_init, heading)
            drivers.append(_Driver(lane_idx, v_target))
            rem_list.append(lane.length - s0)
        min_spacing = CAR_SHAPE.length + IDM_MIN_GAP + 6.0
        for i in range(m):
            for j in range(i + 1, m):
                same_order = couple_all or drivers[i].lane_idx == drivers[j].lane_idx
                if same_order and abs(rem_list[i] - rem_list[j]) < min_spacing:
                    ok = False
                euclid = math.hypot(states[i, 0] - states[j, 0],
                                    states[i, 1] - states[j, 1])
                if euclid < CAR_SHAPE.length + 1.0:
                    ok = False
        if ok:
            return states, drivers, couple_all
    raise GenerationError(
        f"could not place {m} agents on {spec.road_kind} road after 40 attempts "
        f"(seed {spec.seed})")


def generate_scene(spec: SceneSpec, limits=LIMITS_DEFAULT):
    """(MapModel, ScenarioContext, ground-truth Scenario), deterministic in seed.

    Driver noise can very occasionally produce a failing log; those draws
    are rejected and retried with derived sub-seeds (bounded)."""
    last_error = None
    for attempt in range(8):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=spec.seed, spawn_key=(attempt,)))
        try:
            return _generate_once(spec, rng, limits)
        except GenerationError as exc:
            last_error = exc
    raise GenerationError(
        f"no clean scene after 8 attempts (seed {spec.seed}, "
        f"{spec.road_kind}): {last_error}")


def _generate_once(spec, rng, limits):
    map_model = build_map(spec.road_kind, rng)
    states, drivers, couple_all = _place_agents(spec, map_model, rng, limits)

    m = spec.n_agents
    traj = np.zeros((m, spec.episode_len + 1, 4))
    traj[:, 0] = states
    cur = states
    for t in range(spec.episode_len):
        actions = _reference_actions(map_model, cur, drivers, couple_all,
                                     limits, rng, spec.dt)
        cur = world.kernels.unicycle_steps(
            np.ascontiguousarray(cur), np.ascontiguousarray(actions), spec.dt)
        traj[:, t + 1] = cur

    scene_id = f"scene-{spec.road_kind}-{spec.seed}"
    agent_ids = tuple(f"a{i}" for i in range(m))
    shapes = tuple(CAR_SHAPE for _ in range(m))
    gt = Scenario(
        scene_id=scene_id,
        sample_id="gt",
        dt=spec.dt,
        source=world.SOURCE_GROUND_TRUTH,
        agents=tuple(
            AgentTrack(agent_ids[i], shapes[i], traj[i]) for i in range(m)),
    )
    context = ScenarioContext(
        scene_id=scene_id,
        map=map_model,
        history=np.ascontiguousarray(traj[:, :HIST_STEPS + 1]),
        shapes=shapes,
        agent_ids=agent_ids,
    )
    if world.detect_collision(gt).any() or world.detect_offroad(gt, map_model).any():
        raise GenerationError(
            f"reference drivers produced a failing log (seed {spec.seed}, "
            f"{spec.road_kind}); widen spacing or check driver constants")
    return map_model, context, gt


# ---------------------------------------------------------------------------
# corpus on disk: one directory per scene with exact-format map/log files

def scene_dir(root, split, scene_id):
    return Path(root) / "scenes" / split / scene_id


def generate_corpus(root, split, n_scenes, base_seed, n_agents=3,
                    episode_len=HIST_STEPS + 100, kinds=ROAD_KINDS):
    """Write n_scenes scene directories; returns the ordered scene ids."""
    root = Path(root)
    ids = []
    seeds = np.random.SeedSequence(base_seed).generate_state(n_scenes)
    for i in range(n_scenes):
        kind = kinds[i % len(kinds)]
        spec = SceneSpec(seed=int(seeds[i]), n_agents=n_agents,
                         road_kind=kind, episode_len=episode_len)
        map_model, _context, gt = generate_scene(spec)
        sdir = scene_dir(root, split, gt.scene_id)
        sdir.mkdir(parents=True, exist_ok=True)
        world.write_map(sdir / "map.json", map_model)
        world.write_scenarios(sdir / "ground_truth.jsonl", [gt])
        ids.append(gt.scene_id)
    index_path = Path(root) / "scenes" / split / "index.json"
    index_path.parent.mkdir(parents=True, exist_ok=True)
    with open(index_path, "w") as fh:
        json.dump({"scene_ids": ids}, fh)
        fh.write("\n")
    return ids


def load_scene(root, split, scene_id):
    """(MapModel, ScenarioContext, ground-truth Scenario) from disk."""
    sdir = scene_dir(root, split, scene_id)
    map_model = world.read_map(sdir / "map.json")
    gt = world.read_scenarios(sdir / "ground_truth.jsonl")[0]
    context = ScenarioContext(
        scene_id=gt.scene_id,
        map=map_model,
        history=np.ascontiguousarray(
            gt.states_stack()[:, :HIST_STEPS + 1]),
        shapes=tuple(a.shape for a in gt.agents),
        agent_ids=tuple(a.agent_id for a in gt.agents),
    )
    return map_model, context, gt


def list_scenes(root, split):
    index_path = Path(root) / "scenes" / split / "index.json"
    with open(index_path) as fh:
        return json.load(fh)["scene_ids"]
