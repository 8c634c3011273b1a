"""Core domain types, unicycle dynamics and scenario geometry.

States are (x, y, v, theta) with speed clamped at zero and heading kept in
(-pi, pi]. Controls are (accel, yaw_rate). The transition is explicit Euler
with pre-step speed and heading in the position update, which keeps action
recovery from consecutive states a simple difference.

All values are immutable once constructed; every operation here is a pure
function of its inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, DataFormatError, InvalidStateError

TAU = 2.0 * math.pi

# global step size; history window is HIST_STEPS past states plus the current
DT_DEFAULT = 0.1
HIST_STEPS = 10

SOURCE_MODEL = "model"
SOURCE_GROUND_TRUTH = "ground_truth"


def wrap_angle(theta):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    w = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, TAU) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    if np.ndim(theta) == 0:
        return float(w)
    return w


@dataclass(frozen=True)
class WorldLimits:
    """Configured control bounds, shared by drivers and policies."""

    accel_max: float = 4.0
    yaw_rate_max: float = 0.7


LIMITS_DEFAULT = WorldLimits()


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    v: float
    theta: float

    def __post_init__(self):
        vals = (self.x, self.y, self.v, self.theta)
        if not all(math.isfinite(f) for f in vals):
            raise InvalidStateError(f"non-finite state {vals}")
        if self.v < 0:
            raise InvalidStateError(f"negative speed {self.v}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self):
        return np.array([self.x, self.y, self.v, self.theta], dtype=np.float64)


@dataclass(frozen=True)
class Action:
    accel: float
    yaw_rate: float

    def __post_init__(self):
        if not (math.isfinite(self.accel) and math.isfinite(self.yaw_rate)):
            raise InvalidStateError(
                f"non-finite action ({self.accel}, {self.yaw_rate})")


@dataclass(frozen=True)
class AgentShape:
    length: float
    width: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ConfigurationError(
                f"agent shape must be positive, got {self.length}x{self.width}")


@dataclass(frozen=True)
class AgentTrack:
    """One agent's shape and state sequence within a scenario."""

    agent_id: str
    shape: AgentShape
    states: np.ndarray  # (T, 4) float64, columns x, y, v, theta

    def __post_init__(self):
        arr = np.ascontiguousarray(self.states, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise DataFormatError(f"agent {self.agent_id}: states must be (T, 4)")
        object.__setattr__(self, "states", arr)


@dataclass(frozen=True)
class Scenario:
    """Stacked state sequences for M agents; the unit of preference/reward."""

    scene_id: str
    sample_id: str
    dt: float
    source: str
    agents: tuple[AgentTrack, ...]

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigurationError(f"scenario dt must be > 0, got {self.dt}")
        if self.source not in (SOURCE_MODEL, SOURCE_GROUND_TRUTH):
            raise DataFormatError(f"unknown scenario source {self.source!r}")
        if not self.agents:
            raise DataFormatError("scenario has no agents")
        lengths = {a.states.shape[0] for a in self.agents}
        if len(lengths) != 1:
            raise DataFormatError("agents have unequal sequence lengths")
        if lengths.pop() < 2:
            raise DataFormatError("scenario sequences must have length >= 2")
        object.__setattr__(self, "agents", tuple(self.agents))

    @property
    def n_steps(self):
        return self.agents[0].states.shape[0]

    @property
    def n_agents(self):
        return len(self.agents)

    def states_stack(self):
        """All agent states as one (M, T, 4) array."""
        return np.ascontiguousarray(
            np.stack([a.states for a in self.agents], axis=0))

    def shapes(self):
        lengths = np.array([a.shape.length for a in self.agents])
        widths = np.array([a.shape.width for a in self.agents])
        return lengths, widths


@dataclass(frozen=True)
class Lane:
    centerline: np.ndarray  # (P, 2)
    width: float

    def __post_init__(self):
        pts = np.ascontiguousarray(self.centerline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ConfigurationError("lane centerline needs >= 2 (x, y) points")
        if self.width <= 0:
            raise ConfigurationError(f"lane width must be > 0, got {self.width}")
        object.__setattr__(self, "centerline", pts)
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        object.__setattr__(self, "_cumlen", np.concatenate([[0.0], np.cumsum(seg_len)]))

    @property
    def length(self):
        return float(self._cumlen[-1])

    def project(self, x, y):
        """(distance, arclength, tangent heading) of the nearest point."""
        return kernels.polyline_project(
            np.ascontiguousarray(self.centerline[:, 0]),
            np.ascontiguousarray(self.centerline[:, 1]), float(x), float(y))

    def point_at(self, s):
        """Point on the centerline at clamped arclength s."""
        cum = self._cumlen
        s = min(max(s, 0.0), cum[-1])
        i = int(np.searchsorted(cum, s, side="right") - 1)
        i = min(i, len(cum) - 2)
        seg = cum[i + 1] - cum[i]
        t = 0.0 if seg <= 0 else (s - cum[i]) / seg
        p = self.centerline[i] * (1 - t) + self.centerline[i + 1] * t
        return float(p[0]), float(p[1])

    def heading_at(self, s):
        cum = self._cumlen
        s = min(max(s, 0.0), cum[-1])
        i = int(np.searchsorted(cum, s, side="right") - 1)
        i = min(i, len(cum) - 2)
        d = self.centerline[i + 1] - self.centerline[i]
        return math.atan2(d[1], d[0])

    def curvature_at(self, s):
        """Heading change per arclength around the joint nearest to s."""
        cum = self._cumlen
        n_seg = len(cum) - 1
        if n_seg < 2:
            return 0.0
        s = min(max(s, 0.0), cum[-1])
        i = int(np.searchsorted(cum, s, side="right") - 1)
        i = min(max(i, 0), n_seg - 1)
        j = min(i + 1, n_seg - 1)
        if j == i:
            j = i
            i = i - 1
        h0 = self.heading_at(0.5 * (cum[i] + cum[i + 1]))
        h1 = self.heading_at(0.5 * (cum[j] + cum[j + 1]))
        ds = 0.5 * (cum[i + 1] - cum[i]) + 0.5 * (cum[j + 1] - cum[j])
        if ds <= 0:
            return 0.0
        return wrap_angle(h1 - h0) / ds


@dataclass(frozen=True)
class MapModel:
    lanes: tuple[Lane, ...]
    speed_limit: float

    def __post_init__(self):
        if not self.lanes:
            raise ConfigurationError("map has no lanes")
        if self.speed_limit <= 0:
            raise ConfigurationError(f"speed_limit must be > 0, got {self.speed_limit}")
        object.__setattr__(self, "lanes", tuple(self.lanes))

    def nearest_lane(self, x, y):
        """(lane index, distance, arclength, tangent heading) of the closest lane."""
        best = None
        for i, lane in enumerate(self.lanes):
            d, s, h = lane.project(x, y)
            if best is None or d < best[1]:
                best = (i, d, s, h)
        return best


@dataclass(frozen=True)
class ScenarioContext:
    """A scene's map plus the shared history prefix for all agents."""

    scene_id: str
    map: MapModel
    history: np.ndarray  # (M, HIST_STEPS + 1, 4)
    shapes: tuple[AgentShape, ...]
    agent_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        arr = np.ascontiguousarray(self.history, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 4 or arr.shape[0] < 1:
            raise DataFormatError("history must be (M, T_hist+1, 4) with M >= 1")
        if arr.shape[1] != HIST_STEPS + 1:
            raise DataFormatError(
                f"history length must be {HIST_STEPS + 1}, got {arr.shape[1]}")
        if len(self.shapes) != arr.shape[0]:
            raise DataFormatError("one shape per agent required")
        object.__setattr__(self, "history", arr)
        if not self.agent_ids:
            object.__setattr__(
                self, "agent_ids",
                tuple(f"a{i}" for i in range(arr.shape[0])))

    @property
    def n_agents(self):
        return self.history.shape[0]


def step_unicycle(state: AgentState, action: Action, dt: float) -> AgentState:
    """Advance one agent one step: explicit Euler with pre-step v, theta."""
    if dt <= 0:
        raise ConfigurationError(f"dt must be > 0, got {dt}")
    x = state.x + state.v * math.cos(state.theta) * dt
    y = state.y + state.v * math.sin(state.theta) * dt
    v = max(0.0, state.v + action.accel * dt)
    theta = wrap_angle(state.theta + action.yaw_rate * dt)
    return AgentState(x, y, v, theta)


def invert_step(s0, s1, dt):
    """Recover the control that took state s0 to s1 (speed/heading diffs)."""
    accel = (s1[2] - s0[2]) / dt
    yaw_rate = wrap_angle(s1[3] - s0[3]) / dt
    return accel, yaw_rate


def detect_collision(scenario: Scenario) -> np.ndarray:
    """(M, T) bool: agent i flagged at step t iff its oriented rectangle
    overlaps any other agent's (separating-axis test)."""
    states = scenario.states_stack()
    lengths, widths = scenario.shapes()
    return kernels.collision_grid(states, lengths, widths).astype(bool)


def detect_offroad(scenario: Scenario, map_model: MapModel) -> np.ndarray:
    """(M, T) bool: flagged iff the centroid's distance to the nearest lane
    centerline exceeds that lane's half width."""
    if not map_model.lanes:
        raise ConfigurationError("map has no lanes")
    m, t = scenario.n_agents, scenario.n_steps
    flags = np.zeros((m, t), dtype=bool)
    for i, agent in enumerate(scenario.agents):
        for k in range(t):
            x, y = agent.states[k, 0], agent.states[k, 1]
            li, d, _, _ = map_model.nearest_lane(x, y)
            flags[i, k] = d > 0.5 * map_model.lanes[li].width
    return flags


# ---------------------------------------------------------------------------
# wire formats

def scenario_to_record(scenario: Scenario) -> dict:
    return {
        "scene_id": scenario.scene_id,
        "sample_id": scenario.sample_id,
        "dt": scenario.dt,
        "source": scenario.source,
        "agents": [
            {
                "id": a.agent_id,
                "length": a.shape.length,
                "width": a.shape.width,
                "states": a.states.tolist(),
            }
            for a in scenario.agents
        ],
    }


def scenario_from_record(rec: dict) -> Scenario:
    try:
        agents = tuple(
            AgentTrack(
                agent_id=str(a["id"]),
                shape=AgentShape(float(a["length"]), float(a["width"])),
                states=np.array(a["states"], dtype=np.float64),
            )
            for a in rec["agents"]
        )
        return Scenario(
            scene_id=str(rec["scene_id"]),
            sample_id=str(rec["sample_id"]),
            dt=float(rec["dt"]),
            source=str(rec["source"]),
            agents=agents,
        )
    except KeyError as exc:
        raise DataFormatError(f"scenario record missing field {exc}") from exc


def write_scenarios(path, scenarios):
    """One self-contained JSON record per line."""
    with open(path, "w") as fh:
        for sc in scenarios:
            fh.write(json.dumps(scenario_to_record(sc)) + "\n")


def read_scenarios(path):
    out = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(scenario_from_record(json.loads(line)))
            except (json.JSONDecodeError, DataFormatError, ValueError, TypeError) as exc:
                raise DataFormatError(str(exc), path=str(path), line=ln) from exc
    return out


def map_to_record(map_model: MapModel) -> dict:
    return {
        "lanes": [
            {"centerline": lane.centerline.tolist(), "width": lane.width}
            for lane in map_model.lanes
        ],
        "speed_limit": map_model.speed_limit,
    }


def map_from_record(rec: dict) -> MapModel:
    try:
        lanes = tuple(
            Lane(np.array(l["centerline"], dtype=np.float64), float(l["width"]))
            for l in rec["lanes"]
        )
        return MapModel(lanes=lanes, speed_limit=float(rec["speed_limit"]))
    except KeyError as exc:
        raise DataFormatError(f"map record missing field {exc}") from exc


def write_map(path, map_model):
    with open(path, "w") as fh:
        json.dump(map_to_record(map_model), fh)
        fh.write("\n")


def read_map(path):
    with open(path) as fh:
        try:
            return map_from_record(json.load(fh))
        except (json.JSONDecodeError, DataFormatError, ValueError, TypeError) as exc:
            raise DataFormatError(str(exc), path=str(path)) from exc
