"""Per-agent, per-step feature extraction shared by the policy and the
reward scorer.

The vector is ego-centric and permutation-invariant over the other agents
(neighbors are sorted by distance with a geometric tie-break):

  [0]            ego speed / 10
  [1]            signed lateral offset from the nearest lane centerline,
                 meters, positive to the left of the lane direction
  [2]            heading error vs the lane tangent, radians
  [3]            lane curvature at the lookahead point, scaled by 10
  [4 : 4+4K]     K nearest neighbors, each (dx, dy, dv, dheading) in the
                 ego frame with dx/dy/dv divided by 10; zero-padded
  [4+4K : end]   last T_hist per-step (dv, dheading) history deltas
                 normalized by the per-step control bounds, most recent
                 first; zero-padded when the window is short
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .world import HIST_STEPS, MapModel, wrap_angle


@dataclass(frozen=True)
class FeatureConfig:
    k_neighbors: int = 4
    t_hist: int = HIST_STEPS
    lookahead_m: float = 8.0
    dist_scale: float = 10.0
    speed_scale: float = 10.0
    curvature_scale: float = 10.0
    # saturation guards: states far outside the corridor or far from
    # neighbors carry no extra information, and unbounded values park the
    # tanh trunks in their flat region
    lat_offset_cap: float = 5.0
    neighbor_cap: float = 3.0
    # per-step history deltas are tiny in raw units (bounded by the control
    # limits times dt); normalize them to O(1) so the trunks can see them
    hist_dv_scale: float = 0.4
    hist_dheading_scale: float = 0.07

    @property
    def dim(self):
        return 4 + 4 * self.k_neighbors + 2 * self.t_hist

    def to_dict(self):
        return {
            "k_neighbors": self.k_neighbors,
            "t_hist": self.t_hist,
            "lookahead_m": self.lookahead_m,
            "dist_scale": self.dist_scale,
            "speed_scale": self.speed_scale,
            "curvature_scale": self.curvature_scale,
            "lat_offset_cap": self.lat_offset_cap,
            "neighbor_cap": self.neighbor_cap,
            "hist_dv_scale": self.hist_dv_scale,
            "hist_dheading_scale": self.hist_dheading_scale,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def agent_features(map_model: MapModel, window: np.ndarray, agent_idx: int,
                   cfg: FeatureConfig) -> np.ndarray:
    """Features for one agent at the last step of `window` (M, W, 4)."""
    cur = window[:, -1, :]
    x, y, v, theta = cur[agent_idx]
    out = np.zeros(cfg.dim)
    out[0] = v / cfg.speed_scale

    lane_idx, dist, s, tangent = map_model.nearest_lane(x, y)
    lane = map_model.lanes[lane_idx]
    # sign of the lateral offset: left of the tangent direction is positive
    fx, fy = lane.point_at(s)
    cross = math.cos(tangent) * (y - fy) - math.sin(tangent) * (x - fx)
    lat = math.copysign(dist, cross) if dist > 0 else 0.0
    out[1] = max(-cfg.lat_offset_cap, min(cfg.lat_offset_cap, lat))
    out[2] = wrap_angle(theta - tangent)
    out[3] = lane.curvature_at(s + cfg.lookahead_m) * cfg.curvature_scale

    m = window.shape[0]
    if m > 1:
        rel = []
        for j in range(m):
            if j == agent_idx:
                continue
            dxw = cur[j, 0] - x
            dyw = cur[j, 1] - y
            d = math.hypot(dxw, dyw)
            c, sn = math.cos(-theta), math.sin(-theta)
            dx = dxw * c - dyw * sn
            dy = dxw * sn + dyw * c
            rel.append((d, dx, dy, cur[j, 2] - v, wrap_angle(cur[j, 3] - theta)))
        rel.sort()
        cap = cfg.neighbor_cap
        for k, (_, dx, dy, dv, dth) in enumerate(rel[:cfg.k_neighbors]):
            base = 4 + 4 * k
            out[base] = max(-cap, min(cap, dx / cfg.dist_scale))
            out[base + 1] = max(-cap, min(cap, dy / cfg.dist_scale))
            out[base + 2] = max(-cap, min(cap, dv / cfg.speed_scale))
            out[base + 3] = dth

    w = window.shape[1]
    hist_base = 4 + 4 * cfg.k_neighbors
    n_deltas = min(cfg.t_hist, w - 1)
    ego = window[agent_idx]
    for k in range(n_deltas):
        a, b = ego[w - 2 - k], ego[w - 1 - k]
        out[hist_base + 2 * k] = (b[2] - a[2]) / cfg.hist_dv_scale
        out[hist_base + 2 * k + 1] = wrap_angle(b[3] - a[3]) / cfg.hist_dheading_scale
    return out


def scenario_step_features(map_model, states, cfg):
    """Features for every agent at every step of a (M, T, 4) state stack.

    Step t uses the backward window states[:, :t+1] (zero-padded deltas when
    shorter than t_hist), so any sequence length >= 1 is scorable.
    """
    m, t, _ = states.shape
    out = np.zeros((m, t, cfg.dim))
    for step in range(t):
        lo = max(0, step - cfg.t_hist)
        window = states[:, lo:step + 1, :]
        for i in range(m):
            out[i, step] = agent_features(map_model, window, i, cfg)
    return out
