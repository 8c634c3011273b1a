"""Evaluation suite: failure rate, histogram-based realism deviation and
reward cost, plus report emission.

Realism compares generated and ground-truth corpora through the
Wasserstein-1 distance between normalized histograms of three driving
profiles: longitudinal acceleration magnitude, lateral acceleration
magnitude and (longitudinal) jerk magnitude. Histogram edges are fixed and
shared so distances are comparable across runs: 40 uniform bins over
[0, 8] m/s^2 for accelerations and [0, 20] m/s^3 for jerk, plus one
overflow bin of the same width that absorbs anything larger.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import world
from .errors import ConfigurationError, DataFormatError
from .reward import score
from .world import MapModel, Scenario

ACCEL_RANGE = (0.0, 8.0)
JERK_RANGE = (0.0, 20.0)
N_BINS = 40

PROFILE_KEYS = ("long_accel", "lat_accel", "jerk")


@dataclass(frozen=True)
class DrivingProfile:
    """Pooled magnitude samples over agents and steps."""

    long_accel: np.ndarray
    lat_accel: np.ndarray
    jerk: np.ndarray

    def __post_init__(self):
        for key in PROFILE_KEYS:
            arr = np.asarray(getattr(self, key), dtype=np.float64)
            if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0):
                raise DataFormatError(f"profile {key} has negative/non-finite samples")
            object.__setattr__(self, key, arr)


def signed_motion_series(scenario: Scenario):
    """Per-agent signed series used by the profiles.

    Returns dict with long_accel (M, T-1), yaw_rate (M, T-1), lat_accel
    (M, T-1) and jerk (M, T-2). Lateral acceleration is v * dtheta/dt with
    the pre-step speed; jerk differences the longitudinal acceleration.
    """
    states = scenario.states_stack()
    dt = scenario.dt
    v = states[:, :, 2]
    theta = states[:, :, 3]
    long_accel = np.diff(v, axis=1) / dt
    yaw_rate = world.wrap_angle(np.diff(theta, axis=1)) / dt
    lat_accel = v[:, :-1] * yaw_rate
    jerk = np.diff(long_accel, axis=1) / dt
    return {"long_accel": long_accel, "yaw_rate": yaw_rate,
            "lat_accel": lat_accel, "jerk": jerk}


def extract_profile(scenario: Scenario, dt=None) -> DrivingProfile:
    """Magnitude samples pooled over agents and steps; needs length >= 3."""
    if scenario.n_steps < 3:
        raise ConfigurationError(
            f"scenario {scenario.sample_id} too short for jerk "
            f"({scenario.n_steps} states)")
    if dt is not None and abs(dt - scenario.dt) > 1e-12:
        raise ConfigurationError(
            f"dt {dt} does not match scenario dt {scenario.dt}")
    series = signed_motion_series(scenario)
    return DrivingProfile(
        long_accel=np.abs(series["long_accel"]).ravel(),
        lat_accel=np.abs(series["lat_accel"]).ravel(),
        jerk=np.abs(series["jerk"]).ravel(),
    )


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        masses = np.asarray(self.masses, dtype=np.float64)
        if len(edges) != len(masses) + 1:
            raise ConfigurationError("need len(edges) == len(masses) + 1")
        if np.any(np.diff(edges) <= 0):
            raise ConfigurationError("edges must be strictly increasing")
        if np.any(masses < 0):
            raise ConfigurationError("masses must be non-negative")
        total = masses.sum()
        if total > 0:
            masses = masses / total
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "masses", masses)


def profile_edges(hi, n_bins=N_BINS):
    """n_bins uniform bins over [0, hi] plus one overflow bin of equal width."""
    width = hi / n_bins
    return np.linspace(0.0, hi + width, n_bins + 2)


def histogram_from_samples(samples, hi, n_bins=N_BINS) -> Histogram:
    edges = profile_edges(hi, n_bins)
    if len(samples) == 0:
        raise ConfigurationError("cannot build a histogram from an empty pool")
    clipped = np.minimum(samples, 0.5 * (edges[-2] + edges[-1]))
    counts, _ = np.histogram(clipped, bins=edges)
    return Histogram(edges, counts.astype(np.float64))


def wasserstein1(a: Histogram, b: Histogram) -> float:
    """W1 on fixed-edge normalized histograms: sum |CDF_a - CDF_b| * width."""
    if a.edges.shape != b.edges.shape or not np.array_equal(a.edges, b.edges):
        raise ConfigurationError("histograms use different bin edges")
    cdf_a = np.cumsum(a.masses)
    cdf_b = np.cumsum(b.masses)
    widths = np.diff(a.edges)
    return float(np.sum(np.abs(cdf_a - cdf_b) * widths))


def pooled_profile(scenarios) -> DrivingProfile:
    profiles = [extract_profile(sc) for sc in scenarios]
    return DrivingProfile(
        long_accel=np.concatenate([p.long_accel for p in profiles]),
        lat_accel=np.concatenate([p.lat_accel for p in profiles]),
        jerk=np.concatenate([p.jerk for p in profiles]),
    )


def realism_deviation(generated, ground_truth):
    """(mean W1 over the three profiles, per-profile breakdown)."""
    if not generated or not ground_truth:
        raise ConfigurationError("realism deviation needs non-empty corpora")
    gen = pooled_profile(generated)
    ref = pooled_profile(ground_truth)
    breakdown = {}
    for key in PROFILE_KEYS:
        hi = JERK_RANGE[1] if key == "jerk" else ACCEL_RANGE[1]
        h_gen = histogram_from_samples(getattr(gen, key), hi)
        h_ref = histogram_from_samples(getattr(ref, key), hi)
        breakdown[key] = wasserstein1(h_gen, h_ref)
    real = float(np.mean([breakdown[k] for k in PROFILE_KEYS]))
    return real, breakdown


def _resolve_map(map_model, scenario):
    if isinstance(map_model, MapModel):
        return map_model
    try:
        return map_model[scenario.scene_id]
    except KeyError:
        raise ConfigurationError(
            f"no map for scene {scenario.scene_id}") from None


def failure_rate(scenarios, map_model) -> float:
    """Mean over scenes of the fraction of agents with any collision or
    off-road flag. `map_model` may be a single map or a scene_id mapping."""
    if not scenarios:
        raise ConfigurationError("failure rate needs a non-empty corpus")
    fractions = []
    for sc in scenarios:
        m = _resolve_map(map_model, sc)
        col = world.detect_collision(sc).any(axis=1)
        off = world.detect_offroad(sc, m).any(axis=1)
        fractions.append(float((col | off).mean()))
    return float(np.mean(fractions))


def reward_cost(rm, scenarios, map_model) -> float:
    """Negative mean scenario score; lower is better."""
    if not scenarios:
        raise ConfigurationError("reward cost needs a non-empty corpus")
    scores = [score(rm, sc, _resolve_map(map_model, sc)) for sc in scenarios]
    return -float(np.mean(scores))


@dataclass(frozen=True)
class EvalReport:
    name: str
    fail: float
    real: float
    reward_cost: float
    breakdown: dict

    def __post_init__(self):
        if not 0.0 <= self.fail <= 1.0:
            raise ConfigurationError(f"fail must be in [0, 1], got {self.fail}")

    def to_record(self):
        return {
            "name": self.name,
            "real": self.real,
            "fail": self.fail,
            "reward_cost": self.reward_cost,
            "breakdown": dict(self.breakdown),
        }


def evaluate_corpus(name, scenarios, ground_truth, map_model, rm) -> EvalReport:
    real, breakdown = realism_deviation(scenarios, ground_truth)
    return EvalReport(
        name=name,
        fail=failure_rate(scenarios, map_model),
        real=real,
        reward_cost=reward_cost(rm, scenarios, map_model),
        breakdown=breakdown,
    )


def write_report_records(path, reports):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_record()) + "\n")


def format_report_table(reports) -> str:
    """Aligned text table, rows = variants, columns = real/fail/reward cost."""
    name_w = max(8, max(len(r.name) for r in reports))
    lines = [f"{'model':<{name_w}}  {'real':>8}  {'fail':>8}  {'reward_cost':>12}"]
    lines.append("-" * len(lines[0]))
    for r in reports:
        lines.append(f"{r.name:<{name_w}}  {r.real:>8.4f}  {r.fail:>8.4f}  "
                     f"{r.reward_cost:>12.4f}")
    return "\n".join(lines) + "\n"
