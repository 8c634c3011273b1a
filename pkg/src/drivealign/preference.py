"""Best-of-N scenario batches, labels, preference pairs and their storage.

A batch holds N model rollouts from one context plus the logged ground
truth. A label picks the most realistic rollout (or none). Choosing
scenario i yields the N-1 pairs (S_i beats S_j); choosing none yields N
pairs with the ground truth as the winner of each.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import world
from .errors import ConfigurationError, DataFormatError
from .policy import RolloutConfig, rollout_closed_loop
from .world import MapModel, Scenario, ScenarioContext

GT_WINNER = "gt"
NONE_CHOICE = None

LABELER_ORACLE = "oracle"
LABELER_HUMAN = "human"


@dataclass(frozen=True)
class ScenarioBatch:
    batch_id: str
    context_id: str
    map: MapModel
    dt: float
    scenarios: tuple[Scenario, ...]
    ground_truth: Scenario

    def __post_init__(self):
        if len(self.scenarios) < 2:
            raise ConfigurationError(
                f"batch {self.batch_id}: need N >= 2 scenarios, "
                f"got {len(self.scenarios)}")

    @property
    def n(self):
        return len(self.scenarios)


@dataclass(frozen=True)
class Label:
    batch_id: str
    choice: int | None   # index in [0, N) or None for "none realistic"
    labeler: str
    timestamp: float = 0.0   # oracle labels pin 0.0 to keep runs reproducible


@dataclass(frozen=True)
class PreferencePair:
    context_id: str
    winner: str   # sample_id, or "gt" for the ground-truth fallback
    loser: str
    labeler: str
    batch_id: str

    def __post_init__(self):
        if self.winner == self.loser:
            raise ConfigurationError(
                f"degenerate pair in batch {self.batch_id}: "
                f"winner == loser == {self.winner!r}")


def make_batch(pol, context: ScenarioContext, n, rng,
               ground_truth: Scenario, config: RolloutConfig | None = None):
    """N independent rollouts from one context with distinct rng streams."""
    if n < 2:
        raise ConfigurationError(f"need n >= 2 rollouts per batch, got {n}")
    config = config or RolloutConfig()
    streams = rng.spawn(n)
    scenarios = []
    infos = []
    for k in range(n):
        sc, info = rollout_closed_loop(pol, context, config, streams[k],
                                       sample_id=f"s{k}")
        scenarios.append(sc)
        infos.append(info)
    batch = ScenarioBatch(
        batch_id=f"batch-{context.scene_id}",
        context_id=context.scene_id,
        map=context.map,
        dt=config.dt,
        scenarios=tuple(scenarios),
        ground_truth=ground_truth,
    )
    return batch, infos


@dataclass(frozen=True)
class OracleThresholds:
    """Realism cost weights for the synthetic labeler.

    cost = w_collision * (fraction of agents with any collision)
         + w_offroad   * (fraction of agents with any off-road step)
         + w_jerk      * mean over agent-steps of max(0, |jerk| - jerk_limit)
    A scenario is acceptable only if its cost is <= tau_none; otherwise the
    ground-truth fallback kicks in.

    jerk_limit sits a few sigma above what the reference drivers' own
    control noise produces, so failures dominate the ranking and jerk only
    separates otherwise-clean scenarios.
    """

    w_collision: float = 10.0
    w_offroad: float = 5.0
    w_jerk: float = 1.0
    jerk_limit: float = 12.0
    tau_none: float = 8.0


def scenario_cost(scenario: Scenario, map_model: MapModel,
                  thresholds: OracleThresholds) -> float:
    col = world.detect_collision(scenario)
    off = world.detect_offroad(scenario, map_model)
    cost = thresholds.w_collision * float(col.any(axis=1).mean())
    cost += thresholds.w_offroad * float(off.any(axis=1).mean())
    states = scenario.states_stack()
    accel = np.diff(states[:, :, 2], axis=1) / scenario.dt
    jerk = np.diff(accel, axis=1) / scenario.dt
    excess = np.maximum(0.0, np.abs(jerk) - thresholds.jerk_limit)
    cost += thresholds.w_jerk * float(excess.mean())
    return cost


def oracle_label(batch: ScenarioBatch,
                 thresholds: OracleThresholds | None = None) -> Label:
    """Pick the lowest-cost scenario; fall back to "none" above tau_none.

    Deterministic: ties break toward the lowest sample_id (scan order).
    """
    thresholds = thresholds or OracleThresholds()
    costs = [scenario_cost(sc, batch.map, thresholds) for sc in batch.scenarios]
    best = int(np.argmin(costs))   # argmin returns the first (lowest-id) tie
    if costs[best] > thresholds.tau_none:
        return Label(batch.batch_id, NONE_CHOICE, LABELER_ORACLE)
    return Label(batch.batch_id, best, LABELER_ORACLE)


def pairs_from_label(batch: ScenarioBatch, label: Label) -> list[PreferencePair]:
    """N-1 pairs for a chosen scenario; N ground-truth-winner pairs for none."""
    if label.batch_id != batch.batch_id:
        raise ConfigurationError(
            f"label for {label.batch_id} applied to batch {batch.batch_id}")
    samples = [sc.sample_id for sc in batch.scenarios]
    if label.choice is None:
        return [PreferencePair(batch.context_id, GT_WINNER, s,
                               label.labeler, batch.batch_id)
                for s in samples]
    if not 0 <= label.choice < batch.n:
        raise ConfigurationError(
            f"choice {label.choice} out of range for N={batch.n} "
            f"(batch {batch.batch_id})")
    winner = samples[label.choice]
    return [PreferencePair(batch.context_id, winner, s,
                           label.labeler, batch.batch_id)
            for s in samples if s != winner]


# ---------------------------------------------------------------------------
# persistence

PAIR_FIELDS = ("context_id", "winner", "loser", "labeler", "batch_id")


def append_pairs(path, pairs):
    """Append-only pair log, one JSON record per line."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        for p in pairs:
            fh.write(json.dumps({
                "context_id": p.context_id,
                "winner": p.winner,
                "loser": p.loser,
                "labeler": p.labeler,
                "batch_id": p.batch_id,
            }) + "\n")


def load_pairs(path):
    out = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(PreferencePair(*(rec[f] for f in PAIR_FIELDS)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataFormatError(f"bad pair record: {exc}",
                                      path=str(path), line=ln) from exc
    return out


def append_labels(path, labels):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        for lb in labels:
            fh.write(json.dumps({
                "batch_id": lb.batch_id,
                "choice": lb.choice,
                "labeler": lb.labeler,
                "timestamp": lb.timestamp,
            }) + "\n")


def load_labels(path):
    out = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(Label(rec["batch_id"], rec["choice"],
                                 rec["labeler"], rec.get("timestamp", 0.0)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataFormatError(f"bad label record: {exc}",
                                      path=str(path), line=ln) from exc
    return out


def assign_split(context_id: str, val_fraction: float = 0.2) -> str:
    """Deterministic train/val split by stable hash of the context id.

    All pairs from one context land in the same split; fractions hold in
    expectation (80/20 by default, the 400/100 shape at 500 contexts).
    """
    digest = hashlib.sha256(context_id.encode()).digest()
    bucket = int.from_bytes(digest[:8], "big") / 2 ** 64
    return "val" if bucket < val_fraction else "train"


def split_pairs(pairs, val_fraction=0.2):
    train = [p for p in pairs if assign_split(p.context_id, val_fraction) == "train"]
    val = [p for p in pairs if assign_split(p.context_id, val_fraction) == "val"]
    return train, val


# ---------------------------------------------------------------------------
# batch archive: everything the annotation tooling and RM training need

def write_batch_archive(root, batch: ScenarioBatch):
    path = Path(root) / "batches" / f"{batch.batch_id}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "batch_id": batch.batch_id,
        "context_id": batch.context_id,
        "dt": batch.dt,
        "map": world.map_to_record(batch.map),
        "scenarios": [world.scenario_to_record(sc) for sc in batch.scenarios],
        "ground_truth": world.scenario_to_record(batch.ground_truth),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")
    return path


def read_batch_archive(root, batch_id) -> ScenarioBatch:
    path = Path(root) / "batches" / f"{batch_id}.json"
    try:
        with open(path) as fh:
            doc = json.load(fh)
        return ScenarioBatch(
            batch_id=doc["batch_id"],
            context_id=doc["context_id"],
            map=world.map_from_record(doc["map"]),
            dt=float(doc["dt"]),
            scenarios=tuple(world.scenario_from_record(r)
                            for r in doc["scenarios"]),
            ground_truth=world.scenario_from_record(doc["ground_truth"]),
        )
    except FileNotFoundError:
        raise DataFormatError(f"unknown batch {batch_id}", path=str(path))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"bad batch archive: {exc}", path=str(path)) from exc


def write_batch_index(root, batch_ids):
    path = Path(root) / "batches" / "index.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump({"batch_ids": list(batch_ids)}, fh)
        fh.write("\n")


def list_batches(root):
    path = Path(root) / "batches" / "index.json"
    with open(path) as fh:
        return json.load(fh)["batch_ids"]
