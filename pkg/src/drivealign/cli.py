"""Command-line pipeline driver.

Subcommands: gen, pretrain, batch, label, train-rm, finetune, eval, repro.
The data directory is taken from --data-dir, the DRIVEALIGN_DATA
environment variable, or ./data. Exit codes: 2 configuration errors,
3 data errors, 4 runtime failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import preference, scenegen, world
from .errors import ConfigurationError, DataFormatError, DriveAlignError
from .features import FeatureConfig
from .finetune import FinetuneConfig, finetune_loop, write_history
from .metrics import evaluate_corpus, format_report_table, write_report_records
from .policy import (BcConfig, RolloutConfig, init_policy, load_policy,
                     pretrain_bc, rollout_closed_loop, save_policy)
from .preference import (OracleThresholds, load_pairs, make_batch,
                         oracle_label, pairs_from_label, split_pairs)
from .reward import (PairData, RmTrainConfig, accuracy_sweep, load_rm,
                     save_rm, subsample_pairs, summarize_sweep, train_rm)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

RM_TRAIN_SIZE_DEFAULT = 200


def data_dir_from(args) -> Path:
    if args.data_dir:
        return Path(args.data_dir)
    env = os.environ.get("DRIVEALIGN_DATA")
    return Path(env) if env else Path("data")


def load_split_scenes(root, split):
    return [scenegen.load_scene(root, split, sid)
            for sid in scenegen.list_scenes(root, split)]


def _echo(msg):
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# stages (shared by the individual subcommands and `repro`)

def stage_gen(root, scenes, eval_scenes, seed, agents, episode_len):
    ids_train = scenegen.generate_corpus(
        root, "train", scenes, base_seed=seed, n_agents=agents,
        episode_len=episode_len)
    ids_eval = scenegen.generate_corpus(
        root, "eval", eval_scenes, base_seed=seed + 1, n_agents=agents,
        episode_len=episode_len)
    _echo(f"generated {len(ids_train)} train + {len(ids_eval)} eval scenes "
          f"under {root}/scenes")
    return ids_train, ids_eval


def stage_pretrain(root, epochs, seed, lr=1e-3, scenes_limit=None):
    scenes = load_split_scenes(root, "train")
    if scenes_limit:
        scenes = scenes[:scenes_limit]
    demos = [(m, gt) for m, _, gt in scenes]
    policy = init_policy(seed)
    policy, curve = pretrain_bc(policy, demos,
                                BcConfig(epochs=epochs, seed=seed, lr=lr))
    ckpt = Path(root) / "checkpoints" / "policy_bc.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_policy(ckpt, policy, extra={"stage": "bc", "epochs": epochs})
    with open(Path(root) / "checkpoints" / "bc_history.jsonl", "w") as fh:
        for epoch, loss in enumerate(curve):
            fh.write(json.dumps({"epoch": epoch, "loss": loss}) + "\n")
    _echo(f"behavior cloning done ({epochs} epochs, final nll {curve[-1]:.4f})"
          f" -> {ckpt}")
    return ckpt


def stage_batch(root, samples, seed, policy_path=None):
    root = Path(root)
    policy = load_policy(policy_path or root / "checkpoints" / "policy_bc.ckpt")
    scene_ids = scenegen.list_scenes(root, "train")
    rng = np.random.default_rng(seed)
    batch_ids = []
    rollout_meta = []
    for sid in scene_ids:
        map_model, context, gt = scenegen.load_scene(root, "train", sid)
        batch, infos = make_batch(policy, context, samples, rng, gt)
        preference.write_batch_archive(root, batch)
        batch_ids.append(batch.batch_id)
        for sc, info in zip(batch.scenarios, infos):
            rollout_meta.append({
                "batch_id": batch.batch_id,
                "sample_id": sc.sample_id,
                "plan_cycles": info.plan_cycles,
                "executed_steps": info.executed_steps,
                "steps_per_plan": info.steps_per_plan,
            })
    preference.write_batch_index(root, batch_ids)
    with open(root / "batches" / "rollouts.jsonl", "w") as fh:
        for rec in rollout_meta:
            fh.write(json.dumps(rec) + "\n")
    _echo(f"wrote {len(batch_ids)} batches of {samples} rollouts each")
    return batch_ids


def stage_label_oracle(root):
    root = Path(root)
    labels_path = root / "labels" / "labels.jsonl"
    pairs_path = root / "pairs" / "pairs.jsonl"
    already = set()
    if labels_path.exists():
        already = {lb.batch_id for lb in preference.load_labels(labels_path)}
    n_labels = n_pairs = 0
    for bid in preference.list_batches(root):
        if bid in already:
            continue
        batch = preference.read_batch_archive(root, bid)
        label = oracle_label(batch, OracleThresholds())
        pairs = pairs_from_label(batch, label)
        preference.append_labels(labels_path, [label])
        preference.append_pairs(pairs_path, pairs)
        n_labels += 1
        n_pairs += len(pairs)
    _echo(f"oracle labeled {n_labels} batches -> {n_pairs} pairs")
    return n_labels, n_pairs


def stage_train_rm(root, size, epochs, seed, sweep=None, sweep_seeds=5,
                   lr=1e-3, batch_size=16):
    root = Path(root)
    pairs = load_pairs(root / "pairs" / "pairs.jsonl")
    train, val = split_pairs(pairs)
    if not train or not val:
        raise DataFormatError(
            f"pair store {root / 'pairs' / 'pairs.jsonl'} splits into "
            f"{len(train)} train / {len(val)} val pairs; need both non-empty")
    _echo(f"{len(pairs)} pairs -> {len(train)} train / {len(val)} val")
    rm_dir = root / "rm"
    rm_dir.mkdir(parents=True, exist_ok=True)
    base_cfg = RmTrainConfig(epochs=epochs, lr=lr, batch_size=batch_size,
                             seed=seed)
    if sweep:
        records = accuracy_sweep(train, val, root, sweep,
                                 list(range(sweep_seeds)),
                                 config=base_cfg)
        with open(rm_dir / "sweep.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
        with open(rm_dir / "sweep_summary.jsonl", "w") as fh:
            for rec in summarize_sweep(records):
                fh.write(json.dumps(rec) + "\n")
        for rec in summarize_sweep(records):
            _echo(f"  size {rec['size']:>4}: accuracy "
                  f"{rec['mean']:.3f} +- {rec['variance'] ** 0.5:.3f} "
                  f"({rec['n']} seeds)")
    subset = subsample_pairs(train, size, seed=seed * 7919 + size)
    data = PairData.from_pairs(subset, root)
    rm, curve = train_rm(data, base_cfg)
    val_data = PairData.from_pairs(val, root, cache=data.rows)
    from .reward import validate_rm
    acc = validate_rm(rm, val_data)
    save_rm(rm_dir / "rm.ckpt", rm,
            extra={"train_pairs": len(subset), "val_accuracy": acc})
    _echo(f"reward model trained on {len(subset)} pairs; "
          f"held-out accuracy {acc:.3f} -> {rm_dir / 'rm.ckpt'}")
    return acc


def stage_finetune(root, alpha, epochs, freeze, seed, scenes_per_epoch=8,
                   probe_scenes=8, lr=3e-4, bc_weight=1.0, probe_every=1):
    root = Path(root)
    policy = load_policy(root / "checkpoints" / "policy_bc.ckpt")
    rm = load_rm(root / "rm" / "rm.ckpt")
    train_scenes = load_split_scenes(root, "train")
    eval_scenes = load_split_scenes(root, "eval")
    probes = eval_scenes[:probe_scenes]
    demos = [(m, gt) for m, _, gt in train_scenes]
    config = FinetuneConfig(alpha=alpha, epochs=epochs, freeze=freeze,
                            seed=seed, scenes_per_epoch=scenes_per_epoch,
                            lr=lr, bc_weight=bc_weight, probe_every=probe_every)
    out_dir = root / "finetune" / freeze
    policy, _vh, history = finetune_loop(policy, rm, train_scenes, probes,
                                         config, demos=demos, out_dir=out_dir)
    write_history(out_dir / "history.jsonl", history)
    final = root / "checkpoints" / f"policy_tuned_{freeze}.ckpt"
    save_policy(final, policy, extra={"stage": "finetune", "freeze": freeze,
                                      "alpha": alpha, "epochs": epochs})
    last = [h for h in history if "fail" in h][-1]
    _echo(f"fine-tuned (freeze={freeze}): fail {history[0]['fail']:.3f} -> "
          f"{last['fail']:.3f}, reward_cost {history[0]['reward_cost']:.3f} "
          f"-> {last['reward_cost']:.3f} -> {final}")
    return final, history


def stage_eval(root, baseline_path, tuned_paths, seed, n_scenes=None):
    root = Path(root)
    rm = load_rm(root / "rm" / "rm.ckpt")
    scenes = load_split_scenes(root, "eval")
    if n_scenes:
        scenes = scenes[:n_scenes]
    refs = [gt for _, _, gt in scenes]
    maps = {ctx.scene_id: m for m, ctx, _ in scenes}
    reports = []
    rows = [("baseline", Path(baseline_path))]
    rows += [(name, Path(p)) for name, p in tuned_paths]
    for name, path in rows:
        policy = load_policy(path)
        rng = np.random.default_rng(seed)
        rollouts = [rollout_closed_loop(policy, ctx, RolloutConfig(), rng)[0]
                    for _, ctx, _ in scenes]
        reports.append(evaluate_corpus(name, rollouts, refs, maps, rm))
    reports_dir = root / "reports"
    write_report_records(reports_dir / "eval.jsonl", reports)
    table = format_report_table(reports)
    (reports_dir / "eval.txt").write_text(table)
    _echo(table.rstrip())
    return reports


# ---------------------------------------------------------------------------
# manifest

def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(root, seed, config):
    root = Path(root)
    artifacts = {}
    for pattern in ("scenes/*/index.json", "checkpoints/*.ckpt",
                    "batches/index.json", "pairs/pairs.jsonl",
                    "labels/labels.jsonl", "rm/*.ckpt", "rm/*.jsonl",
                    "finetune/*/history.jsonl", "reports/*"):
        for p in sorted(root.glob(pattern)):
            artifacts[str(p.relative_to(root))] = file_sha256(p)
    manifest = {
        "run_id": f"run-seed{seed}",
        "seed": seed,
        "config": config,
        "artifacts": artifacts,
    }
    path = root / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def verify_manifest(root):
    root = Path(root)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    for rel, expect in manifest["artifacts"].items():
        path = root / rel
        if not path.exists():
            raise DataFormatError(f"manifest artifact missing: {rel}",
                                  path=str(path))
        got = file_sha256(path)
        if got != expect:
            raise DataFormatError(
                f"hash mismatch for {rel}: manifest {expect[:12]}.., "
                f"file {got[:12]}..", path=str(path))
    return manifest


# ---------------------------------------------------------------------------
# repro: the whole desk-scale pipeline from one seed

def run_repro(root, seed, scenes=12, eval_scenes=6, agents=3, samples=5,
              bc_epochs=8, rm_size=60, rm_epochs=30, ft_epochs=2,
              ft_alpha=0.1, freeze="none"):
    stage_gen(root, scenes, eval_scenes, seed, agents,
              episode_len=world.HIST_STEPS + 100)
    stage_pretrain(root, bc_epochs, seed)
    stage_batch(root, samples, seed + 2)
    stage_label_oracle(root)
    stage_train_rm(root, rm_size, rm_epochs, seed)
    final, _ = stage_finetune(root, ft_alpha, ft_epochs, freeze, seed,
                              scenes_per_epoch=4, probe_scenes=4)
    stage_eval(root, Path(root) / "checkpoints" / "policy_bc.ckpt",
               [(f"tuned_{freeze}", final)], seed + 3)
    config = {"scenes": scenes, "eval_scenes": eval_scenes, "agents": agents,
              "samples": samples, "bc_epochs": bc_epochs, "rm_size": rm_size,
              "rm_epochs": rm_epochs, "ft_epochs": ft_epochs,
              "ft_alpha": ft_alpha, "freeze": freeze}
    path = write_manifest(root, seed, config)
    verify_manifest(root)
    _echo(f"manifest -> {path}")


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    p = argparse.ArgumentParser(
        prog="drivealign",
        description="preference-aligned realism tuning for synthetic traffic")
    p.add_argument("--data-dir", default=None,
                   help="run directory (default: $DRIVEALIGN_DATA or ./data)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate scene corpora")
    g.add_argument("--scenes", type=int, default=500)
    g.add_argument("--eval-scenes", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--agents", type=int, default=3)

    t = sub.add_parser("pretrain", help="behavior-clone the base policy")
    t.add_argument("--epochs", type=int, default=40)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=1e-3)

    b = sub.add_parser("batch", help="roll out best-of-N scenario batches")
    b.add_argument("--samples", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--policy", default=None)

    l = sub.add_parser("label", help="label batches (oracle or HTTP service)")
    l.add_argument("--mode", choices=("oracle", "serve"), default="oracle")
    l.add_argument("--port", type=int,
                   default=int(os.environ.get("DRIVEALIGN_PORT", "8080")))
    l.add_argument("--lease-s", type=float, default=600.0)
    l.add_argument("--static-dir", default=None,
                   help="serve the annotation UI from this directory")

    r = sub.add_parser("train-rm", help="train the realism reward model")
    r.add_argument("--size", type=int, default=RM_TRAIN_SIZE_DEFAULT)
    r.add_argument("--epochs", type=int, default=60)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--sweep", default=None,
                   help="comma-separated training sizes, e.g. 50,100,200,400")
    r.add_argument("--seeds", type=int, default=5,
                   help="seeds per sweep size")

    f = sub.add_parser("finetune", help="PPO fine-tuning with the mixed objective")
    f.add_argument("--alpha", type=float, default=0.1)
    f.add_argument("--epochs", type=int, default=70)
    f.add_argument("--freeze", choices=("none", "encoder", "decoder"),
                   default="none")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--scenes-per-epoch", type=int, default=8)
    f.add_argument("--bc-weight", type=float, default=1.0)
    f.add_argument("--lr", type=float, default=3e-4)
    f.add_argument("--probe-scenes", type=int, default=8)

    e = sub.add_parser("eval", help="compare policy checkpoints")
    e.add_argument("--baseline", required=True)
    e.add_argument("--tuned", action="append", default=[],
                   help="tuned checkpoint (repeatable)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--scenes", type=int, default=None)

    rp = sub.add_parser("repro", help="full desk-scale pipeline from one seed")
    rp.add_argument("--seed", type=int, default=0)
    rp.add_argument("--scenes", type=int, default=12)
    rp.add_argument("--eval-scenes", type=int, default=6)
    rp.add_argument("--agents", type=int, default=3)
    rp.add_argument("--samples", type=int, default=5)
    rp.add_argument("--bc-epochs", type=int, default=8)
    rp.add_argument("--rm-size", type=int, default=60)
    rp.add_argument("--rm-epochs", type=int, default=30)
    rp.add_argument("--ft-epochs", type=int, default=2)
    return p


def run(args) -> int:
    root = data_dir_from(args)
    if args.command == "gen":
        stage_gen(root, args.scenes, args.eval_scenes, args.seed, args.agents,
                  episode_len=world.HIST_STEPS + 100)
    elif args.command == "pretrain":
        stage_pretrain(root, args.epochs, args.seed, args.lr)
    elif args.command == "batch":
        stage_batch(root, args.samples, args.seed, args.policy)
    elif args.command == "label":
        if args.mode == "oracle":
            stage_label_oracle(root)
        else:
            from .service import serve
            serve(root, port=args.port, lease_seconds=args.lease_s,
                  static_dir=args.static_dir)
    elif args.command == "train-rm":
        sweep = None
        if args.sweep:
            try:
                sweep = [int(s) for s in args.sweep.split(",") if s]
            except ValueError:
                raise ConfigurationError(
                    f"--sweep must be comma-separated integers, "
                    f"got {args.sweep!r}")
        stage_train_rm(root, args.size, args.epochs, args.seed,
                       sweep=sweep, sweep_seeds=args.seeds)
    elif args.command == "finetune":
        stage_finetune(root, args.alpha, args.epochs, args.freeze, args.seed,
                       scenes_per_epoch=args.scenes_per_epoch,
                       probe_scenes=args.probe_scenes, lr=args.lr,
                       bc_weight=args.bc_weight)
    elif args.command == "eval":
        tuned = [(f"tuned{i}" if len(args.tuned) > 1 else "tuned", p)
                 for i, p in enumerate(args.tuned)]
        stage_eval(root, args.baseline, tuned, args.seed, args.scenes)
    elif args.command == "repro":
        run_repro(root, args.seed, scenes=args.scenes,
                  eval_scenes=args.eval_scenes, agents=args.agents,
                  samples=args.samples, bc_epochs=args.bc_epochs,
                  rm_size=args.rm_size, rm_epochs=args.rm_epochs,
                  ft_epochs=args.ft_epochs)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DriveAlignError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
