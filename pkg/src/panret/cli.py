"""Command-line entry point: ``panret <command> [options]``.

Relative ``--out`` paths resolve under ``$PANRET_RUN_ROOT`` when it is set.
Errors print a single ``ERROR <CODE>: message`` line and exit nonzero.
"""
import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from . import body_parts, evaluation, motion_io, training
from .errors import (
    ConfigError, FpsMismatch, NonFiniteLoss, PanretError, StructureMismatch, TooShort,
)
from .networks import ModelConfig

log = logging.getLogger("panret")

RUN_ROOT_ENV = "PANRET_RUN_ROOT"
DATASET_FILE = "dataset.panret"


def out_path(p):
    p = Path(p)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


# --------------------------------------------------------------------------- config

@dataclass
class RunConfig:
    mode: str = "humanoid"
    seed: int = 0
    epochs: int = 1000
    data: list = field(default_factory=list)
    out: str = "run"
    checkpoint: str = None
    checkpoint_every: int = 10
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def model_config(self):
        m = dict(self.model)
        size = m.pop("size", "full")
        if size not in ("full", "tiny"):
            raise ConfigError(f"model.size must be 'full' or 'tiny', got {size!r}")
        try:
            return ModelConfig.tiny(**m) if size == "tiny" else ModelConfig(**m)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad model config: {e}") from None

    def train_config(self):
        kw = dict(self.train)
        kw.update(mode=self.mode, seed=self.seed, epochs=self.epochs)
        try:
            return training.TrainConfig(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad train config: {e}") from None


def load_run_config(path):
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"{path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    cfg = RunConfig(**data)
    cfg.model_config()
    cfg.train_config()
    return cfg


# --------------------------------------------------------------------------- prepare

def _load_entry(entry, manifest, template, mapping):
    skel, raw = motion_io.parse_bvh(entry.path)
    skel = skel.with_offsets(skel.offsets, name=entry.skeleton)
    raw = dataclasses.replace(raw, skeleton=skel)
    if mapping is not None:
        raw = motion_io.apply_joint_mapping(raw, template, mapping)
    elif template is not None and not skel.same_structure(template):
        raise StructureMismatch(f"{entry.path}: joint tree differs from the structure template "
                                f"(supply --mapping)")
    return raw


def cmd_prepare(args):
    manifest = motion_io.load_manifest(args.manifest)
    mapping = motion_io.load_joint_mapping(args.mapping) if args.mapping else None
    clip_len = args.clip_len or manifest.clip_len
    template = motion_io.parse_bvh(args.template)[0] if args.template else None
    clips = {"train": [], "test": []}
    listing = []
    for entry in manifest.files:
        raw = _load_entry(entry, manifest, template, mapping)
        if template is None:
            template = raw.skeleton
        elif mapping is None and not raw.skeleton.same_structure(template):
            raise StructureMismatch(f"{entry.path}: joint tree differs from the first file's")
        try:
            cs = motion_io.localize_and_clip(raw, clip_len, manifest.fps)
        except TooShort as e:
            log.warning("skipping %s: %s", entry.path, e)
            listing.append((entry, 0))
            continue
        except FpsMismatch as e:
            raise FpsMismatch(f"{entry.path}: {e}") from None
        cs = [dataclasses.replace(c, source=entry.motion) for c in cs]
        clips[entry.split] += cs
        listing.append((entry, len(cs)))
    if not clips["train"]:
        raise motion_io.EmptyDataset("no training clips after preprocessing")
    sid = manifest.structure_id
    partition = body_parts.load_partition(args.partition, template, sid)
    tmpl = clips["train"][0].skeleton
    splits = {k: motion_io.ClipSet.from_clips(sid, v, template=tmpl) for k, v in clips.items() if v}
    stats = motion_io.compute_norm_stats(splits["train"].motions)
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"structure_id": sid, "fps": manifest.fps, "clip_len": clip_len,
               "clips": {k: len(v) for k, v in clips.items()},
               "partition": partition.to_dict(), "partition_digest": partition.digest()}
    motion_io.save_prepared(out / DATASET_FILE, splits, stats, extra_meta=summary)
    with open(out / "splits.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["file", "split", "skeleton", "motion", "clips"])
        for e, n in listing:
            w.writerow([os.path.relpath(e.path, manifest.root), e.split, e.skeleton, e.motion, n])
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"prepared {sid}: " + ", ".join(f"{k}={v}" for k, v in summary["clips"].items())
          + f" -> {out}")
    return 0


def load_dataset(path):
    path = Path(path)
    if path.is_dir():
        path = path / DATASET_FILE
    splits, stats, meta = motion_io.load_prepared(path)
    partition = body_parts.BodyPartition.from_dict(meta["partition"])
    return splits, stats, meta, partition


# --------------------------------------------------------------------------- train

def _merge_flags(cfg, args):
    for name in ("mode", "seed", "epochs", "out", "checkpoint"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "data", None):
        cfg.data = list(args.data)
    if getattr(args, "tiny", False):
        cfg.model = dict(cfg.model, size="tiny")
    return cfg


def build_trainer(cfg):
    if not cfg.data:
        raise ConfigError("no prepared datasets given (--data)")
    tcfg = cfg.train_config()
    mcfg = cfg.model_config()
    torch.manual_seed(tcfg.seed)
    structures, data = [], {}
    for d in cfg.data:
        splits, stats, meta, partition = load_dataset(d)
        train = splits["train"]
        sid = meta["structure_id"]
        if sid in data:
            raise ConfigError(f"structure {sid!r} given twice")
        s = training.build_structure(sid, train, partition, stats)
        if tcfg.mode == "biped_quad" and s.vel is None:
            raise training.DegenerateStats(f"structure {sid!r}: root speed range is empty")
        structures.append(s)
        data[sid] = train
    model = training.RetargetModel(structures, mcfg)
    tdata = {s.id: training.StructureData(s, data[s.id]) for s in structures}
    return training.Trainer(model, tdata, tcfg)


def cmd_train(args):
    cfg = _merge_flags(load_run_config(args.config), args)
    run = out_path(cfg.out)
    (run / "checkpoints").mkdir(parents=True, exist_ok=True)
    trainer = build_trainer(cfg)
    if cfg.checkpoint:
        trainer.restore(cfg.checkpoint)
        log.info("resumed from %s at epoch %d", cfg.checkpoint, trainer.epoch)
    snap = dataclasses.asdict(cfg)
    snap["resolved_train"] = trainer.config.to_dict()
    snap["resolved_model"] = trainer.model.cfg.to_dict()
    (run / "config.yaml").write_text(yaml.safe_dump(snap, sort_keys=True))
    loss_csv = run / "losses.csv"
    if not cfg.checkpoint and loss_csv.exists():
        loss_csv.unlink()
    last = run / "checkpoints" / "last.ckpt"
    while trainer.epoch < cfg.epochs:
        try:
            row, _ = trainer.run_epoch()
        except NonFiniteLoss as e:
            dump = run / "nonfinite.json"
            dump.write_text(json.dumps({"epoch": trainer.epoch, "step": trainer.g_steps,
                                        "error": str(e)}, indent=1))
            raise NonFiniteLoss(f"{e} (last good checkpoint: {last if last.exists() else 'none'})")
        training.write_loss_csv(loss_csv, [row])
        log.info("epoch %d total=%.5g rec=%.5g", row["epoch"], row["total"], row["rec"])
        if trainer.epoch % cfg.checkpoint_every == 0 or trainer.epoch == cfg.epochs:
            trainer.save(run / "checkpoints" / f"epoch_{trainer.epoch:04d}.ckpt")
            trainer.save(last)
    from .plotting import plot_losses

    if loss_csv.exists():
        plot_losses(loss_csv, run / "losses.png")
    print(f"trained {trainer.epoch} epochs, {trainer.g_steps} steps -> {run}")
    return 0


# --------------------------------------------------------------------------- retarget

def _pick_structure(model, skel, requested=None):
    if requested:
        if requested not in model.structures:
            raise StructureMismatch(f"checkpoint has no structure {requested!r}")
        return requested
    for sid, s in model.structures.items():
        if s.template.same_structure(skel):
            return sid
    raise StructureMismatch(f"skeleton {skel.name!r} matches no trained structure "
                            f"({', '.join(model.structures)})")


def _sequence_clip(raw, fps):
    Q, vbar, pos, yaw = motion_io.localize(raw, fps)
    T = (len(Q) // 4) * 4
    if T == 0:
        raise TooShort(f"{raw.skeleton.name}: fewer than 4 frames")
    if T != len(Q):
        log.info("dropping %d trailing frame(s) so the length divides by 4", len(Q) - T)
    return motion_io.MotionClip(Q[:T], vbar[:T], raw.skeleton, pos[0], float(yaw[0]),
                                raw.skeleton.name, 0)


def cmd_retarget(args):
    model, meta = training.load_model(args.checkpoint)
    fps = int(meta.get("train_config", {}).get("fps", 30))
    src_skel, raw = motion_io.parse_bvh(args.input)
    if args.mapping:
        sid = _pick_structure(model, src_skel, args.source)
        raw = motion_io.apply_joint_mapping(raw, model.structures[sid].template,
                                            motion_io.load_joint_mapping(args.mapping))
    sid = _pick_structure(model, raw.skeleton, args.source)
    tgt_skel = motion_io.parse_bvh(args.target_skeleton)[0]
    tid = _pick_structure(model, tgt_skel, args.target)
    clip = _sequence_clip(raw, fps)
    out = training.retarget(clip, model, sid, tid, tgt_skel)
    res = motion_io.delocalize(out, 1.0 / fps)
    path = out_path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    motion_io.write_bvh(path, tgt_skel, res)
    print(f"retargeted {clip.T} frames {sid} -> {tid} -> {path}")
    return 0


# --------------------------------------------------------------------------- eval

def _bvh_clip(path, fps=30):
    return _sequence_clip(motion_io.parse_bvh(path)[1], fps)


def _eval_bvh_dirs(pred_dir, gt_dir, report):
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    groups = {}
    recall_pairs = []
    for p in sorted(pred_dir.rglob("*.bvh")):
        rel = p.relative_to(pred_dir)
        g = gt_dir / rel
        if not g.exists():
            report.notes.append(f"no ground truth for {rel}")
            continue
        pc, gc = _bvh_clip(p), _bvh_clip(g)
        key = (pred_dir.name, rel.parent.name or gt_dir.name)
        groups.setdefault(key, []).append((pc, gc))
        if gc.skeleton.foot_joints:
            recall_pairs.append((gc, pc))
    return groups, recall_pairs


def _eval_checkpoint(args, report):
    model, _ = training.load_model(args.checkpoint)
    sets = {}
    for d in args.data:
        splits, _, meta, _ = load_dataset(d)
        sets[meta["structure_id"]] = splits.get(args.split) or splits["train"]
    src = args.source or next(iter(sets))
    tgt = args.target or src
    if src not in sets or tgt not in sets:
        raise ConfigError(f"need prepared data for structures {src!r} and {tgt!r}")
    src_set, tgt_set = sets[src], sets[tgt]
    by_key = {}
    for i in range(len(tgt_set)):
        by_key.setdefault(tgt_set.motion_keys[i], []).append(i)
    groups, recall_pairs, outputs = {}, [], []
    for i in range(len(src_set)):
        clip = src_set.clip(i)
        for j in by_key.get(src_set.motion_keys[i], []):
            if src == tgt and tgt_set.skeleton_names[j] == src_set.skeleton_names[i] and not args.include_self:
                continue
            gt = tgt_set.clip(j)
            out = training.retarget(clip, model, src, tgt, gt.skeleton)
            outputs.append(out.motion)
            groups.setdefault((src_set.skeleton_names[i], tgt_set.skeleton_names[j]), []).append((out, gt))
            if gt.skeleton.foot_joints:
                recall_pairs.append((gt, out))
    if not groups:
        report.notes.append("no paired ground truth; MPJPE and recall skipped")
        for i in range(len(src_set)):
            clip = src_set.clip(i)
            outputs.append(training.retarget(clip, model, src, tgt, tgt_set.skeleton(0)).motion)
    if args.fid:
        s = model.structures[tgt]
        real = motion_io.apply_norm(tgt_set.motions, s.norm)
        fake = motion_io.apply_norm(np.stack(outputs), s.norm)
        rng = np.random.default_rng(args.seed)
        n = min(args.fid_clips, len(real), len(fake))
        ri = evaluation.sample_by_velocity(tgt_set.motions, n, rng=rng)
        fi = evaluation.sample_by_velocity(np.stack(outputs), n, rng=rng)
        fid_model, _ = evaluation.train_fid_model(real, epochs=args.fid_epochs, seed=args.seed)
        report.fid = evaluation.fid(real[ri], fake[fi], fid_model)
    return groups, recall_pairs


def cmd_eval(args):
    report = evaluation.MetricReport()
    if args.pred and args.gt:
        groups, recall_pairs = _eval_bvh_dirs(args.pred, args.gt, report)
    elif args.checkpoint:
        if not args.data:
            raise ConfigError("eval with --checkpoint needs --data")
        groups, recall_pairs = _eval_checkpoint(args, report)
    else:
        raise ConfigError("eval needs --pred/--gt directories or --checkpoint with --data")
    for (s, t), pairs in sorted(groups.items()):
        report.pairs.append({"source": s, "target": t, "clips": len(pairs),
                             "mpjpe": evaluation.mpjpe([p for p, _ in pairs], [g for _, g in pairs])})
    if recall_pairs:
        report.recall = evaluation.recall_curve(recall_pairs)
    else:
        report.notes.append("no foot contacts available; recall skipped")
    out = out_path(args.out)
    report.write(out)
    overall = report.overall_mpjpe()
    print(f"mpjpe={'n/a' if overall is None else f'{overall:.6g}'} pairs={len(report.pairs)}"
          + ("" if report.fid is None else f" fid={report.fid:.6g}") + f" -> {out}")
    return 0


# --------------------------------------------------------------------------- attention

def cmd_attn(args):
    model, meta = training.load_model(args.checkpoint)
    fps = int(meta.get("train_config", {}).get("fps", 30))
    if args.input:
        clip = _bvh_clip(args.input, fps)
        sid = _pick_structure(model, clip.skeleton, args.structure)
    elif args.data:
        splits, _, dmeta, _ = load_dataset(args.data[0])
        sid = dmeta["structure_id"]
        cs = splits.get(args.split) or splits["train"]
        clip = cs.clip(args.clip)
    else:
        raise ConfigError("attn-viz needs --input or --data")
    out = out_path(args.out)
    heat = evaluation.export_attention(model, sid, clip, out)
    print(f"attention for {sid}: {heat.token_rows.shape[0]} frames x {len(heat.part_names)} parts -> {out}")
    return 0


# --------------------------------------------------------------------------- synth

def cmd_synth(args):
    from .synthetic import write_corpus

    path = write_corpus(out_path(args.out), args.structure, args.skeletons, args.motions,
                        args.frames, args.fps, args.seed, args.mixed_orders, args.test_fraction)
    print(f"wrote synthetic {args.structure} corpus -> {path}")
    return 0


# --------------------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="panret", description="Body-part motion retargeting")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="parse, localize, clip and normalize a BVH manifest")
    s.add_argument("manifest")
    s.add_argument("--partition", default="humanoid6", help="preset name or YAML file")
    s.add_argument("--mapping", help="joint mapping YAML applied before localization")
    s.add_argument("--template", help="BVH whose joint tree defines the structure (with --mapping)")
    s.add_argument("--clip-len", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_prepare)

    s = sub.add_parser("train", help="train generators and discriminators")
    s.add_argument("--config")
    s.add_argument("--data", action="append", help="prepared dataset dir (repeat per structure)")
    s.add_argument("--seed", type=int)
    s.add_argument("--mode", choices=training.MODES)
    s.add_argument("--epochs", type=int)
    s.add_argument("--checkpoint", help="resume from this checkpoint")
    s.add_argument("--tiny", action="store_true", help="use the small model configuration")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("retarget", help="retarget one BVH onto a target skeleton")
    s.add_argument("input")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--target-skeleton", required=True, help="BVH providing the target skeleton")
    s.add_argument("--source")
    s.add_argument("--target")
    s.add_argument("--mapping")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_retarget)

    s = sub.add_parser("eval", help="MPJPE, foot-contact recall and FID")
    s.add_argument("--checkpoint")
    s.add_argument("--data", action="append")
    s.add_argument("--split", default="test")
    s.add_argument("--source")
    s.add_argument("--target")
    s.add_argument("--include-self", action="store_true",
                   help="also score a skeleton against itself in intra-structural eval")
    s.add_argument("--pred", help="directory of retargeted BVH files")
    s.add_argument("--gt", help="directory of ground-truth BVH files with matching names")
    s.add_argument("--fid", action="store_true")
    s.add_argument("--fid-clips", type=int, default=1200)
    s.add_argument("--fid-epochs", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("attn-viz", help="export first-layer attention heatmaps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input")
    s.add_argument("--data", action="append")
    s.add_argument("--split", default="test")
    s.add_argument("--structure")
    s.add_argument("--clip", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_attn)

    s = sub.add_parser("synth", help="write a procedural BVH corpus and manifest")
    s.add_argument("--structure", default="humanoid_b",
                   choices=("humanoid_a", "humanoid_b", "biped", "quadruped"))
    s.add_argument("--skeletons", type=int, default=2)
    s.add_argument("--motions", type=int, default=2)
    s.add_argument("--frames", type=int, default=140)
    s.add_argument("--fps", type=int, default=60)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mixed-orders", action="store_true")
    s.add_argument("--test-fraction", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except PanretError as e:
        msg = str(e).replace("\n", " ")
        print(f"ERROR {e.code}: {msg}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"ERROR IO_ERROR: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"ERROR INVALID_VALUE: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
