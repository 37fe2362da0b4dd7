"""Command-line entry points: synth, train, learn-labels, eval, report.

Every command is a pure function of (config, input files, seed); reruns with
identical inputs produce byte-identical outputs. Exit codes: 0 success,
1 usage/config error, 2 numeric failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import experiment as exp
from .config import ConfigError, ExperimentConfig, load_config, render_config
from .core import grid_decode, grid_encode
from .labelspace import export_unified, parse_unified
from .metrics import MissingTransform, render_report
from .model import (
    DivergedLoss,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
)
from .scenes import cloud_decode, cloud_encode, dataset_presets, taxonomy_preset

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


def _write_bytes(path, data):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


def _write_text(path, text):
    _write_bytes(path, text.encode())


def _load_cfg(args):
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _manifest(synth, cfg):
    tax = synth.taxonomy
    entry = {
        "taxonomy": cfg.taxonomy,
        "fine_classes": list(tax.fine_space.names),
        "datasets": {},
        "scene_seeds": synth.scene_seeds,
        "eval_seeds": synth.eval_seeds,
        "oracle_pairs": [],
    }
    for ds, spec in synth.specs.items():
        entry["datasets"][ds] = {
            "classes": list(spec.label_space.names),
            "empty_id": spec.label_space.empty_id,
            "projection": tax.project(ds).tolist(),
            "grid_dims": list(spec.grid_dims),
            "gt_range": [spec.gt_range.mins.tolist(), spec.gt_range.maxs.tolist()],
            "point_range": [spec.point_range.mins.tolist(), spec.point_range.maxs.tolist()],
        }
    oracle = exp.oracle_unified(tax, synth.specs)
    for cand in oracle.selected:
        if len(cand) == 2:
            entry["oracle_pairs"].append([list(cand.members[0]), list(cand.members[1])])
    return json.dumps(entry, indent=2, sort_keys=True) + "\n"


def cmd_synth(cfg):
    counts = {
        "n_boxes": cfg.boxes,
        "n_pillars": cfg.pillars,
        "n_walls": cfg.walls,
        "n_blobs": cfg.blobs,
        "n_posts": cfg.posts,
    }
    synth = exp.synthesize(
        cfg.seed, taxonomy_name=cfg.taxonomy, n_train=cfg.scenes,
        n_eval=cfg.eval_scenes, scene_counts=counts,
    )
    _write_text(os.path.join(cfg.out, "config.txt"), render_config(cfg))
    _write_text(os.path.join(cfg.out, "manifest.json"), _manifest(synth, cfg))
    for ds in synth.specs:
        for tag, views in (("scene", synth.train_views[ds]), ("eval", synth.eval_views[ds])):
            for i, (cloud, gt) in enumerate(views):
                base = os.path.join(cfg.out, ds)
                _write_bytes(os.path.join(base, f"{tag}_{i:04d}.mocc"), grid_encode(gt))
                _write_bytes(os.path.join(base, f"{tag}_cloud_{i:04d}.mply"), cloud_encode(cloud))
    return EXIT_OK


def _load_synth(cfg):
    """Rebuild a SynthResult from a synth output directory."""
    manifest_path = os.path.join(cfg.out, "manifest.json")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    taxonomy = taxonomy_preset(manifest["taxonomy"])
    specs = dataset_presets(taxonomy)
    train_views = {ds: [] for ds in specs}
    eval_views = {ds: [] for ds in specs}
    for ds in specs:
        base = os.path.join(cfg.out, ds)
        for tag, sink in (("scene", train_views), ("eval", eval_views)):
            i = 0
            while True:
                gpath = os.path.join(base, f"{tag}_{i:04d}.mocc")
                cpath = os.path.join(base, f"{tag}_cloud_{i:04d}.mply")
                if not os.path.exists(gpath):
                    break
                with open(gpath, "rb") as fh:
                    gt = grid_decode(fh.read())
                with open(cpath, "rb") as fh:
                    cloud = cloud_decode(fh.read())
                sink[ds].append((cloud, gt))
                i += 1
    return exp.SynthResult(
        taxonomy=taxonomy,
        specs=specs,
        train_views=train_views,
        eval_views=eval_views,
        scene_seeds=manifest["scene_seeds"],
        eval_seeds=manifest["eval_seeds"],
    )


def _train_cfg(cfg, regime):
    return TrainConfig(
        regime=regime,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        seed=cfg.seed,
        hidden=cfg.hidden,
        stride=cfg.stride,
        pretrain_epochs=cfg.pretrain_epochs,
    )


def _log_csv(log):
    lines = ["epoch,dataset,loss,iou,miou"]
    for row in log:
        lines.append(
            f"{row['epoch']},{row['dataset']},{row['loss']:.6f},{row['iou']:.4f},{row['miou']:.4f}"
        )
    return "\n".join(lines) + "\n"


def cmd_train(cfg):
    synth = _load_synth(cfg)
    regime = cfg.regime
    tc = _train_cfg(cfg, regime)
    if regime == "single":
        result, _ = exp.run_single(list(synth.specs)[0], synth, tc)
    else:
        result, _ = exp.run_regime(regime, synth, tc)
    save_checkpoint(os.path.join(cfg.out, f"ckpt_{regime}.mckpt"), result.params, result.norm_state)
    _write_text(os.path.join(cfg.out, f"train_log_{regime}.csv"), _log_csv(result.log))
    return EXIT_OK


def cmd_learn_labels(cfg, checkpoint):
    synth = _load_synth(cfg)
    params, norm_state = load_checkpoint(checkpoint)
    from .model import TrainResult

    result = TrainResult(params=params, norm_state=norm_state, log=[], weights={})
    shared = exp.eval_intersection(synth.specs)
    data = {
        ds: exp.prepare_dataset(synth.train_views[ds], synth.specs[ds], shared, cfg.stride)
        for ds in synth.specs
    }
    unified = exp.learn_unified(result, data, synth.specs, cfg.lam, cfg.tau)
    spaces = [(ds, synth.specs[ds].label_space) for ds in synth.specs]
    _write_text(
        os.path.join(cfg.out, "unified.txt"),
        export_unified(unified, spaces, lam=cfg.lam, tau=cfg.tau),
    )
    return EXIT_OK


def cmd_eval(cfg, checkpoint, unified_path=None):
    synth = _load_synth(cfg)
    params, norm_state = load_checkpoint(checkpoint)
    from .model import TrainResult

    regime = _infer_regime(norm_state, params)
    if regime == "pretrain_finetune":
        print(
            "pretrain_finetune checkpoints are assessed from their training log",
            file=sys.stderr,
        )
        return EXIT_USAGE
    result = TrainResult(params=params, norm_state=norm_state, log=[], weights={})
    unified = None
    if unified_path:
        spaces = [(ds, synth.specs[ds].label_space) for ds in synth.specs]
        with open(unified_path, "r", encoding="utf-8") as fh:
            unified = parse_unified(fh.read(), spaces)
    ids = list(synth.specs)
    if regime == "direct_merge":
        offsets, _ = exp.union_offsets(synth.specs)
        result.block_offsets = offsets
        setups = [s for s in exp.standard_setups({"direct_merge": result}) if s.name == "direct_merge"]
    elif regime == "mdt":
        setups = exp.standard_setups({"mdt": result})
    else:
        home = norm_state.dataset_ids()[0]
        name = f"single_{home}"
        if cfg.cross:
            if unified is None:
                raise MissingTransform(
                    "cross-domain evaluation requires a unified label-space document"
                )
            head_of = {ds: home for ds in ids}
            tax_of = {ds: home for ds in ids}
        else:
            head_of = {home: home}
            tax_of = {home: home}
        setups = [
            exp.Setup(name=name, result=result, prep="raw", head_of=head_of,
                      taxonomy_of=tax_of, home=home)
        ]
    rows, preds = exp.evaluate_setups(synth, setups, unified, cfg.stride, eta=cfg.eta)
    tag = setups[0].name if setups else regime
    _write_text(os.path.join(cfg.out, f"report_{tag}.csv"), render_report(rows))
    for (sname, ds), grids in preds.items():
        for i, g in enumerate(grids):
            _write_bytes(
                os.path.join(cfg.out, "pred", sname, ds, f"pred_{i:04d}.mocc"),
                grid_encode(g),
            )
    return EXIT_OK


def _infer_regime(norm_state, params):
    from .model import PLAIN_STATS_ID

    ids = norm_state.dataset_ids()
    if ids == [exp.MERGED_ID]:
        return "direct_merge"
    if ids == [PLAIN_STATS_ID]:
        return "pretrain_finetune"
    if len(ids) == 1:
        return "single"
    return "mdt"


def cmd_report(out, inputs):
    rows = []
    for path in inputs:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().strip().splitlines()
        for line in lines[1:]:
            setup, ds, iou, mi = line.split(",")
            rows.append({"setup": setup, "dataset": ds, "iou": float(iou), "miou": float(mi)})
    rows.sort(key=lambda r: (r["setup"], r["dataset"]))
    _write_text(os.path.join(out, "report.csv"), render_report(rows))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="mdocc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config file (key = value sections)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("synth", help="materialize synthetic dataset pairs")
    common(p)
    p = sub.add_parser("train", help="train a regime on a synth directory")
    common(p)
    p.add_argument("--regime", default=None, choices=("single", "pretrain_finetune", "direct_merge", "mdt"))
    p = sub.add_parser("learn-labels", help="learn the unified label space from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("eval", help="evaluate a checkpoint into a report table")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--unified", default=None, help="unified label-space document")
    p = sub.add_parser("report", help="merge report CSVs")
    p.add_argument("--out", required=True)
    p.add_argument("inputs", nargs="+")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        if args.command == "report":
            return cmd_report(args.out, args.inputs)
        cfg = _load_cfg(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            if args.regime:
                cfg.regime = args.regime
            return cmd_train(cfg)
        if args.command == "learn-labels":
            return cmd_learn_labels(cfg, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.unified)
        parser.error(f"unknown command {args.command}")
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergedLoss, MissingTransform, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"i/o failure: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
