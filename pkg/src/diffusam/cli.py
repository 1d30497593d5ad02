"""Command-line entry points.

    diffusam gen-data --config cfg.json --out runs/a
    diffusam train    --config cfg.json --out runs/a
    diffusam infer    --config cfg.json --out runs/a
    diffusam eval     --out runs/a
    diffusam sfuda    --config cfg.json --out runs/a
    diffusam diag     --config cfg.json --out runs/a

Flags override config keys (``--set key=value`` for anything without a
dedicated flag). Relative output paths resolve under ``$DIFFUSAM_OUTPUT_ROOT``
when it is set. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import data as data_mod
from .backbone import restrict_to_class
from .config import ExperimentConfig, parse_overrides
from .errors import ArchitectureMismatchError, ConfigError, DataError, NumericError, ShapeError
from .metrics import cluster_diagnostic, evaluate
from .prior import build_training_set, load_params, params_digest, read_params_header, save_params, train
from .sfuda import SfudaRun, run_sfuda
from .volumetric import sample_slice_memories, segment_volume, slice_seed

log = logging.getLogger("diffusam")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
PARAMS_FILE = "params.bin"


def _set_determinism(cfg: ExperimentConfig):
    if cfg.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _portable(cfg: ExperimentConfig) -> dict:
    # the output location is not part of the experiment
    return {k: v for k, v in cfg.to_dict().items() if k != "out"}


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed}


def _split(cfg: ExperimentConfig, volumes):
    return data_mod.make_split([v.volume_id for v in volumes], cfg.split_fraction, cfg.split_seed)


def _load_prior(cfg: ExperimentConfig, path: Path):
    if not path.is_file():
        raise DataError(f"no parameter file at {path}")
    try:
        net = load_params(path, expected_arch=cfg.arch())
    except ArchitectureMismatchError as exc:
        raise ArchitectureMismatchError(f"{path} was trained for a different backbone/architecture: {exc}") from exc
    trained_for = net.metadata.get("backbone")
    current = json.loads(json.dumps(cfg.make_backbone().describe()))
    if trained_for is not None and trained_for != current:
        raise ArchitectureMismatchError(f"{path} was trained with backbone {trained_for}, current config uses {current}")
    return net


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    hw = (cfg.height, cfg.width)
    source = data_mod.generate_synthetic_dataset(
        cfg.n_volumes, cfg.slices_per_volume, hw, cfg.k_classes, seed=cfg.seed, noise_std=cfg.noise_std
    )
    manifest = data_mod.write_volume_store(source, cfg.store_path("source"), _stamp(cfg))
    log.info("wrote %d source volumes to %s", len(manifest["volumes"]), cfg.store_path("source"))
    if cfg.n_target_volumes > 0:
        raw = data_mod.generate_synthetic_dataset(
            cfg.n_target_volumes, cfg.slices_per_volume, hw, cfg.k_classes,
            seed=cfg.seed + 7919, noise_std=cfg.noise_std, prefix="tgt",
        )
        target = data_mod.shift_domain(raw, cfg.shift_scale, cfg.shift_offset, cfg.shift_noise, seed=cfg.seed)
        data_mod.write_volume_store(target, cfg.store_path("target"), _stamp(cfg))
        log.info("wrote %d target volumes to %s", len(target), cfg.store_path("target"))
    _write_json(cfg.output_dir() / "data_manifest.json", {**_stamp(cfg), "source": [v.volume_id for v in source]})
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    params_path = out / PARAMS_FILE
    init = None
    if args.resume:
        if not params_path.is_file():
            raise DataError(f"--resume given but {params_path} does not exist")
        recorded = read_params_header(params_path).get("metadata", {}).get("config_hash")
        if recorded != cfg.config_hash():
            raise ConfigError(f"cannot resume: {params_path} has config hash {recorded}, current is {cfg.config_hash()}")
        init = load_params(params_path, expected_arch=cfg.arch())

    volumes = data_mod.read_volume_store(cfg.store_path("source"))
    split = _split(cfg, volumes)
    train_vols = [v for v in volumes if v.volume_id in split.train_volume_ids]
    if any(v.masks is None for v in train_vols):
        raise DataError("training volumes need masks")
    backbone = cfg.make_backbone()
    examples = build_training_set(train_vols, backbone, cross_slice=cfg.cross_slice_conditioning)
    log.info("training on %d examples from %s", len(examples), split.train_volume_ids)
    net, history = train(examples, backbone, cfg.train_config(), arch=cfg.arch(), init=init)

    meta = {**_stamp(cfg), "backbone": backbone.describe(), "train_volumes": split.train_volume_ids}
    save_params(net, params_path, metadata=meta)
    history.write_csv(out / "loss.csv", cfg.config_hash(), cfg.seed)
    first, last = history.smoothed_prior()
    _write_json(
        out / "train_manifest.json",
        {**meta, "params_digest": params_digest(net), "split": split.__dict__,
         "smoothed_prior_first": first, "smoothed_prior_last": last, "config": _portable(cfg)},
    )
    print(f"trained {cfg.iterations} iterations; smoothed L_prior {first:.4f} -> {last:.4f}")
    return EXIT_OK


def _select_volumes(cfg, volumes, which: str):
    if which == "all":
        return volumes
    split = _split(cfg, volumes)
    return [v for v in volumes if v.volume_id in split.test_volume_ids]


def cmd_infer(cfg: ExperimentConfig, args) -> int:
    out = cfg.output_dir()
    params_path = Path(args.params) if args.params else out / PARAMS_FILE
    store = Path(args.store) if args.store else cfg.store_path("source")
    net = _load_prior(cfg, params_path)
    backbone, sched, sampler = cfg.make_backbone(), cfg.make_schedule(), cfg.sampler_config()
    volumes = _select_volumes(cfg, data_mod.read_volume_store(store), args.volumes)
    results = []
    plans = {}
    for v in volumes:
        seg = segment_volume(v, net, backbone, sched, sampler, seed=cfg.seed, use_adjacency=cfg.use_adjacency)
        plans[v.volume_id] = seg.plan.order
        results.append(data_mod.VolumeRecord(
            volume_id=v.volume_id, slices=v.slices, masks=seg.masks,
            domain_tag=v.domain_tag, spacing=v.spacing, k_classes=v.k_classes,
        ))
    pred_store = out / "pred_store"
    data_mod.write_volume_store(results, pred_store, _stamp(cfg))
    _write_json(out / "run_manifest.json", {
        **_stamp(cfg), "params_digest": params_digest(net),
        "plan_order": plans, "use_adjacency": cfg.use_adjacency,
    })
    print(f"segmented {len(results)} volumes -> {pred_store}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = cfg.output_dir()
    pred_store = Path(args.pred) if args.pred else out / "pred_store"
    truth_store = Path(args.truth) if args.truth else cfg.store_path("source")
    preds = data_mod.read_volume_store(pred_store)
    pred_ids = [p.volume_id for p in preds]
    truths = data_mod.read_volume_store(truth_store)
    truths = [t for t in truths if t.volume_id in pred_ids] if not args.all_truth else truths
    report = evaluate({p.volume_id: p.masks for p in preds}, truths, list(range(1, cfg.k_classes + 1)), _stamp(cfg))
    path = Path(args.report) if args.report else out / "dice_report.csv"
    report.write_csv(path)
    print(" ".join(f"organ{o}={d:.4f}" for o, d in report.per_organ.items()) + f" mean={report.mean:.4f}")
    return EXIT_OK


def cmd_sfuda(cfg: ExperimentConfig, args) -> int:
    out = cfg.output_dir()
    params_path = Path(args.params) if args.params else out / PARAMS_FILE
    target = Path(args.target) if args.target else cfg.store_path("target")
    _load_prior(cfg, params_path)  # architecture check before the audited run
    run = SfudaRun(
        params_path=params_path, target_store=target,
        source_stores=[cfg.store_path("source")], cache_dir=out / "sfuda_cache",
    )
    backbone, sched, sampler = cfg.make_backbone(), cfg.make_schedule(), cfg.sampler_config()
    result = run_sfuda(run, backbone, sched, sampler, seed=cfg.seed, use_adjacency=cfg.use_adjacency, metadata=_stamp(cfg))
    targets = {v.volume_id: v for v in data_mod.read_volume_store(target)}
    preds = [
        data_mod.VolumeRecord(volume_id=vid, slices=targets[vid].slices, masks=seg.masks,
                              domain_tag="target", spacing=targets[vid].spacing, k_classes=targets[vid].k_classes)
        for vid, seg in result.segmentations.items()
    ]
    data_mod.write_volume_store(preds, out / "sfuda_pred_store", _stamp(cfg))
    if result.report is not None:
        result.report.write_csv(out / "sfuda_report.csv")
        print(f"SF-UDA mean Dice {result.report.mean:.4f}")
    _write_json(out / "sfuda_manifest.json", {
        **_stamp(cfg), "params_hash_before": result.params_hash_before,
        "params_hash_after": result.params_hash_after,
        "access_log": [os.path.relpath(p, out.resolve()) for p in result.access_log],
    })
    return EXIT_OK


def cmd_diag(cfg: ExperimentConfig, args) -> int:
    out = cfg.output_dir()
    params_path = Path(args.params) if args.params else out / PARAMS_FILE
    store = Path(args.store) if args.store else cfg.store_path("source")
    net = _load_prior(cfg, params_path)
    backbone, sched, sampler = cfg.make_backbone(), cfg.make_schedule(), cfg.sampler_config()
    volumes = _select_volumes(cfg, data_mod.read_volume_store(store), args.volumes)
    generated, truth = generated_vs_truth(net, volumes, backbone, sched, sampler, cfg.seed)
    diag = cluster_diagnostic(generated, truth)
    diag.write_csv(out / "cluster.csv", out / "cluster_points.csv", metadata=_stamp(cfg))
    print(" ".join(f"class{c}: gap={g:.4f}" for c, g in diag.gaps.items()))
    return EXIT_OK


def generated_vs_truth(net, volumes, backbone, sched, sampler, seed: int):
    """Sampled and ground-truth memory embeddings, paired with organ labels."""
    labels = list(range(1, backbone.spec.k + 1))
    generated, truth = [], []
    for v in volumes:
        z_imgs = backbone.encode_image(v.slices)
        for i in range(v.n_slices):
            mems = sample_slice_memories(net, z_imgs[i], labels, sched, sampler, slice_seed(seed, i))
            for row, lab in enumerate(labels):
                generated.append((mems[row], lab))
                truth.append((backbone.encode_memory(restrict_to_class(v.masks[i], lab), z_imgs[i]), lab))
    return generated, truth


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (relative paths resolve under $DIFFUSAM_OUTPUT_ROOT)")
    common.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
    common.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="diffusam", description="Prompt-free segmentation with a diffusion memory prior")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write synthetic source/target volume stores")

    p = sub.add_parser("train", parents=[common], help="train the diffusion prior")
    p.add_argument("--resume", action="store_true", help="continue from params.bin in --out (config hash must match)")

    p = sub.add_parser("infer", parents=[common], help="segment volumes middle-out")
    p.add_argument("--params")
    p.add_argument("--store")
    p.add_argument("--volumes", choices=["test", "all"], default="test")

    p = sub.add_parser("eval", parents=[common], help="Dice report for a prediction store")
    p.add_argument("--pred")
    p.add_argument("--truth")
    p.add_argument("--report")
    p.add_argument("--all-truth", action="store_true", help="require a prediction for every truth volume")

    p = sub.add_parser("sfuda", parents=[common], help="source-free inference on a target store")
    p.add_argument("--params")
    p.add_argument("--target")

    p = sub.add_parser("diag", parents=[common], help="generated vs ground-truth embedding clusters")
    p.add_argument("--params")
    p.add_argument("--store")
    p.add_argument("--volumes", choices=["test", "all"], default="test")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "sfuda": cmd_sfuda,
    "diag": cmd_diag,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(args.set)
        for key in ("seed", "out", "deterministic"):
            if getattr(args, key) is not None:
                overrides[key] = getattr(args, key)
        cfg = ExperimentConfig.load(args.config, overrides)
        _set_determinism(cfg)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
