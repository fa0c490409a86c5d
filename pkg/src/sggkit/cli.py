"""Command-line entry point: gen-data, train, eval, infer, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .data import Dataset, write_dataset
from .errors import ConfigError, DataError, NumericalError, SchemaError, UsageError

log = logging.getLogger("sggkit")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sggkit",
                                     description="desk-scale scene graph generation")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    gen.add_argument("--config", help="JSON config file")
    gen.add_argument("--seed", type=int, help="master seed override")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--force", action="store_true",
                     help="write into an existing non-empty directory")

    tr = sub.add_parser("train", help="train a model on a dataset")
    tr.add_argument("--config", help="JSON config file")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--data", required=True, help="dataset directory")
    tr.add_argument("--out", required=True, help="checkpoint output path")
    tr.add_argument("--log", help="JSONL loss log path")
    tr.add_argument("--bcg-mode", choices=("biatt", "uniatt", "none"))
    tr.add_argument("--stages", type=int)
    tr.add_argument("--mask-ratio", type=float)
    tr.add_argument("--mimic-weight", type=float)
    tr.add_argument("--classifier-lr-mult", type=float)
    tr.add_argument("--epochs", type=int)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", help="metric report JSON path")
    ev.add_argument("--logit-adjust", type=float, metavar="TAU")
    ev.add_argument("--topk-pairs", type=int)
    ev.add_argument("--topk-final", type=int)
    ev.add_argument("--dump-preds", help="prediction dump JSONL path")

    inf = sub.add_parser("infer", help="run inference on a single scene file")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--scene", required=True, help="scene .bin file")
    inf.add_argument("--out", help="prediction dump path (default stdout)")
    inf.add_argument("--topk-pairs", type=int)
    inf.add_argument("--topk-final", type=int)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--instances", type=int, default=20)
    return parser


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed})
    log.info("resolved config:\n%s", cfg.to_json())
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force)")
    manifest = write_dataset(out, cfg.data, cfg.seed)
    log.info("wrote %d train + %d test scenes to %s",
             manifest.train_count, manifest.test_count, out)
    return 0


def cmd_train(args) -> int:
    from .trainer import data_config_from_manifest, save_checkpoint, train
    overrides = {
        "seed": args.seed,
        "model.bcg_mode": args.bcg_mode,
        "model.stages": args.stages,
        "model.mask_ratio": args.mask_ratio,
        "loss.mimic_weight": args.mimic_weight,
        "train.classifier_lr_mult": args.classifier_lr_mult,
        "train.epochs": args.epochs,
    }
    cfg = load_config(args.config, overrides)
    dataset = Dataset(args.data)
    # the dataset's generator settings are authoritative for schema fields
    cfg.data = data_config_from_manifest(dataset.manifest)
    cfg.validate()
    log.info("resolved config:\n%s", cfg.to_json())
    model, _ = train(cfg, dataset, log_path=args.log, abort_ckpt_path=args.out)
    save_checkpoint(args.out, model, cfg)
    log.info("checkpoint written to %s", args.out)
    return 0


def cmd_eval(args) -> int:
    from .trainer import evaluate, load_checkpoint
    model, cfg = load_checkpoint(args.checkpoint)
    if args.logit_adjust is not None:
        cfg.eval.logit_adjust_tau = args.logit_adjust
    if args.topk_pairs is not None:
        cfg.eval.topk_pairs = args.topk_pairs
    if args.topk_final is not None:
        cfg.eval.topk_final = args.topk_final
    cfg.validate()
    log.info("resolved config:\n%s", cfg.to_json())
    dataset = Dataset(args.data)
    report, dumps = evaluate(model, dataset, cfg.eval)
    sys.stdout.write(report.to_text())
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
    if args.dump_preds:
        with open(args.dump_preds, "w", encoding="utf-8") as f:
            for rec in dumps:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    return 0


def cmd_infer(args) -> int:
    from .assembler import adjacency, assemble, postprocess
    from .data import read_scene_file
    from .trainer import graph_record, load_checkpoint
    model, cfg = load_checkpoint(args.checkpoint)
    if args.topk_pairs is not None:
        cfg.eval.topk_pairs = args.topk_pairs
    if args.topk_final is not None:
        cfg.eval.topk_final = args.topk_final
    scene, grid = read_scene_file(args.scene)
    entities, predicates = model.predict(grid)
    adj = adjacency(entities, predicates)
    graph = postprocess(assemble(adj, entities, predicates, cfg.eval.topk_pairs),
                        cfg.eval.topk_final)
    line = json.dumps(graph_record(scene.seed, graph), sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(line, encoding="utf-8")
    else:
        sys.stdout.write(line)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck_suite
    results = gradcheck_suite(seed=args.seed, instances=args.instances)
    failed = False
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{status}  {res.name:<16s} checks={res.n_checked:<4d} "
              f"max_rel_err={res.max_rel_err:.3e}")
        failed = failed or not res.passed
    if failed:
        raise NumericalError("gradient check failed")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    handlers = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
                "infer": cmd_infer, "gradcheck": cmd_gradcheck}
    try:
        return handlers[args.command](args)
    except (ConfigError, UsageError, json.JSONDecodeError) as e:
        log.error("%s", e)
        return 1
    except (SchemaError, DataError, OSError) as e:
        log.error("%s", e)
        return 2
    except NumericalError as e:
        log.error("%s", e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
