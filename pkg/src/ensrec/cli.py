"""Operator entry point: preprocess, train, eval, gradcheck, ablate.

Every command that produces artifacts writes them to a staging directory
first and renames it to the requested path only on success, so a failed run
leaves no partial output. Each output directory carries a manifest with the
resolved configuration, seeds, dataset fingerprint, tool version, and the
command line; rerunning the same manifest reproduces identical metric logs.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data as dt
from . import encoder as enc
from . import gradcheck as gc
from . import trainer as tr
from .errors import ParameterError
from .evaluation import evaluate

logger = logging.getLogger("ensrec.cli")

ABLATION_VARIANTS = (
    "full", "remove_icl", "remove_ccl", "remove_kd", "remove_ap",
    "independent", "single_encoder", "ensemble_x2", "ensemble_x4",
)


def _configure_logging():
    level = os.environ.get("ENSREC_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


@contextlib.contextmanager
def staged_output(out_dir, force: bool = False):
    """Stage results in a temp sibling; rename to ``out_dir`` on success."""
    out = Path(out_dir)
    if out.exists():
        if not force:
            raise ParameterError(f"output directory {out} already exists (use --force)")
        shutil.rmtree(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + f".staging-{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    tmp.rename(out)


def write_manifest(directory: Path, command: str, argv, **fields) -> None:
    manifest = {
        "tool_version": __version__,
        "command": command,
        "argv": list(argv),
        **fields,
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _dataset_file(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "dataset.json"
    return p


def _load_config_file(path):
    if path is None:
        return {}, {}
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return payload.get("model", {}), payload.get("train", {})


def _resolve_model_config(args, dataset: dt.Dataset, file_model: dict) -> enc.ModelConfig:
    fields = dict(file_model)
    fields["vocab_size"] = dataset.n_items
    fields["attr_size"] = max(dataset.n_attrs, 1)
    cli_map = {
        "max_len": args.max_len, "hidden_dim": args.hidden_dim,
        "n_networks": args.n_networks, "n_views": args.n_views,
        "mask_prop": args.mask_prop, "tau": args.tau, "lam": getattr(args, "lambda_"),
        "mu": args.mu, "mode": args.mode, "blocks": args.blocks, "heads": args.heads,
        "dropout_rate": args.dropout,
    }
    for key, value in cli_map.items():
        if value is not None:
            fields[key] = value
    fields.setdefault("max_len", 50)
    return enc.ModelConfig(**fields)


def _resolve_train_config(args, file_train: dict) -> tr.TrainConfig:
    fields = dict(file_train)
    cli_map = {
        "lr": args.lr, "epochs": args.epochs, "batch_size": args.batch_size,
        "seed": args.seed, "eval_every": args.eval_every, "grad_clip": args.grad_clip,
        "decay_period": args.decay_period, "decay_factor": args.decay_factor,
    }
    for key, value in cli_map.items():
        if value is not None:
            fields[key] = value
    for flag in ("no_icl", "no_ccl", "no_kd", "no_ap", "independent_training"):
        if getattr(args, flag):
            fields[flag] = True
    return tr.TrainConfig(**fields)


def _network_seeds(train_cfg: tr.TrainConfig, model_cfg: enc.ModelConfig, file_seeds):
    if file_seeds:
        return [int(s) for s in file_seeds]
    return [train_cfg.seed + i for i in range(model_cfg.n_networks)]


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    if args.format == "synth":
        dataset = dt.synth_generate(args.synth_users, args.synth_items,
                                    args.synth_attrs, args.synth_avg_len,
                                    args.seed if args.seed is not None else 42)
    else:
        if not args.input:
            raise ParameterError("--input is required for tsv/ml1m formats")
        if args.format == "ml1m":
            movies = args.attrs
            if movies is None:
                candidate = Path(args.input).with_name("movies.dat")
                movies = candidate if candidate.exists() else None
            records, attrs = dt.convert_ml1m(args.input, movies)
        else:
            records = dt.ingest_tsv(args.input)
            attrs = dt.ingest_attrs_tsv(args.attrs) if args.attrs else None
        dataset = dt.preprocess(records, attrs)

    table = dt.stats_table(dataset.stats)
    with staged_output(args.out, args.force) as tmp:
        dt.save_dataset(dataset, tmp / "dataset.json")
        (tmp / "stats.txt").write_text(table + "\n", encoding="utf-8")
        write_manifest(
            tmp, "preprocess", args.argv,
            stats=dataset.stats,
            dataset_fingerprint=dt.fingerprint(tmp / "dataset.json"),
        )
    print(table)
    print(f"dataset cached under {args.out}")
    return 0


def cmd_train(args) -> int:
    file_model, file_train = _load_config_file(args.config)
    file_seeds = file_model.pop("seeds", None)
    dataset_path = _dataset_file(args.dataset)
    dataset = dt.load_dataset(dataset_path)
    ds_fingerprint = dt.fingerprint(dataset_path)

    model_cfg = _resolve_model_config(args, dataset, file_model)
    train_cfg = _resolve_train_config(args, file_train)
    seeds = _network_seeds(train_cfg, model_cfg, file_seeds)

    start_epoch = 0
    adam_states = None
    if args.resume:
        ensemble, adam_states, meta = tr.load_checkpoint(args.resume)
        model_cfg = ensemble.config
        seeds = ensemble.seeds
        start_epoch = (meta.get("epoch") or 0) + 1
        logger.info("resuming from %s at epoch %d", args.resume, start_epoch)
    else:
        ensemble = enc.init_ensemble(model_cfg, seeds)
    if adam_states is None:
        adam_states = [tr.AdamState() for _ in ensemble.networks]

    n_params = enc.param_count(model_cfg)
    logger.info("parameters per network: %d (x%d networks)", n_params, len(ensemble))
    split = dt.split_leave_one_out(dataset, max_len=model_cfg.max_len)

    with staged_output(args.out, args.force) as tmp:
        write_manifest(
            tmp, "train", args.argv,
            model_config=model_cfg.to_dict(), train_config=train_cfg.to_dict(),
            seeds=seeds, dataset_fingerprint=ds_fingerprint,
            param_count_per_network=n_params,
        )
        with open(tmp / "metrics.jsonl", "w", encoding="utf-8") as loss_log, \
             open(tmp / "val_metrics.jsonl", "w", encoding="utf-8") as val_log:

            def on_epoch(record):
                loss_log.write(json.dumps(record, sort_keys=True) + "\n")
                logger.info("epoch %d total %.4f", record["epoch"], record["total"])

            def on_validation(record):
                val_log.write(json.dumps(record, sort_keys=True) + "\n")
                logger.info("epoch %d val ndcg@10 %.4f", record["epoch"], record["ndcg10"])

            result = tr.train(
                ensemble, split, dataset, train_cfg,
                adam_states=adam_states, start_epoch=start_epoch,
                best_checkpoint_path=tmp / "checkpoint_best.npz",
                dataset_fingerprint=ds_fingerprint,
                on_epoch=on_epoch, on_validation=on_validation,
            )
        tr.save_checkpoint(
            tmp / "checkpoint_last.npz", ensemble, adam_states,
            epoch=train_cfg.epochs - 1, best_val_ndcg10=result.best_ndcg10,
            dataset_fingerprint=ds_fingerprint,
        )
    if result.best_ndcg10 is not None:
        print(f"trained {train_cfg.epochs - start_epoch} epochs; "
              f"best val NDCG@10 {result.best_ndcg10:.4f} at epoch {result.best_epoch}")
    else:
        print("nothing to train: checkpoint already covers the requested epochs")
    print(f"artifacts under {args.out}")
    return 0


def cmd_eval(args) -> int:
    dataset_path = _dataset_file(args.dataset)
    dataset = dt.load_dataset(dataset_path)
    ensemble, _, meta = tr.load_checkpoint(args.checkpoint)
    stored = meta.get("dataset_fingerprint")
    actual = dt.fingerprint(dataset_path)
    if stored is not None and stored != actual:
        raise ParameterError(
            f"checkpoint was trained on dataset {stored[:12]}... but "
            f"{dataset_path} hashes to {actual[:12]}...; refusing to evaluate "
            "mismatched data"
        )
    split = dt.split_leave_one_out(dataset, max_len=ensemble.config.max_len)
    report = evaluate(ensemble, split, target=args.split, exclude_seen=args.exclude_seen)
    print(report.table())
    if args.out:
        with staged_output(args.out, args.force) as tmp:
            payload = report.as_dict(include_ranks=args.dump_ranks)
            payload["split"] = args.split
            with open(tmp / "eval_report.json", "w", encoding="utf-8") as fh:
                json.dump(payload, fh, sort_keys=True, indent=2)
                fh.write("\n")
            write_manifest(tmp, "eval", args.argv, split=args.split,
                           dataset_fingerprint=actual,
                           checkpoint=str(args.checkpoint))
    return 0


def cmd_gradcheck(args) -> int:
    results, elapsed = gc.run_all(corrupt_op=args.corrupt,
                                  points_per_param=args.points)
    print(gc.format_table(results))
    print(f"elapsed: {elapsed:.1f}s")
    failed = [r for r in results if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.worst_rel_err)
        print(f"FAILED: {len(failed)} check(s); worst {worst.name} "
              f"rel err {worst.worst_rel_err:.3e}", file=sys.stderr)
        return 1
    return 0


def _ablation_train_flags(variant: str) -> dict:
    flags = {}
    if variant == "remove_icl":
        flags["no_icl"] = True
    elif variant == "remove_ccl":
        flags["no_ccl"] = True
    elif variant == "remove_kd":
        flags["no_kd"] = True
    elif variant == "remove_ap":
        flags["no_ap"] = True
    elif variant == "independent":
        flags["independent_training"] = True
    elif variant == "single_encoder":
        flags.update(no_icl=True, no_ccl=True, no_kd=True, no_ap=True)
    return flags


def _ablation_networks(variant: str, base_n: int) -> int:
    return {"single_encoder": 1, "ensemble_x2": 2, "ensemble_x4": 4}.get(variant, base_n)


def run_variant(variant, dataset, split, model_cfg, train_cfg, workdir: Path):
    """Train and test-evaluate one ablation variant; returns its summary."""
    model_fields = model_cfg.to_dict()
    model_fields["n_networks"] = _ablation_networks(variant, model_cfg.n_networks)
    vcfg = enc.ModelConfig(**model_fields)
    train_fields = train_cfg.to_dict()
    train_fields.update(_ablation_train_flags(variant))
    vtrain = tr.TrainConfig(**train_fields)
    seeds = [vtrain.seed + i for i in range(vcfg.n_networks)]
    ensemble = enc.init_ensemble(vcfg, seeds)
    best_path = workdir / "checkpoint_best.npz"
    result = tr.train(ensemble, split, dataset, vtrain,
                      best_checkpoint_path=best_path)
    best_ensemble, _, _ = tr.load_checkpoint(best_path)
    report = evaluate(best_ensemble, split, target="test")
    return {
        "variant": variant, "n_networks": vcfg.n_networks,
        "seed": vtrain.seed, "best_epoch": result.best_epoch,
        "hr10": report.hr[10], "ndcg10": report.ndcg[10],
    }


def cmd_ablate(args) -> int:
    file_model, file_train = _load_config_file(args.config)
    file_model.pop("seeds", None)
    dataset_path = _dataset_file(args.dataset)
    dataset = dt.load_dataset(dataset_path)
    ds_fingerprint = dt.fingerprint(dataset_path)
    model_cfg = _resolve_model_config(args, dataset, file_model)
    train_cfg = _resolve_train_config(args, file_train)
    split = dt.split_leave_one_out(dataset, max_len=model_cfg.max_len)
    base_seed = train_cfg.seed
    seeds = [base_seed + 1000 * s for s in range(args.n_seeds)]

    jobs = [(variant, seed) for variant in ABLATION_VARIANTS for seed in seeds]

    with staged_output(args.out, args.force) as tmp:
        rows = []

        def run_job(job):
            variant, seed = job
            fields = train_cfg.to_dict()
            fields["seed"] = seed
            vdir = tmp / variant / f"seed{seed}"
            vdir.mkdir(parents=True, exist_ok=True)
            return run_variant(variant, dataset, split, model_cfg,
                               tr.TrainConfig(**fields), vdir)

        if args.parallel:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=args.parallel) as pool:
                rows = list(pool.map(run_job, jobs))
        else:
            rows = [run_job(job) for job in jobs]

        summary = {}
        for variant in ABLATION_VARIANTS:
            vrows = [r for r in rows if r["variant"] == variant]
            summary[variant] = {
                "n_networks": vrows[0]["n_networks"],
                "ndcg10_mean": float(np.mean([r["ndcg10"] for r in vrows])),
                "hr10_mean": float(np.mean([r["hr10"] for r in vrows])),
                "per_seed": vrows,
            }
            write_manifest(
                tmp / variant, "ablate-variant", args.argv, variant=variant,
                model_config=model_cfg.to_dict(), train_config=train_cfg.to_dict(),
                seeds=seeds, dataset_fingerprint=ds_fingerprint,
            )
        with open(tmp / "ablation.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, sort_keys=True, indent=2)
            fh.write("\n")
        table = _ablation_table(summary)
        (tmp / "ablation.txt").write_text(table + "\n", encoding="utf-8")
        write_manifest(tmp, "ablate", args.argv,
                       model_config=model_cfg.to_dict(),
                       train_config=train_cfg.to_dict(), seeds=seeds,
                       dataset_fingerprint=ds_fingerprint)
    print(table)
    return 0


def _ablation_table(summary: dict) -> str:
    width = max(len(v) for v in summary) + 2
    lines = [f"{'architecture':<{width}}  {'NDCG@10':>8}  {'HR@10':>8}"]
    for variant, row in summary.items():
        lines.append(f"{variant:<{width}}  {row['ndcg10_mean']:8.4f}  {row['hr10_mean']:8.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# parser


def _add_model_args(p: argparse.ArgumentParser):
    p.add_argument("--max-len", type=int, default=None, help="sequence window T")
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--blocks", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--n-networks", type=int, default=None)
    p.add_argument("--n-views", type=int, default=None)
    p.add_argument("--mask-prop", type=float, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--lambda", dest="lambda_", type=float, default=None)
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--mode", choices=("mlm", "nip"), default=None)


def _add_train_args(p: argparse.ArgumentParser):
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--decay-period", type=int, default=None)
    p.add_argument("--decay-factor", type=float, default=None)
    p.add_argument("--no-icl", action="store_true")
    p.add_argument("--no-ccl", action="store_true")
    p.add_argument("--no-kd", action="store_true")
    p.add_argument("--no-ap", action="store_true")
    p.add_argument("--independent-training", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ensrec",
        description="train and evaluate ensembles of Transformer sequence "
                    "encoders with contrastive alignment and mutual distillation",
    )
    parser.add_argument("--version", action="version", version=f"ensrec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="ingest raw data and cache a dataset")
    p.add_argument("--input", help="raw interactions file")
    p.add_argument("--attrs", help="attribute sidecar file")
    p.add_argument("--format", choices=("tsv", "ml1m", "synth"), default="tsv")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--synth-users", type=int, default=500)
    p.add_argument("--synth-items", type=int, default=50)
    p.add_argument("--synth-attrs", type=int, default=10)
    p.add_argument("--synth-avg-len", type=int, default=20)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train an ensemble on a cached dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config file with model/train sections")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--force", action="store_true")
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="full-ranking evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--exclude-seen", action="store_true")
    p.add_argument("--dump-ranks", action="store_true")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--corrupt", help="internal hook: corrupt one op's gradient")
    p.add_argument("--points", type=int, default=4,
                   help="sampled coordinates per parameter in loss checks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run the ablation grid")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n-seeds", type=int, default=1)
    p.add_argument("--parallel", type=int, default=0,
                   help="thread pool size; 0 runs sequentially")
    p.add_argument("--force", action="store_true")
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    from ._malloc import tune_malloc
    tune_malloc()
    _configure_logging()
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console() -> None:
    raise SystemExit(main())
