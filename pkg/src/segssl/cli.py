"""segssl command-line runner.

    segssl gen     --config PATH [--out DIR]
    segssl train   --config PATH [--mode SL|SSL|SSL_AL] [--out DIR]
    segssl eval    --config PATH [--checkpoint DIR] [--out DIR] [--oracle]
    segssl analyze --config PATH [--out DIR]
    segssl ablate  --config PATH [--seeds 0,1,2,3,4] [--out DIR] [--jobs N]

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 data mismatch.  SEGSSL_THREADS caps evaluation parallelism.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from pathlib import Path

from . import datastats
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import DatasetError, dataset_exists, generate_synthetic, load_dataset, save_dataset, split_dataset
from .engine import MODES, filter_log, history_csv, predict, train
from .metrics import aggregate, evaluate
from .network import NumericalError, load_checkpoint, save_checkpoint
from .preprocess import PreprocessPlan
from .tensorio import TensorFormatError, TensorIOError

log = logging.getLogger("segssl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DATA = 0, 2, 3, 4


class DataMismatch(Exception):
    pass


def _fmt(v) -> str:
    return "nan" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("SEGSSL_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# building blocks shared by the commands


def build_split(cfg: ExperimentConfig, split_seed=None):
    samples = generate_synthetic(cfg.gen_config(), cfg.data_seed)
    seed = cfg.split_seed if split_seed is None else split_seed
    return split_dataset(samples, cfg.labeled_ratio, cfg.val_count, cfg.test_count, seed, cfg.num_classes)


def run_training(cfg: ExperimentConfig, split, mode, seed, out_dir):
    """Train one arm and write checkpoint, plan, history and filter log to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg.train_config(mode=mode, seed=seed), split)
    save_checkpoint(result.params, out / "checkpoint")
    result.plan.save(out / "plan.txt")
    (out / "history.csv").write_text(history_csv(result.history))
    (out / "filter_events.csv").write_text(filter_log(result.filter_events))
    return result


def load_run(run_dir):
    run_dir = Path(run_dir)
    params = load_checkpoint(run_dir / "checkpoint")
    plan = PreprocessPlan.from_text((run_dir / "plan.txt").read_text())
    return params, plan


def evaluate_samples(preds, samples, num_classes):
    """Per-sample metric reports, fanned out over SEGSSL_THREADS threads."""

    def one(pair):
        pred, s = pair
        return evaluate(pred, s.label, num_classes)

    with ThreadPoolExecutor(max_workers=eval_threads()) as pool:
        return list(pool.map(one, zip(preds, samples)))


def metrics_tables(samples, reports):
    per_sample = ["sample_id,dice,iou,hd95,asd"]
    per_class = ["sample_id,class,dice,iou,hd95,asd,flags"]
    for s, r in zip(samples, reports):
        per_sample.append(f"{s.id},{_fmt(r.dice)},{_fmt(r.iou)},{_fmt(r.hd95)},{_fmt(r.asd)}")
        for c in r.per_class:
            per_class.append(
                f"{s.id},{c.class_id},{_fmt(c.dice)},{_fmt(c.iou)},{_fmt(c.hd95)},{_fmt(c.asd)},{'|'.join(c.flags)}"
            )
    agg = aggregate(reports)
    per_sample.append(f"aggregate,{_fmt(agg['dice'])},{_fmt(agg['iou'])},{_fmt(agg['hd95'])},{_fmt(agg['asd'])}")
    return "\n".join(per_sample) + "\n", "\n".join(per_class) + "\n", agg


def score_test_set(params, plan, split):
    preds = predict(params, plan, [s.image for s in split.test])
    return aggregate(evaluate_samples(preds, split.test, split.num_classes))


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: ExperimentConfig, out=None) -> int:
    root = Path(out or cfg.data_dir)
    split = build_split(cfg)
    save_dataset(split, root)
    (root / "config.txt").write_text(dump_config(cfg))
    print(
        f"wrote {root}: labeled={len(split.labeled)} unlabeled={len(split.unlabeled)} "
        f"validation={len(split.validation)} test={len(split.test)}"
    )
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, mode=None, out=None) -> int:
    mode = mode or cfg.mode
    if not dataset_exists(cfg.data_dir):
        raise DataMismatch(f"no dataset at {cfg.data_dir}; run 'segssl gen' first")
    # SL never opens the unlabeled split
    splits = ("labeled", "validation", "test") if mode == "SL" else ("labeled", "unlabeled", "validation", "test")
    split = load_dataset(cfg.data_dir, splits=splits)
    out_dir = Path(out or cfg.out_dir)
    result = run_training(cfg, split, mode, cfg.seed, out_dir)
    last = result.history[-1]
    print(f"{mode}: trained {cfg.max_epochs} epochs, final loss {last.total_loss:.4f}, val dice {last.val_dice:.2f}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, checkpoint=None, out=None, oracle=False) -> int:
    out_dir = Path(out or cfg.out_dir)
    if not dataset_exists(cfg.data_dir):
        raise DataMismatch(f"no dataset at {cfg.data_dir}")
    split = load_dataset(cfg.data_dir, splits=("test",))
    if oracle:
        preds = [s.label for s in split.test]
    else:
        params, plan = load_run(Path(checkpoint).parent if checkpoint else out_dir)
        if params["head.w"].shape[1] != split.num_classes:
            raise DataMismatch(
                f"checkpoint predicts {params['head.w'].shape[1]} classes, dataset has {split.num_classes}"
            )
        try:
            preds = predict(params, plan, [s.image for s in split.test])
        except ValueError as exc:
            raise DataMismatch(str(exc)) from None
    reports = evaluate_samples(preds, split.test, split.num_classes)
    per_sample, per_class, agg = metrics_tables(split.test, reports)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.csv").write_text(per_sample)
    (out_dir / "metrics_per_class.csv").write_text(per_class)
    print(f"test dice {agg['dice']:.2f} iou {agg['iou']:.2f} hd95 {agg['hd95']:.3f} asd {agg['asd']:.3f}")
    return EXIT_OK


def cmd_analyze(cfg: ExperimentConfig, out=None) -> int:
    if not dataset_exists(cfg.data_dir):
        raise DataMismatch(f"no dataset at {cfg.data_dir}")
    split = load_dataset(cfg.data_dir, splits=("labeled", "validation", "test"))
    samples = split.labeled + split.validation + split.test
    stats = datastats.analyze_dataset(samples)
    out_dir = Path(out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = Path(cfg.data_dir).name or "dataset"
    (out_dir / "analysis.csv").write_text(datastats.stats_csv(name, stats))
    m = stats.mean
    print(f"{name}: cnr {m.cnr:.3f} snr {m.snr:.3f} fbr {m.fbr:.2f}% ({len(stats.failures)} images skipped)")
    return EXIT_OK


ABLATION_HEADER = "method,labeled,seed,dice,iou,hd95,asd"


def _ablation_run(args):
    cfg, seed, mode, out_dir = args
    split = build_split(cfg, split_seed=seed)
    result = run_training(cfg, split, mode, seed, Path(out_dir) / f"seed{seed}" / mode)
    return mode, seed, len(split.labeled), score_test_set(result.params, result.plan, split)


def ablation_csv(rows) -> str:
    lines = [ABLATION_HEADER]
    for mode in MODES:
        mine = [r for r in rows if r[0] == mode]
        for _, seed, n_lab, m in sorted(mine, key=lambda r: r[1]):
            lines.append(f"{mode},{n_lab},{seed},{_fmt(m['dice'])},{_fmt(m['iou'])},{_fmt(m['hd95'])},{_fmt(m['asd'])}")
    for mode in MODES:
        mine = [r for r in rows if r[0] == mode]
        if not mine:
            continue
        med = {k: statistics.median([r[3][k] for r in mine]) for k in ("dice", "iou", "hd95", "asd")}
        n_lab = mine[0][2]
        lines.append(f"{mode},{n_lab},median,{_fmt(med['dice'])},{_fmt(med['iou'])},{_fmt(med['hd95'])},{_fmt(med['asd'])}")
    return "\n".join(lines) + "\n"


def cmd_ablate(cfg: ExperimentConfig, seeds, out=None, jobs=1) -> int:
    """SL, SSL and SSL_AL for every seed; the split depends on the seed only, never on the arm."""
    out_dir = Path(out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, s, m, str(out_dir)) for s in seeds for m in MODES]
    rows = []
    code = EXIT_OK
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for row in pool.map(_ablation_run, tasks):
                    rows.append(row)
        else:
            for t in tasks:
                rows.append(_ablation_run(t))
                log.info("ablation %s seed %d: dice %.2f", rows[-1][0], rows[-1][1], rows[-1][3]["dice"])
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    finally:
        (out_dir / "ablation.csv").write_text(ablation_csv(rows))
    print((out_dir / "ablation.csv").read_text(), end="")
    return code


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segssl", description="semi-supervised segmentation with entropy filtering")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen", "train", "eval", "analyze", "ablate"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="key=value experiment config")
        sp.add_argument("--out", default=None, help="output directory (overrides out_dir / data_dir)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            sp.add_argument("--mode", choices=MODES, default=None)
        if name == "eval":
            sp.add_argument("--checkpoint", default=None, help="checkpoint directory inside a run directory")
            sp.add_argument("--oracle", action="store_true", help="score ground truth against itself")
        if name == "ablate":
            sp.add_argument("--seeds", default="0,1,2,3,4", help="comma separated seeds")
            sp.add_argument("--jobs", type=int, default=1, help="parallel training processes")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "gen":
            return cmd_gen(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.mode, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.out, args.oracle)
        if args.command == "analyze":
            return cmd_analyze(cfg, args.out)
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"bad --seeds value {args.seeds!r}") from None
        if not seeds:
            raise ConfigError("--seeds must list at least one seed")
        return cmd_ablate(cfg, seeds, args.out, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataMismatch, DatasetError, TensorFormatError, TensorIOError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
