#!/usr/bin/env python3
"""
GGeM Pooling Experiments
Toy ViT training, gradient checks, attention-head analysis, batch pooling and
retrieval evaluation from the command line.

Exit codes: 0 success, 1 check failure or diverged training, 2 usage/input error.
Diagnostics go to stderr; data goes to files or stdout.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import pandas as pd
from dotenv import load_dotenv

from config.experiment_config import ExperimentConfig, load_config
from ml.errors import GGeMError, InvalidArgument, TrainingDiverged
from ml.gradcheck import run_gradcheck
from ml.head_analysis import head_mean_distance, inter_head_cka
from ml.pooling import STRATEGIES, PoolingConfig, pool_forward
from ml.retrieval import METRICS, evaluate, knn_accuracy
from ml.toy_vit import ToyViTModel, load_checkpoint, save_checkpoint
from ml.training import extract_descriptors, run_sweep, sweep_summary, train
from utils.console import banner, error, status, success, warn
from utils.descriptor_files import (
    descriptor_frame,
    read_activation_file,
    read_descriptor_csv,
    write_descriptor_csv,
)
from utils.file_io import frame_to_csv, to_json, write_csv, write_json
from utils.idx_dataset import Dataset, read_idx_dataset, synthetic_blobs, write_idx_dataset

# Load environment variables (GGEM_THREADS, GGEM_QUIET)
load_dotenv()


EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2

SWEEP_KEYS = ('p_init', 'groups')


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def resolve_config(args) -> ExperimentConfig:
    """Config file (or defaults) with command-line overrides applied"""
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def load_dataset(source: str, labels: str, image_size: int, classes: int, seed: int,
                 samples: int, noise: float) -> Dataset:
    if source == 'synthetic':
        return synthetic_blobs(samples, image_size, classes, seed, noise)
    if not labels:
        raise InvalidArgument("--labels is required when --dataset is an IDX image file")
    for path in (source, labels):
        if not Path(path).is_file():
            raise InvalidArgument(f"file not found: {path}")
    return read_idx_dataset(source, labels)


def emit_json(data, out: Optional[str]) -> None:
    if out:
        write_json(out, data)
        success(f"Report saved to: {out}")
    else:
        sys.stdout.write(to_json(data))


def parse_float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise InvalidArgument(f"expected comma-separated numbers, got '{text}'")


def parse_int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise InvalidArgument(f"expected comma-separated integers, got '{text}'")


def parse_sweep(text: str) -> Tuple[str, List[str]]:
    """`key=v1,v2,...`"""
    if '=' not in text:
        raise InvalidArgument(f"--sweep expects key=v1,v2,..., got '{text}'")
    key, values = (part.strip() for part in text.split('=', 1))
    if key not in SWEEP_KEYS:
        raise InvalidArgument(f"--sweep key must be one of {', '.join(SWEEP_KEYS)}, got '{key}'")
    values = [v.strip() for v in values.split(',') if v.strip()]
    if not values:
        raise InvalidArgument("--sweep needs at least one value")
    return key, values


def parse_blocks(text: str, blocks: int) -> List[int]:
    """`all`, `last` or comma-separated 0-based block indices"""
    if text == 'all':
        return list(range(blocks))
    if text == 'last':
        return [blocks - 1]
    selected = parse_int_list(text)
    for b in selected:
        if not 0 <= b < blocks:
            raise InvalidArgument(f"block index {b} out of range for a {blocks}-block model")
    return sorted(set(selected))


def sweep_path(path: Path, key: str, value: str) -> Path:
    return path.with_name(f"{path.stem}.{key}-{value}{path.suffix}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    config = resolve_config(args)
    model_config = config.model_config()

    banner("Gradient Check")
    status(f"  D={model_config.embed_dim}, heads={model_config.heads}, blocks={model_config.blocks}, "
           f"N={model_config.grid}, pooling={model_config.pooling.strategy}")
    if args.corrupt_backward:
        warn("Analytic gradients deliberately corrupted (negative control)")

    report = run_gradcheck(model_config, seed=config.seed, corrupt=args.corrupt_backward, verbose=True)
    emit_json(report.to_dict(), args.out)

    if report.passed:
        success(f"All gradients within {report.tolerance:g} (max relative error {report.max_error:.2e})")
        return EXIT_OK
    error(f"Gradient check failed: max relative error {report.max_error:.2e} > {report.tolerance:g}")
    return EXIT_CHECK_FAILED


def _training_dataset(args, config: ExperimentConfig) -> Dataset:
    source = args.dataset or config.dataset
    labels = args.labels or config.labels
    dataset = load_dataset(source, labels, config.image_size, config.classes, config.seed,
                           config.synthetic_samples, config.synthetic_noise)
    success(f"Loaded {len(dataset)} images ({source})")

    if args.export_synthetic:
        export_dir = Path(args.export_synthetic)
        write_idx_dataset(dataset, export_dir / 'images.idx', export_dir / 'labels.idx')
        success(f"Dataset exported to: {export_dir}")
    return dataset


def _save_run(model: ToyViTModel, trace, checkpoint: Path, trace_path: Path) -> None:
    save_checkpoint(model, checkpoint)
    write_csv(trace_path, trace.to_frame())
    status(f"  Checkpoint: {checkpoint}")
    status(f"  Trace:      {trace_path}")


def _initial_model(path: str, tune_blocks: int) -> Optional[ToyViTModel]:
    if not path:
        return None
    if not Path(path).is_file():
        raise InvalidArgument(f"initial checkpoint not found: {path}")
    model = load_checkpoint(path)
    scope = {-1: "all parameters", 0: "linear probe"}.get(tune_blocks, f"last {tune_blocks} blocks")
    success(f"Warm start from {path} ({scope})")
    return model


def cmd_train(args) -> int:
    config = resolve_config(args)
    model_config = config.model_config()
    training = config.training_config()
    checkpoint = Path(args.out or config.checkpoint)
    trace_path = Path(args.trace or config.trace)

    banner("Toy ViT Training")
    dataset = _training_dataset(args, config)
    init_model = _initial_model(args.init or config.init_checkpoint, training.tune_blocks)

    try:
        if args.sweep:
            key, values = parse_sweep(args.sweep)
            runs = run_sweep(dataset, model_config, training, config.seed, key, values,
                             init_model=init_model)
            for value, model, trace in runs:
                _save_run(model, trace, sweep_path(checkpoint, key, value), sweep_path(trace_path, key, value))

            summary = sweep_summary(key, runs)
            summary_path = trace_path.with_name(f"{trace_path.stem}.{key}-summary.json")
            write_json(summary_path, summary)
            for row in summary['runs']:
                status(f"  {key}={row['value']:>6}  loss {row['final_loss']:.4f}  acc {row['final_accuracy']:.3f}")
            success(f"Sweep summary saved to: {summary_path}")
            return EXIT_OK

        model, trace = train(dataset, model_config, training, config.seed, init_model=init_model)
        _save_run(model, trace, checkpoint, trace_path)
        return EXIT_OK

    except TrainingDiverged as e:
        error(str(e))
        if e.last_good is not None:
            save_checkpoint(e.last_good, checkpoint)
            warn(f"Last good model saved to: {checkpoint}")
        if e.trace is not None and e.trace.epochs:
            write_csv(trace_path, e.trace.to_frame())
        return EXIT_CHECK_FAILED


def cmd_analyze(args) -> int:
    config = resolve_config(args)
    checkpoint = args.checkpoint or config.checkpoint
    if not Path(checkpoint).is_file():
        raise InvalidArgument(f"checkpoint not found: {checkpoint}")
    model = load_checkpoint(checkpoint)
    cfg = model.config
    blocks = parse_blocks(args.blocks, cfg.blocks)

    banner("Attention Head Analysis")
    source = args.dataset or config.dataset
    dataset = load_dataset(source, args.labels or config.labels, cfg.image_size, cfg.classes,
                           config.seed, args.images, config.synthetic_noise)
    dataset = dataset.subset(min(args.images, len(dataset)))
    success(f"Analysing {len(dataset)} images, blocks {', '.join(map(str, blocks))}")
    status("  Class token dropped from attention rows; rows renormalised over patch tokens")

    records = model.forward(dataset.images, capture=True).records
    similarity, distance, rows = [], [], []
    for b in blocks:
        sim = inter_head_cka(records, b)
        dist = head_mean_distance(records, b, cfg.patch_size)
        similarity.append(sim.to_dict())
        distance.append(dist.to_dict())
        for s_row, d_row in zip(sim.to_rows(), dist.to_rows()):
            rows.append({**s_row, 'mean_distance_px': d_row['mean_distance_px']})
        status(f"  block {b}: mean inter-head CKA {sim.overall_mean:.4f}, "
               f"mean distance {dist.block_mean:.2f}px")
        if sim.skipped_pairs:
            warn(f"block {b}: {sim.skipped_pairs} degenerate head pairs skipped")
        if dist.skipped_queries:
            warn(f"block {b}: {dist.skipped_queries} queries attended only the class token and were skipped")

    report = {'checkpoint': str(checkpoint), 'pooling': cfg.pooling.strategy,
              'similarity': similarity, 'distance': distance}

    if args.compare:
        other = load_checkpoint(args.compare)
        other_records = other.forward(dataset.images, capture=True).records
        last = other.config.blocks - 1
        report['comparison'] = {
            'checkpoint': args.compare,
            'pooling': other.config.pooling.strategy,
            'final_block_mean_cka': inter_head_cka(other_records, last).overall_mean,
            'reference_final_block_mean_cka': inter_head_cka(records, cfg.blocks - 1).overall_mean,
        }
        status(f"  final-block mean CKA: {cfg.pooling.strategy} "
               f"{report['comparison']['reference_final_block_mean_cka']:.4f} vs "
               f"{other.config.pooling.strategy} {report['comparison']['final_block_mean_cka']:.4f}")

    out_dir = Path(args.out or 'analysis')
    write_json(out_dir / 'head_analysis.json', report)
    write_csv(out_dir / 'heads.csv', pd.DataFrame(rows))
    write_descriptor_csv(out_dir / 'descriptors.csv', extract_descriptors(model, dataset))
    success(f"Reports saved to: {out_dir}")
    return EXIT_OK


def _pooling_from_flags(args) -> PoolingConfig:
    exponents = parse_float_list(args.p) if args.p else [3.0]
    if args.strategy == 'average':
        return PoolingConfig.average()
    if args.strategy == 'max':
        return PoolingConfig.max()
    if args.strategy == 'class_token':
        return PoolingConfig.class_token()
    if args.strategy == 'gem':
        if len(exponents) != 1:
            raise InvalidArgument(f"gem takes a single exponent, got {len(exponents)}")
        return PoolingConfig.gem(p=exponents[0], trainable=False, clamp_eps=args.eps)
    p = exponents[0] if len(exponents) == 1 else exponents
    return PoolingConfig.ggem(groups=args.groups, p=p, trainable=False, clamp_eps=args.eps)


def cmd_pool(args) -> int:
    cfg = _pooling_from_flags(args)
    ids, labels, values = read_activation_file(args.input)
    pooled = pool_forward(values, cfg, has_class_token=args.class_token)

    frame = descriptor_frame(ids, labels, pooled)
    if args.out:
        write_csv(args.out, frame)
        success(f"Pooled {len(frame)} maps ({cfg.strategy}) -> {args.out}")
    else:
        sys.stdout.write(frame_to_csv(frame))
    return EXIT_OK


def cmd_retrieve(args) -> int:
    queries = read_descriptor_csv(args.queries)
    gallery = read_descriptor_csv(args.gallery) if args.gallery else queries
    self_exclude = args.self_exclude or args.gallery is None
    ks = parse_int_list(args.ks)

    report = evaluate(queries, gallery, ks=ks, self_exclude=self_exclude, metric=args.metric)
    if args.knn:
        report.knn_accuracy = knn_accuracy(queries, gallery, k=args.knn, self_exclude=self_exclude,
                                           metric=args.metric)

    recall = ", ".join(f"R@{k}={v:.4f}" for k, v in report.recall_at_k.items())
    status(f"  {recall}  RP={report.r_precision:.4f}  mAP={report.map_score:.4f}")
    emit_json(report.to_dict(), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="Experiment config file (key = value lines)")
    common.add_argument("--seed", type=int, default=None, help="Override the config seed")
    common.add_argument("--out", type=str, default=None, help="Output path")

    parser = argparse.ArgumentParser(description="GGeM pooling experiments on a toy vision transformer")
    sub = parser.add_subparsers(dest="command", required=True)

    gradcheck = sub.add_parser("gradcheck", parents=[common], help="Check every backward pass against finite differences")
    gradcheck.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    gradcheck.set_defaults(handler=cmd_gradcheck)

    train_cmd = sub.add_parser("train", parents=[common], help="Train a toy ViT; --out is the checkpoint path")
    train_cmd.add_argument("--dataset", type=str, default=None, help="'synthetic' or an IDX image file")
    train_cmd.add_argument("--labels", type=str, default=None, help="IDX label file")
    train_cmd.add_argument("--trace", type=str, default=None, help="Trace CSV path")
    train_cmd.add_argument("--init", type=str, default=None, help="Checkpoint whose encoder starts the run")
    train_cmd.add_argument("--sweep", type=str, default=None, help="p_init=1,3,5,7 or groups=1,2,H,D")
    train_cmd.add_argument("--export-synthetic", type=str, default=None, help="Write the dataset as IDX to DIR")
    train_cmd.set_defaults(handler=cmd_train)

    analyze = sub.add_parser("analyze", parents=[common], help="Inter-head CKA and head mean distance; --out is a directory")
    analyze.add_argument("--checkpoint", type=str, default=None, help="Model checkpoint (GGEM container)")
    analyze.add_argument("--dataset", type=str, default=None, help="'synthetic' or an IDX image file")
    analyze.add_argument("--labels", type=str, default=None, help="IDX label file")
    analyze.add_argument("--blocks", type=str, default="all", help="all, last or 0-based indices i,j")
    analyze.add_argument("--images", type=int, default=64, help="Images analysed (default: 64)")
    analyze.add_argument("--compare", type=str, default=None, help="Second checkpoint for a final-block CKA comparison")
    analyze.set_defaults(handler=cmd_analyze)

    pool_cmd = sub.add_parser("pool", parents=[common], help="Pool activation maps into descriptors")
    pool_cmd.add_argument("--input", type=str, required=True, help="Activation CSV or GGEM container")
    pool_cmd.add_argument("--strategy", choices=STRATEGIES, default="ggem")
    pool_cmd.add_argument("--groups", type=int, default=1)
    pool_cmd.add_argument("--p", type=str, default=None, help="Exponent(s), comma-separated (default: 3)")
    pool_cmd.add_argument("--eps", type=float, default=1e-6, help="Clamp floor for gem/ggem")
    pool_cmd.add_argument("--class-token", action="store_true", help="Row 0 of every map is a class token")
    pool_cmd.set_defaults(handler=cmd_pool)

    retrieve = sub.add_parser("retrieve", parents=[common], help="Recall@K, R-Precision and mAP")
    retrieve.add_argument("--queries", type=str, required=True, help="Query descriptor CSV")
    retrieve.add_argument("--gallery", type=str, default=None, help="Gallery descriptor CSV (default: queries)")
    retrieve.add_argument("--metric", choices=METRICS, default="cosine")
    retrieve.add_argument("--ks", type=str, default="1", help="Comma-separated K values")
    retrieve.add_argument("--knn", type=int, default=None, help="Also report k-NN accuracy with this k")
    retrieve.add_argument("--self-exclude", action="store_true", help="Drop each query's own id from its ranking")
    retrieve.set_defaults(handler=cmd_retrieve)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main execution flow."""
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (GGeMError, FileNotFoundError) as e:
        error(str(e))
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
