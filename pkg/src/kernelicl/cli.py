"""Command-line entry point.

Exit codes: 0 success, 1 contract violation (including invalid flags),
2 I/O or file-format error. All randomness is controlled by --seed flags;
machine-readable output goes only to explicitly named paths. The
KERNELICL_THREADS environment variable caps internal parallelism
(0 = sequential).
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import evaluation, kernels, priorgen
from .backbone import ModelConfig, SYMMETRIC, ASYMMETRIC, embed_dataset, load_checkpoint
from .calibration import CalibrationGrid, calibrate
from .errors import ContractViolation, DataFormatError
from .kernels import KNN, KernelSpec, build_report, compute_weight_matrix, default_scale
from .priorgen import PriorConfig, generate_toy
from .training import TrainConfig, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # invalid flags are contract violations, not I/O errors
        raise ContractViolation(message)


def _add_model_flags(parser):
    group = parser.add_argument_group("model dimensions")
    group.add_argument("--width", type=int, default=64, help="embedding width")
    group.add_argument("--heads", type=int, default=4, help="attention heads per stage")
    group.add_argument("--col-layers", type=int, default=2, help="column-stage layers")
    group.add_argument("--row-layers", type=int, default=2, help="row-stage layers")
    group.add_argument("--icl-layers", type=int, default=2, help="in-context-stage layers")
    group.add_argument("--inducing", type=int, default=16, help="inducing vectors per column layer")
    group.add_argument("--dk", type=int, default=64, help="projected kernel-space dimension")
    group.add_argument("--classes", type=int, default=2, help="number of classes")


def _model_config(args) -> ModelConfig:
    return ModelConfig(width=args.width, heads=args.heads, col_layers=args.col_layers,
                       row_layers=args.row_layers, icl_layers=args.icl_layers,
                       inducing=args.inducing, d_k=args.dk, classes=args.classes)


def build_parser() -> _Parser:
    parser = _Parser(prog="kernelicl",
                     description="In-context tabular learner with an inspectable "
                                 "kernel-regression prediction head.")
    sub = parser.add_subparsers(dest="command", required=True)
    defaults = dict(formatter_class=argparse.ArgumentDefaultsHelpFormatter)

    p = sub.add_parser("train", help="train the backbone on the synthetic prior", **defaults)
    p.add_argument("--kernel", choices=["dot", "gaussian"], default="gaussian",
                   help="training kernel (kNN reuses gaussian embeddings)")
    p.add_argument("--mode", choices=[SYMMETRIC, ASYMMETRIC], default=SYMMETRIC)
    p.add_argument("--batches", type=int, default=500)
    p.add_argument("--datasets-per-batch", type=int, default=8)
    p.add_argument("--val-batches", type=int, default=4)
    p.add_argument("--val-interval", type=int, default=25)
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-min", type=int, default=3, help="smallest prior feature count")
    p.add_argument("--d-max", type=int, default=10, help="largest prior feature count")
    p.add_argument("--max-samples", type=int, default=128, help="prior dataset size cap")
    p.add_argument("--f-min", type=float, default=0.6, help="smallest prior train fraction")
    p.add_argument("--f-max", type=float, default=0.8, help="largest prior train fraction")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None, help="training-log CSV output path")
    _add_model_flags(p)

    p = sub.add_parser("predict", help="predict a CSV dataset with a trained model", **defaults)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="harness CSV with a split column")
    p.add_argument("--label-column", default="label")
    p.add_argument("--kernel", choices=list(kernels.KINDS), default="gaussian")
    p.add_argument("--scale", type=float, default=None,
                   help="kernel scale; defaults to the kernel's uncalibrated default")
    p.add_argument("--mode", choices=[SYMMETRIC, ASYMMETRIC], default=None,
                   help="embedding mode; defaults to the checkpoint's training mode")
    p.add_argument("--calibrate", action=argparse.BooleanOptionalAction, default=False,
                   help="select the scale by cross-validation on the training split")
    p.add_argument("--folds", type=int, default=5, help="calibration folds")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="predictions CSV output path")
    p.add_argument("--explain", default=None,
                   help="weight-matrix CSV output path (a .ppl.csv summary is written alongside)")

    p = sub.add_parser("calibrate", help="cross-validate the kernel scale on a dataset", **defaults)
    p.add_argument("--model", default=None, help="checkpoint path (omit for input-space baseline)")
    p.add_argument("--data", required=True)
    p.add_argument("--label-column", default="label")
    p.add_argument("--kernel", choices=list(kernels.KINDS), required=True)
    p.add_argument("--grid", default=None,
                   help="comma-separated candidate scales; defaults to the built-in grid")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--mode", choices=[SYMMETRIC, ASYMMETRIC], default=SYMMETRIC)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="per-candidate CSV output path")

    p = sub.add_parser("sweep", help="accuracy vs sparsity trade-off over a scale ladder", **defaults)
    p.add_argument("--model", default=None, help="checkpoint path (omit for input-space kernel)")
    p.add_argument("--data", required=True)
    p.add_argument("--label-column", default="label")
    p.add_argument("--kernel", choices=list(kernels.KINDS), required=True)
    p.add_argument("--ladder", required=True, help="comma-separated scales to measure")
    p.add_argument("--targets", required=True, help="comma-separated target relative perplexities")
    p.add_argument("--mode", choices=[SYMMETRIC, ASYMMETRIC], default=SYMMETRIC)
    p.add_argument("--out", required=True, help="sweep CSV output path")

    p = sub.add_parser("compactness", help="per-feature neighborhood compactness table", **defaults)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True)
    p.add_argument("--label-column", default="label")
    p.add_argument("--k", type=int, default=5, help="neighborhood size")
    p.add_argument("--mode", choices=[SYMMETRIC, ASYMMETRIC], default=SYMMETRIC)
    p.add_argument("--out", required=True, help="compactness CSV output path")

    p = sub.add_parser("bench-overhead", help="symmetric/asymmetric embedding cost ratios", **defaults)
    p.add_argument("--sizes", default="1000,2000,5000,10000,20000,50000,100000,200000",
                   help="comma-separated training sizes (ascending)")
    p.add_argument("--features", default="1,5,20,100", help="comma-separated feature counts")
    p.add_argument("--m", type=int, default=50, help="fixed test-sample count")
    p.add_argument("--repeats", type=int, default=3, help="wall-time repetitions")
    p.add_argument("--memory-budget-mb", type=int, default=1024,
                   help="skip wall-time measurement above this estimated footprint")
    p.add_argument("--out", required=True, help="overhead CSV output path")
    _add_model_flags(p)

    p = sub.add_parser("toy", help="generate a noisy toy dataset CSV", **defaults)
    p.add_argument("--kind", choices=list(priorgen.TOY_KINDS), required=True)
    p.add_argument("--n", type=int, default=200, help="total samples")
    p.add_argument("--noise-features", type=int, default=18)
    p.add_argument("--noise-std", type=float, default=1.0)
    p.add_argument("--split", type=float, default=0.6, help="train fraction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="dataset CSV output path")

    p = sub.add_parser("export-embeddings",
                       help="dump projected embedding rows for external visualization", **defaults)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True)
    p.add_argument("--label-column", default="label")
    p.add_argument("--mode", choices=[SYMMETRIC, ASYMMETRIC], default=SYMMETRIC)
    p.add_argument("--out", required=True, help="embeddings CSV output path")
    return parser


def _parse_floats(raw: str) -> list[float]:
    try:
        return [float(tok) for tok in raw.split(",") if tok]
    except ValueError as err:
        raise ContractViolation(f"expected comma-separated numbers, got '{raw}'") from err


def _load_split_dataset(args):
    dataset = evaluation.load_csv(args.data, args.label_column)
    if dataset.m < 1:
        raise ContractViolation(f"{args.data} carries no test rows; add a split column")
    return dataset


def _cmd_train(args) -> int:
    prior = PriorConfig(d_min=args.d_min, d_max=args.d_max, max_total=args.max_samples,
                        train_fraction_min=args.f_min, train_fraction_max=args.f_max,
                        datasets_per_batch=args.datasets_per_batch, seed=args.seed)
    config = TrainConfig(kernel=args.kernel, mode=args.mode, batches=args.batches,
                         validation_batches=args.val_batches,
                         validation_interval=args.val_interval,
                         learning_rate=args.lr, seed=args.seed, checkpoint_path=args.out)
    params, log = train(config, prior, _model_config(args))
    if args.log:
        log.write_csv(args.log)
    best = log.best_row
    print(f"trained {args.batches} batches ({args.kernel}, {args.mode}); "
          f"best validation loss {best.validation_loss:.6f} at batch {best.batch}; "
          f"checkpoint written to {args.out}")
    return 0


def _prepare_prediction(args):
    params, extra = load_checkpoint(args.model)
    dataset = _load_split_dataset(args)
    mode = args.mode or extra.get("mode", SYMMETRIC)
    if args.calibrate:
        scale = calibrate(params, dataset.features_train, dataset.labels_train,
                          args.kernel, folds=args.folds, seed=args.seed, mode=mode).chosen
    elif args.scale is not None:
        scale = args.scale
    else:
        scale = default_scale(args.kernel, params.config.d_k)
    if args.kernel == KNN:
        scale = int(scale)
        if scale > dataset.n:
            raise ContractViolation(f"k={scale} exceeds training size n={dataset.n}")
    bundle = embed_dataset(params, dataset.features_train, dataset.labels_train,
                           dataset.features_test, mode)
    weights = compute_weight_matrix(KernelSpec(args.kernel, scale),
                                    bundle.queries.data, bundle.keys.data)
    classes = max(params.config.classes, dataset.classes)
    report = build_report(weights, dataset.labels_train, classes)
    return dataset, report, scale, mode


def _cmd_predict(args) -> int:
    dataset, report, scale, mode = _prepare_prediction(args)
    if args.out:
        kernels.write_predictions_csv(report, args.out)
    if args.explain:
        kernels.write_weights_csv(report, args.explain)
        summary = args.explain[:-4] + ".ppl.csv" if args.explain.endswith(".csv") \
            else args.explain + ".ppl.csv"
        kernels.write_perplexity_csv(report, summary)
    accuracy = float(np.mean(report.predicted == dataset.labels_test))
    print(f"{args.kernel} kernel at scale {scale} ({mode}): accuracy {accuracy:.4f}, "
          f"dataset relative perplexity {report.relative_perplexity_dataset:.4f} "
          f"over {dataset.m} test points")
    return 0


def _cmd_calibrate(args) -> int:
    model = load_checkpoint(args.model)[0] if args.model else None
    dataset = evaluation.load_csv(args.data, args.label_column)
    grid = None
    if args.grid:
        values = _parse_floats(args.grid)
        if args.kernel == KNN:
            values = [int(v) for v in values]
        grid = CalibrationGrid(args.kernel, tuple(values))
    result = calibrate(model, dataset.features_train, dataset.labels_train, args.kernel,
                       grid=grid, folds=args.folds, seed=args.seed, mode=args.mode)
    if args.out:
        result.write_csv(args.out)
    print(f"chosen {args.kernel} scale: {result.chosen!r}")
    return 0


def _cmd_sweep(args) -> int:
    model = load_checkpoint(args.model)[0] if args.model else None
    dataset = _load_split_dataset(args)
    ladder = _parse_floats(args.ladder)
    targets = _parse_floats(args.targets)
    if args.kernel == KNN:
        ladder = [int(v) for v in ladder]
    points = evaluation.tradeoff_sweep(model, dataset, args.kernel, ladder, targets, args.mode)
    evaluation.write_sweep_csv(points, args.out)
    attained = sum(p.attained for p in points)
    print(f"sweep over {len(ladder)} scales: {attained}/{len(points)} targets attained; "
          f"written to {args.out}")
    return 0


def _cmd_compactness(args) -> int:
    model = load_checkpoint(args.model)[0]
    dataset = _load_split_dataset(args)
    baseline = evaluation.compactness(None, dataset, args.k)
    method = evaluation.compactness(model, dataset, args.k, args.mode)
    evaluation.write_compactness_csv(baseline, method, args.out)
    rel = evaluation.compactness_relative_difference(baseline, method)
    tightest = int(np.argmax(rel))
    print(f"compactness over {dataset.d} features (k={args.k}): largest relative "
          f"tightening {rel[tightest]:+.1f}% on feature {tightest}; written to {args.out}")
    return 0


def _cmd_bench_overhead(args) -> int:
    sizes = [int(v) for v in _parse_floats(args.sizes)]
    features = [int(v) for v in _parse_floats(args.features)]
    rows = evaluation.overhead_benchmark(_model_config(args), sizes, features, m=args.m,
                                         repeats=args.repeats,
                                         memory_budget_bytes=args.memory_budget_mb << 20)
    evaluation.write_overhead_csv(rows, args.out)
    timed = sum(not r.skipped for r in rows)
    largest = max(rows, key=lambda r: (r.d == features[0], r.n))
    print(f"{len(rows)} (n, d) cells, {timed} wall-timed; flop ratio at "
          f"n={largest.n}, d={largest.d}: {largest.flop_ratio:.3f}; written to {args.out}")
    return 0


def _cmd_toy(args) -> int:
    dataset = generate_toy(args.kind, args.n, args.noise_features, args.noise_std,
                           args.seed, args.split)
    dataset.export(args.out)
    print(f"{args.kind}: {dataset.n} train / {dataset.m} test rows, "
          f"{dataset.d} features; written to {args.out}")
    return 0


def _cmd_export_embeddings(args) -> int:
    params, _ = load_checkpoint(args.model)
    dataset = _load_split_dataset(args)
    bundle = embed_dataset(params, dataset.features_train, dataset.labels_train,
                           dataset.features_test, args.mode)
    d_k = params.config.d_k
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("split,index,label," + ",".join(f"h{i}" for i in range(d_k)) + "\n")
        for i, (row, y) in enumerate(zip(bundle.keys.data, dataset.labels_train)):
            fh.write(f"train,{i},{int(y)}," + ",".join(repr(float(v)) for v in row) + "\n")
        for i, (row, y) in enumerate(zip(bundle.queries.data, dataset.labels_test)):
            fh.write(f"test,{i},{int(y)}," + ",".join(repr(float(v)) for v in row) + "\n")
    print(f"wrote {dataset.n + dataset.m} embedding rows of dimension {d_k} to {args.out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "predict": _cmd_predict,
    "calibrate": _cmd_calibrate,
    "sweep": _cmd_sweep,
    "compactness": _cmd_compactness,
    "bench-overhead": _cmd_bench_overhead,
    "toy": _cmd_toy,
    "export-embeddings": _cmd_export_embeddings,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ContractViolation as err:
        print(f"contract violation: {err}", file=sys.stderr)
        return 1
    except (OSError, DataFormatError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
