"""Command-line pipeline: generate data, train, probe, score, report.

Each subcommand wraps one library stage and stays deterministic for a
given seed, so any artifact can be rebuilt byte-identically.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import dataset, mnist, reporting, trust
from .probes import PerformanceMatrix, ProbeConfig, build_matrix, train_probe
from .tasks import TaskRegistry
from .trainer import (
    CHECKPOINT_FILE,
    ModelConfig,
    SuppressionBranch,
    default_random_branches,
    extract_features,
    load_checkpoint,
    train,
)

FEATURES_BASE = "features"


def _load_split_any(data_dir: Path, split: str):
    """Load a split from either dataset layout (shapes or colored MNIST).

    Returns (images, labels, registry). The manifest header's task list
    decides which loader applies.
    """
    header = (Path(data_dir) / dataset.MANIFEST_NAME).open().readline()
    if not header.startswith("# "):
        raise ValueError(f"missing manifest header line in {data_dir}")
    meta = json.loads(header[2:])
    registry = TaskRegistry.from_dict(meta["tasks"])
    if "digit" in registry.names:
        images, labels, _ = mnist.load_colored_split(data_dir, split)
    else:
        images, labels, _ = dataset.load_split(data_dir, split)
    return images, labels, registry


def _cmd_gen(args) -> int:
    config = dataset.GenConfig(
        image_side=args.side,
        train_per_variation=args.train_per_var,
        test_per_variation=args.test_per_var,
        seed=args.seed,
    )
    manifest = dataset.generate_dataset(config, args.out)
    rows = len(manifest.rows)
    print(f"wrote {rows} images and {dataset.MANIFEST_NAME} to {args.out}")
    return 0


def _cmd_mnist(args) -> int:
    raw_dir = Path(args.raw)
    if args.fetch:
        fetched = mnist.fetch_idx_files(args.fetch, raw_dir)
        print(f"fetched {len(fetched)} files into {raw_dir}")
    pairs = mnist.load_raw_dir(raw_dir)
    config = mnist.ColorMnistConfig(seed=args.seed)
    manifest = mnist.colorize(pairs["train"], pairs["test"], config, args.out)
    print(f"wrote {len(manifest.rows)} colored digits to {args.out}")
    return 0


def _parse_suppression(
    values: list[str], mode: str, registry: TaskRegistry, preserved: str
) -> tuple[SuppressionBranch, ...]:
    known_mode = {"gr": "known_gr", "negloss": "known_negative_loss"}[mode]
    branches: list[SuppressionBranch] = []
    for value in values:
        if value == "random":
            branches.extend(default_random_branches(registry, preserved))
        elif value.startswith("random:"):
            branches.append(SuppressionBranch("random_gr", int(value.split(":")[1])))
        else:
            n = registry.get(value).num_classes
            branches.append(SuppressionBranch(known_mode, n, task=value))
    return tuple(branches)


def _cmd_train(args) -> int:
    data_dir = Path(args.data)
    train_images, train_labels, registry = _load_split_any(data_dir, "train")
    test_images, test_labels, _ = _load_split_any(data_dir, "test")

    suppression = _parse_suppression(
        args.suppress, args.mode, registry, args.preserve
    )
    config = ModelConfig(
        preserved_task=args.preserve,
        input_side=train_images.shape[1],
        suppression=suppression,
        lam=getattr(args, "lambda"),
        lr=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
    )

    def show(entry) -> None:
        print(
            f"epoch {entry.epoch:3d}  train {entry.preserved_train_acc:.4f}  "
            f"test {entry.preserved_test_acc:.4f}  "
            f"combined loss {entry.combined_loss:+.4f}",
            flush=True,
        )

    init_from = None
    if args.init_from is not None:
        init_from = load_checkpoint(Path(args.init_from) / CHECKPOINT_FILE)

    result = train(
        config, registry, (train_images, train_labels),
        (test_images, test_labels), init_from=init_from, progress=show,
    )
    result.save(args.out)
    if config.suppression:
        print(
            f"kept final state (suppressed run, test acc "
            f"{result.log[-1].preserved_test_acc:.4f}); artifacts in {args.out}"
        )
    else:
        print(
            f"best epoch {result.best_epoch} "
            f"(test acc {result.best_test_acc:.4f}); artifacts in {args.out}"
        )
    return 0


def _cmd_extract(args) -> int:
    ckpt = load_checkpoint(Path(args.run) / CHECKPOINT_FILE)
    out_dir = Path(args.out)
    for split in ("train", "test"):
        images, labels, _ = _load_split_any(Path(args.data), split)
        features = extract_features(ckpt, images)
        reporting.save_features(
            out_dir / f"{FEATURES_BASE}_{split}", features, labels
        )
        print(f"{split}: {features.shape[0]} x {features.shape[1]} features")
    return 0


def _cmd_probe(args) -> int:
    feat_dir = Path(args.features)
    xs, ys = {}, {}
    for split in ("train", "test"):
        xs[split], labels = reporting.load_features(
            feat_dir / f"{FEATURES_BASE}_{split}.json"
        )
        if args.task not in labels:
            raise SystemExit(
                f"task {args.task!r} not in feature dump "
                f"(has: {', '.join(sorted(labels))})"
            )
        ys[split] = labels[args.task]
    n_classes = int(max(ys["train"].max(), ys["test"].max())) + 1
    result = train_probe(
        xs["train"], ys["train"], xs["test"], ys["test"], n_classes,
        ProbeConfig(seed=args.seed),
    )
    print(
        json.dumps(
            {
                "task": args.task,
                "test_accuracy": result.test_accuracy,
                "chance_floor": result.chance_floor,
                "best_epoch": result.best_epoch,
                "epochs_run": result.epochs_run,
            },
            indent=2,
        )
    )
    return 0


def _cmd_matrix(args) -> int:
    runs_dir = Path(args.runs)
    checkpoint_paths = sorted(runs_dir.glob(f"*/{CHECKPOINT_FILE}"))
    if not checkpoint_paths:
        raise SystemExit(f"no {CHECKPOINT_FILE} found under {runs_dir}/*/")
    checkpoints = {}
    registry = None
    for path in checkpoint_paths:
        ckpt = load_checkpoint(path)
        task = ckpt.config.preserved_task
        if task in checkpoints:
            raise SystemExit(f"two runs preserve {task!r} under {runs_dir}")
        checkpoints[task] = ckpt
        registry = ckpt.registry

    train_data = _load_split_any(Path(args.data), "train")[:2]
    test_data = _load_split_any(Path(args.data), "test")[:2]
    matrix = build_matrix(
        checkpoints, registry, train_data, test_data,
        ProbeConfig(seed=args.seed),
    )
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_bytes(matrix.to_json_bytes())
    out_path.with_suffix(".csv").write_bytes(matrix.to_csv_bytes())
    print(f"wrote {out_path} and {out_path.with_suffix('.csv').name}")
    return 0


def _score_matrix(matrix: PerformanceMatrix) -> trust.TrustReport:
    registry = TaskRegistry.from_dict(matrix.metadata["tasks"])
    m = trust.ideal_matrix(registry)
    w = trust.weight_matrix(len(registry))
    return trust.trust_score(matrix.cells, m, w, task_names=matrix.task_names)


def _cmd_trust(args) -> int:
    matrix = PerformanceMatrix.load(args.matrix)
    report = _score_matrix(matrix)
    baseline = None
    if args.baseline:
        base_matrix = PerformanceMatrix.load(args.baseline)
        baseline = (_score_matrix(base_matrix), base_matrix)
    out_path = Path(args.out) if args.out else Path(args.matrix).parent / reporting.TRUST_JSON
    doc = {"format_version": dataset.FORMAT_VERSION, **report.to_dict()}
    out_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(reporting.summary_markdown(report, matrix, baseline), end="")
    print(f"(trust report written to {out_path})")
    return 0


def _cmd_report(args) -> int:
    matrix = PerformanceMatrix.load(Path(args.run) / "matrix.json")
    report = _score_matrix(matrix)
    baseline = None
    if args.baseline:
        base_matrix = PerformanceMatrix.load(Path(args.baseline) / "matrix.json")
        baseline = (_score_matrix(base_matrix), base_matrix)
    paths = reporting.export_report(
        report, matrix, args.out, baseline=baseline, title=args.title
    )
    print(f"wrote {', '.join(sorted(paths))} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="overlearn",
        description=(
            "Measure how much a feature extractor leaks tasks it was "
            "never trained for, and suppress the leakage adversarially."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the five-task shapes dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--train-per-var", type=int, default=50)
    p.add_argument("--test-per-var", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("mnist", help="build the colorized MNIST dataset")
    p.add_argument("--raw", required=True, type=Path,
                   help="directory holding the four IDX files")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fetch", metavar="URL", default=None,
                   help="download the IDX files from this base URL first")
    p.set_defaults(func=_cmd_mnist)

    p = sub.add_parser("train", help="train an extractor, optionally suppressing tasks")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--preserve", required=True, metavar="TASK")
    p.add_argument("--suppress", action="append", default=[],
                   metavar="TASK|random:N",
                   help="suppress a known task, or random labels with N classes; "
                        "plain 'random' adds one branch per class count")
    p.add_argument("--mode", choices=("gr", "negloss"), default="gr",
                   help="how known-task branches oppose the trunk "
                        "(random branches always use gradient reversal)")
    p.add_argument("--lambda", type=float, default=0.5,
                   help="weight of the preserved loss in the objective")
    p.add_argument("--init-from", type=Path, default=None, metavar="RUN",
                   help="warm-start from another run's best checkpoint "
                        "(same architecture and preserved task)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("extract", help="dump a run's features for both splits")
    p.add_argument("--run", required=True, type=Path,
                   help="training output directory (uses the best checkpoint)")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("probe", help="probe dumped features for one task")
    p.add_argument("--features", required=True, type=Path,
                   help="directory written by `extract`")
    p.add_argument("--task", required=True, metavar="NAME")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("matrix", help="probe every run for every task")
    p.add_argument("--runs", required=True, type=Path,
                   help="directory of run subdirectories, one per preserved task")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, metavar="matrix.json")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_matrix)

    p = sub.add_parser("trust", help="score a performance matrix")
    p.add_argument("--matrix", required=True, type=Path)
    p.add_argument("--baseline", type=Path, default=None,
                   help="matrix to diff against")
    p.add_argument("--out", type=Path, default=None,
                   help="where to write trust.json (default: next to the matrix)")
    p.set_defaults(func=_cmd_trust)

    p = sub.add_parser("report", help="export the full artifact bundle")
    p.add_argument("--run", required=True, type=Path,
                   help="directory containing matrix.json")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--baseline", type=Path, default=None,
                   help="baseline run directory for the delta section")
    p.add_argument("--title", default="Feature leakage report")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
