"""Command line experiment runner.

Subcommands: prepare, pretrain-embedding, train, evaluate, sweep. Every
subcommand writes ``config.json`` and ``manifest.json`` into its output
directory. Exit codes: 0 success, 2 configuration, 3 data, 4 training,
5 evaluation.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, sha256_file
from .data import (
    DataFormatError,
    EmptyDatasetError,
    FormatDescriptor,
    PreprocessRules,
    SplitError,
    SplitSet,
    load_dataset,
    load_events,
    make_examples,
    popularity_stats,
    preprocess,
    save_dataset,
    split,
)
from .encoder import EncoderModel, SupervisedConfig, TrainingError, pretrain_diversity_embedding
from .metrics import MetricsReport, UndefinedMetricError, evaluate, mean_report, reports_to_csv
from .plotting import curve_table, plot_curves, plot_sweep
from .smorl import SmorlConfig, TrainerState, is_sqn_equivalent, train

log = logging.getLogger("smorlrec")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING, EXIT_EVALUATION = 0, 2, 3, 4, 5

WEIGHT_GRID = ((0, 1, 0), (0, 0, 1), (0, 1, 1), (1, 1, 0), (1, 0, 1), (1, 1, 1))
ALPHA_GRID = (0.5, 0.75, 1.0, 2.0, 3.0, 5.0, 10.0)

DATASET_FILE = "dataset.smorlds"
SPLITS_FILE = "splits.json"


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


class EvaluationError(RuntimeError):
    pass


@dataclass
class RunConfig:
    """Flat experiment configuration; JSON keys are the field names."""

    # raw input
    events_path: str = ""
    delimiter: str = ","
    header: bool = True
    session_column: str | int = "session_id"
    timestamp_column: str | int = "timestamp"
    item_column: str | int = "item_id"
    event_column: str | int | None = None
    default_event: str = "click"
    max_malformed_fraction: float = 0.01
    # preprocessing
    keep_events: list = field(default_factory=lambda: ["click"])
    min_item_count: int | None = None
    min_session_length: int = 3
    subsample: int | None = None
    # protocol
    seq_len: int = 10
    folds: int = 5
    split_ratio: list = field(default_factory=lambda: [8, 1, 1])
    x_percent: float = 10.0
    # optimisation
    batch_size: int = 256
    lr: float = 0.01
    w: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    gamma: float = 0.5
    alpha: float = 1.0
    max_steps: int = 10_000
    eval_every: int = 5000
    checkpoint_every: int = 5000
    pretrain_steps: int = 10_000
    seed: int = 0
    resume: bool = False
    # locations; empty strings fall back to ``out``
    out: str = "runs"
    data_dir: str = ""
    embedding_path: str = ""
    checkpoint: str = ""
    run_id: str = ""
    plots: bool = True

    @classmethod
    def from_dict(cls, blob: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(blob) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**blob)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    def validate(self) -> "RunConfig":
        checks = [
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr > 0, "lr must be positive"),
            (len(self.w) == 3 and all(v >= 0 for v in self.w), "w must be three non-negative weights"),
            (0 <= self.gamma <= 1, "gamma must lie in [0, 1]"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.max_steps >= 0 and self.pretrain_steps >= 0, "step budgets must be >= 0"),
            (self.folds >= 1, "folds must be >= 1"),
            (0 < self.x_percent <= 100, "x_percent must lie in (0, 100]"),
            (self.seq_len >= 1, "seq_len must be >= 1"),
            (len(self.split_ratio) == 3, "split_ratio needs three parts"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def format_descriptor(self) -> FormatDescriptor:
        columns = {"session_id": self.session_column, "timestamp": self.timestamp_column, "item_id": self.item_column}
        if self.event_column is not None:
            columns["event_type"] = self.event_column
        fmt = FormatDescriptor(
            delimiter=self.delimiter,
            columns={k: v for k, v in columns.items() if v not in (None, "")},
            header=self.header,
            default_event=self.default_event,
            max_malformed_fraction=self.max_malformed_fraction,
        )
        try:
            fmt.validate()
        except DataFormatError as exc:
            raise ConfigError(str(exc)) from exc
        return fmt

    def smorl(self) -> SmorlConfig:
        return SmorlConfig(
            w=tuple(float(v) for v in self.w),
            gamma=self.gamma,
            alpha=self.alpha,
            lr=self.lr,
            batch_size=self.batch_size,
            max_steps=self.max_steps,
            eval_every=self.eval_every,
            seed=self.seed,
        )

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir or self.out)

    def embedding_file(self, fold: int) -> Path:
        if self.embedding_path:
            return Path(self.embedding_path.format(fold=fold))
        return self.data_path / f"fold{fold}" / "e_div.ckpt"

    def checkpoint_file(self, fold: int) -> Path:
        if self.checkpoint:
            return Path(self.checkpoint.format(fold=fold))
        return self.out_dir / f"fold{fold}" / "best.ckpt"

    def label(self) -> str:
        if self.run_id:
            return self.run_id
        w = "-".join(f"{v:g}" for v in self.w)
        return f"w{w}_a{self.alpha:g}_s{self.seed}"


# ---------------------------------------------------------------- config io


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def build_config(args) -> RunConfig:
    blob = {}
    if args.config:
        try:
            blob = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(blob, dict):
            raise ConfigError("config file must hold a JSON object")
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        blob[key.strip()] = _parse_value(raw)
    if args.seed is not None:
        blob["seed"] = args.seed
    if args.out is not None:
        blob["out"] = args.out
    try:
        return RunConfig.from_dict(blob).validate()
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def _folds(arg, cfg: RunConfig):
    if arg is None:
        return [0]
    if arg == "all":
        return list(range(cfg.folds))
    try:
        k = int(arg)
    except ValueError:
        raise ConfigError(f"--fold expects an integer or 'all', got {arg!r}") from None
    if not 0 <= k < cfg.folds:
        raise ConfigError(f"fold {k} outside [0, {cfg.folds})")
    return [k]


def write_manifest(out: Path, command: str, cfg: RunConfig, artifacts, **extra):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    artifacts = {str(Path(p).relative_to(out)) if Path(p).is_relative_to(out) else str(p): sha256_file(p) for p in artifacts}
    previous = {}
    if (out / "manifest.json").exists():
        # several commands may share a directory; keep earlier checksums
        previous = json.loads((out / "manifest.json").read_text())
        artifacts = {**previous.get("artifacts", {}), **artifacts}
    manifest = {
        "command": command,
        "history": previous.get("history", []) + ([previous["command"]] if "command" in previous else []),
        "version": __version__,
        "seed": cfg.seed,
        "config": dataclasses.asdict(cfg),
        "artifacts": artifacts,
        "labels": ["SQN-equivalent"] if is_sqn_equivalent(cfg.w) and cfg.alpha > 0 else [],
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ------------------------------------------------------------------- inputs


def _load_prepared(cfg: RunConfig):
    root = cfg.data_path
    try:
        ds = load_dataset(root / DATASET_FILE)
        splits = SplitSet.from_json(json.loads((root / SPLITS_FILE).read_text()))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"prepared dataset unavailable under {root}: {exc}") from exc
    return ds, splits


def _fold_inputs(cfg: RunConfig, ds, splits, fold):
    f = splits.folds[fold]
    train_ex = make_examples(ds, cfg.seq_len, f.train)
    valid_ex = make_examples(ds, cfg.seq_len, f.validation)
    test_ex = make_examples(ds, cfg.seq_len, f.test)
    catalog = popularity_stats([ds.sessions[i] for i in f.train], ds.n_items, cfg.x_percent)
    if len(train_ex) == 0:
        raise DataError(f"fold {fold} has no training examples")
    return train_ex, valid_ex, test_ex, catalog


def _load_embedding(path: Path, required: bool):
    if not path.exists():
        if required:
            raise ConfigError(f"diversity embedding {path} not found; w_div > 0 needs pretrain-embedding first")
        return None
    arrays, _ = load_checkpoint(path)
    emb = arrays["e_div"]
    emb.setflags(write=False)
    return emb


# ----------------------------------------------------------------- commands


def cmd_prepare(cfg: RunConfig, folds=None):
    if not cfg.events_path:
        raise ConfigError("events_path is required for prepare")
    fmt = cfg.format_descriptor()
    rules = PreprocessRules(
        keep_events=tuple(cfg.keep_events),
        min_item_count=cfg.min_item_count,
        min_session_length=cfg.min_session_length,
        subsample=cfg.subsample,
        seed=cfg.seed,
    )
    try:
        ds = preprocess(load_events(cfg.events_path, fmt), rules)
        splits = split(len(ds), tuple(cfg.split_ratio), cfg.folds, cfg.seed)
    except (OSError, DataFormatError, EmptyDatasetError, SplitError) as exc:
        raise DataError(str(exc)) from exc
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    stats = save_dataset(ds, out / DATASET_FILE)
    (out / SPLITS_FILE).write_text(json.dumps(splits.to_json()) + "\n")
    popular = []
    for f in splits.folds:
        cat = popularity_stats([ds.sessions[i] for i in f.train], ds.n_items, cfg.x_percent)
        popular.append(sorted(cat.popular_set))
    (out / "popularity.json").write_text(json.dumps({"x_percent": cfg.x_percent, "popular_by_fold": popular}) + "\n")
    files = [out / DATASET_FILE, out / "dataset.stats.json", out / SPLITS_FILE, out / "popularity.json"]
    write_manifest(out, "prepare", cfg, files, stats=stats, inputs={cfg.events_path: sha256_file(cfg.events_path)})
    log.info("prepared %d sessions, %d items, %d clicks", stats["n_sequences"], stats["n_items"], stats["n_clicks"])
    return stats


def cmd_pretrain_embedding(cfg: RunConfig, folds):
    ds, splits = _load_prepared(cfg)
    written = []
    for fold in folds:
        train_ex = _fold_inputs(cfg, ds, splits, fold)[0]
        sup = SupervisedConfig(steps=cfg.pretrain_steps, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed)
        emb = pretrain_diversity_embedding(train_ex, ds.n_items, sup)
        path = cfg.out_dir / f"fold{fold}" / "e_div.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, {"e_div": emb}, {"fold": fold, "steps": cfg.pretrain_steps, "n_items": ds.n_items})
        written.append(path)
    write_manifest(cfg.out_dir, "pretrain-embedding", cfg, written, folds=folds)
    return written


def _train_fold(cfg: RunConfig, ds, splits, fold):
    train_ex, valid_ex, _, catalog = _fold_inputs(cfg, ds, splits, fold)
    e_div = _load_embedding(cfg.embedding_file(fold), required=cfg.w[1] > 0 and cfg.alpha > 0)
    run_dir = cfg.out_dir / f"fold{fold}"
    run_dir.mkdir(parents=True, exist_ok=True)
    smorl_cfg = cfg.smorl()
    state_path, log_path = run_dir / "trainer.ckpt", run_dir / "train_log.jsonl"
    trainer = None
    if cfg.resume and state_path.exists():
        trainer = TrainerState.load(state_path, ds.n_items, len(train_ex), smorl_cfg)
        log.info("fold %d: resuming at step %d", fold, trainer.step)
    elif log_path.exists():
        log_path.unlink()

    with log_path.open("a") as fh:

        def record(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        result = train(
            train_ex,
            ds.n_items,
            smorl_cfg,
            catalog,
            e_div,
            valid_ex if len(valid_ex) else None,
            trainer=trainer,
            on_record=record,
            checkpoint_every=cfg.checkpoint_every,
            checkpoint_path=state_path,
        )
    result.trainer.save(state_path)
    best = run_dir / "best.ckpt"
    save_checkpoint(best, result.model.arrays(), {"n_items": ds.n_items, "fold": fold, "step": result.trainer.step, "best_step": result.best_step})

    rows = []
    for line in log_path.read_text().splitlines():
        rec = json.loads(line)
        if "validation" in rec:
            rows.append(({"run_id": cfg.label(), "fold": fold, "step": rec["step"]}, MetricsReport.from_columns(rec["validation"])))
    (run_dir / "validation.csv").write_text(reports_to_csv(rows))
    artifacts = [best, state_path, log_path, run_dir / "validation.csv"]
    inputs = {str(cfg.embedding_file(fold)): sha256_file(cfg.embedding_file(fold))} if e_div is not None else {}
    write_manifest(run_dir, "train", cfg, artifacts, fold=fold, inputs=inputs, best_step=result.best_step)
    return result


def cmd_train(cfg: RunConfig, folds):
    ds, splits = _load_prepared(cfg)
    results = [_train_fold(cfg, ds, splits, fold) for fold in folds]
    write_manifest(cfg.out_dir, "train", cfg, [cfg.out_dir / f"fold{f}" / "best.ckpt" for f in folds], folds=folds)
    return results


def _evaluate_fold(cfg: RunConfig, ds, splits, fold):
    path = cfg.checkpoint_file(fold)
    if not path.exists():
        raise EvaluationError(f"checkpoint not found: {path}")
    try:
        arrays, meta = load_checkpoint(path)
    except CheckpointError as exc:
        raise EvaluationError(f"{path}: {exc}") from exc
    model = EncoderModel(meta["n_items"], rng=0)
    model.load_arrays(arrays)
    _, _, test_ex, catalog = _fold_inputs(cfg, ds, splits, fold)
    e_div = _load_embedding(cfg.embedding_file(fold), required=False)
    try:
        report = evaluate(model, test_ex, catalog, e_div)
    except UndefinedMetricError as exc:
        raise EvaluationError(f"fold {fold}: {exc}") from exc
    return meta.get("best_step", meta.get("step", 0)), report


def cmd_evaluate(cfg: RunConfig, folds):
    ds, splits = _load_prepared(cfg)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    rows, reports = [], {}
    for fold in folds:
        step, rep = _evaluate_fold(cfg, ds, splits, fold)
        rows.append(({"run_id": cfg.label(), "fold": fold, "step": step}, rep))
        reports[f"fold{fold}"] = rep
    if len(folds) > 1:
        avg = mean_report(reports.values())
        rows.append(({"run_id": cfg.label(), "fold": "mean", "step": ""}, avg))
        reports["mean"] = avg
    (out / "report.csv").write_text(reports_to_csv(rows))
    (out / "report.json").write_text(json.dumps({k: r.columns() for k, r in reports.items()}, indent=2) + "\n")
    (out / "curves.tsv").write_text(curve_table(reports))
    files = [out / "report.csv", out / "report.json", out / "curves.tsv"]
    if cfg.plots:
        plot_curves(reports, out / "curves.png")
        files.append(out / "curves.png")
    inputs = {str(cfg.checkpoint_file(f)): sha256_file(cfg.checkpoint_file(f)) for f in folds}
    write_manifest(out, "evaluate", cfg, files, folds=folds, inputs=inputs)
    return reports


def sweep_settings(axis: str):
    if axis == "weights":
        return [(f"w={'-'.join(map(str, w))}", {"w": list(map(float, w))}) for w in WEIGHT_GRID]
    if axis == "alpha":
        return [(f"alpha={a:g}", {"alpha": a}) for a in ALPHA_GRID]
    raise ConfigError(f"unknown sweep axis {axis!r}")


def cmd_sweep(cfg: RunConfig, folds, axis: str):
    settings = sweep_settings(axis)
    ds, splits = _load_prepared(cfg)
    rows, labels, summaries = [], [], []
    for label, change in settings:
        sub = dataclasses.replace(cfg, out=str(cfg.out_dir / label), data_dir=str(cfg.data_path), run_id=label, **change)
        if not sub.embedding_path:
            sub.embedding_path = str(cfg.data_path / "fold{fold}" / "e_div.ckpt")
        per_fold = []
        for fold in folds:
            _train_fold(sub, ds, splits, fold)
            step, rep = _evaluate_fold(sub, ds, splits, fold)
            per_fold.append(rep)
            rows.append(({"setting": label, "fold": fold, "step": step}, rep))
        summary = mean_report(per_fold) if len(per_fold) > 1 else per_fold[0]
        if len(per_fold) > 1:
            rows.append(({"setting": label, "fold": "mean", "step": ""}, summary))
        labels.append(label)
        summaries.append(summary)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(reports_to_csv(rows))
    (out / "sweep_curves.tsv").write_text(curve_table(dict(zip(labels, summaries))))
    files = [out / "sweep.csv", out / "sweep_curves.tsv"]
    if cfg.plots:
        plot_sweep(labels, summaries, out / "sweep.png")
        files.append(out / "sweep.png")
    write_manifest(out, f"sweep:{axis}", cfg, files, folds=folds, settings=labels, seeds={lab: cfg.seed for lab in labels})
    return labels, summaries


# --------------------------------------------------------------------- main


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON file with RunConfig keys")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--fold", help="fold index or 'all' (default 0)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key; value parsed as JSON when possible")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="smorlrec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="parse raw events into a dataset, splits and popularity")
    sub.add_parser("pretrain-embedding", parents=[common], help="train the frozen diversity embedding")
    sub.add_parser("train", parents=[common], help="train the recommender with the Q-learning head")
    sub.add_parser("evaluate", parents=[common], help="score a checkpoint on the test split")
    sweep = sub.add_parser("sweep", parents=[common], help="train and evaluate over a weight or alpha grid")
    sweep.add_argument("--axis", choices=("weights", "alpha"), required=True)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        folds = _folds(args.fold, cfg)
        if args.command == "prepare":
            cmd_prepare(cfg)
        elif args.command == "pretrain-embedding":
            cmd_pretrain_embedding(cfg, folds)
        elif args.command == "train":
            cmd_train(cfg, folds)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, folds)
        else:
            cmd_sweep(cfg, folds, args.axis)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except EvaluationError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVALUATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
