"""Command-line entry point: ingestion, training, evaluation and experiments.

Configuration is a flat ``key = value`` text file; every training field and
experiment field can be set there, and selected flags (plus repeated
``--set key=value``) override it. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import meta
from .chem import parse_smiles
from .errors import (
    ConfigError,
    DataError,
    MalformedHeader,
    NumericalDivergence,
    RowArityMismatch,
    SmilesError,
)
from .mpg import Dataset, PropertySplit, build_mpg, mask_labels, split_properties
from .scheduler import SchedulerParams
from .synthetic import make_synthetic

log = logging.getLogger("gsmeta")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

ABLATIONS = {
    "m2m": "no_m2m",
    "edge-types": "no_edge_types",
    "scheduler": "no_scheduler",
    "contrastive": "no_contrastive",
}

SYNTHETIC = "synthetic"


# ingestion ----------------------------------------------------------------


@dataclass
class IngestResult:
    dataset: Dataset
    n_rows: int
    dropped: list[tuple[int, str, str]]  # (line, smiles, reason)


def _label(cell: str, line: int, column: str) -> float:
    cell = cell.strip()
    if cell == "":
        return math.nan
    try:
        value = float(cell)
    except ValueError:
        value = None
    if value not in (0.0, 1.0):
        raise DataError(f"line {line}: label {cell!r} in column {column!r} is not 0, 1 or empty")
    return value


def ingest(path: str | Path) -> IngestResult:
    """Read a ``smiles,prop1,prop2,...`` CSV; rows whose SMILES fail to parse are dropped."""
    if not Path(path).is_file():
        raise DataError(f"dataset not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip().lower() != "smiles":
            raise MalformedHeader(f"{path}: first header cell must be 'smiles'")
        properties = [h.strip() for h in header[1:]]
        if not properties:
            raise MalformedHeader(f"{path}: header names no properties")
        if len(set(properties)) != len(properties) or any(not p for p in properties):
            raise MalformedHeader(f"{path}: property names must be unique and non-empty")
        smiles, rows, dropped = [], [], []
        n_rows = 0
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            n_rows += 1
            if len(row) != len(header):
                raise RowArityMismatch(line, len(header), len(row))
            labels = [_label(c, line, p) for c, p in zip(row[1:], properties)]
            s = row[0].strip()
            try:
                parse_smiles(s)
            except SmilesError as exc:
                dropped.append((line, s, type(exc).__name__))
                continue
            smiles.append(s)
            rows.append(labels)
    if dropped:
        log.warning("dropped %d of %d rows with unparseable SMILES", len(dropped), n_rows)
    labels = np.array(rows, dtype=np.float64).reshape(len(rows), len(properties))
    return IngestResult(Dataset(tuple(smiles), tuple(properties), labels), n_rows, dropped)


def write_dataset(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["smiles", *ds.properties])
        for s, row in zip(ds.molecules, ds.labels):
            w.writerow([s, *("" if np.isnan(v) else str(int(v)) for v in row)])


def load_dataset(spec: str) -> Dataset:
    """A CSV path, or ``synthetic`` / ``synthetic:<seed>`` for the built-in generator."""
    if spec == SYNTHETIC or spec.startswith(SYNTHETIC + ":"):
        _, _, seed = spec.partition(":")
        return make_synthetic(seed=int(seed or 0))
    return ingest(spec).dataset


# configuration ------------------------------------------------------------


@dataclass
class ExperimentConfig:
    dataset: str = ""
    n_test_props: int | None = None
    test_properties: tuple[str, ...] = ()
    seeds: tuple[int, ...] = (0,)
    mask_ratio: float = 0.0
    out_dir: str = "out"
    train: meta.TrainConfig = field(default_factory=meta.TrainConfig)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seed list must not be empty")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError("mask_ratio must be in [0, 1)")


_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(meta.TrainConfig)}
_EXPERIMENT_KEYS = {"dataset", "n_test_props", "test_properties", "seeds", "mask_ratio", "out_dir"}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_value(key: str, text: str):
    kind = _TRAIN_FIELDS[key].type
    text = text.strip()
    try:
        if "None" in kind and text.lower() in ("none", ""):
            return None
        if kind.startswith("bool"):
            return _parse_bool(text)
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later keys win."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value")
        key, _, value = line.partition("=")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def build_config(pairs: dict[str, str]) -> ExperimentConfig:
    train_kw, exp_kw = {}, {}
    for key, value in pairs.items():
        if key in _TRAIN_FIELDS:
            train_kw[key] = _parse_value(key, value)
        elif key in _EXPERIMENT_KEYS:
            exp_kw[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        if "n_test_props" in exp_kw:
            exp_kw["n_test_props"] = int(exp_kw["n_test_props"]) if exp_kw["n_test_props"] else None
        if "mask_ratio" in exp_kw:
            exp_kw["mask_ratio"] = float(exp_kw["mask_ratio"])
        if "seeds" in exp_kw:
            exp_kw["seeds"] = tuple(int(s) for s in exp_kw["seeds"].split(",") if s.strip())
        if "test_properties" in exp_kw:
            exp_kw["test_properties"] = tuple(s.strip() for s in exp_kw["test_properties"].split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(train=meta.TrainConfig(**train_kw), **exp_kw)


def config_pairs(args: argparse.Namespace) -> dict[str, str]:
    pairs: dict[str, str] = {}
    if getattr(args, "config", None):
        try:
            pairs.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    for item in getattr(args, "set", None) or []:
        pairs.update(parse_config_text(item))
    flags = {
        "dataset": args.dataset, "n_test_props": args.n_test_props, "k_shot": args.k_shot,
        "n_aux": args.n_aux, "mask_ratio": args.mask_ratio, "out_dir": args.out_dir,
    }
    for key, value in flags.items():
        if value is not None:
            pairs[key] = str(value)
    if getattr(args, "seed", None):
        pairs["seeds"] = ",".join(str(s) for s in args.seed)
    for name in args.ablate or []:
        pairs[ABLATIONS[name]] = "true"
    return pairs


def config_text(cfg: ExperimentConfig) -> str:
    lines = [
        f"dataset = {cfg.dataset}",
        f"n_test_props = {'' if cfg.n_test_props is None else cfg.n_test_props}",
        f"test_properties = {','.join(cfg.test_properties)}",
        f"seeds = {','.join(map(str, cfg.seeds))}",
        f"mask_ratio = {cfg.mask_ratio!r}",
        f"out_dir = {cfg.out_dir}",
    ]
    for name in _TRAIN_FIELDS:
        value = getattr(cfg.train, name)
        lines.append(f"{name} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


# pipeline -----------------------------------------------------------------


@dataclass
class Prepared:
    dataset: Dataset
    mpg: object
    split: PropertySplit


def resolve_split(ds: Dataset, cfg: ExperimentConfig) -> PropertySplit:
    if cfg.test_properties:
        missing = [p for p in cfg.test_properties if p not in ds.properties]
        if missing:
            raise ConfigError(f"unknown test properties: {', '.join(missing)}")
        ids = [ds.properties.index(p) for p in cfg.test_properties]
        return split_properties(ds, test_properties=ids)
    if cfg.n_test_props is None:
        raise ConfigError("set n_test_props or test_properties")
    return split_properties(ds, cfg.n_test_props)


def prepare(ds: Dataset, cfg: ExperimentConfig, seed: int) -> Prepared:
    split = resolve_split(ds, cfg)
    if cfg.mask_ratio > 0:
        ds = mask_labels(ds, cfg.mask_ratio, meta.rng_stream(seed, "masking"), train_properties=split.train)
    mpg = build_mpg(ds, cfg.train.d, rng=meta.rng_stream(seed, "graph"))
    return Prepared(ds, mpg, split)


def save_checkpoint(path: Path, result: meta.TrainResult | None, theta, phi: SchedulerParams,
                    cfg: meta.TrainConfig, ds: Dataset, split: PropertySplit) -> None:
    arrays = {f"theta/{k}": v for k, v in theta.items()}
    arrays.update({f"phi/{k}": v for k, v in phi.weights.items()})
    header = {
        "config": dataclasses.asdict(cfg),
        "baseline": phi.baseline,
        "momentum": phi.momentum,
        "properties": list(ds.properties),
        "train": [int(p) for p in split.train],
        "test": [int(p) for p in split.test],
    }
    arrays["header"] = np.array(json.dumps(header, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path):
    try:
        with np.load(path) as z:
            header = json.loads(str(z["header"]))
            theta = {k[6:]: z[k] for k in z.files if k.startswith("theta/")}
            phi = {k[4:]: z[k] for k in z.files if k.startswith("phi/")}
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return theta, SchedulerParams(phi, header["baseline"], header["momentum"]), header


def write_auc_csv(path: Path, ds: Dataset, aucs: dict[int, float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["property", "auc"])
        for p in sorted(aucs):
            w.writerow([ds.properties[p], repr(aucs[p])])


def write_aggregate_csv(path: Path, ds: Dataset, report: meta.EvalReport) -> None:
    """Mean and std over seeds; the std column name says which formula was used."""
    agg = report.aggregate()
    n_seeds = len(report.per_seed)
    std_name = "std_sample" if n_seeds > 1 else "std_population"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["property", "mean", std_name, "n_seeds"])
        for p, (mean, std, n) in agg.items():
            w.writerow([ds.properties[p], repr(mean), repr(std), n])


def write_matrix_csv(path: Path, names: Sequence[str], matrix: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["property", *names])
        for name, row in zip(names, matrix):
            w.writerow([name, *(int(v) for v in row)])


def coselection_from_log(records: Iterable[dict], train: Sequence[int]) -> np.ndarray:
    index = {p: k for k, p in enumerate(train)}
    matrix = np.zeros((len(train), len(train)), dtype=np.int64)
    for rec in records:
        meta.coselection_update(matrix, rec["targets"], index)
    return matrix


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def train_seed(ds: Dataset, cfg: ExperimentConfig, seed: int, out: Path) -> tuple[meta.TrainResult, Prepared]:
    """Train one seed, streaming the log to ``train_log_seed<seed>.jsonl``."""
    prep = prepare(ds, cfg, seed)
    tcfg = cfg.train.replace(seed=seed)
    log_path = out / f"train_log_seed{seed}.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        def on_step(rec):
            fh.write(_json_line(rec) + "\n")
            fh.flush()

        result = meta.train(prep.mpg, prep.split, tcfg, on_step=on_step)
    save_checkpoint(out / f"checkpoint_seed{seed}.npz", result, result.theta, result.phi,
                    tcfg, prep.dataset, prep.split)
    names = [prep.dataset.properties[p] for p in prep.split.train]
    write_matrix_csv(out / f"coselection_seed{seed}.csv", names, result.coselection)
    return result, prep


def run_experiment(ds: Dataset, cfg: ExperimentConfig) -> meta.EvalReport:
    """Train and evaluate every seed, writing each seed's files as soon as they exist."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_text(cfg), encoding="utf-8")
    report = meta.EvalReport()
    total = None
    names = None
    try:
        for seed in cfg.seeds:
            result, prep = train_seed(ds, cfg, seed, out)
            aucs = meta.evaluate(result.theta, prep.mpg, prep.split, cfg.train.replace(seed=seed))
            write_auc_csv(out / f"auc_seed{seed}.csv", prep.dataset, aucs)
            report.add(seed, aucs)
            total = result.coselection.copy() if total is None else total + result.coselection
            names = [prep.dataset.properties[p] for p in prep.split.train]
            log.info("seed %d mean AUC %.4f", seed, float(np.mean(list(aucs.values()))))
    finally:
        if report.per_seed:
            write_aggregate_csv(out / "aggregate.csv", ds, report)
            write_matrix_csv(out / "coselection.csv", names, total)
    return report


# commands -----------------------------------------------------------------


def cmd_ingest(args) -> int:
    res = ingest(args.csv)
    ds = res.dataset
    print(f"rows {res.n_rows}")
    print(f"molecules {ds.n_molecules}")
    print(f"properties {ds.n_properties}")
    print(f"missing {ds.missing_count()}")
    print(f"dropped {len(res.dropped)}")
    for line, s, reason in res.dropped:
        print(f"  line {line}: {reason}: {s}")
    if args.out:
        write_dataset(ds, args.out)
    return EXIT_OK


def _experiment_from_args(args) -> tuple[ExperimentConfig, Dataset]:
    cfg = build_config(config_pairs(args))
    if not cfg.dataset:
        raise ConfigError("no dataset given (use --dataset or the dataset config key)")
    return cfg, load_dataset(cfg.dataset)


def cmd_train(args) -> int:
    cfg, ds = _experiment_from_args(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_text(cfg), encoding="utf-8")
    for seed in cfg.seeds:
        train_seed(ds, cfg, seed, out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, ds = _experiment_from_args(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    theta, _, header = load_checkpoint(args.checkpoint)
    seed = cfg.seeds[0]
    tcfg = meta.TrainConfig(**{**header["config"], "seed": seed})
    if header["properties"] != list(ds.properties):
        raise DataError("checkpoint was trained on a dataset with different properties")
    cfg = dataclasses.replace(cfg, train=tcfg, test_properties=tuple(header["properties"][p] for p in header["test"]))
    prep = prepare(ds, cfg, seed)
    aucs = meta.evaluate(theta, prep.mpg, prep.split, tcfg)
    write_auc_csv(out / f"auc_seed{seed}.csv", ds, aucs)
    for p in sorted(aucs):
        print(f"{ds.properties[p]}\t{aucs[p]:.6f}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg, ds = _experiment_from_args(args)
    report = run_experiment(ds, cfg)
    for p, (mean, std, n) in report.aggregate().items():
        print(f"{ds.properties[p]}\t{mean:.4f}\t{std:.4f}\t{n}")
    return EXIT_OK


def cmd_export_coselection(args) -> int:
    _, _, header = load_checkpoint(args.checkpoint)
    try:
        with open(args.log, encoding="utf-8") as fh:
            records = [json.loads(line) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read training log {args.log}: {exc}") from exc
    matrix = coselection_from_log(records, header["train"])
    names = [header["properties"][p] for p in header["train"]]
    write_matrix_csv(Path(args.out), names, matrix)
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--seed", type=int, action="append", help="seed (repeatable)")
    p.add_argument("--dataset", help="CSV path, or 'synthetic[:seed]'")
    p.add_argument("--n-test-props", type=int)
    p.add_argument("--k-shot", type=int)
    p.add_argument("--n-aux", type=int)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    p.add_argument("--out-dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsmeta", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse and summarise a dataset CSV")
    p.add_argument("csv")
    p.add_argument("--out", help="write the cleaned dataset here")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="meta-train and write checkpoints and logs")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its test properties")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="train and evaluate over several seeds")
    _add_common(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("export-coselection", help="target co-selection counts from a training log")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_coselection)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalDivergence as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
