"""Command line entry point.

    mtts generate|train|eval|grid|report --config PATH --out DIR
         [--seed N] [--threads N] [--force]

Exit codes: 0 success, 2 configuration error, 3 missing input,
4 numeric failure. ``MTTS_LOG`` selects the log level (error, info, debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import harness as H
from .core import read_dataset, write_dataset, RecordParseError, RecordValidationError
from .fusion import FusionSpec, ModelConfig, build_model, valid_combinations
from .gradcore import read_checkpoint, save_checkpoint
from .synthgen import ConfigError, NumericError, config_from_dict, generate_grid

log = logging.getLogger("mtts")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class MissingInput(Exception):
    pass


def _load_json(path: str) -> tuple[dict, Path]:
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"config file not found: {path}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return obj, p.parent


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _read_split(base: Path, exp: dict, key: str):
    if key not in exp:
        raise ConfigError(f"experiment config needs {key!r}")
    path = _resolve(base, exp[key])
    if not (path / "manifest.json").is_file() or not (path / "records.jsonl").is_file():
        raise MissingInput(f"dataset not found: {path}")
    return read_dataset(path)


def _experiment(args):
    exp, base = _load_json(args.config)
    known = {"train_data", "test_data", "specs", "train", "model", "checkpoints", "results"}
    unknown = set(exp) - known
    if unknown:
        raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
    train_obj = dict(exp.get("train", {}))
    model_obj = dict(exp.get("model", {}))
    if args.seed is not None:
        train_obj["seed"] = args.seed
        model_obj["seed"] = args.seed
    specs_obj = exp.get("specs", "all")
    if specs_obj == "all":
        specs = valid_combinations()
    elif isinstance(specs_obj, list):
        specs = [FusionSpec.from_dict(s) for s in specs_obj]
    else:
        raise ConfigError("'specs' must be \"all\" or a list of spec objects")
    keys = [s.key for s in specs]
    if len(set(keys)) != len(keys):
        raise ConfigError("two specs share the same <type>_<method> name")
    return exp, base, specs, H.train_config_from_dict(train_obj), model_obj


def _prepare_out(out: str, force: bool = True) -> Path:
    path = Path(out)
    if path.exists() and not path.is_dir():
        raise ConfigError(f"--out {out} is not a directory")
    if not force and path.exists() and any(path.iterdir()):
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def cmd_generate(args) -> int:
    obj, _ = _load_json(args.config)
    if args.seed is not None:
        obj["seed"] = args.seed
    plan = config_from_dict(obj)
    out = _prepare_out(args.out, args.force)
    g = plan.grid
    train, test = generate_grid(g.train_res, g.train_per_cell, g.test_res, g.test_per_cell,
                                plan.base, workers=args.threads)
    for ds in (train, test):
        write_dataset(out / ds.manifest.split, ds)
        rows, cols = ds.manifest.grid_shape
        print(f"{ds.manifest.split}: {ds.manifest.record_count} records, grid {rows}x{cols}")
    return EXIT_OK


def _train(args, exp, base, specs, cfg, model_obj, out: Path):
    train = _read_split(base, exp, "train_data")
    model_cfg = H.model_config_from_dict(model_obj, train.manifest.k_event_types)
    results = H.train_all(specs, list(train.records), cfg, model_cfg, workers=args.threads)
    models = []
    for spec, (model, history) in zip(specs, results):
        meta = {
            "spec": spec.to_dict(),
            "model": model_cfg.to_dict(),
            "normalizer": model.norm.to_dict(),
        }
        save_checkpoint(out / f"{spec.key}.ckpt", model, meta)
        _write(out / f"{spec.key}.history.csv", H.history_csv(history))
        print(f"{spec.key}: trained {len(history)} epochs, final task losses "
              + " ".join(f"{v:.4f}" for v in history[-1].tasks))
        models.append(model)
    return models


def _load_models(ckpt_dir: Path, specs):
    models = []
    for spec in specs:
        path = ckpt_dir / f"{spec.key}.ckpt"
        if not path.is_file():
            raise MissingInput(f"checkpoint not found: {path}")
        state, meta = read_checkpoint(path)
        saved = FusionSpec.from_dict(meta["spec"])
        model = build_model(saved, ModelConfig(**meta["model"]))
        model.load_state_dict(state)
        model.norm = H.Normalizer.from_dict(meta["normalizer"])
        models.append(model)
    return models


def _evaluate(args, exp, base, models, cfg, out: Path) -> int:
    test = _read_split(base, exp, "test_data")
    grid = H.evaluate_grid(models, test, cfg)
    _write(out / "metrics.csv", H.metrics_csv(grid))
    print(f"metrics.csv: {len(grid.reports) * len(grid.cells)} rows "
          f"({len(grid.reports)} specs x {len(grid.cells)} cells)")
    return EXIT_OK


def cmd_train(args) -> int:
    exp, base, specs, cfg, model_obj = _experiment(args)
    _train(args, exp, base, specs, cfg, model_obj, _prepare_out(args.out))
    return EXIT_OK


def cmd_eval(args) -> int:
    exp, base, specs, cfg, _ = _experiment(args)
    out = _prepare_out(args.out)
    ckpt_dir = _resolve(base, exp["checkpoints"]) if "checkpoints" in exp else out
    models = _load_models(ckpt_dir, specs)
    return _evaluate(args, exp, base, models, cfg, out)


def cmd_grid(args) -> int:
    exp, base, specs, cfg, model_obj = _experiment(args)
    _read_split(base, exp, "test_data")
    out = _prepare_out(args.out)
    models = _train(args, exp, base, specs, cfg, model_obj, out)
    return _evaluate(args, exp, base, models, cfg, out)


def cmd_report(args) -> int:
    results = Path(args.out)
    if args.config:
        exp, base = _load_json(args.config)
        if "results" in exp:
            results = _resolve(base, exp["results"])
    metrics = results / "metrics.csv"
    if not metrics.is_file():
        raise MissingInput(f"metrics file not found: {metrics}")
    grid = H.read_metrics_csv(metrics)
    out = _prepare_out(args.out)
    for path in H.write_report(grid, out):
        print(path.name)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "grid": cmd_grid,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtts", description=__doc__.split("\n\n")[0])
    parser.add_argument("verb", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON config file (optional for report)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--threads", type=int, default=1, help="parallel worker processes")
    parser.add_argument("--force", action="store_true", help="generate into a non-empty directory")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("MTTS_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    try:
        sys.stdout.reconfigure(line_buffering=True)
    except AttributeError:
        pass
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.verb != "report" and not args.config:
        print(f"error: {args.verb} needs --config", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.verb](args)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except H.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, RecordParseError, RecordValidationError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
