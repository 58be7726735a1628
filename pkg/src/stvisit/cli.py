"""``stvisit`` command line: gen-data, train, calibrate, eval, predict.

Exit codes: 0 success, 2 configuration or usage, 3 I/O, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from pydantic import ValidationError

from .config import load_config, parse_config
from .data import generate_synthetic, load_bundle, save_bundle
from .errors import ConfigError, ContractError, NumericError, ParameterError
from .pipeline import calibrate, evaluate_model, forecast, predictions_csv, train_model, windows_for
from .training import Checkpoint, model_from_checkpoint
from .uncertainty import CalibrationRecord

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("stvisit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stvisit", description="Spatiotemporal visit forecasting with calibrated intervals.")
    p.add_argument("command", choices=["gen-data", "train", "calibrate", "eval", "predict"])
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output (run) directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant")
    p.add_argument("--alpha", type=float)
    p.add_argument("--window", type=int, help="window index for predict")
    p.add_argument("--checkpoint", help="checkpoint path (default <out>/checkpoint.bin)")
    p.add_argument("--calibration", help="calibration record (default <out>/calibration.json)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def workers() -> int:
    raw = os.environ.get("STVISIT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"STVISIT_THREADS must be an integer, got {raw!r}", "STVISIT_THREADS") from None


def _overrides(args) -> dict:
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.variant is not None:
        out["variant"] = args.variant
    if args.alpha is not None:
        out["uq.alpha"] = args.alpha
    return out


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required for this command")
    return value


def _out_dir(args) -> Path:
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(args):
    path = Path(_require(args.data, "--data"))
    if not (path / "manifest.json").is_file():
        raise FileNotFoundError(f"no dataset at {path} (manifest.json missing)")
    return load_bundle(path)


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    print(f"wrote {path}")


def _restore(args):
    """Model and config from a checkpoint; a --config file may replace the uq section."""
    ckpt_path = Path(args.checkpoint) if args.checkpoint else Path(_require(args.out, "--out")) / "checkpoint.bin"
    try:
        ckpt = Checkpoint.load(ckpt_path)
    except ContractError as exc:
        raise OSError(f"{ckpt_path}: {exc}") from None
    doc = ckpt.config["run"]
    if args.config:
        doc = dict(doc, uq=load_config(args.config).uq.model_dump())
    if args.seed is not None:
        doc = dict(doc, seed=args.seed)
    if args.alpha is not None:
        doc = dict(doc, uq=dict(doc["uq"], alpha=args.alpha))
    if args.variant is not None and args.variant != doc["variant"]:
        raise ConfigError(f"checkpoint was trained as {doc['variant']!r}", "variant")
    cfg = parse_config(doc)
    model, _ = model_from_checkpoint(ckpt)
    return model, cfg


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = _out_dir(args)
    bundle = generate_synthetic(cfg.data, cfg.data_seed, cfg.model.t_in, cfg.model.t_out)
    save_bundle(bundle, out)
    _write(out / "config.json", cfg.to_json())
    n, T, C = bundle.visits.shape
    sizes = ", ".join(f"{k}={b - a}" for k, (a, b) in bundle.splits.items())
    print(f"nodes={n} steps={T} categories={C} seed={bundle.seed} windows: {sizes}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    bundle = _load_data(args)
    out = _out_dir(args)
    _write(out / "config.json", cfg.to_json())
    model, result = train_model(
        cfg, bundle, on_epoch=lambda row: log.info("epoch %d total %.5f val %.5f", row["epoch"], row["total"],
                                                   row["val_total"]))
    result.checkpoint.save(out / "checkpoint.bin")
    print(f"wrote {out / 'checkpoint.bin'}")
    _write(out / "history.csv", result.history_csv())
    print(f"variant={cfg.variant} epochs={len(result.history)} best_epoch={result.checkpoint.epoch} "
          f"best_val={result.checkpoint.best_val:.6f} parameters={model.n_parameters}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    model, cfg = _restore(args)
    bundle = _load_data(args)
    out = _out_dir(args)
    if not model.variant.calibrate:
        raise ConfigError(f"variant {cfg.variant!r} does not calibrate", "variant")
    record = calibrate(model, cfg, bundle, alpha=cfg.uq.alpha, workers=workers())
    _write(out / "calibration.json", json.dumps(record.to_dict(), indent=2) + "\n")
    print(f"alpha={record.alpha} n_cal={record.n_cal} c={record.margin_c:.6g} "
          f"coverage_gap={record.coverage_gap:.4f}")
    return EXIT_OK


def _calibration(args) -> CalibrationRecord | None:
    if args.calibration:
        return CalibrationRecord.load(args.calibration)
    default = Path(args.out) / "calibration.json" if args.out else None
    if default is not None and default.is_file():
        return CalibrationRecord.load(default)
    return None


def cmd_eval(args) -> int:
    model, cfg = _restore(args)
    bundle = _load_data(args)
    out = _out_dir(args)
    record = _calibration(args)
    if record is None and model.variant.calibrate:
        print("WARNING: no calibration record found; intervals are UNCALIBRATED", file=sys.stderr)
    result = evaluate_model(model, cfg, bundle, record, "test", alpha=cfg.uq.alpha, workers=workers())
    rep = result.report
    _write(out / "report.json", rep.to_json())
    _write(out / "report.csv", rep.to_csv())
    _write(out / "selective.csv", result.selective_csv())
    _write(out / "reliability.csv", result.reliability_csv())
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
    mark = {None: "", True: " (pass)", False: " (fail)"}[rep.coverage_pass]
    print(f"MAE={fmt(rep.mae)} RMSE={fmt(rep.rmse)} MPIW={fmt(rep.mpiw)} IS={fmt(rep.interval_score)} "
          f"COV={fmt(rep.coverage)}{mark}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, cfg = _restore(args)
    bundle = _load_data(args)
    out = _out_dir(args)
    windows = windows_for(bundle, cfg)
    idx = _require(args.window, "--window")
    if not 0 <= idx < len(windows):
        raise ConfigError(f"window {idx} outside [0, {len(windows)})", "window")
    fc = forecast(model, cfg, bundle, windows, [idx], workers=workers())
    record = _calibration(args)
    if record is not None and model.variant.calibrate:
        fc = fc.calibrate(record)
    elif model.variant.calibrate:
        print("WARNING: no calibration record found; intervals are UNCALIBRATED", file=sys.stderr)
    _write(out / "predictions.csv", predictions_csv(bundle, fc, 0, int(windows.target_steps(idx)[0])))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "calibrate": cmd_calibrate,
            "eval": cmd_eval, "predict": cmd_predict}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParameterError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
