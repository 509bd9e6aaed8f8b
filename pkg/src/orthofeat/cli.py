"""Command line entry point: ``orthofeat {synth,train,probe,repro-table1}``.

Exit codes: 0 on success, 2 for configuration errors and unreadable inputs,
1 for any other failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path
from typing import Optional

from .config import RunConfig, load_config, to_dict
from .data import gen_two_factor, write_csv_vectors
from .errors import ConfigError
from .experiments import load_datasets, new_bundle, repro_table1
from .models import load_bundle, save_bundle
from .plotting import plot_metrics, plot_s2_curves, plot_table1
from .probes import export_codes, probe_report, probe_retrain_subsidiary, write_loss_curve
from .training import run_cycles

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(_clean(obj), indent=2, allow_nan=False) + "\n")
    os.replace(tmp, path)


class JsonlWriter:
    """Append one JSON object per line, flushed immediately so a killed run leaves a valid prefix."""

    def __init__(self, path: Path):
        self.path = path
        self._f = open(path, "w")

    def __call__(self, record) -> None:
        self._f.write(json.dumps(_clean(record.to_dict()), allow_nan=False) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()


def _status(out: Path, status: str, **extra) -> None:
    _write_json(out / "run_status.json", {"status": status, **extra})


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(cfg: RunConfig) -> Path:
    out = _out_dir(cfg)
    path = out / "dataset.csv"
    write_csv_vectors(gen_two_factor(cfg.data.synth), path)
    return path


def cmd_train(cfg: RunConfig) -> Path:
    out = _out_dir(cfg)
    train, _ = load_datasets(cfg)
    _write_json(out / "config.json", to_dict(cfg))
    _status(out, "running", command="train")
    writer = JsonlWriter(out / "metrics.jsonl")
    try:
        bundle = new_bundle(cfg.model, train, cfg.train.seed)
        records = run_cycles(bundle, train, cfg.train, on_record=writer)
    except Exception as e:
        _status(out, "failed", command="train", error=str(e), partial=["metrics.jsonl"])
        raise
    finally:
        writer.close()
    model_path = out / "model.ofm"
    save_bundle(bundle, model_path)
    if cfg.probe.plots:
        plot_metrics([r.to_dict() for r in records], out / "metrics.png")
    _status(out, "completed", command="train", records=len(records), model="model.ofm")
    return model_path


def _sha256(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def cmd_probe(cfg: RunConfig, model_path) -> Path:
    out = _out_dir(cfg)
    if not Path(model_path).is_file():
        raise FileNotFoundError(f"model file not found: {model_path}")
    before = _sha256(model_path)
    bundle = load_bundle(model_path)
    train, test = load_datasets(cfg)
    report = probe_report(bundle, test)
    result = report.to_dict()
    if cfg.probe.s2:
        curve = probe_retrain_subsidiary(bundle, train, cfg.train, cfg.probe.s2_epochs)
        write_loss_curve(curve, out / "s2_loss.csv")
        result["s2_final_loss"] = curve[-1][1]
        if cfg.probe.plots:
            plot_s2_curves({"S2": curve}, train.n_subsidiary_classes, out / "s2_loss.png")
    if cfg.probe.export_codes:
        export_codes(bundle, test, out / "codes.csv")
    path = out / "probe_report.json"
    _write_json(path, result)
    if _sha256(model_path) != before:
        raise RuntimeError(f"model file {model_path} changed during probing")
    return path


def cmd_repro_table1(cfg: RunConfig) -> Path:
    out = _out_dir(cfg)
    train, test = load_datasets(cfg)
    _write_json(out / "config.json", to_dict(cfg))
    _status(out, "running", command="repro-table1")
    writer = JsonlWriter(out / "table1_metrics.jsonl")
    try:
        result = repro_table1(cfg, train, test, on_record=writer)
    except Exception as e:
        _status(out, "failed", command="repro-table1", error=str(e), partial=["table1_metrics.jsonl"])
        raise
    finally:
        writer.close()
    path = out / "table1.json"
    _write_json(path, result.to_dict())
    if cfg.probe.plots:
        plot_table1(result.table, out / "table1.png")
    _status(out, "completed", command="repro-table1", table="table1.json")
    return path


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orthofeat", description="Adversarial feature-removal experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("synth", "write a synthetic two-factor dataset as CSV"),
        ("train", "run the cycled three-stage training"),
        ("probe", "probe a saved model"),
        ("repro-table1", "argmax/argmin comparison of adversarial strategies"),
    ):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", required=True, help="YAML run configuration")
        s.add_argument("--out", help="output directory (overrides out_dir)")
        s.add_argument("--seed", type=int, help="overrides train.seed and data.synth.seed")
        if name == "probe":
            s.add_argument("--model", help="model file (default: <out>/model.ofm)")
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.data.synth.seed = args.seed
    return cfg


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "synth":
            path = cmd_synth(cfg)
        elif args.command == "train":
            path = cmd_train(cfg)
        elif args.command == "probe":
            path = cmd_probe(cfg, args.model or os.path.join(cfg.out_dir, "model.ofm"))
        else:
            path = cmd_repro_table1(cfg)
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
