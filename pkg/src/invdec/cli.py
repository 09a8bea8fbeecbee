"""Command line entry points: train, eval, ablate, synth, gradcheck, scaling.

Configuration is an INI file with [model], [train], and [data] sections,
overlaid by repeatable --set section.key=value flags. Every run creates a
directory under --out, drops a PARTIAL marker there until it finishes, and
writes back the fully resolved configuration as resolved.ini; rerunning
from that file reproduces checkpoints and run records exactly (wall-clock
timings are the only permitted difference).

Logs go to stderr, artifacts to the run directory, and exactly one summary
line to stdout. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import logging
import sys
import time
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    CsvFormatError,
    apply_norm,
    chronological_split,
    invert_norm,
    load_csv,
    load_norm_stats,
    make_datasets,
    save_norm_stats,
    synth_coupled,
    windows,
    write_csv,
    RawSeries,
)
from .experiments import (
    RESULT_COLUMNS,
    AblationSpec,
    config_fingerprint,
    emit_plot_data,
    emit_report,
    gradient_check,
    reference_annotations,
    run_ablation,
    run_scaling_check,
)
from .model import ConfigError, ModelConfig, forward
from .tensor import Tensor
from .training import TrainConfig, TrainingDiverged, evaluate, train

log = logging.getLogger("invdec.cli")

GRADCHECK_TOL = 1e-4


def _bool_opt(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _ffn_opt(s: str):
    return None if s.strip().lower() in ("", "auto", "none") else int(s)


def _fusion_opt(s: str):
    low = s.strip().lower()
    if low in ("auto", "learnable"):
        return low
    return float(s)


_MODEL_TYPES = {
    "n_vars": int,
    "lookback": int,
    "horizon": int,
    "patch_len": int,
    "stride": int,
    "d_model": int,
    "n_heads": int,
    "enc_layers": int,
    "dec_layers": int,
    "ffn_dim": _ffn_opt,
    "dropout": float,
    "fusion_weight": _fusion_opt,
    "joint_encoder": _bool_opt,
}
_TRAIN_TYPES = {
    "lr": float,
    "batch_size": int,
    "max_epochs": int,
    "patience": int,
    "seed": int,
    "eval_batch_size": int,
}
_DATA_KEYS = {"path", "first_column"}


def default_config() -> dict:
    """String-valued defaults; horizon is conventionally one of
    96/192/336/720 but any positive value is accepted."""
    return {
        "model": {
            "lookback": "96",
            "horizon": "96",
            "patch_len": "16",
            "stride": "16",
            "d_model": "64",
            "n_heads": "4",
            "enc_layers": "2",
            "dec_layers": "2",
            "ffn_dim": "auto",
            "dropout": "0.1",
            "fusion_weight": "auto",
            "joint_encoder": "false",
        },
        "train": {
            "lr": "0.001",
            "batch_size": "64",
            "max_epochs": "20",
            "patience": "3",
            "seed": "0",
            "eval_batch_size": "256",
        },
        "data": {"first_column": "auto"},
    }


def _check_key(section: str, key: str) -> None:
    known = {"model": set(_MODEL_TYPES), "train": set(_TRAIN_TYPES), "data": _DATA_KEYS}
    if section not in known:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in known[section]:
        raise ConfigError(f"unknown config key {section}.{key}")


def resolve_config(args) -> dict:
    """Defaults, then the INI file, then --set overrides, then --seed."""
    conf = default_config()
    if getattr(args, "config", None):
        parser = configparser.ConfigParser()
        if not parser.read(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        for section in parser.sections():
            for key, value in parser[section].items():
                _check_key(section, key)
                conf[section][key] = value
    for item in getattr(args, "set", None) or []:
        lhs, sep, value = item.partition("=")
        section, dot, key = lhs.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        _check_key(section, key)
        conf[section][key] = value
    if getattr(args, "seed", None) is not None:
        conf["train"]["seed"] = str(args.seed)
    return conf


def _typed(conf: dict, section: str, types: dict) -> dict:
    out = {}
    for key, value in conf[section].items():
        try:
            out[key] = types[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}") from None
    return out


def model_config_from(conf: dict, n_vars: int) -> ModelConfig:
    kwargs = _typed(conf, "model", _MODEL_TYPES)
    declared = kwargs.pop("n_vars", None)
    if declared is not None and declared != n_vars:
        raise ConfigError(
            f"model.n_vars is {declared} but the dataset has {n_vars} variables"
        )
    return ModelConfig(n_vars=n_vars, **kwargs)


def train_config_from(conf: dict) -> TrainConfig:
    return TrainConfig(**_typed(conf, "train", _TRAIN_TYPES))


def write_resolved(path, conf: dict) -> None:
    parser = configparser.ConfigParser()
    for section in ("model", "train", "data"):
        parser[section] = dict(sorted(conf[section].items()))
    with open(path, "w") as fh:
        parser.write(fh)


def make_run_dir(out_dir, command: str, fingerprint: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out_dir)
    for attempt in range(100):
        suffix = "" if attempt == 0 else f"-{attempt}"
        run_dir = base / f"{command}-{stamp}-{fingerprint[:8]}{suffix}"
        try:
            run_dir.mkdir(parents=True, exist_ok=False)
            return run_dir
        except FileExistsError:
            continue
    raise RuntimeError(f"could not create a fresh run directory under {base}")


def _load_series(conf: dict) -> RawSeries:
    path = conf["data"].get("path")
    if not path:
        raise ConfigError("missing required config field data.path (the dataset CSV)")
    return load_csv(path, conf["data"].get("first_column", "auto"))


def _start_run(args, command: str, conf: dict) -> tuple[Path, Path]:
    fingerprint = config_fingerprint({"command": command, **conf})
    run_dir = make_run_dir(args.out, command, fingerprint)
    marker = run_dir / "PARTIAL"
    marker.touch()
    write_resolved(run_dir / "resolved.ini", conf)
    log.info("run directory: %s", run_dir)
    return run_dir, marker


def _comma_ints(s: str) -> list[int]:
    return [int(tok) for tok in s.split(",") if tok.strip()]


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    conf = resolve_config(args)
    series = _load_series(conf)
    cfg = model_config_from(conf, series.n_vars)
    tcfg = train_config_from(conf)
    conf["model"]["n_vars"] = str(cfg.n_vars)
    run_dir, marker = _start_run(args, "train", conf)

    bundle = make_datasets(series, cfg.lookback, cfg.horizon)
    log.info(
        "windows: %d train / %d val / %d test",
        len(bundle.train), len(bundle.val), len(bundle.test),
    )
    params, record = train(cfg, tcfg, bundle.train, bundle.val)
    val = evaluate(params, cfg, bundle.val, tcfg.eval_batch_size)
    test = evaluate(params, cfg, bundle.test, tcfg.eval_batch_size)

    save_norm_stats(run_dir / "norm_stats.txt", bundle.stats)
    save_checkpoint(
        run_dir / "checkpoint.ckpt",
        cfg,
        params,
        seeds={"train": tcfg.seed},
        norm_stats_file="norm_stats.txt",
    )
    record.to_jsonl(run_dir / "run_record.jsonl")
    marker.unlink()
    print(
        f"train ok dir={run_dir} best_epoch={record.best_epoch} "
        f"val_mse={val['mse']:.6f} test_mse={test['mse']:.6f}"
    )
    return 0


def cmd_eval(args) -> int:
    conf = resolve_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    series = _load_series(conf)
    if series.n_vars != cfg.n_vars:
        raise ConfigError(
            f"checkpoint was trained on {cfg.n_vars} variables, "
            f"dataset has {series.n_vars}"
        )
    if ckpt.norm_stats_file is None:
        raise ConfigError("checkpoint carries no normalization stats file")
    stats = load_norm_stats(Path(args.checkpoint).parent / ckpt.norm_stats_file)
    run_dir, marker = _start_run(args, "eval", conf)

    normed = apply_norm(series, stats)
    segments = dict(zip(("train", "val", "test"),
                        chronological_split(normed, min_len=cfg.lookback + cfg.horizon)))
    wins = windows(segments[args.split], cfg.lookback, cfg.horizon)
    metrics = evaluate(ckpt.params, cfg, wins, train_config_from(conf).eval_batch_size)
    with open(run_dir / "metrics.txt", "w") as fh:
        for key in ("mse", "mae"):
            fh.write("%s\t%.17g\n" % (key, metrics[key]))
        fh.write("n\t%d\n" % metrics["n"])

    if args.dump_forecast:
        last = wins[-1]
        pred, _ = forward(last.x, ckpt.params, cfg, training=False, want_trace=False)
        denorm = invert_norm(pred.data, stats)
        write_csv(run_dir / "forecast.csv",
                  RawSeries(Tensor(denorm), list(series.names), series.freq_label))
        log.info("wrote de-normalized forecast of the final %s window", args.split)

    marker.unlink()
    print(
        f"eval ok split={args.split} mse={metrics['mse']:.6f} "
        f"mae={metrics['mae']:.6f} n={metrics['n']}"
    )
    return 0


def cmd_ablate(args) -> int:
    conf = resolve_config(args)
    series = _load_series(conf)
    cfg = model_config_from(conf, series.n_vars)
    tcfg = train_config_from(conf)
    conf["model"]["n_vars"] = str(cfg.n_vars)

    if args.axis in ("fusion_weight", "lambda"):
        values = [_fusion_opt(tok) for tok in args.values.split(",") if tok.strip()]
    else:
        values = _comma_ints(args.values)
    spec = AblationSpec(
        axis=args.axis,
        values=values,
        horizons=_comma_ints(args.horizons),
        seeds=_comma_ints(args.seeds),
    )
    run_dir, marker = _start_run(args, "ablate", conf)
    rows = run_ablation(series, cfg, tcfg, spec)
    notes = reference_annotations("ablation")
    emit_report(rows, run_dir / "ablation.csv", "csv", RESULT_COLUMNS, notes)
    emit_report(rows, run_dir / "ablation.txt", "txt", RESULT_COLUMNS, notes)
    marker.unlink()
    print(f"ablate ok rows={len(rows)} dir={run_dir}")
    return 0


def cmd_synth(args) -> int:
    conf = resolve_config(args)
    seed = int(conf["train"]["seed"])
    run_dir, marker = _start_run(args, "synth", conf)
    series = synth_coupled(
        args.n_vars, args.n_steps, args.coupling, args.lag,
        noise=args.noise, seed=seed,
    )
    out_path = Path(args.csv_out) if args.csv_out else run_dir / "synth.csv"
    write_csv(out_path, series)
    digest = hashlib.sha256(out_path.read_bytes()).hexdigest()[:12]
    marker.unlink()
    print(f"synth ok path={out_path} sha256={digest}")
    return 0


def cmd_gradcheck(args) -> int:
    conf = resolve_config(args)
    seed = int(conf["train"]["seed"])
    run_dir, marker = _start_run(args, "gradcheck", conf)
    report = gradient_check(seed=seed, n_samples=args.samples)
    with open(run_dir / "gradcheck.txt", "w") as fh:
        for group, err in report.items():
            fh.write("%s\t%.6e\n" % (group, err))
    for group, err in report.items():
        log.info("gradcheck %-12s max rel err %.3e", group, err)
    worst = max(report.values())
    ok = worst < GRADCHECK_TOL
    marker.unlink()
    print(f"gradcheck {'PASS' if ok else 'FAIL'} max_rel_err={worst:.3e} dir={run_dir}")
    return 0 if ok else 1


def cmd_scaling(args) -> int:
    conf = resolve_config(args)
    run_dir, marker = _start_run(args, "scaling", conf)
    report = run_scaling_check(_comma_ints(args.c_values), reps=args.reps)
    emit_report(report.rows(), run_dir / "scaling.csv", "csv",
                annotations=reference_annotations("dimensionality"))
    emit_plot_data(report.c_values, report.encoder_seconds, run_dir / "encoder_seconds.xy")
    emit_plot_data(report.c_values, report.decoder_seconds, run_dir / "decoder_seconds.xy")
    with open(run_dir / "slopes.txt", "w") as fh:
        fh.write("encoder_slope\t%.17g\ndecoder_slope\t%.17g\n"
                 % (report.encoder_slope, report.decoder_slope))
    marker.unlink()
    print(
        f"scaling ok encoder_slope={report.encoder_slope:.2f} "
        f"decoder_slope={report.decoder_slope:.2f} dir={run_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [model]/[train]/[data] sections")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="override train.seed")
    common.add_argument("--out", default="runs", help="parent directory for run output")
    common.add_argument("--quiet", action="store_true", help="log warnings only")

    parser = argparse.ArgumentParser(
        prog="invdec",
        description="Patch forecaster with a variate-attention decoder.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model on a CSV dataset")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--dump-forecast", action="store_true",
                   help="write the final window's de-normalized forecast as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="sweep one config axis")
    p.add_argument("--axis", default="fusion_weight",
                   choices=("fusion_weight", "lambda", "dec_layers", "heads", "n_heads"))
    p.add_argument("--values", default="0.0,0.5,1.0", help="comma separated axis values")
    p.add_argument("--horizons", default="96", help="comma separated horizons")
    p.add_argument("--seeds", default="0", help="comma separated seeds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", parents=[common], help="generate a coupled synthetic CSV")
    p.add_argument("--n-vars", type=int, default=8)
    p.add_argument("--n-steps", type=int, default=4000)
    p.add_argument("--coupling", type=float, default=0.8)
    p.add_argument("--lag", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--csv-out", help="output path (default: <run dir>/synth.csv)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="compare reverse-mode gradients with finite differences")
    p.add_argument("--samples", type=int, default=2)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("scaling", parents=[common],
                       help="time encoder and decoder forwards across variable counts")
    p.add_argument("--c-values", default="64,128,256,512")
    p.add_argument("--reps", type=int, default=5)
    p.set_defaults(func=cmd_scaling)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return 1
    except (ConfigError, CheckpointError, CsvFormatError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return 2
    except Exception:
        log.exception("unhandled failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
