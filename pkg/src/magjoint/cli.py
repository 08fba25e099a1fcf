"""Command line entry point: ``magjoint {generate,train,eval,spike,filter,report}``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 incompatible
artifact version.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import dvbf, evalkit, lstm, simkit
from . import rotation as rot
from .config import ConfigError, load_config
from .errors import EstimationFailed, FormatVersionError, StatsMismatch

log = logging.getLogger("magjoint")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERSION = 0, 2, 3, 4
LOG_FORMAT = "# magjoint-train-log v1"
FILTER_FORMAT = "# magjoint-filter v1"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _config(args):
    overrides = list(args.set or [])
    pairs = []
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs.append((key.strip(), value.strip()))
    if args.seed is not None:
        pairs.append(("seed", str(args.seed)))
    cfg = load_config(args.config, pairs)
    cfg.validate()
    return cfg


def _out_dir(args, cfg):
    if not args.out:
        raise UsageError("--out DIR is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.dump())
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc
    return out


def load_model(path):
    try:
        values, meta = dc.load_params(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read model {path}: {exc}") from exc
    stats = simkit.Stats.from_meta(meta) if "stats_mean" in meta else None
    kind = meta.get("kind")
    if kind == "lstm":
        return lstm.LstmRegressor.from_saved(values, meta, stats)
    if kind == "dvbf":
        return dvbf.DvbfModel.from_saved(values, meta, stats)
    raise FormatVersionError(f"{path}: unknown model kind {kind!r}")


def _load_split(data_dir, name):
    if data_dir is None:
        raise UsageError("--data DIR is required")
    try:
        return simkit.load_split(data_dir, name)
    except FormatVersionError:
        raise
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read {name} split from {data_dir}: {exc}") from exc


def _emit(args, line):
    (args.stdout or sys.stdout).write(line + "\n")


def _write_log(path, entries):
    if not entries:
        Path(path).write_text(LOG_FORMAT + "\nepoch,train_loss,val_euler_rmse,wall_seconds\n")
        return
    first = ["epoch", "train_loss", "val_euler_rmse", "wall_seconds"]
    keys = first + [k for k in entries[0] if k not in first]
    rows = [LOG_FORMAT, ",".join(keys)]
    for e in entries:
        rows.append(",".join(repr(float(e[k])) if k != "epoch" else str(e[k]) for k in keys))
    Path(path).write_text("\n".join(rows) + "\n")


# ---------------------------------------------------------------- commands


def cmd_generate(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    ds = simkit.generate_dataset(cfg.rig(), simkit.JointLimits(), cfg.n_steps, cfg.noise_spec(), cfg.seed)
    try:
        simkit.save_splits(out, ds)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from exc
    log.info("wrote %d steps to %s", len(ds), out)
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    if args.model not in ("lstm", "dvbf"):
        raise UsageError("--model {lstm,dvbf} is required")
    train = _load_split(args.data, "train")
    val = _load_split(args.data, "val")
    out = _out_dir(args, cfg)

    def echo(entry):
        log.info("epoch %d train_loss %.6g val_euler_rmse %.5f", entry["epoch"], entry["train_loss"], entry["val_euler_rmse"])

    if args.model == "lstm":
        model, entries = lstm.train_lstm(train, val, cfg.lstm_config(), log_fn=echo)
    else:
        model, entries = dvbf.train_dvbf(train, val, cfg.dvbf_config(), log_fn=echo)
    model.save(out / f"{args.model}.model")
    _write_log(out / f"{args.model}_log.csv", entries)
    return EXIT_OK


def cmd_eval(args):
    cfg = _config(args)
    ds = _load_split(args.data, args.split)
    if args.oracle:
        model = evalkit.OracleModel()
    elif args.model_file:
        model = load_model(args.model_file)
    else:
        raise UsageError("eval needs --model-file or --oracle")
    report = evalkit.evaluate(model, ds)
    out = _out_dir(args, cfg)
    evalkit.write_report(out, report)
    for k, v in report.summary().items():
        _emit(args, f"{k} = {v}")
    return EXIT_OK


def cmd_spike(args):
    cfg = _config(args)
    if not (args.lstm and args.dvbf):
        raise UsageError("spike needs --lstm FILE and --dvbf FILE")
    lstm_model, dvbf_model = load_model(args.lstm), load_model(args.dvbf)
    if not isinstance(lstm_model, lstm.LstmRegressor) or not isinstance(dvbf_model, dvbf.DvbfModel):
        raise UsageError("--lstm/--dvbf point at the wrong model kinds")
    ds = _load_split(args.data, args.split)
    report = evalkit.spike_experiment(
        lstm_model,
        dvbf_model,
        ds,
        magnitude=cfg.spike_magnitude * cfg.noise_sigma,
        duration=cfg.spike_duration,
        sensors=cfg.spike_sensor_list(),
        count=cfg.spike_count,
        horizon=cfg.spike_horizon,
    )
    out = _out_dir(args, cfg)
    evalkit.write_spike_report(out, report)
    for k, v in report.summary().items():
        _emit(args, f"{k} = {v}")
    return EXIT_OK


def cmd_filter(args):
    """Stream rows from stdin, one pose row per input row on stdout."""
    if not args.model_file:
        raise UsageError("filter needs --model-file")
    model = load_model(args.model_file)
    if not isinstance(model, dvbf.DvbfModel):
        raise UsageError("filter needs a dvbf model")
    stdin, stdout = args.stdin or sys.stdin, args.stdout or sys.stdout
    header = None
    state = None
    n_sensors = model.n_sensors
    sigma_cols = [f"sigma_{k}" for k in range(model.latent)]
    stdout.write(FILTER_FORMAT + "\n")
    stdout.write(",".join(["t", "rx", "ry", "rz"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + sigma_cols) + "\n")
    stdout.flush()
    row_no = 0
    for line in stdin:
        if line.startswith("#") or not line.strip():
            continue
        if header is None:
            try:
                cols, found, _ = simkit.parse_header(line)
            except ValueError as exc:
                raise DataError(str(exc)) from exc
            if found != n_sensors:
                raise DataError(f"stream has {found} sensors, model expects {n_sensors}")
            header = cols
            s_first = cols.index("s0_x")
            continue
        row_no += 1
        try:
            vals = line.strip().split(",")
            if len(vals) != len(header):
                raise ValueError(f"expected {len(header)} fields, got {len(vals)}")
            t = int(float(vals[0]))
            u = np.array([float(v) for v in vals[1:4]]).reshape(1, 3)
            x = np.array([float(v) for v in vals[s_first : s_first + 3 * n_sensors]]).reshape(1, n_sensors, 3)
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(x))):
                raise ValueError("non-finite value")
            if state is None:
                state = dvbf.filter_init(model, x)
                pose, _ = dvbf.filter_pose(model, state)
            else:
                state, pose, _ = dvbf.filter_step(model, state, x, u)
        except (ValueError, EstimationFailed) as exc:
            print(f"row {row_no}: skipped ({exc})", file=sys.stderr)
            continue
        e = rot.rotation_to_euler(pose[0])
        fields = [str(t)] + [repr(float(v)) for v in e] + [repr(float(v)) for v in pose[0].reshape(-1)]
        fields += [repr(float(v)) for v in state.posterior.sigma[0]]
        stdout.write(",".join(fields) + "\n")
        stdout.flush()
    return EXIT_OK


def cmd_report(args):
    if not args.out:
        raise UsageError("report needs --out DIR pointing at eval/spike output")
    d = Path(args.out)
    files = sorted(d.glob("*_summary.txt"))
    if not files:
        raise DataError(f"no summary files in {d}")
    for f in files:
        _emit(args, f"[{f.stem}]")
        for k, v in evalkit.read_summary(f).items():
            _emit(args, f"{k} = {v}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "spike": cmd_spike,
    "filter": cmd_filter,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="magjoint", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--model", choices=("lstm", "dvbf"))
        p.add_argument("--data", help="dataset directory written by 'generate'")
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.add_argument("--model-file")
        p.add_argument("--lstm", help="trained LSTM model file")
        p.add_argument("--dvbf", help="trained DVBF model file")
        p.add_argument("--oracle", action="store_true", help="debug: evaluate a ground-truth model")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None, stdin=None, stdout=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.stdin, args.stdout = stdin, stdout
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatVersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except (DataError, StatsMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
