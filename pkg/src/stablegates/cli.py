"""Command-line entry point: ``stablegates {gen-data,train,eval,certify,diverge}``.

Exit codes:
    0  success (``certify``: network certified)
    1  ``diverge`` found a step where the empirical difference exceeded the bound
    2  usage error (argparse)
    3  ``certify``: sufficient incremental-stability condition not met
    4  validation error (bad flag values, dimension mismatch, corrupt file)
    5  I/O error (missing or unwritable path)
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io as sio
from .bench.dataset import build_fourtank_dataset, dataset_from_sequences
from .rnn import Mode, default_initial_state, simulate
from .stability import empirical_delta_iss_check, network_certificate
from .training import TrainConfig, TrainingDiverged, fit_metric, train

EXIT_OK = 0
EXIT_BOUND_VIOLATED = 1
EXIT_NOT_CERTIFIED = 3
EXIT_VALIDATION = 4
EXIT_IO = 5

OUTPUT_DIR_ENV = "STABLEGATES_OUTPUT_DIR"
PRESETS = ("fourtank",)

log = logging.getLogger("stablegates")


class ValidationError(ValueError):
    pass


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, "."))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require_dir(path: Path) -> Path:
    if not path.is_dir():
        raise FileNotFoundError(f"output directory {path} does not exist")
    return path


def _require_parent(path: Path) -> Path:
    _require_dir(path.parent if str(path.parent) else Path("."))
    return path


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    out = _require_dir(Path(args.out) if args.out else default_output_dir())
    if args.import_csv:
        from .io import read_trajectory_csv
        ds = dataset_from_sequences(read_trajectory_csv(args.import_csv), args.sampling_time)
        ds.meta["source"] = str(args.import_csv)
    else:
        if args.preset not in PRESETS and args.plant_config is None:
            raise ValidationError(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}")
        ds = build_fourtank_dataset(args.seed, config_path=args.plant_config)
        if args.plant_config:
            ds.meta["preset"] = "plant-config"
            ds.meta["plant_config_sha256"] = _sha256(Path(args.plant_config))
    paths = sio.save_dataset(ds, out)
    pipeline = ds.meta.get("pipeline", {})
    manifest = {
        "format": "stablegates-manifest",
        "version": sio.FORMAT_VERSION,
        **{k: v for k, v in ds.meta.items() if k != "pipeline"},
        "snr": pipeline.get("snr"),
        "window": pipeline.get("window"),
        "overlap": pipeline.get("overlap"),
        "pipeline": pipeline,
        "sampling_time": ds.sampling_time,
        "files": {
            split: {"name": p.name, "sequences": len(ds.split(split)), "sha256": _sha256(p)}
            for split, p in paths.items()
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    counts = ", ".join(f"{s} {len(ds.split(s))}" for s in paths)
    print(f"wrote {len(paths)} dataset files to {out} ({counts} sequences)")
    return EXIT_OK


# ---------------------------------------------------------------- train


def _hidden_sizes(layers: int, hidden: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(h) for h in hidden.split(","))
    except ValueError:
        raise ValidationError(f"--hidden must be an integer or comma-separated integers, got {hidden!r}")
    if len(sizes) == 1:
        sizes = sizes * layers
    if len(sizes) != layers:
        raise ValidationError(f"--hidden lists {len(sizes)} sizes but --layers is {layers}")
    return sizes


def cmd_train(args) -> int:
    if args.layers < 1:
        raise ValidationError("--layers must be at least 1")
    sizes = _hidden_sizes(args.layers, args.hidden)
    data_dir = Path(args.data_dir) if args.data_dir else default_output_dir()
    ds = sio.load_dataset(data_dir, ("train", "val"))
    train_set, val_set = ds.split("train"), ds.split("val")
    if not train_set or not val_set:
        raise ValidationError(f"{data_dir} needs non-empty train and val splits")
    try:
        config = TrainConfig(hidden_sizes=sizes, mode=Mode(args.mode), epochs=args.epochs, base_lr=args.lr,
                             lr_decay_factor=args.lr_decay_factor, lr_decay_every=args.lr_decay_every,
                             batch_size=args.batch, dropout_rate=args.dropout, washout=args.washout,
                             seed=args.seed)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    init = None
    if args.init:
        init, _, _ = sio.load_model(args.init)
        if (init.n_u, init.n_y, init.hidden_sizes) != (ds.n_u, ds.n_y, sizes) or init.mode is not config.mode:
            raise ValidationError(
                f"initial model ({init.mode.value}, {init.n_u} in, {list(init.hidden_sizes)}, {init.n_y} out) "
                f"does not match data ({ds.n_u} in, {ds.n_y} out) and flags ({config.mode.value}, {list(sizes)})"
            )
    out = _require_parent(Path(args.out) if args.out else default_output_dir() / "model.json")
    report_path = _require_parent(Path(args.report) if args.report else out.with_suffix(".report.csv"))
    try:
        net, report = train(config, train_set, val_set, init=init, progress_every=args.progress)
    except TrainingDiverged as exc:
        raise ValidationError(str(exc)) from exc
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    cfg = asdict(config)
    cfg["mode"] = config.mode.value
    cfg["hidden_sizes"] = list(sizes)
    provenance = {
        "seed": config.seed,
        "config_digest": sio.config_digest(config),
        "best_epoch": report.best_epoch,
        "best_val_mse": report.best_val_mse,
        "config": cfg,
    }
    sio.save_model(out, net, ds.normalization, provenance)
    report_path.write_text(sio.train_report_to_csv(report))
    print(f"best epoch {report.best_epoch}, final validation MSE {report.best_val_mse:.6g}")
    print(f"model written to {out}, report to {report_path}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def evaluate(net, sequences, washout: int):
    """Zero-state free-run simulation of each sequence; returns (id, y_true, y_pred, fit, fit_skip)."""
    rows = []
    for s in sequences:
        y_hat = simulate(net, default_initial_state(net), s.u).y
        fit0 = fit_metric(s.y, y_hat)
        fitw = fit_metric(s.y, y_hat, skip=washout)
        rows.append((s.id, s.y, y_hat, fit0, fitw))
    return rows


def cmd_eval(args) -> int:
    net, norm, prov = sio.load_model(args.model)
    data_dir = Path(args.data_dir) if args.data_dir else default_output_dir()
    ds = sio.load_dataset(data_dir, (args.split,))
    seqs = ds.split(args.split)
    if not seqs:
        raise ValidationError(f"no {args.split} sequences in {data_dir}")
    if (ds.n_u, ds.n_y) != (net.n_u, net.n_y):
        raise ValidationError(f"model maps {net.n_u} inputs to {net.n_y} outputs, "
                              f"data has {ds.n_u} inputs and {ds.n_y} outputs")
    washout = args.washout if args.washout is not None else prov.get("config", {}).get("washout", 25)
    results = evaluate(net, seqs, washout)
    scale = norm or ds.normalization
    for sid, y, y_hat, fit0, fitw in results:
        fit0, fitw = np.atleast_1d(fit0), np.atleast_1d(fitw)
        head, other = (fitw, fit0) if args.skip_washout else (fit0, fitw)
        tag = f"skip {washout}" if args.skip_washout else "skip 0"
        alt = "skip 0" if args.skip_washout else f"skip {washout}"
        print(f"{sid}: FIT ({tag}) {', '.join(f'{v:.4f}' for v in head)} %  "
              f"[{alt}: {', '.join(f'{v:.4f}' for v in other)} %]")
        if args.trace_out:
            path = Path(args.trace_out)
            if len(results) > 1:
                path = path.with_name(f"{path.stem}.{sid}{path.suffix}")
            _require_parent(path)
            yt, yp = (scale.denormalize_y(y), scale.denormalize_y(y_hat)) if scale else (y, y_hat)
            names = ds.output_names
            header = ["time", *(f"y_true_{n}" for n in names), *(f"y_pred_{n}" for n in names)]
            t = np.arange(len(y)) * ds.sampling_time
            sio.write_rows(path, header, (
                [float(t[k]), *map(float, yt[k]), *map(float, yp[k])] for k in range(len(y))
            ))
    return EXIT_OK


# ---------------------------------------------------------------- certify


def cmd_certify(args) -> int:
    net, _, _ = sio.load_model(args.model)
    cert = network_certificate(net)
    print(sio.certificate_to_text(cert), end="")
    if args.report:
        report = _require_parent(Path(args.report))
        report.write_text(sio.certificate_to_json(cert))
    if args.text_report:
        _require_parent(Path(args.text_report)).write_text(sio.certificate_to_text(cert))
    return EXIT_OK if cert.schur_stable else EXIT_NOT_CERTIFIED


# ---------------------------------------------------------------- diverge


def divergence_trials(net, trials: int, horizon: int, seed: int, input_delta: float, identical: bool = False):
    """Random trajectory pairs: states uniform in [-2, 2], inputs uniform in [-1, 1].

    The second input sequence perturbs the first by at most ``input_delta``
    per channel (clipped to the admissible range).  Each trial draws from its
    own child stream of ``seed``.
    """
    if trials < 0 or horizon < 0:
        raise ValidationError("--trials and --horizon must be non-negative")
    if input_delta < 0:
        raise ValidationError("--input-delta must be non-negative")
    cert = network_certificate(net)
    for child in np.random.SeedSequence(seed).spawn(trials):
        rng = np.random.default_rng(child)
        h_a = [rng.uniform(-2.0, 2.0, n) for n in net.hidden_sizes]
        h_b = [h.copy() for h in h_a] if identical else [rng.uniform(-2.0, 2.0, n) for n in net.hidden_sizes]
        u_a = rng.uniform(-1.0, 1.0, (horizon, net.n_u))
        u_b = u_a.copy() if identical else np.clip(u_a + rng.uniform(-input_delta, input_delta, u_a.shape), -1, 1)
        yield empirical_delta_iss_check(net, h_a, h_b, u_a, u_b, cert)


def cmd_diverge(args) -> int:
    net, _, _ = sio.load_model(args.model)
    rows = []
    violations, util = 0, 0.0
    refused = False
    for trial, tr in enumerate(divergence_trials(net, args.trials, args.horizon, args.seed,
                                                 args.input_delta, args.identical)):
        refused = tr.bound is None
        if not refused:
            violations += tr.violation_step is not None
            util = max(util, tr.max_utilization or 0.0)
        for k in range(tr.state_diff.size):
            rows.append([trial, k, float(tr.state_diff[k]),
                         "" if refused else float(tr.bound[k]),
                         float(tr.input_diff[k]) if k < tr.input_diff.size else ""])
    if args.trace_out:
        sio.write_rows(_require_parent(Path(args.trace_out)),
                       ["trial", "k", "empirical_diff", "bound", "input_diff"], rows)
    cert = network_certificate(net)
    print(f"deltaISS: {cert.verdict}")
    if refused or args.trials == 0:
        if refused:
            print(f"{args.trials} trials simulated; certificate refused, no bound to compare against")
        return EXIT_OK
    print(f"{args.trials} trials x {args.horizon} steps: {violations} bound violation(s), "
          f"max bound utilization {util:.6g}")
    return EXIT_BOUND_VIOLATED if violations else EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stablegates",
                                description="Train and certify chaos-free and decoupled-gate recurrent networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a seeded identification dataset")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--preset", default="fourtank", help="built-in benchmark (default: fourtank)")
    src.add_argument("--plant-config", help="quadruple-tank INI file overriding the built-in parameters")
    src.add_argument("--import-csv", help="measured trajectories with columns seq, split, u*, y*")
    g.add_argument("--sampling-time", type=float, default=1.0, help="sampling time for --import-csv data")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help=f"existing output directory (default: ${OUTPUT_DIR_ENV} or .)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a network on a generated dataset")
    t.add_argument("--mode", choices=[m.value for m in Mode], default="dgn")
    t.add_argument("--layers", type=int, default=1)
    t.add_argument("--hidden", default="7", help="units per layer, one value or a comma-separated list")
    t.add_argument("--batch", type=int, default=25)
    t.add_argument("--epochs", type=int, default=2000)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--lr-decay-factor", type=float, default=0.9)
    t.add_argument("--lr-decay-every", type=int, default=200)
    t.add_argument("--dropout", type=float, default=0.05)
    t.add_argument("--washout", type=int, default=25)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--init", help="model file to warm-start from")
    t.add_argument("--data-dir")
    t.add_argument("--out", help="model file (default: model.json in the output directory)")
    t.add_argument("--report", help="per-epoch CSV report (default: next to the model)")
    t.add_argument("--progress", type=int, default=0, metavar="N", help="log every N epochs (with -v)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="free-run a model on test sequences and report FIT")
    e.add_argument("--model", required=True)
    e.add_argument("--data-dir")
    e.add_argument("--split", default="test")
    e.add_argument("--washout", type=int, help="steps skipped by the washout FIT (default: training washout)")
    e.add_argument("--skip-washout", action="store_true", help="headline the washout-skipped FIT")
    e.add_argument("--trace-out", help="CSV with time, y_true, y_pred columns")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("certify", help="check the incremental-stability certificate of a model")
    c.add_argument("--model", required=True)
    c.add_argument("--report", help="machine-readable JSON certificate")
    c.add_argument("--text-report", help="human-readable certificate")
    c.set_defaults(func=cmd_certify)

    d = sub.add_parser("diverge", help="compare random trajectory pairs against the certified bound")
    d.add_argument("--model", required=True)
    d.add_argument("--trials", type=int, default=100)
    d.add_argument("--horizon", type=int, default=500)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--input-delta", type=float, default=0.1, help="max per-channel input perturbation")
    d.add_argument("--identical", action="store_true", help="use identical states and inputs in each pair")
    d.add_argument("--trace-out", help="CSV with trial, k, empirical_diff, bound, input_diff")
    d.set_defaults(func=cmd_diverge)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, sio.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
