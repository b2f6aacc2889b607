"""Command-line entry points.

Subcommands: ``synth`` (generate a synthetic sensor series), ``preprocess``
(clean a series and report window counts), ``train`` (run an experiment
spec), ``predict`` (forecast from a checkpoint or replay a calibrated
equation), and ``gradcheck`` (finite-difference check of the analytic
gradients on miniature configurations).

Exit codes: 0 success, 1 threshold failure, 2 input error, 3 refusal to
overwrite existing outputs. All randomness flows from ``--seed``; every
report and checkpoint is bit-identical across reruns with the same inputs
and flags (the run manifest records wall-clock and is exempt).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from . import cee as cee_mod
from . import datapipe, synth, training
from .autodiff import Tensor
from .models import (ModelConfig, build_forecaster, count_parameters,
                     load_checkpoint, save_checkpoint)
from .physics import load_bridge_attributes, write_bridge_attributes
from .training import (TrainConfig, parse_experiment_spec, run_experiment,
                       run_result_summary, write_report)

EXIT_OK = 0
EXIT_THRESHOLD = 1
EXIT_INPUT = 2
EXIT_OVERWRITE = 3

GRADCHECK_TOLERANCE = 1e-4

__version__ = "0.1.0"


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, args_dict, inputs, outputs, seed=None):
    manifest = {
        "toolkit_version": __version__,
        "config": args_dict,
        "config_hash": hashlib.sha256(
            json.dumps(args_dict, sort_keys=True).encode()).hexdigest(),
        "input_digests": {p: _digest(p) for p in inputs if os.path.exists(p)},
        "seed": seed,
        "wall_clock_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "outputs": sorted(outputs),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _select_bridge(attrs, wanted):
    if wanted:
        if wanted not in attrs:
            raise CliError(f"bridge {wanted!r} not in attribute file")
        return attrs[wanted]
    if len(attrs) == 1:
        return next(iter(attrs.values()))
    raise CliError("attribute file lists several bridges; pass --bridge")


def cmd_synth(args):
    spec = synth.default_spec(seed=args.seed, hours=args.hours)
    frame = synth.generate(spec, args.hours)
    datapipe.write_frame(frame, args.out)
    if args.attrs_out:
        write_bridge_attributes(args.attrs_out, [spec.bridge])
    print(f"wrote {len(frame)} hourly records to {args.out}")
    return EXIT_OK


def cmd_preprocess(args):
    try:
        attrs = load_bridge_attributes(args.bridge_attrs)
        bridge = _select_bridge(attrs, args.bridge)
        frame = datapipe.ingest(args.input, bridge_id=bridge.bridge_id)
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    os.makedirs(args.out, exist_ok=True)
    frame = datapipe.clean(frame)
    spans = datapipe.synchronize(frame)
    cleaned_path = os.path.join(args.out, "cleaned.csv")
    datapipe.write_frame(frame, cleaned_path)
    outputs = [cleaned_path]
    manifest_path = os.path.join(args.out, "sequences.csv")
    try:
        pairs = datapipe.make_windows(frame, spans, args.m_in, args.m_out,
                                      args.e_ref_mode, bridge)
        train_p, val_p, test_p = datapipe.split(
            pairs, datapipe.SplitSpec(shuffle_seed=args.seed))
        rows = datapipe.manifest_rows(bridge.bridge_id, train_p, val_p, test_p)
    except datapipe.DataError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    datapipe.write_sequence_manifest(manifest_path, rows)
    outputs.append(manifest_path)
    _write_manifest(args.out, vars_public(args),
                    [args.input, args.bridge_attrs], outputs, seed=args.seed)
    for row in rows:
        print(",".join(str(c) for c in row))
    return EXIT_OK


def cmd_train(args):
    try:
        spec = parse_experiment_spec(args.experiment_spec)
    except (OSError, training.SpecError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    if os.path.isdir(args.out_dir) and os.listdir(args.out_dir) and not args.force:
        print(f"error: {args.out_dir} already has contents; use --force",
              file=sys.stderr)
        return EXIT_OVERWRITE
    os.makedirs(args.out_dir, exist_ok=True)
    try:
        bridges = load_bridge_attributes(spec.attrs)
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    data_paths = {b: os.path.join(spec.data_root, f"{b}.csv")
                  for b in spec.bridges}
    for b, path in data_paths.items():
        if not os.path.exists(path):
            print(f"error: missing bridge dataset(s): {b} ({path})",
                  file=sys.stderr)
            return EXIT_INPUT
    try:
        rows, results = run_experiment(spec, bridges, data_paths,
                                       progress=print if args.verbose else None)
    except (training.SpecError, training.TrainingError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT

    outputs = []
    report_path = os.path.join(args.out_dir, "report.csv")
    write_report(report_path, rows)
    outputs.append(report_path)

    equations = []
    for result in results:
        tag = f"{result.variant}_{result.architecture}_seed{result.seed}"
        run_path = os.path.join(args.out_dir, f"run_{tag}.json")
        with open(run_path, "w") as fh:
            json.dump(run_result_summary(result), fh, indent=2, sort_keys=True)
        outputs.append(run_path)
        cfg = ModelConfig(architecture=result.architecture, m_in=spec.m_in,
                          m_out=spec.m_out, hidden=spec.hidden,
                          cnn_channels=tuple(spec.cnn_channels))
        model = build_forecaster(cfg, seed=0)
        model.load_state(result.state)
        ckpt_path = os.path.join(args.out_dir, f"ckpt_{tag}.bin")
        bridge_label = (spec.bridges[0] if spec.scope == "site_specific"
                        and len(spec.bridges) == 1 else "all")
        extras = {
            "variant": result.variant,
            "seed": result.seed,
            "e_ref_mode": training.resolve_e_ref_mode(spec.e_ref_mode,
                                                      spec.variant),
            "bridge": bridge_label,
        }
        save_checkpoint(ckpt_path, model, extras=extras)
        outputs.append(ckpt_path)
        if result.latents is not None:
            equations.append(cee_mod.export_equation(result, bridge_label))
    if equations:
        eq_path = os.path.join(args.out_dir, "cee.csv")
        cee_mod.write_equations(eq_path, equations)
        outputs.append(eq_path)
    _write_manifest(args.out_dir, vars_public(args),
                    [args.experiment_spec, spec.attrs] + list(data_paths.values()),
                    outputs)
    print(f"report: {report_path} ({len(rows)} rows, {len(results)} runs)")
    return EXIT_OK


def _checkpoint_scaler(extras):
    mean = np.asarray(extras.get("scaler_mean", [0.0, 0.0, 0.0]))
    std = np.asarray(extras.get("scaler_std", [1.0, 1.0, 1.0]))
    return datapipe.Scaler(mean=mean, std=std)


def cmd_predict(args):
    if bool(args.checkpoint) == bool(args.equation):
        print("error: pass exactly one of --checkpoint or --equation",
              file=sys.stderr)
        return EXIT_INPUT
    try:
        attrs = load_bridge_attributes(args.bridge_attrs) if args.bridge_attrs \
            else {}
        bridge = _select_bridge(attrs, args.bridge) if attrs else None
        frame = datapipe.ingest(args.input,
                                bridge_id=bridge.bridge_id if bridge else "")
    except (OSError, ValueError, CliError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    frame = datapipe.clean(frame)
    spans = datapipe.synchronize(frame)
    try:
        if args.checkpoint:
            return _predict_checkpoint(args, frame, spans, bridge)
        return _predict_equation(args, frame, spans, bridge)
    except (CliError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return getattr(err, "code", EXIT_INPUT)


def _predict_checkpoint(args, frame, spans, bridge):
    model, extras = load_checkpoint(args.checkpoint)
    cfg = model.config
    if not spans:
        raise CliError("no usable rows in input")
    lo, hi = spans[-1]
    if hi - lo < cfg.m_in:
        raise CliError(f"window shorter than m_in={cfg.m_in}: last usable span "
                       f"has {hi - lo} rows")
    start = hi - cfg.m_in
    e_ref_mode = extras.get("e_ref_mode", "as_built")
    if e_ref_mode == "as_built":
        if bridge is None:
            raise CliError("as_built reference needs --bridge-attrs")
        e_ref = bridge.as_built_elevation
    else:
        e_ref = float(frame.e_bed[start])
    y_s = e_ref - frame.e_bed[start:hi]
    y1 = frame.e_stage[start:hi] - e_ref
    x = np.stack([y_s, y1, frame.q[start:hi]], axis=1)
    scaler = _checkpoint_scaler(extras)
    x = scaler.apply(x)[None, :, :]
    model.eval()
    with ad.no_grad():
        forecast = model(Tensor(x)).data[0]
    horizon = frame.timestamps[hi - 1] + (1 + np.arange(cfg.m_out)) \
        * np.timedelta64(3600, "s")
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "prediction_m"])
        for ts, value in zip(horizon, forecast):
            writer.writerow([str(ts.astype("datetime64[s]")), repr(float(value))])
    print(f"wrote {cfg.m_out} forecast rows to {args.out}")
    return EXIT_OK


def _predict_equation(args, frame, spans, bridge):
    equations = cee_mod.read_equations(args.equation)
    if args.bridge:
        matches = [e for e in equations if e.bridge_id == args.bridge]
        equations = matches or equations
    if not equations:
        raise CliError("no calibrated equations in file")
    eq = equations[0]
    if eq.variant in ("hec18", "td") and bridge is None:
        raise CliError(f"{eq.variant} replay needs --bridge-attrs")
    e_ref_mode = args.e_ref_mode or ("as_built" if eq.variant == "hec18"
                                     else "first_step")
    m_in, m_out = args.m_in, args.m_out
    pairs = datapipe.make_windows(frame, spans, m_in, m_out, e_ref_mode, bridge
                                  if bridge else synth.synthetic_bridge())
    episodes = cee_mod.detect_episodes(frame, e_ref_mode, bridge=bridge)
    prediction = cee_mod.cee_predict(eq, pairs, episodes, frame, m_in,
                                     bridge=bridge)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "mean_m", "lo95_m", "hi95_m", "count"])
        for i in range(len(prediction.mean)):
            writer.writerow([
                str(prediction.timestamps[i].astype("datetime64[s]")),
                repr(float(prediction.mean[i])),
                repr(float(prediction.lo95[i])),
                repr(float(prediction.hi95[i])),
                int(prediction.count[i]),
            ])
    print(f"wrote {len(prediction.mean)} aggregated rows to {args.out}")
    return EXIT_OK


def _broken_tanh(x):
    # negative-control op: forward tanh, deliberately wrong local gradient
    t = np.tanh(x.data)

    def bw(g):
        ad._accumulate(x, g * (1.0 - 0.5 * t * t))

    return ad._node(t, (x,), bw)


def cmd_gradcheck(args):
    from .physics import LatentParams
    from .training import composite_loss, stack_pairs

    rng = np.random.default_rng(args.seed)
    cfg = ModelConfig(architecture=args.arch, m_in=4, m_out=3, n_features=3,
                      hidden=3, cnn_channels=(2, 3))
    model = build_forecaster(cfg, seed=rng)
    bridge = synth.synthetic_bridge()

    from .datapipe import SequencePair
    pairs = []
    for _ in range(2):
        y1 = rng.uniform(0.5, 3.0, cfg.m_out)
        pairs.append(SequencePair(
            x=rng.normal(0, 1, (cfg.m_in, 3)),
            y=rng.uniform(-0.5, 1.5, cfg.m_out),
            e_ref=50.0,
            y1_out=y1,
            q_out=rng.uniform(50, 500, cfg.m_out),
            start=np.datetime64("2020-01-01T00:00:00"),
        ))
    batch = stack_pairs(pairs)
    config = TrainConfig(epochs=1, batch_size=2, variant=args.variant,
                         seed=args.seed)
    latents = None
    latent_params = []
    if args.variant != "pure":
        latents, latent_params = LatentParams.trainable(
            training._latent_variant(args.variant), cfg.m_in, cfg.m_out)

    x_t = Tensor(batch.x)

    def loss_fn():
        model.train()
        total, _, _ = composite_loss(model, x_t, batch, latents, bridge, config)
        if args.corrupt:
            return total + ad.mean(_broken_tanh(
                model.params["dense.bias" if args.arch == "nlinear"
                             else "head.bias"].tensor))
        return total

    groups = {"model": model.parameters(), "latent": latent_params}
    worst_overall = 0.0
    for name, params in groups.items():
        if not params:
            continue
        err = ad.grad_check(loss_fn, params, eps=1e-5)
        worst_overall = max(worst_overall, err)
        print(f"{name}: max relative error {err:.3e}")
    if worst_overall < GRADCHECK_TOLERANCE:
        print(f"OK (< {GRADCHECK_TOLERANCE:g})")
        return EXIT_OK
    print(f"FAIL (>= {GRADCHECK_TOLERANCE:g})")
    return EXIT_THRESHOLD


def vars_public(args):
    return {k: v for k, v in vars(args).items()
            if k != "func" and not k.startswith("_")}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="scourcast",
        description="Scour forecasting: data pipeline, training, calibrated "
                    "equations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic sensor series")
    p.add_argument("--out", required=True)
    p.add_argument("--hours", type=int, default=8400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--attrs-out", default=None,
                   help="also write the bridge attribute table here")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="clean a sensor series and report "
                                          "window counts")
    p.add_argument("--input", required=True)
    p.add_argument("--bridge-attrs", required=True)
    p.add_argument("--bridge", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--m-in", type=int, default=168)
    p.add_argument("--m-out", type=int, default=168)
    p.add_argument("--e-ref-mode", choices=datapipe.E_REF_MODES,
                   default="as_built")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="run an experiment spec")
    p.add_argument("--experiment-spec", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="forecast from a checkpoint or replay "
                                       "a calibrated equation")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--equation", default=None)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bridge-attrs", default=None)
    p.add_argument("--bridge", default=None)
    p.add_argument("--e-ref-mode", choices=datapipe.E_REF_MODES, default=None)
    p.add_argument("--m-in", type=int, default=168)
    p.add_argument("--m-out", type=int, default=168)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check on a "
                                         "miniature configuration")
    p.add_argument("--arch", choices=("nlinear", "lstm", "cnn"),
                   default="nlinear")
    p.add_argument("--variant", choices=training.VARIANTS, default="pure")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
