"""Command-line entry point: ``segqa <command> ...``.

Every command takes ``--seed`` and ``--config FILE``.  The config file is a
JSON object whose keys are option names (``--out-dir`` -> ``out_dir``);
precedence is built-in default < config file < explicit flag.

Exit codes: 0 success, 2 validation / format / IO error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import perturb, qa, regress
from .encoders import DAE_DEFAULTS, VAE_DEFAULTS, EncoderConfig, load_model, train_dae, train_vae
from .errors import NumericError, ValidationError
from .features import design_matrix, read_features_csv, write_features_csv
from .grid import read_labelmap, read_volume, write_labelmap, write_volume
from .phantom import (BenchmarkConfig, DomainKind, DomainTag, GridConfig, SegmenterProfile,
                      Split, generate_case, load_benchmark, plan_benchmark, profile_bank,
                      save_benchmark, segment)

logger = logging.getLogger("segqa")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


# --------------------------------------------------------------------------
# helpers

def _emit(obj, out: Optional[str]) -> None:
    text = qa.dumps_json(obj)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _grid(name: str) -> GridConfig:
    if name == "small":
        return GridConfig.small()
    if name == "default":
        return GridConfig()
    raise ValidationError(f"unknown grid {name!r}; use 'default' or 'small'")


def _dataset(args):
    """Load ``--data`` if given, else plan a benchmark in memory."""
    if getattr(args, "data", None):
        return load_benchmark(args.data)
    return plan_benchmark(BenchmarkConfig(scale=args.scale, seed=args.seed, grid=_grid(args.grid)))


def _profile(args) -> SegmenterProfile:
    if getattr(args, "profile_json", None):
        return SegmenterProfile.from_json(json.loads(Path(args.profile_json).read_text()))
    bank = {p.name: p for p in profile_bank(args.bank_size)}
    if args.profile not in bank:
        raise ValidationError(f"unknown profile {args.profile!r}; choose from {sorted(bank)}")
    return bank[args.profile]


def _bank(args) -> list[SegmenterProfile]:
    bank = profile_bank(args.bank_size)
    if not args.profiles:
        return bank
    by_name = {p.name: p for p in bank}
    unknown = [n for n in args.profiles if n not in by_name]
    if unknown:
        raise ValidationError(f"unknown profiles {unknown}")
    return [by_name[n] for n in args.profiles]


def _detectors(args, dataset) -> Optional[qa.Detectors]:
    if bool(args.dae) != bool(args.vae):
        raise ValidationError("--dae and --vae must be given together")
    if not args.dae:
        return None
    return qa.detectors_from_models(dataset, load_model(args.dae), load_model(args.vae))


def _load_values(path: str) -> list[float]:
    """Numbers from a JSON list, a JSON-lines file of predictions, or one number per line."""
    text = Path(path).read_text().strip()
    if not text:
        return []
    if text.startswith("["):
        data = json.loads(text)
        return [float(d["y_pred"] if isinstance(d, dict) else d) for d in data]
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        out.append(float(json.loads(line)["y_pred"]) if line.startswith("{") else float(line))
    return out


# --------------------------------------------------------------------------
# commands

def cmd_phantom_generate(args) -> int:
    cfg = BenchmarkConfig(scale=args.scale, seed=args.seed, grid=_grid(args.grid))
    ds = plan_benchmark(cfg)
    path = save_benchmark(ds, args.out_dir)
    logger.info("wrote %d cases to %s", len(ds), path.parent)
    return EXIT_OK


def cmd_phantom_case(args) -> int:
    domain = DomainTag(DomainKind(args.domain), args.parameter)
    rec = generate_case(args.seed, domain, _grid(args.grid))
    write_volume(rec.volume, args.out_volume)
    write_labelmap(rec.truth, args.out_labels)
    return EXIT_OK


def cmd_phantom_segment(args) -> int:
    profile = _profile(args)
    vol, truth = read_volume(args.volume), read_labelmap(args.truth)
    write_labelmap(segment(profile, vol, truth), args.out)
    return EXIT_OK


def cmd_perturb(args) -> int:
    vol = read_volume(args.input)
    labels = read_labelmap(args.labels) if args.labels else None
    kind = args.kind
    if kind == "noise":
        vol = perturb.add_poisson_noise(vol, args.parameter, args.seed)
    elif kind == "artifact":
        vol = perturb.insert_artifact(vol, args.seed)
    elif kind == "contrast":
        if labels is None:
            raise ValidationError("contrast needs --labels for the heart mask")
        vol = perturb.contrast_enhance(vol, labels.foreground(), args.parameter)
    else:
        if labels is None:
            raise ValidationError(f"{kind} needs --labels")
        if kind == "flip":
            vol, labels = perturb.flip_axis(vol, labels, args.axis)
        elif kind == "resample":
            vol, labels = perturb.resample_degrade(vol, labels, args.parameter)
        elif kind == "deform":
            vol, labels = perturb.deform(vol, labels, args.parameter, args.seed)
    write_volume(vol, args.out)
    if args.out_labels:
        if labels is None:
            raise ValidationError("--out-labels needs --labels")
        write_labelmap(labels, args.out_labels)
    return EXIT_OK


_ENCODER_FIELDS = {f.name for f in fields(EncoderConfig)}


def cmd_train(args) -> int:
    ds = _dataset(args)
    train = ds.records([Split.QA_TRAIN])
    base = DAE_DEFAULTS if args.model == "dae" else VAE_DEFAULTS
    overrides = {k: getattr(args, k) for k in ("epochs", "latent_dim", "batch_size", "lr", "kl_weight")
                 if getattr(args, k) is not None}
    if args.encoder:
        extra = dict(args.encoder)
        bad = set(extra) - _ENCODER_FIELDS
        if bad:
            raise ValidationError(f"unknown encoder settings {sorted(bad)}")
        base = EncoderConfig.from_json({**asdict(base), **extra})
    cfg = replace(base, seed=args.seed, **overrides)
    if args.model == "dae":
        model = train_dae([c.volume for c in train], cfg)
    else:
        model = train_vae([c.truth for c in train], cfg)
    model.save(args.out)
    logger.info("%s best epoch %d -> %s", args.model, model.best_epoch, args.out)
    return EXIT_OK


def cmd_benchmark_run(args) -> int:
    ds = _dataset(args)
    ws = qa.Workspace(ds)
    reports = [qa.run_benchmark(p, ds, ws) for p in _bank(args)]
    _emit({"seed": args.seed, "profiles": reports}, args.out)
    return EXIT_OK


def cmd_commission(args) -> int:
    ds = _dataset(args)
    profile = _profile(args)
    bundle = qa.commission(profile, ds, args.method, detectors=_detectors(args, ds),
                           seed=args.seed, threshold=args.threshold)
    qa.save_bundle(bundle, args.out)
    if args.report:
        _emit(bundle.report, args.report)
    logger.info("commissioned %s (%s): test MAE %.4f", profile.name, args.method,
                bundle.report["test"]["mae"])
    return EXIT_OK


def cmd_predict(args) -> int:
    bundle = qa.load_bundle(args.bundle)
    if len(args.volume) != len(args.segmentation):
        raise ValidationError("give one --segmentation per --volume")
    ids = args.case_id or [Path(v).stem for v in args.volume]
    if len(ids) != len(args.volume):
        raise ValidationError("give one --case-id per --volume")
    out = []
    for i, (v, s, cid) in enumerate(zip(args.volume, args.segmentation, ids)):
        pred = qa.predict_case(bundle, read_volume(v), read_labelmap(s), cid, i)
        out.append(pred.to_json())
    _emit(out, args.out)
    return EXIT_OK


def cmd_monitor(args) -> int:
    if bool(args.bundle) == bool(args.baseline):
        raise ValidationError("give exactly one of --bundle or --baseline")
    baseline = qa.load_bundle(args.bundle) if args.bundle else np.asarray(_load_values(args.baseline))
    stream = _load_values(args.stream)
    reports = qa.monitor(baseline, stream, window=args.window, alpha=args.alpha, delta=args.delta)
    alarms = [r.index for r in reports if r.alarm]
    _emit({"n_stream": len(stream), "n_windows": len(reports), "alarms": alarms,
           "first_alarm": alarms[0] if alarms else None,
           "reports": [r.to_json() for r in reports]}, args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ds = _dataset(args)
    summary = qa.evaluate_framework(_bank(args), ds, detectors=_detectors(args, ds),
                                    methods=tuple(args.methods), seed=args.seed,
                                    threshold=args.threshold)
    _emit(summary, args.out)
    return EXIT_OK


def cmd_features(args) -> int:
    ds = _dataset(args)
    det = _detectors(args, ds) or qa.train_detectors(ds, args.seed)
    ws = qa.Workspace(ds, det)
    profile = _profile(args)
    split = Split(args.split)
    write_features_csv(ws.rows(profile, ds.select([split])), args.out)
    return EXIT_OK


def cmd_regress_fit(args) -> int:
    X, y = design_matrix(read_features_csv(args.features))
    if y is None:
        raise ValidationError("feature file has no dsc_true targets")
    regress.save_model(regress.fit(args.method, X, y, seed=args.seed), args.out)
    return EXIT_OK


def cmd_regress_predict(args) -> int:
    rows = read_features_csv(args.features)
    X, _ = design_matrix(rows)
    model = regress.load_model(args.model)
    pred = regress.predict(model, X)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["case_id", "y_pred", "flag"])
        for r, p in zip(rows, pred):
            w.writerow([r.case_id, repr(float(p)), qa.classify(float(p), args.threshold).value])
    finally:
        if args.out:
            out.close()
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="benchmark directory from 'phantom generate'")
    p.add_argument("--scale", type=float, default=0.5,
                   help="case-count scale when no --data is given (default 0.5)")
    p.add_argument("--grid", default="default", choices=("default", "small"))


def _profile_opts(p: argparse.ArgumentParser, many: bool = False) -> None:
    p.add_argument("--bank-size", type=int, default=19)
    if many:
        p.add_argument("--profiles", nargs="*", default=[], help="profile names (default all)")
    else:
        p.add_argument("--profile", default="atlas-00", help="profile name in the bank")
        p.add_argument("--profile-json", help="profile definition as JSON instead")


def _detector_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dae", help="trained DAE (trained from QA_TRAIN if omitted)")
    p.add_argument("--vae", help="trained shape VAE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segqa", description="Segmentation QA without ground truth")
    sub = parser.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic cases").add_subparsers(dest="action", required=True)
    p = ph.add_parser("generate", help="write a benchmark directory")
    _common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scale", type=float, default=0.5)
    p.add_argument("--grid", default="default", choices=("default", "small"))
    p.set_defaults(func=cmd_phantom_generate)

    p = ph.add_parser("case", help="write one case")
    _common(p)
    p.add_argument("--domain", default="COMMON", choices=[k.value for k in DomainKind])
    p.add_argument("--parameter", type=float, default=None)
    p.add_argument("--grid", default="default", choices=("default", "small"))
    p.add_argument("--out-volume", required=True)
    p.add_argument("--out-labels", required=True)
    p.set_defaults(func=cmd_phantom_case)

    p = ph.add_parser("segment", help="run a segmenter stand-in on one case")
    _common(p)
    _profile_opts(p)
    p.add_argument("--volume", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom_segment)

    p = sub.add_parser("perturb", help="apply one domain transform to a volume")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--labels")
    p.add_argument("--kind", required=True,
                   choices=("noise", "contrast", "flip", "resample", "artifact", "deform"))
    p.add_argument("--parameter", type=float, default=1.0)
    p.add_argument("--axis", default="y", choices=("x", "y", "z"))
    p.add_argument("--out", required=True)
    p.add_argument("--out-labels")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("train", help="train the image DAE or the shape VAE")
    _common(p)
    p.add_argument("model", choices=("dae", "vae"))
    _data_opts(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--kl-weight", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train, encoder=None)

    bm = sub.add_parser("benchmark", help="robustness benchmark").add_subparsers(dest="action", required=True)
    p = bm.add_parser("run", help="per-domain DSC and tests for each profile")
    _common(p)
    _data_opts(p)
    _profile_opts(p, many=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_benchmark_run)

    p = sub.add_parser("commission", help="fit a QA bundle for one segmenter")
    _common(p)
    _data_opts(p)
    _profile_opts(p)
    _detector_opts(p)
    p.add_argument("--method", default="bagging", choices=regress.METHODS)
    p.add_argument("--threshold", type=float, default=qa.DEFAULT_THRESHOLD)
    p.add_argument("--out", required=True, help="bundle file")
    p.add_argument("--report", help="write the commissioning report as JSON")
    p.set_defaults(func=cmd_commission)

    p = sub.add_parser("predict", help="predicted DSC and GOOD/POOR per case")
    _common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--volume", nargs="+", required=True)
    p.add_argument("--segmentation", nargs="+", required=True)
    p.add_argument("--case-id", nargs="*")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("monitor", help="rolling-window drift check on predicted DSC")
    _common(p)
    p.add_argument("--bundle", help="bundle whose baseline to use")
    p.add_argument("--baseline", help="baseline values file instead of a bundle")
    p.add_argument("--stream", required=True,
                   help="predictions: JSON list, JSON lines with y_pred, or one number per line")
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--out")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("evaluate", help="MAE / accuracy / correlations over the profile bank")
    _common(p)
    _data_opts(p)
    _profile_opts(p, many=True)
    _detector_opts(p)
    p.add_argument("--methods", nargs="+", default=list(regress.METHODS), choices=regress.METHODS)
    p.add_argument("--threshold", type=float, default=qa.DEFAULT_THRESHOLD)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("features", help="write the feature CSV of one profile and split")
    _common(p)
    _data_opts(p)
    _profile_opts(p)
    _detector_opts(p)
    p.add_argument("--split", default="QA_TRAIN", choices=[s.value for s in Split])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    rg = sub.add_parser("regress", help="fit / apply a feature regressor").add_subparsers(
        dest="action", required=True)
    p = rg.add_parser("fit")
    _common(p)
    p.add_argument("--features", required=True, help="feature CSV with dsc_true")
    p.add_argument("--method", default="bagging", choices=regress.FEATURE_METHODS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_regress_fit)

    p = rg.add_parser("predict")
    _common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--threshold", type=float, default=qa.DEFAULT_THRESHOLD)
    p.add_argument("--out")
    p.set_defaults(func=cmd_regress_predict)
    return parser


def _leaf_parser(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.ArgumentParser:
    p = parser
    for tok in argv:
        subs = [a for a in p._actions if isinstance(a, argparse._SubParsersAction)]
        if subs and tok in subs[0].choices:
            p = subs[0].choices[tok]
    return p


def _with_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    """Parse twice: the second pass uses the config file's values as defaults."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {args.config} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = sorted(set(cfg) - (set(vars(args)) - {"func", "command", "action", "config"}))
    if unknown:
        raise ValidationError(f"unknown config keys for this command: {unknown}")
    # explicit flags still override these defaults
    _leaf_parser(parser, argv).set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _with_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except NumericError as exc:
        print(f"segqa: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, OSError, KeyError) as exc:
        print(f"segqa: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
