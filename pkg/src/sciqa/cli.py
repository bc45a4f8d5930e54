"""Command-line entry point: ``sciqa {synth,train,eval,stats,check-grads}``.

Configuration is a TOML file of dotted keys (``train.learning_rate = 1e-3``)
and any key can be overridden on the command line as ``--train.learning_rate 3e-3``.
Every run directory gets ``config.json`` (the effective configuration, no
timestamps) and ``meta.json`` (timestamps and versions).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .errors import CheckpointError, ConfigError, ManifestParseError, SciqaError
from .losses import HyperParams
from .model import SUPPORTED_FEATURE_DIMS, ModelConfig
from .training import TrainConfig

log = logging.getLogger("sciqa")

OUTPUT_ROOT_ENV = "SCIQA_OUTPUT_ROOT"
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --- configuration -------------------------------------------------------

SECTIONS = {
    "train": [f.name for f in fields(TrainConfig) if f.name not in ("hyper", "model")],
    "hyper": [f.name for f in fields(HyperParams)],
    "model": ["stage_channels", "convs_per_stage", "feature_dim"],
    "data": ["split_seed", "ratios"],
}
DATA_DEFAULTS = {"split_seed": 0, "ratios": [0.6, 0.2, 0.2]}


def default_config() -> dict:
    t = TrainConfig()
    flat = {f"train.{k}": getattr(t, k) for k in SECTIONS["train"]}
    flat.update({f"hyper.{k}": getattr(t.hyper, k) for k in SECTIONS["hyper"]})
    m = t.model.to_dict()
    flat.update({f"model.{k}": m[k] for k in SECTIONS["model"]})
    flat.update({f"data.{k}": v for k, v in DATA_DEFAULTS.items()})
    return flat


def _flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> dict:
    """Defaults, then the TOML file, then ``--section.key value`` overrides."""
    config = default_config()
    if path:
        try:
            with open(path, "rb") as fh:
                loaded = _flatten(tomllib.load(fh))
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"config {path}: {exc}") from exc
        _check_keys(loaded, path)
        config.update(loaded)
    config.update(parse_overrides(overrides))
    return config


def parse_overrides(items: Sequence[str]) -> dict:
    out, items = {}, list(items)
    i = 0
    while i < len(items):
        tok = items[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        elif i + 1 < len(items):
            i += 1
            raw = items[i]
        else:
            raise UsageError(f"override {tok} needs a value")
        out[key] = _parse_value(raw)
        i += 1
    _check_keys(out, "command line")
    return out


def _check_keys(flat: dict, source: str) -> None:
    known = {f"{s}.{k}" for s, keys in SECTIONS.items() for k in keys}
    unknown = sorted(set(flat) - known)
    if unknown:
        raise UsageError(f"{source}: unknown config keys {unknown}")


def build_train_config(config: dict, class_names=None) -> TrainConfig:
    section = lambda name: {k.split(".", 1)[1]: v for k, v in config.items() if k.startswith(name + ".")}
    model = section("model")
    if model["feature_dim"] not in SUPPORTED_FEATURE_DIMS:
        raise ConfigError(f"model.feature_dim must be one of {SUPPORTED_FEATURE_DIMS}")
    try:
        return TrainConfig(**section("train"), hyper=HyperParams(**section("hyper")),
                           model=ModelConfig(**model, class_names=class_names))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# --- run directories -----------------------------------------------------


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def run_dir(args, command: str) -> Path:
    out = Path(args.out) if args.out else output_root() / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def echo_config(out: Path, command: str, effective: dict, argv: Sequence[str]) -> None:
    write_json(out / "config.json", {"command": command, **effective})
    import numpy
    import torch

    write_json(out / "meta.json", {
        "argv": list(argv), "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "version": __version__, "python": sys.version.split()[0],
        "torch": torch.__version__, "numpy": numpy.__version__,
    })


def print_rows(rows: Sequence[Sequence], header: Sequence[str]) -> None:
    print("\t".join(header))
    for row in rows:
        print("\t".join("" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v)) for v in row))


def _manifest(path: str):
    from .data import load_manifest, normalize_scores

    if not Path(path).is_file():
        raise UsageError(f"manifest not found: {path}")
    return normalize_scores(load_manifest(path))


def _checkpoint(path: str) -> str:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return path


# --- commands ------------------------------------------------------------


def cmd_synth(args, argv) -> int:
    from .data import write_synthetic_corpus

    types = [t.strip() for t in args.types.split(",") if t.strip()]
    out = run_dir(args, "synth")
    manifest = write_synthetic_corpus(out, refs=args.refs, types=types, levels=args.levels,
                                      size=args.size, seed=args.seed, name=args.name, workers=args.workers)
    echo_config(out, "synth", {"refs": args.refs, "types": types, "levels": args.levels, "size": args.size,
                               "seed": args.seed, "name": args.name}, argv)
    print_rows([[len(manifest.pristine), len(manifest.distorted), str(out / "manifest.csv")]],
               ["pristine", "distorted", "manifest"])
    return EXIT_OK


def cmd_train(args, argv, overrides) -> int:
    import torch

    from .data import split_by_reference, write_manifest
    from .evaluation import evaluate_model
    from .training import train

    if args.seed is not None:
        overrides = list(overrides) + ["--train.seed", str(args.seed)]
    config = load_config(args.config, overrides)
    manifest = _manifest(args.manifest)
    cfg = build_train_config(config)
    out = run_dir(args, "train")
    torch.set_num_threads(max(1, args.workers))

    if args.val:
        train_m, val_m, test_m = manifest, _manifest(args.val), None
    else:
        train_m, val_m, test_m = split_by_reference(manifest, tuple(config["data.ratios"]), config["data.split_seed"])
        for part, m in (("train", train_m), ("val", val_m), ("test", test_m)):
            write_manifest(m.relocated(out), out / f"{part}.csv")
    echo_config(out, "train", {**config, "manifest": args.manifest, "val": args.val}, argv)

    model, history = train(train_m, val_m, cfg, out_dir=out)
    summary = history.summary()
    summary["epoch_mae"] = history.epoch_mae()
    rows = [["val", summary["best_epoch"], summary["best_srcc"], None, None]]
    if test_m is not None and test_m.distorted:
        test = evaluate_model(model, test_m)
        summary["test"] = test.overall
        write_json(out / "test_report.json", test.to_dict())
        rows.append(["test", summary["best_epoch"], test.overall["srcc"], test.overall["plcc"], test.overall["rmse"]])
    write_json(out / "summary.json", summary)
    print_rows(rows, ["split", "best_epoch", "srcc", "plcc", "rmse"])
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    from .evaluation import evaluate
    from .plotting import save_scatter

    ckpt = _checkpoint(args.checkpoint)
    manifest = _manifest(args.manifest)
    out = run_dir(args, "eval")
    echo_config(out, "eval", {"checkpoint": ckpt, "manifest": args.manifest, "train_name": args.train_name,
                              "logistic": args.logistic, "per_type": not args.no_per_type}, argv)
    report = evaluate(ckpt, manifest, group_by_type=not args.no_per_type, train_name=args.train_name,
                      logistic=args.logistic)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    if report.predictions:
        save_scatter(report, out / "scatter.png")
    rows = [[report.dataset, "ALL", report.overall["count"], report.overall["srcc"], report.overall["plcc"],
             report.overall["rmse"]]]
    rows += [[report.dataset, t, m["count"], m["srcc"], m["plcc"], m["rmse"]] for t, m in report.per_type.items()]
    print_rows(rows, ["dataset", "type", "count", "srcc", "plcc", "rmse"])
    for s in report.skipped:
        log.warning("skipped %s: %s", s["image"], s["reason"])
    return EXIT_OK


def cmd_stats(args, argv) -> int:
    from .evaluation import stats_report
    from .plotting import save_histograms

    ckpt = _checkpoint(args.checkpoint)
    manifest = _manifest(args.manifest)
    out = run_dir(args, "stats")
    echo_config(out, "stats", {"checkpoint": ckpt, "manifest": args.manifest, "bins": args.bins}, argv)
    bundle = stats_report(ckpt, manifest, bins=args.bins)
    (out / "histograms.json").write_text(bundle.to_json() + "\n", encoding="utf-8")
    save_histograms(bundle, out)
    print_rows([[im["image"], im["distortion_type"], im["distortion_level"], im["mu_mean"], im["sigma_mean"],
                 im["phi_sum"]] for im in bundle.images],
               ["image", "type", "level", "mu_mean", "sigma_mean", "phi_sum"])
    return EXIT_OK


def cmd_check_grads(args, argv, overrides) -> int:
    from .data import sample_triplet_batch, write_synthetic_corpus
    from .model import QualityNet
    from .training import gradient_check

    config = load_config(args.config, overrides)
    out = run_dir(args, "check-grads")
    if args.manifest:
        manifest = _manifest(args.manifest)
    else:
        from .data import normalize_scores

        manifest = normalize_scores(write_synthetic_corpus(out / "probe_corpus", refs=3, levels=2, size=64,
                                                           seed=args.seed))
    mc = {k.split(".", 1)[1]: v for k, v in config.items() if k.startswith("model.")}
    if args.tiny:
        mc.update(stage_channels=[4] * 5, feature_dim=16)
    model = QualityNet(ModelConfig(**mc, class_names=manifest.distortion_types), seed=args.seed)
    hyper = HyperParams(**{k.split(".", 1)[1]: v for k, v in config.items() if k.startswith("hyper.")})
    batch = sample_triplet_batch(manifest, B=args.batch, N=args.patches, seed=args.seed)
    echo_config(out, "check-grads", {**config, "tiny": args.tiny, "n_params": args.n_params,
                                     "seed": args.seed, "batch": args.batch, "patches": args.patches}, argv)
    report = gradient_check(model, batch, hyper, n_params=args.n_params, seed=args.seed, tolerance=args.tolerance)
    write_json(out / "gradcheck.json", report.to_dict())
    print_rows([[len(report.checked), len(report.skipped), report.max_rel_error, report.tolerance,
                 "PASS" if report.passed else "FAIL"]],
               ["checked", "skipped", "max_rel_error", "tolerance", "result"])
    return EXIT_OK if report.passed else EXIT_FAILURE


# --- parser --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sciqa", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help=f"run directory (default ${OUTPUT_ROOT_ENV}/<command> or runs/<command>)")
        sp.add_argument("--workers", type=int, default=1, help="bound on data-pipeline / compute threads")

    s = sub.add_parser("synth", help="write a synthetic screen-content corpus and manifest")
    s.add_argument("--refs", type=int, default=8)
    s.add_argument("--types", default="GN,GB,CC", help="comma-separated distortion types")
    s.add_argument("--levels", type=int, default=3)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--name", default="synthetic")
    common(s)

    t = sub.add_parser("train", help="train a model; splits the manifest by reference unless --val is given",
                       epilog="Any config key can be overridden, e.g. --train.learning_rate 3e-3")
    t.add_argument("--manifest", required=True)
    t.add_argument("--val", help="separate validation manifest")
    t.add_argument("--config", help="TOML file with dotted keys")
    t.add_argument("--seed", type=int, help="shorthand for --train.seed")
    common(t)

    e = sub.add_parser("eval", help="score a manifest with a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--train-name", help="training dataset name for cross-dataset labels")
    e.add_argument("--logistic", action="store_true", help="fit a 4-parameter logistic before PLCC/RMSE")
    e.add_argument("--no-per-type", action="store_true")
    common(e)

    st = sub.add_parser("stats", help="distortion-feature statistics and histograms")
    st.add_argument("--checkpoint", required=True)
    st.add_argument("--manifest", required=True)
    st.add_argument("--bins", type=int, default=40)
    common(st)

    g = sub.add_parser("check-grads", help="finite-difference gradient check of the full objective",
                       epilog="Model/hyper keys can be overridden, e.g. --hyper.lambda2 0")
    g.add_argument("--config")
    g.add_argument("--manifest", help="corpus to draw the probe batch from (default: a small synthetic one)")
    g.add_argument("--tiny", action="store_true", help="4-channel stages and 16-dim features")
    g.add_argument("--n-params", type=int, default=200)
    g.add_argument("--batch", type=int, default=3)
    g.add_argument("--patches", type=int, default=4)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    common(g)
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if extra and args.command not in ("train", "check-grads"):
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        if args.command == "synth":
            return cmd_synth(args, argv)
        if args.command == "train":
            return cmd_train(args, argv, extra)
        if args.command == "eval":
            return cmd_eval(args, argv)
        if args.command == "stats":
            return cmd_stats(args, argv)
        return cmd_check_grads(args, argv, extra)
    except (UsageError, ConfigError, ManifestParseError, CheckpointError) as exc:
        print(f"sciqa {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SciqaError, OSError) as exc:
        print(f"sciqa {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
