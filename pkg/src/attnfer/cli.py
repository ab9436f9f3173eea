"""Command-line entry point: ``attnfer {params,gradcheck,train,eval,eca-table,plot}``.

Exit codes: 0 ok, 1 verification failure, 2 usage/config error,
3 expectation mismatch, 4 numeric abort.
"""

import argparse
import json
import os
import sys

import numpy as np

from .attention import eca_kernel_size
from .config import format_kv, read_kv_file
from .data import load_fer2013_csv, load_pgm_dir, preprocess, synthetic_dataset
from .errors import AttnferError, BadChannelCount, NonFinite
from .gradcheck import SUITES, run_suite
from .models import SPEC_KEYS, ModelSpec, build_model, count_params, init_params, load_checkpoint, save_checkpoint
from .train import TrainConfig, evaluate, fit

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_MISMATCH, EXIT_NUMERIC = 0, 1, 2, 3, 4

PARAMS_HEADER = ("family", "depth", "attention", "integration", "params", "params_m")

TRAIN_KEYS = ("lr", "momentum", "weight_decay", "batch_size", "epochs", "seed", "shuffle")
DATA_KEYS = (
    "dataset",
    "val_dataset",
    "usage",
    "val_usage",
    "resize",
    "data_seed",
    "synthetic_classes",
    "synthetic_per_class",
    "synthetic_noise",
)
RUN_KEYS = ("out", "repeats", "plot")
RUN_DEFAULTS = {
    "lr": "0.01",
    "momentum": "0.9",
    "weight_decay": "0",
    "batch_size": "10",
    "epochs": "10",
    "seed": "0",
    "shuffle": "true",
    "dataset": "synthetic",
    "val_dataset": "",
    "usage": "Training",
    "val_usage": "PublicTest",
    "resize": "true",
    "data_seed": "1",
    "synthetic_classes": "",
    "synthetic_per_class": "10",
    "synthetic_noise": "0.1",
    "out": "runs",
    "repeats": "1",
    "plot": "false",
}


class UsageError(AttnferError):
    pass


def _bool(value):
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {value!r}")


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


def resolve_config(path=None, overrides=()):
    """Merge defaults, the config file and ``key=value`` overrides; unknown keys are rejected."""
    cfg = dict(RUN_DEFAULTS)
    cfg.update(ModelSpec().to_mapping())
    del cfg["mlp_activation"]  # follows the global activation unless set
    if path is not None:
        cfg.update(read_kv_file(path))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override must be key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        cfg[k] = v
    cfg.setdefault("mlp_activation", cfg["activation"])
    allowed = set(SPEC_KEYS) | set(TRAIN_KEYS) | set(DATA_KEYS) | set(RUN_KEYS)
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def spec_from_config(cfg):
    return ModelSpec.from_mapping({k: cfg[k] for k in SPEC_KEYS if k in cfg})


def train_config_from(cfg, seed_offset=0):
    try:
        return TrainConfig(
            lr=float(cfg["lr"]),
            momentum=float(cfg["momentum"]),
            weight_decay=float(cfg["weight_decay"]),
            batch_size=int(cfg["batch_size"]),
            epochs=int(cfg["epochs"]),
            seed=int(cfg["seed"]) + seed_offset,
            shuffle=_bool(cfg["shuffle"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _fit_to_spec(batch, spec, resize):
    c, h, w = spec.input_shape
    if resize:
        images = preprocess(batch.images, (h, w), c)
    else:
        images = batch.images
        if images.shape[1] == 1 and c == 3:
            images = np.repeat(images, 3, axis=1)
    if images.shape[1:] != spec.input_shape:
        raise UsageError(f"dataset images {images.shape[1:]} do not match model input {spec.input_shape}")
    batch.images = images
    return batch


def load_dataset(cfg, spec, which="train"):
    """The ``train``, ``val`` or ``eval`` split described by ``cfg`` (``None`` when absent).

    ``eval`` reads ``dataset`` itself but with the held-out usage / synthetic seed.
    """
    source = (cfg["val_dataset"] or cfg["dataset"]) if which == "val" else cfg["dataset"]
    resize = _bool(cfg["resize"])
    if source == "synthetic":
        c, h, w = spec.input_shape
        classes = int(cfg["synthetic_classes"] or spec.classes)
        seed = int(cfg["data_seed"]) + (0 if which == "train" else 1)
        return synthetic_dataset(
            classes, int(cfg["synthetic_per_class"]), (h, w), seed, float(cfg["synthetic_noise"]), c
        )
    if which == "val" and not cfg["val_dataset"] and os.path.isdir(source):
        return None
    if not os.path.exists(source):
        raise UsageError(f"dataset path {source!r} does not exist")
    if os.path.isdir(source):
        batch = load_pgm_dir(source, target=None if not resize else spec.input_shape[1:], channels=1)
    else:
        usage = cfg["usage"] if which == "train" else cfg["val_usage"]
        batch = load_fer2013_csv(source, usage)
        if len(batch) == 0:
            if which == "val":
                return None
            raise UsageError(f"no rows with Usage={usage} in {source}")
    if int(batch.labels.max()) >= spec.classes:
        raise UsageError(f"dataset has labels up to {int(batch.labels.max())} but the model has {spec.classes} classes")
    return _fit_to_spec(batch, spec, resize)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _add_spec_flags(p):
    p.add_argument("--family", default="vgg", choices=["vgg", "resnet", "resnetv2"])
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--attention", default="none", choices=["none", "se", "eca", "cbam"])
    p.add_argument("--r", type=int, default=16, help="reduction ratio for SE/CBAM")
    p.add_argument("--integration", default="m2", choices=["m1", "m2", "m3"])
    p.add_argument("--classes", type=int, default=7)
    p.add_argument("--input", default="3x80x80", help="CxHxW")
    p.add_argument("--activation", default="elu", choices=["relu", "elu", "selu"])
    p.add_argument("--fc", default="4096,4096", help="VGG hidden FC widths")
    p.add_argument("--eca-k", default="adaptive")
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--spatial-kernel", type=int, default=7)


def _spec_from_args(args):
    depth = args.depth if args.depth is not None else (16 if args.family == "vgg" else 50)
    return ModelSpec.from_mapping(
        {
            "family": args.family,
            "depth": str(depth),
            "attention": args.attention,
            "r": str(args.r),
            "integration": args.integration,
            "classes": str(args.classes),
            "input": args.input,
            "activation": args.activation,
            "fc_widths": args.fc,
            "eca_k": args.eca_k,
            "eca_gamma": str(args.gamma),
            "eca_b": str(args.b),
            "spatial_kernel": str(args.spatial_kernel),
        }
    )


def format_params_table(spec, n):
    depth = "custom" if spec.depth is None else str(spec.depth)
    integration = spec.integration if spec.family == "vgg" else "-"
    row = (spec.family, depth, spec.attention.kind, integration, str(n), f"{n / 1e6:.2f}")
    return "\t".join(PARAMS_HEADER) + "\n" + "\t".join(row) + "\n"


def parse_params_table(text):
    """Rows of a ``params`` table as dicts (``params`` as int)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split("\t")
    if tuple(header) != PARAMS_HEADER:
        raise ValueError(f"unexpected header {header}")
    rows = []
    for ln in lines[1:]:
        row = dict(zip(header, ln.split("\t")))
        row["params"] = int(row["params"])
        rows.append(row)
    return rows


def within_expectation(count, expect_millions, tol_pct):
    return abs(count - expect_millions * 1e6) <= tol_pct / 100.0 * expect_millions * 1e6


def cmd_params(args):
    expect = None
    if args.expect is not None:
        try:
            expect = float(str(args.expect).rstrip("mM"))
        except ValueError:
            raise UsageError(f"--expect needs a number of millions, got {args.expect!r}") from None
    spec = _spec_from_args(args)
    n = count_params(build_model(spec))
    sys.stdout.write(format_params_table(spec, n))
    if expect is not None:
        dev = 100.0 * (n - expect * 1e6) / (expect * 1e6)
        ok = within_expectation(n, expect, args.tol)
        print(f"expect {expect:.2f}M tol {args.tol}%: deviation {dev:+.3f}% {'OK' if ok else 'MISMATCH'}", file=sys.stderr)
        if not ok:
            return EXIT_MISMATCH
    return EXIT_OK


def cmd_eca_table(args):
    bad = [c for c in args.channels if c < 1]
    if bad:
        raise BadChannelCount(f"channel count must be >= 1, got {bad[0]}")
    print("channels\tk")
    for c in args.channels:
        k = args.fixed_k if args.fixed_k is not None else eca_kernel_size(c, args.gamma, args.b)
        print(f"{c}\t{k}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_suite(args.scope, seed=args.seed, seeds=args.seeds, max_coords=args.max_coords, fault=args.inject_fault)
    for name, report in results:
        print(f"{name}\t{report.summary()}")
    worst_name, worst = max(results, key=lambda nr: (not nr[1].passed, nr[1].max_rel_err / nr[1].tolerance))
    failed = [n for n, r in results if not r.passed]
    print(f"worst\t{worst_name}\t{worst.summary()}")
    print(f"{args.scope}: {len(results) - len(failed)}/{len(results)} passed")
    return EXIT_VERIFY if failed else EXIT_OK


def _summary_line(accs):
    per_run = ", ".join(f"{a:.6f}" for a in accs)
    return f'{{"acc": {max(accs):.6f}, "per_run": [{per_run}], "runs": {len(accs)}}}'


def cmd_train(args):
    overrides = list(args.set or [])
    for key in ("seed", "repeats", "out", "epochs"):
        value = getattr(args, key)
        if value is not None:
            overrides.append(f"{key}={value}")
    if args.plot:
        overrides.append("plot=true")
    cfg = resolve_config(args.config, overrides)
    spec = spec_from_config(cfg)
    repeats = int(cfg["repeats"])
    if repeats < 1:
        raise UsageError("repeats must be >= 1")
    train_data = load_dataset(cfg, spec, "train")
    val_data = load_dataset(cfg, spec, "val")
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    resolved = format_kv(cfg)
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(resolved)
    sys.stderr.write(resolved)
    accs = []
    for run in range(repeats):
        tcfg = train_config_from(cfg, run)
        run_dir = os.path.join(out, f"run{run}")
        os.makedirs(run_dir, exist_ok=True)
        model = build_model(spec)
        init_params(model, tcfg.seed)
        log_path = os.path.join(run_dir, "log.tsv")
        with open(log_path, "w") as log:
            fit(model, train_data, tcfg, val_data, log)
        save_checkpoint(model, os.path.join(run_dir, "model.ckpt"))
        final = evaluate(model, val_data if val_data is not None else train_data, tcfg.batch_size)
        accs.append(final.accuracy)
        if _bool(cfg["plot"]):
            from .report import plot_curves

            plot_curves({f"run{run}": log_path}, os.path.join(run_dir, "curves.png"), title=f"{spec.family} / {spec.attention.kind}")
    summary = _summary_line(accs)
    with open(os.path.join(out, "summary.json"), "w") as fh:
        fh.write(summary + "\n")
    print(summary)
    return EXIT_OK


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    cfg = resolve_config(args.config, list(args.set or []) + ([f"dataset={args.dataset}"] if args.dataset else []))
    data = load_dataset(cfg, model.spec, "eval")
    if data is None:
        raise UsageError("no evaluation split found")
    m = evaluate(model, data)
    print("loss\taccuracy\tper_class_accuracy")
    print(f"{m.loss:.6f}\t{m.accuracy:.6f}\t" + ",".join(f"{a:.6f}" for a in m.per_class_accuracy))
    return EXIT_OK


def cmd_plot(args):
    from .report import plot_curves

    logs = {os.path.basename(os.path.dirname(os.path.abspath(p))) or p: p for p in args.logs}
    plot_curves(logs, args.output, args.title)
    print(args.output)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="attnfer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", help="print the parameter count of a backbone")
    _add_spec_flags(p)
    p.add_argument("--expect", default=None, help="expected count in millions, e.g. 23.49 or 23.49M")
    p.add_argument("--tol", type=float, default=1.0, help="tolerance in percent")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("eca-table", help="adaptive ECA kernel size per channel count")
    p.add_argument("channels", type=int, nargs="+")
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--fixed-k", type=int, default=None)
    p.set_defaults(func=cmd_eca_table)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("scope", choices=sorted(SUITES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--max-coords", type=int, default=200)
    p.add_argument("--inject-fault", type=float, default=None, metavar="SCALE", help="scale every backward by SCALE")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train from a key = value config")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--plot", action="store_true", help="also render curves.png next to each log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render training curves from TSV logs")
    p.add_argument("logs", nargs="+")
    p.add_argument("-o", "--output", default="curves.png")
    p.add_argument("--title", default=None)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NonFinite as exc:
        print(f"error: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AttnferError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
