"""``acon`` command line: curves, verification suites, training runs and beta histograms.

Every command writes ``manifest.json`` into ``--out-dir`` before doing any
work, then its outputs next to it.  Exit codes: 0 success, 1 verification
failure, 2 usage or configuration error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from fractions import Fraction
from typing import Any, Callable, NamedTuple, Optional

import numpy as np

from . import __version__
from .family import DomainError, acon_c_broadcast, acon_c_dx, acon_c_dxx, derivative_bounds
from .meta import UsageError
from .smoothmax import smooth_max2, smooth_max2_grad
from .tensor import ConfigError, ShapeError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
SEED_ENV = "ACON_SEED"
COMMANDS = ("curve", "verify", "train", "beta-hist")


class CliError(Exception):
    """Usage or configuration problem; reported with exit code 2."""


# ---------------------------------------------------------------- value grammars


def parse_range(text: str) -> tuple[Fraction, Fraction, Fraction]:
    """``lo:hi:step`` with ``lo < hi`` and ``step > 0``, parsed exactly."""
    parts = str(text).split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"range must look like lo:hi:step, got {text!r}")
    try:
        lo, hi, step = (Fraction(p.strip()) for p in parts)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"range bounds must be numbers, got {text!r}") from None
    if not lo < hi:
        raise argparse.ArgumentTypeError(f"range needs lo < hi, got {text!r}")
    if not step > 0:
        raise argparse.ArgumentTypeError(f"range needs step > 0, got {text!r}")
    return lo, hi, step


def range_grid(lo: Fraction, hi: Fraction, step: Fraction) -> np.ndarray:
    """Points ``lo + i*step`` up to ``hi``; ``hi`` is included when it lies on the grid."""
    count = math.floor((hi - lo) / step) + 1
    return np.array([float(lo + i * step) for i in range(count)])


def parse_float_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        items = list(text)
    else:
        items = [t for t in str(text).split(",") if t.strip()]
    try:
        values = [float(t) for t in items]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values or not all(math.isfinite(v) for v in values):
        raise argparse.ArgumentTypeError(f"expected finite numbers, got {text!r}")
    return values


def parse_derivs(text) -> tuple[int, ...]:
    orders = set()
    for t in str(text).split(","):
        t = t.strip()
        if t not in ("0", "1", "2"):
            raise argparse.ArgumentTypeError(f"derivative orders are 0, 1, 2; got {text!r}")
        orders.add(int(t))
    return tuple(sorted(orders))


def parse_shape(text) -> Optional[tuple[int, ...]]:
    if text in (None, ""):
        return None
    if isinstance(text, (list, tuple)):
        dims = list(text)
    else:
        dims = str(text).replace("x", ",").split(",")
    try:
        shape = tuple(int(d) for d in dims)
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like C,H,W; got {text!r}") from None
    if not shape or min(shape) < 1:
        raise argparse.ArgumentTypeError(f"shape extents must be positive, got {text!r}")
    return shape


def finite_float(text) -> float:
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a finite number, got {text!r}")
    return v


def fmt(v: float) -> str:
    """Real64 value with 17 significant digits (round-trips exactly)."""
    return format(float(v), ".17g")


# ---------------------------------------------------------------- option tables


class Opt(NamedTuple):
    flag: str
    type: Callable
    default: Any
    help: str
    choices: Optional[tuple] = None
    switch: bool = False

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


def _common():
    return [
        Opt("--config", str, None, "JSON file of flat dotted keys (flags override it)"),
        Opt("--out-dir", str, ".", "directory for the manifest and outputs"),
        Opt("--seed", int, 0, f"random seed (falls back to ${SEED_ENV})"),
    ]


def _options() -> dict[str, list[Opt]]:
    from .harness.layers import ACTIVATIONS
    from .harness.models import ARCHS
    from .harness.train import SCHEDULES
    from .verify import SUITES

    return {
        "curve": _common() + [
            Opt("--kind", str, "acon-c", "curve family", ("acon-a", "acon-b", "acon-c", "smooth-max2")),
            Opt("--p1", finite_float, 1.0, "ACON-C upper slope"),
            Opt("--p2", finite_float, 0.0, "ACON-C lower slope"),
            Opt("--p", finite_float, 0.25, "ACON-B lower slope"),
            Opt("--b", finite_float, 0.0, "second argument of smooth-max2"),
            Opt("--beta", parse_float_list, [1.0], "switching factor; a comma list gives a sweep"),
            Opt("--range", parse_range, "-6:6:0.5", "grid lo:hi:step (write --range=-6:6:0.5)"),
            Opt("--deriv", parse_derivs, "0,1", "comma list of derivative orders to emit"),
            Opt("--bounds", bool, False, "also write the first-derivative extremes to bounds.json",
                switch=True),
        ],
        "verify": _common() + [
            Opt("--suite", str, "all", "property suite", SUITES + ("all",)),
            Opt("--tol", finite_float, 1e-6, "relative tolerance for gradient checks"),
            Opt("--p1", finite_float, None, "p1 for the bounds suite"),
            Opt("--p2", finite_float, None, "p2 for the bounds suite"),
            Opt("--beta", finite_float, None, "beta for the bounds suite"),
            Opt("--corrupt-gradient", bool, False, "self-test: perturb one analytic gradient",
                switch=True),
        ],
        "train": _common() + [
            Opt("--arch", str, "mlp", "network family", ARCHS),
            Opt("--data", str, "spiral", "built-in dataset (spiral, blobs, bars) or CSV file/directory"),
            Opt("--data-seed", int, 0, "seed of the synthetic dataset generator"),
            Opt("--feature-shape", parse_shape, None, "C,H,W of CSV features (flat when omitted)"),
            Opt("--activation", str, "acon-c", "activation used throughout the network", ACTIVATIONS),
            Opt("--width", finite_float, 64.0, "hidden width (mlp/convnet/resnet-mini) or TFNet multiplier"),
            Opt("--reduction-r", int, 16, "bottleneck divisor of the channel-wise beta generator"),
            Opt("--steps", int, 2000, "SGD steps"),
            Opt("--lr", finite_float, 0.1, "initial learning rate"),
            Opt("--schedule", str, "cosine", "learning-rate schedule", SCHEDULES),
            Opt("--weight-decay", finite_float, 1e-4, "L2 decay on weights (not on ACON parameters)"),
            Opt("--batch", int, 64, "mini-batch size"),
            Opt("--momentum", finite_float, 0.9, "heavy-ball momentum"),
            Opt("--dtype", str, "float64", "parameter dtype", ("float32", "float64")),
        ],
        "beta-hist": _common() + [
            Opt("--checkpoint", str, None, "checkpoint written by 'acon train'"),
            Opt("--data", str, "spiral", "dataset to draw samples from"),
            Opt("--data-seed", int, 0, "seed of the synthetic dataset generator"),
            Opt("--feature-shape", parse_shape, None, "C,H,W of CSV features"),
            Opt("--layer", int, None, "layer index (default: last ACON-type activation)"),
            Opt("--samples", int, 7, "number of distinct samples"),
            Opt("--bins", int, 20, "fixed-width histogram bins"),
        ],
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acon", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"acon {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)
    helps = {
        "curve": "emit an activation curve and its derivatives as CSV",
        "verify": "run analytic/numeric property suites, JSON report",
        "train": "train a small network, write metrics CSV and checkpoint",
        "beta-hist": "per-sample beta histograms of one activation layer",
    }
    for name, opts in _options().items():
        sp = subs.add_parser(name, help=helps[name])
        for o in opts:
            if o.switch:
                sp.add_argument(o.flag, action="store_true", default=None, help=o.help)
            else:
                # Defaults are applied after merging the config file, so
                # argparse only records what was given on the command line.
                sp.add_argument(o.flag, type=o.type, default=None, choices=o.choices,
                                metavar=o.dest.upper(), help=f"{o.help} (default: {o.default})")
    return parser


def _coerce(o: Opt, value, origin: str):
    """Validate a config-file value with the same grammar as its flag."""
    if o.switch:
        if not isinstance(value, bool):
            raise CliError(f"{origin}: {o.flag} expects true/false, got {value!r}")
        return value
    listy = o.type in (parse_float_list, parse_shape)
    if isinstance(value, (bool, dict)) or (isinstance(value, list) and not listy):
        raise CliError(f"{origin}: bad value for {o.flag}: {value!r}")
    if o.type is int and isinstance(value, float):
        if not value.is_integer():
            raise CliError(f"{origin}: {o.flag} expects an integer, got {value!r}")
        value = int(value)
    try:
        v = o.type(value)
    except (argparse.ArgumentTypeError, ValueError, TypeError) as exc:
        raise CliError(f"{origin}: bad value for {o.flag}: {exc}") from None
    if o.choices is not None and v not in o.choices:
        raise CliError(f"{origin}: {o.flag} must be one of {', '.join(o.choices)}, got {v!r}")
    return v


def load_config_file(path: str, command: str, opts: list[Opt]) -> dict:
    """Flat dotted keys; the last component names the option, e.g. ``train.lr`` or ``model.arch``.

    Keys whose first component is a different command are skipped so one
    file can hold settings for several commands.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path!r}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path!r} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise CliError(f"config {path!r} must be a JSON object")
    by_dest = {o.dest: o for o in opts}
    out = {}
    for key, value in raw.items():
        parts = str(key).split(".")
        if len(parts) > 1 and parts[0] in COMMANDS and parts[0] != command:
            continue
        dest = parts[-1].replace("-", "_")
        if dest not in by_dest or dest == "config":
            raise CliError(f"config {path!r}: unknown key {key!r} for '{command}'")
        out[dest] = _coerce(by_dest[dest], value, f"config {path!r}")
    return out


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults < environment seed < config file < command-line flags."""
    opts = _options()[command]
    resolved = {o.dest: o.default for o in opts}
    for o in opts:
        if not o.switch and isinstance(o.default, str) and o.type is not str:
            resolved[o.dest] = o.type(o.default)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            resolved["seed"] = int(env_seed)
        except ValueError:
            raise CliError(f"${SEED_ENV} must be an integer, got {env_seed!r}") from None
    if ns.config is not None:
        resolved.update(load_config_file(ns.config, command, opts))
    for o in opts:
        v = getattr(ns, o.dest)
        if v is not None:
            resolved[o.dest] = v
    resolved["config"] = ns.config
    return resolved


# ---------------------------------------------------------------- manifest and files


def _jsonable(v):
    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    return v


def write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def write_manifest(command: str, cfg: dict, outputs: dict[str, str]) -> str:
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.json")
    resolved = {k: _jsonable(v) for k, v in cfg.items()}
    if isinstance(cfg.get("range"), tuple):
        lo, hi, step = cfg["range"]
        resolved["range"] = f"{float(lo)!r}:{float(hi)!r}:{float(step)!r}"
    write_json(path, {
        "command": command,
        "config": resolved,
        "seed": cfg["seed"],
        "tool": "acon",
        "version": __version__,
        "outputs": outputs,
    })
    return path


def _csv_writer(fh):
    return csv.writer(fh, lineterminator="\n")


# ---------------------------------------------------------------- commands


def _curve_columns(kind, xs, cfg, beta):
    if kind == "smooth-max2":
        b = cfg["b"]
        f = smooth_max2(xs, b, beta)
        df = smooth_max2_grad(xs, b, beta)[0]
        d2f = acon_c_dxx(xs - b, 1.0, 0.0, beta)
        return f, df, d2f
    p1, p2 = {"acon-a": (1.0, 0.0), "acon-b": (1.0, cfg["p"]), "acon-c": (cfg["p1"], cfg["p2"])}[kind]
    return (acon_c_broadcast(xs, p1, p2, beta), acon_c_dx(xs, p1, p2, beta), acon_c_dxx(xs, p1, p2, beta))


def cmd_curve(cfg: dict) -> int:
    kind, betas, orders = cfg["kind"], cfg["beta"], cfg["deriv"]
    out_csv = os.path.join(cfg["out_dir"], "curve.csv")
    outputs = {"curve": out_csv}
    bounds = None
    if cfg["bounds"]:
        p1, p2 = {"acon-a": (1.0, 0.0), "acon-b": (1.0, cfg["p"]), "acon-c": (cfg["p1"], cfg["p2"]),
                  "smooth-max2": (1.0, 0.0)}[kind]
        try:
            bounds = [dict(beta=b, **derivative_bounds(p1, p2, b).__dict__) for b in betas]
        except DomainError as exc:
            raise CliError(str(exc)) from None
        outputs["bounds"] = os.path.join(cfg["out_dir"], "bounds.json")
    write_manifest("curve", cfg, outputs)
    xs = range_grid(*cfg["range"])
    names = [("f", "df", "d2f")[k] for k in orders]
    sweep = len(betas) > 1
    with open(out_csv, "w", encoding="utf-8", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow((["beta"] if sweep else []) + ["x"] + names)
        for beta in betas:
            cols = _curve_columns(kind, xs, cfg, beta)
            for i, x in enumerate(xs):
                row = [fmt(x)] + [fmt(cols[k][i]) for k in orders]
                w.writerow(([fmt(beta)] if sweep else []) + row)
    if bounds is not None:
        write_json(outputs["bounds"], bounds)
    return EXIT_OK


def cmd_verify(cfg: dict) -> int:
    from .verify import report_passed, run_suite

    out_json = os.path.join(cfg["out_dir"], "verify.json")
    given = [cfg[k] for k in ("p1", "p2", "beta")]
    bounds_params = None
    if any(v is not None for v in given):
        p1 = 1.0 if cfg["p1"] is None else cfg["p1"]
        p2 = 0.0 if cfg["p2"] is None else cfg["p2"]
        beta = 1.0 if cfg["beta"] is None else cfg["beta"]
        if p1 == p2 or not beta > 0:
            raise CliError(f"bounds need p1 != p2 and beta > 0, got p1={p1} p2={p2} beta={beta}")
        bounds_params = [(p1, p2, beta)]
    if not cfg["tol"] > 0:
        raise CliError("--tol must be positive")
    write_manifest("verify", cfg, {"report": out_json})
    reports = run_suite(cfg["suite"], cfg["seed"], cfg["tol"], bounds_params, cfg["corrupt_gradient"])
    passed = all(report_passed(r) for r in reports)
    write_json(out_json, {
        "suite": cfg["suite"],
        "seed": cfg["seed"],
        "passed": passed,
        "results": [r.to_dict() for r in reports],
    })
    for r in reports:
        name = getattr(r, "target", None) or r.property_id
        print(f"{'PASS' if report_passed(r) else 'FAIL'} {name}")
    return EXIT_OK if passed else EXIT_FAIL


def _dataset(cfg, dtype):
    from .harness.data import DatasetError, get_dataset

    try:
        return get_dataset(cfg["data"], cfg["data_seed"], cfg["feature_shape"], dtype)
    except (DatasetError, ConfigError) as exc:
        raise CliError(str(exc)) from None


def cmd_train(cfg: dict) -> int:
    from .harness.checkpoint import write_checkpoint
    from .harness.models import build_model
    from .harness.train import TrainConfig, TrainingDiverged, train

    out = cfg["out_dir"]
    paths = {"metrics": os.path.join(out, "metrics.csv"), "epochs": os.path.join(out, "epochs.csv"),
             "checkpoint": os.path.join(out, "model.ckpt"), "summary": os.path.join(out, "summary.json")}
    try:
        tcfg = TrainConfig(lr=cfg["lr"], schedule=cfg["schedule"], weight_decay=cfg["weight_decay"],
                           batch=cfg["batch"], steps=cfg["steps"], seed=cfg["seed"],
                           momentum=cfg["momentum"], activation=cfg["activation"])
    except ConfigError as exc:
        raise CliError(str(exc)) from None
    dtype = np.dtype(cfg["dtype"])
    data = _dataset(cfg, dtype)
    try:
        net = build_model(cfg["arch"], data.feature_shape, data.num_classes, cfg["activation"], cfg["width"],
                          rng=np.random.default_rng(cfg["seed"]), dtype=dtype, reduction_r=cfg["reduction_r"])
    except (ConfigError, ShapeError, ValueError) as exc:
        raise CliError(f"cannot build {cfg['arch']}: {exc}") from None
    write_manifest("train", cfg, paths)

    with open(paths["metrics"], "w", encoding="utf-8", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["step", "lr", "loss", "accuracy"])

        def on_step(m):
            w.writerow([m.step, fmt(m.lr), fmt(m.loss), fmt(m.accuracy)])

        try:
            result = train(net, data, tcfg, on_step)
        except TrainingDiverged as exc:
            fh.flush()
            print(f"acon train: diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        except ConfigError as exc:
            raise CliError(str(exc)) from None
    with open(paths["epochs"], "w", encoding="utf-8", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["epoch", "accuracy"])
        for epoch, acc in result.epoch_accuracy:
            w.writerow([epoch, fmt(acc)])
    write_checkpoint(paths["checkpoint"], net)
    write_json(paths["summary"], {"final_accuracy": result.final_accuracy, "steps": tcfg.steps})
    print(f"final training accuracy {result.final_accuracy:.4f}")
    return EXIT_OK


def cmd_beta_hist(cfg: dict) -> int:
    from .harness.checkpoint import CheckpointError, read_checkpoint
    from .harness.layers import Acon, AconFReLU, MetaAcon
    from .harness.network import collect_beta_histogram

    if cfg["checkpoint"] is None:
        raise CliError("--checkpoint is required")
    if cfg["bins"] < 1 or cfg["samples"] < 1:
        raise CliError("--bins and --samples must be positive")
    try:
        net = read_checkpoint(cfg["checkpoint"])
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {cfg['checkpoint']!r}: {exc.strerror}") from None
    except CheckpointError as exc:
        raise CliError(f"{cfg['checkpoint']}: {exc}") from None
    data = _dataset(cfg, net.dtype)
    if data.feature_shape != net.input_shape:
        raise CliError(f"dataset features {data.feature_shape} do not match network input {net.input_shape}")
    layer = cfg["layer"]
    if layer is None:
        kinds = (Acon, AconFReLU, MetaAcon)
        found = [i for i, lay in enumerate(net.layers) if isinstance(lay, kinds)]
        if not found:
            raise CliError("network has no ACON-type activation layer")
        layer = found[-1]
    if cfg["samples"] > len(data):
        raise CliError(f"asked for {cfg['samples']} samples, dataset has {len(data)}")
    idx = np.sort(np.random.default_rng(cfg["seed"]).choice(len(data), cfg["samples"], replace=False))
    cfg = {**cfg, "layer": layer}
    out_csv = os.path.join(cfg["out_dir"], "beta_hist.csv")
    write_manifest("beta-hist", {**cfg, "sample_indices": idx.tolist()}, {"histogram": out_csv})
    try:
        hist = collect_beta_histogram(net, data.x[idx], layer, cfg["bins"])
    except UsageError as exc:
        raise CliError(str(exc)) from None
    with open(out_csv, "w", encoding="utf-8", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["sample_id", "bin_lo", "bin_hi", "count"])
        for sid, lo, hi, count in hist.rows():
            w.writerow([sid, fmt(lo), fmt(hi), count])
    return EXIT_OK


HANDLERS = {"curve": cmd_curve, "verify": cmd_verify, "train": cmd_train, "beta-hist": cmd_beta_hist}


def _join_range(argv: list[str]) -> list[str]:
    # "--range -6:6:0.5" would otherwise read the negative bound as a flag.
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--range" and i + 1 < len(argv):
            out.append(f"--range={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv: Optional[list[str]] = None) -> int:
    argv = _join_range(list(sys.argv[1:] if argv is None else argv))
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        cfg = resolve(ns.command, ns)
        return HANDLERS[ns.command](cfg)
    except CliError as exc:
        print(f"acon {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
