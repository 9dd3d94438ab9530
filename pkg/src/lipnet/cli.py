"""``lipnet`` command-line front end.

Sub-commands: gen-data, train, predict, audit, project, lipcheck.
Exit codes: 0 success, 1 usage, 2 runtime/numeric failure, 3 I/O failure.
Every failure prints a single ``lipnet: error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from pathlib import Path

import numpy as np

from .constraint import ConstraintConfig, constrain_network, strict_project
from .errors import ConfigError, FormatError, LipnetError
from .layers import Network, mlp, spread_kinks
from .modelio import (
    gen_synthetic,
    load_model,
    read_xy_csv,
    save_model,
    write_predictions_csv,
)
from .norms import INF, NormKind, audit, empirical_lipschitz, network_lipschitz, parse_norm, write_report_csv
from .optim import TrainConfig, make_optimizer, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3

# Synthetic-figure recipe. The source experiment does not state optimizer,
# epochs or init, so these are documented defaults.
_BASE_PRESET = {
    "architecture": {
        "input_dim": 1,
        "hidden": 128,
        "depth": 2,
        "output_dim": 1,
        "init": "glorot",
        "first_layer_gain": 1.0,
        "kink_range": None,
    },
    "epochs": 500,
    "batch_size": 32,
    "seed": 0,
    "optimizer": {"kind": "amsgrad", "lr": 1e-3},
    "lr_schedule": [[400, 0.1]],
    "shuffle": True,
    "power_iters_train": 1,
    "strict_final": False,
}

PRESETS = {
    "desk": _BASE_PRESET,
    "paper": {**_BASE_PRESET, "architecture": {**_BASE_PRESET["architecture"], "hidden": 1000}},
    # Long schedule with kink-spread init used for the unconstrained fit at
    # desk scale; see README.
    "desk-fit": {
        **_BASE_PRESET,
        "architecture": {
            **_BASE_PRESET["architecture"],
            "init": "kink_spread",
            "first_layer_gain": 100.0,
            "kink_range": [-5.0, 5.0],
        },
        "epochs": 6000,
        "lr_schedule": [[4800, 0.1]],
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# argument helpers


def parse_lambda(text: str) -> float:
    if str(text).strip().lower() in ("inf", "infinity", "unbounded"):
        return INF
    try:
        lam = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"lambda must be a positive number or 'inf', got {text!r}") from None
    if not (lam > 0 and math.isfinite(lam)):
        raise argparse.ArgumentTypeError(f"lambda must be a positive number or 'inf', got {text!r}")
    return lam


def parse_range(text: str, with_count: bool = False):
    parts = str(text).split(":")
    want = 3 if with_count else 2
    if len(parts) != want:
        raise argparse.ArgumentTypeError(f"expected {'lo:hi:count' if with_count else 'lo:hi'}, got {text!r}")
    try:
        lo, hi = float(parts[0]), float(parts[1])
        count = int(parts[2]) if with_count else None
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed range {text!r}") from None
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise argparse.ArgumentTypeError(f"range needs finite lo < hi, got {text!r}")
    if with_count:
        if count < 1:
            raise argparse.ArgumentTypeError(f"grid count must be positive, got {count}")
        return lo, hi, count
    return lo, hi


def _norm_arg(text: str) -> str:
    try:
        return parse_norm(text).label
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _p_arg(text: str):
    key = str(text).strip().lower()
    if key == "all":
        return "all"
    try:
        return parse_norm(key).p
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _add_norm_flags(p: argparse.ArgumentParser, required: bool):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--norm", type=_norm_arg, help="l1, l2 or linf")
    g.add_argument("--l1", dest="norm", action="store_const", const="l1")
    g.add_argument("--l2", dest="norm", action="store_const", const="l2")
    g.add_argument("--linf", dest="norm", action="store_const", const="linf")


# ---------------------------------------------------------------------------
# configuration


def load_config(spec: str | None) -> dict:
    """A preset name or a JSON file whose keys override the ``desk`` preset."""
    if spec is None:
        return copy.deepcopy(PRESETS["desk"])
    if spec in PRESETS:
        return copy.deepcopy(PRESETS[spec])
    try:
        user = json.loads(Path(spec).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{spec}: malformed JSON: {exc}") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{spec}: config must be a JSON object")
    base = copy.deepcopy(PRESETS[user.pop("preset", "desk")]) if user.get("preset", "desk") in PRESETS else None
    if base is None:
        raise ConfigError(f"{spec}: unknown preset {user['preset']!r}")
    arch = user.pop("architecture", {})
    unknown = set(user) - set(base) - {"norm", "lambda"}
    if unknown:
        raise ConfigError(f"{spec}: unknown config keys {sorted(unknown)}")
    bad_arch = set(arch) - set(base["architecture"])
    if bad_arch:
        raise ConfigError(f"{spec}: unknown architecture keys {sorted(bad_arch)}")
    base["architecture"].update(arch)
    base.update(user)
    return base


def build_network(arch: dict, rng: np.random.Generator, data_range=None) -> Network:
    try:
        sizes = [int(arch["input_dim"])] + [int(arch["hidden"])] * int(arch["depth"]) + [int(arch["output_dim"])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad architecture: {exc}") from None
    if min(sizes) < 1:
        raise ConfigError(f"layer sizes must be positive, got {sizes}")
    net = mlp(sizes, rng)
    init = arch.get("init", "glorot")
    if init == "kink_spread":
        first = net.layers[0]
        kr = arch.get("kink_range") or data_range
        if kr is None:
            raise ConfigError("kink_spread init needs kink_range or training data")
        spread_kinks(first, float(kr[0]), float(kr[1]), rng, float(arch.get("first_layer_gain", 1.0)))
    elif init != "glorot":
        raise ConfigError(f"unknown init {init!r}")
    return net


def train_config(cfg: dict, constraint: ConstraintConfig | None, seed: int | None = None) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=int(cfg["epochs"]),
            batch_size=int(cfg["batch_size"]),
            seed=int(cfg["seed"] if seed is None else seed),
            optimizer=make_optimizer(cfg["optimizer"]),
            lr_schedule=[(int(e), float(m)) for e, m in cfg.get("lr_schedule", [])],
            constraint=constraint,
            shuffle=bool(cfg.get("shuffle", True)),
            track_bound=constraint is not None,
            strict_final=bool(cfg.get("strict_final", False)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad training config: {exc}") from None


def run_training(cfg: dict, data, norm: str | None, lam: float, seed: int | None = None):
    """Build the configured network and train it; returns ``(net, history)``."""
    seed = int(cfg["seed"] if seed is None else seed)
    init_rng = np.random.default_rng(seed)
    lo, hi = float(np.min(data.inputs)), float(np.max(data.inputs))
    net = build_network(cfg["architecture"], init_rng, (lo, hi))
    constraint = None
    if norm is not None:
        constraint = ConstraintConfig(lam, parse_norm(norm), int(cfg.get("power_iters_train", 1)))
    return train(net, data, train_config(cfg, constraint, seed))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    ds = gen_synthetic(args.n, args.lo, args.hi, args.seed)
    write_predictions_csv(ds.inputs, ds.targets, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg["epochs"] = args.epochs
    if args.hidden is not None:
        cfg["architecture"]["hidden"] = args.hidden
    norm = args.norm or cfg.get("norm")
    lam = args.lam if args.lam is not None else parse_lambda(str(cfg.get("lambda", "inf")))
    if norm is not None and math.isinf(lam):
        norm = None
    if norm is None and not math.isinf(lam):
        raise UsageError("a finite --lambda needs a norm (--norm l1|l2|linf)")
    data = read_xy_csv(args.data) if args.data else gen_synthetic(seed=0)
    net, hist = run_training(cfg, data, norm, lam, args.seed)
    save_model(net, args.out_model)
    if args.out_history:
        hist.to_csv(args.out_history)
    print(f"trained {hist.epochs[-1]} epochs; final train_loss {hist.train_loss[-1]!r}")
    return EXIT_OK


def cmd_predict(args) -> int:
    net = load_model(args.model)
    if args.grid is not None:
        lo, hi, count = args.grid
        xs = np.linspace(lo, hi, count)
    else:
        xs = read_xy_csv(args.data).inputs[:, 0]
    if net.input_shape != (1,):
        raise ConfigError(f"predict works on 1-input models; this model expects {net.input_shape}")
    ys = net(xs[:, None])
    if ys.ndim != 2 or ys.shape[1] != 1:
        raise ConfigError(f"predict needs a single-output model, got output shape {ys.shape[1:]}")
    write_predictions_csv(xs, ys[:, 0], args.out)
    return EXIT_OK


def cmd_audit(args) -> int:
    net = load_model(args.model)
    ps = (1, 2, INF) if args.p == "all" else (args.p,)
    reports = audit(net, ps, dropout_scaling=args.dropout_scaled, l2_iters=args.l2_iters)
    if args.out:
        write_report_csv(reports, args.out)
    for p, rep in reports.items():
        print(f"{rep.norm.label} network_bound {rep.network_bound!r}")
    return EXIT_OK


def cmd_project(args) -> int:
    net = load_model(args.model)
    cfg = ConstraintConfig(args.lam, parse_norm(args.norm))
    if args.strict:
        strict_project(net, cfg, rng=np.random.default_rng(args.seed))
    else:
        constrain_network(net, cfg, rng=np.random.default_rng(args.seed))
    save_model(net, args.out)
    return EXIT_OK


def lipcheck(net: Network, p, pairs: int = 1000, box=(-1.0, 1.0), seed: int = 0) -> tuple[float, float]:
    """Empirical lower bound and audited (l2: converged) upper bound of ``net`` under ``p``."""
    lower = empirical_lipschitz(net, p, box, pairs, np.random.default_rng(seed))
    upper = network_lipschitz(net, NormKind(p), rng=np.random.default_rng(seed)).network_bound
    return lower, upper


def cmd_lipcheck(args) -> int:
    net = load_model(args.model)
    ps = (1, 2, INF) if args.p == "all" else (args.p,)
    status = EXIT_OK
    for p in ps:
        lower, upper = lipcheck(net, p, args.pairs, args.box, args.seed)
        ok = lower <= upper + 1e-6
        label = NormKind(p).label
        print(f"{label} lower {lower!r} upper {upper!r} {'ok' if ok else 'VIOLATION'}")
        if not ok:
            status = EXIT_RUNTIME
    if status != EXIT_OK:
        print("lipnet: error: empirical slope exceeds the audited bound", file=sys.stderr)
    return status


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lipnet", description="Lipschitz-constrained feed-forward networks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic 1-D training set as CSV")
    p.add_argument("--n", type=_positive_int, default=1000)
    p.add_argument("--lo", type=float, default=-5.0)
    p.add_argument("--hi", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an MLP, optionally under a per-layer Lipschitz constraint")
    p.add_argument("--config", help=f"preset ({', '.join(PRESETS)}) or JSON file; default desk")
    p.add_argument("--data", help="two-column CSV; default: synthetic set, seed 0")
    _add_norm_flags(p, required=False)
    p.add_argument("--lambda", dest="lam", type=parse_lambda, help="per-layer bound, or 'inf'")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--hidden", type=_positive_int)
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-history")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="evaluate a 1-D model on a grid or on CSV inputs")
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--grid", type=lambda s: parse_range(s, True), help="lo:hi:count")
    src.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("audit", help="per-layer Lipschitz bounds as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--p", type=_p_arg, default="all", help="1, 2, inf or all")
    p.add_argument("--dropout-scaled", action="store_true")
    p.add_argument("--l2-iters", type=_positive_int, default=1000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("project", help="project every layer onto the constraint set")
    p.add_argument("--model", required=True)
    _add_norm_flags(p, required=True)
    p.add_argument("--lambda", dest="lam", type=parse_lambda, required=True)
    p.add_argument("--strict", action="store_true", help="iterate l2 until feasible within 1e-6")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("lipcheck", help="compare an empirical lower bound with the audited upper bound")
    p.add_argument("--model", required=True)
    p.add_argument("--p", type=_p_arg, default="all")
    p.add_argument("--pairs", type=_positive_int, default=1000)
    p.add_argument("--box", type=parse_range, default=(-1.0, 1.0), help="lo:hi")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_lipcheck)
    return parser


def _attach_range_values(argv: list[str]) -> list[str]:
    # "--grid -5:5:100" would otherwise be read as an unknown option "-5:5:100"
    out, i = [], 0
    while i < len(argv):
        if argv[i] in ("--grid", "--box") and i + 1 < len(argv):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    def fail(code, msg):
        print(f"lipnet: error: {' '.join(str(msg).split())}", file=sys.stderr)
        return code

    argv = _attach_range_values(sys.argv[1:] if argv is None else list(argv))
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return fail(EXIT_USAGE, exc)
    try:
        return args.func(args)
    except UsageError as exc:
        return fail(EXIT_USAGE, exc)
    except OSError as exc:
        return fail(EXIT_IO, f"{exc.strerror or exc}: {exc.filename}" if exc.filename else exc)
    except FormatError as exc:
        return fail(EXIT_IO, exc)
    except (LipnetError, ValueError, ArithmeticError) as exc:
        return fail(EXIT_RUNTIME, exc)


if __name__ == "__main__":
    sys.exit(main())
