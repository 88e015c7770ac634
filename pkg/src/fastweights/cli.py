"""Command-line entry point: gradient checks, oracle equivalence, training runs and sweeps.

Options come from three layers, later ones winning: built-in defaults, a
``--config`` file of ``key=value`` lines (or a ``--manifest`` from an earlier
run), then explicit flags.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checks import EQUIV_TOL, GRAD_PHIS, GRAD_TOL, equivalence_suite, gradcheck_cell, gradcheck_grid
from .kernels import BACKENDS, default_backend_name
from .memory import NORMALIZATIONS, RULES
from .retrieval import RetrievalTaskConfig
from .train import SWEEP_COLUMNS, TrainConfig, capacity_sweep, parse_variant, run_cell, worker_count

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DTYPES = {"float64": np.float64, "float32": np.float32}
TRAIN_PHIS = ("identity", "elu1", "favor", "dpfp", "softmax")
# options that only say where things go; never stored in a manifest
_PLUMBING = {"config", "manifest", "out"}


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


class _Command:
    """A subparser that remembers its defaults separately, so explicit flags can be told apart."""

    def __init__(self, sub, name: str, help: str):
        self.name = name
        self.parser = sub.add_parser(name, help=help, argument_default=argparse.SUPPRESS)
        self.defaults: dict = {}
        self.actions: dict[str, argparse.Action] = {}

    def opt(self, flag: str, default=None, **kw):
        action = self.parser.add_argument(flag, **kw)
        self.actions[action.dest] = action
        self.defaults[action.dest] = default
        return action


def _common(cmd: _Command, seed: bool = True):
    if seed:
        cmd.opt("--seed", 0, type=int, help="master seed (default 0)")
    cmd.opt("--backend", None, choices=sorted(BACKENDS), help="recurrence kernel (default: compiled if built)")
    cmd.opt("--config", None, help="file of key=value lines; flags override it")


def _training(cmd: _Command):
    d = TrainConfig()
    cmd.opt("--setting", 1, type=int, choices=(1, 2), help="1: without replacement (L=S); 2: with replacement (L=2S)")
    cmd.opt("--d-key", 16, type=int)
    cmd.opt("--d-emb", 32, type=int)
    cmd.opt("--rule", "sum", choices=RULES)
    cmd.opt("--norm", None, choices=NORMALIZATIONS, help="default: sum for the delta rule, none for the sum rule")
    cmd.opt("--batch-size", d.batch_size, type=int)
    cmd.opt("--lr", d.lr, type=float)
    cmd.opt("--threshold", d.loss_threshold, type=float, help="eval loss counted as converged")
    cmd.opt("--patience", d.patience, type=int, help="steps without a new best eval loss before stopping")
    cmd.opt("--eval-every", d.eval_every, type=int)
    cmd.opt("--max-steps", d.max_steps, type=int)
    cmd.opt("--dtype", "float64", choices=sorted(DTYPES))
    cmd.opt("--manifest", None, help="re-run from a manifest written next to an earlier CSV")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, _Command]]:
    parser = argparse.ArgumentParser(prog="fastweights", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    cmds = {}

    c = cmds["gradcheck"] = _Command(sub, "gradcheck", "finite-difference check of the full layer")
    _common(c)
    c.opt("--all", False, action="store_true", help="every rule x phi x normalisation")
    c.opt("--rule", None, choices=RULES)
    c.opt("--phi", None, choices=GRAD_PHIS + ("identity",))
    c.opt("--norm", None, choices=NORMALIZATIONS, help="default: all three")
    c.opt("--nu", 1, type=int)
    c.opt("--m", 4, type=int)
    c.opt("--length", 8, type=int)
    c.opt("--dim", 4, type=int)
    c.opt("--eps", 1e-6, type=float)

    c = cmds["equiv"] = _Command(sub, "equiv", "recurrence vs quadratic-attention oracles")
    _common(c)
    c.opt("--lengths", None, type=_int_list, help="comma-separated sequence lengths (default: random up to 64)")
    c.opt("--cases", 100, type=int)
    c.opt("--max-dim", 32, type=int)
    c.opt("--dtype", "float64", choices=sorted(DTYPES))

    c = cmds["train"] = _Command(sub, "train", "train one retrieval model, write a CSV row and manifest")
    _common(c)
    _training(c)
    c.opt("--s", None, type=int, help="number of unique keys")
    c.opt("--phi", "dpfp", choices=TRAIN_PHIS)
    c.opt("--nu", 1, type=int)
    c.opt("--m", 16, type=int, help="random features for favor")
    c.opt("--out", "train.csv")

    c = cmds["sweep"] = _Command(sub, "sweep", "capacity sweep over variants x S")
    _common(c)
    _training(c)
    c.opt("--s-list", None, type=_int_list, help="comma-separated S values")
    c.opt("--variants", ["identity", "dpfp1", "dpfp2", "softmax"], type=_str_list,
          help="comma-separated: identity, elu1, dpfpN, favorM, softmax")
    c.opt("--workers", None, type=int, help="worker processes (default: $FASTWEIGHTS_WORKERS or 1)")
    c.opt("--out", "sweep.csv")

    c = cmds["version"] = _Command(sub, "version", "print the version and kernel backend")
    return parser, cmds


# -- option layering -------------------------------------------------------------------

def _convert(cmd: _Command, key: str, raw):
    action = cmd.actions[key]
    if isinstance(raw, str):
        if isinstance(action, argparse._StoreTrueAction):
            value = _bool(raw)
        elif action.type is not None:
            value = action.type(raw)
        else:
            value = raw
    else:
        value = raw
    if action.choices is not None and value is not None and value not in action.choices:
        raise UsageError(f"{key}: {value!r} is not one of {sorted(map(str, action.choices))}")
    return value


def read_config(path: str, cmd: _Command) -> dict:
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, raw = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in cmd.actions or key in ("config", "manifest"):
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        try:
            out[key] = _convert(cmd, key, raw)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}:{n}: {exc}") from None
    return out


def read_manifest(path: str, cmd: _Command) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read manifest {path}: {exc}") from None
    if data.get("command") != cmd.name:
        raise UsageError(f"manifest is for {data.get('command')!r}, not {cmd.name!r}")
    unknown = set(data.get("options", {})) - set(cmd.actions)
    if unknown:
        raise UsageError(f"manifest has unknown options {sorted(unknown)}")
    return {k: _convert(cmd, k, v) for k, v in data["options"].items()}


def resolve(cmd: _Command, explicit: dict) -> dict:
    opts = dict(cmd.defaults)
    if explicit.get("config"):
        opts.update(read_config(explicit["config"], cmd))
    manifest = explicit.get("manifest") or opts.get("manifest")
    if manifest:
        opts.update(read_manifest(manifest, cmd))
    opts.update(explicit)
    return opts


# -- outputs ------------------------------------------------------------------------------

def manifest_path(out: str) -> Path:
    return Path(out).with_suffix(".manifest.json")


def write_results(rows: list[dict], out: str, cmd: str, opts: dict, extra: dict) -> Path:
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    manifest = {
        "tool": "fastweights",
        "version": __version__,
        "command": cmd,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "master_seed": opts["seed"],
        "options": {k: v for k, v in opts.items() if k not in _PLUMBING},
        **extra,
    }
    mpath = manifest_path(out)
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return mpath


def _train_config(opts: dict) -> TrainConfig:
    return TrainConfig(
        batch_size=opts["batch_size"], lr=opts["lr"], loss_threshold=opts["threshold"],
        patience=opts["patience"], eval_every=opts["eval_every"], max_steps=opts["max_steps"],
    )


def _print_rows(rows: list[dict]) -> None:
    cols = ("variant", "rule", "S", "L", "steps_run", "best_eval_loss", "accuracy", "status")
    print("  ".join(f"{c:>14}" for c in cols))
    for r in rows:
        print("  ".join(f"{r[c]:>14.6g}" if isinstance(r[c], float) else f"{r[c]!s:>14}" for c in cols))


# -- subcommands -----------------------------------------------------------------------------

def cmd_gradcheck(opts: dict) -> int:
    kw = dict(seed=opts["seed"], length=opts["length"], dim=opts["dim"], nu=opts["nu"], m=opts["m"], eps=opts["eps"])
    if opts["all"]:
        results = gradcheck_grid(**kw)
    else:
        if not opts["rule"] or not opts["phi"]:
            raise UsageError("gradcheck needs --rule and --phi, or --all")
        norms = [opts["norm"]] if opts["norm"] else list(NORMALIZATIONS)
        results = [gradcheck_cell(opts["rule"], opts["phi"], n, **kw) for n in norms]
    print(f"{'rule':>6} {'phi':>9} {'norm':>10} {'max rel err':>12}")
    for r in results:
        print(f"{r.rule:>6} {r.phi:>9} {r.normalization:>10} {r.max_rel_error:12.3e}  {'PASS' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in results)
    print(f"{'PASS' if ok else 'FAIL'}: {sum(r.passed for r in results)}/{len(results)} below {GRAD_TOL:g}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_equiv(opts: dict) -> int:
    dtype = DTYPES[opts["dtype"]]
    lengths = opts["lengths"]
    if lengths is not None and (not lengths or min(lengths) < 1):
        raise UsageError("--lengths needs positive integers")
    results = equivalence_suite(
        seed=opts["seed"], cases=opts["cases"], lengths=lengths, max_dim=opts["max_dim"],
        dtype=dtype, backend=opts["backend"],
    )
    print(f"{'suite':>17} {'phi':>9} {'L':>4} {'max |diff|':>11}")
    for r in results:
        print(f"{r.suite:>17} {r.phi:>9} {r.length:>4} {r.max_abs_diff:11.3e}  {'PASS' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in results)
    print(f"{'PASS' if ok else 'FAIL'}: tolerance {EQUIV_TOL[dtype]:g} ({opts['dtype']})")
    return EXIT_OK if ok else EXIT_FAIL


def _train_variant_name(opts: dict) -> str:
    phi = opts["phi"]
    if phi == "dpfp":
        return f"dpfp{opts['nu']}"
    if phi == "favor":
        return f"favor{opts['m']}"
    return phi


def cmd_train(opts: dict) -> int:
    if opts["s"] is None or opts["s"] < 1:
        raise UsageError("train needs --s >= 1")
    try:
        variant = parse_variant(_train_variant_name(opts), opts["rule"], opts["norm"])
        task = RetrievalTaskConfig(opts["s"], opts["setting"], opts["d_emb"], opts["d_key"])
        variant.check(task.d_key)
        config = _train_config(opts)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    opts["backend"] = opts["backend"] or default_backend_name()
    row = run_cell(variant, task, config, opts["seed"], DTYPES[opts["dtype"]], opts["backend"])
    extra = {"variant": dataclasses.asdict(variant), "task": dataclasses.asdict(task),
             "train": dataclasses.asdict(config)}
    write_results([row], opts["out"], "train", opts, extra)
    _print_rows([row])
    return EXIT_OK


def cmd_sweep(opts: dict) -> int:
    if not opts["s_list"]:
        raise UsageError("sweep needs a non-empty --s-list")
    if min(opts["s_list"]) < 1:
        raise UsageError("S values must be positive")
    if not opts["variants"]:
        raise UsageError("sweep needs at least one variant")
    try:
        variants = [parse_variant(v, opts["rule"], opts["norm"]) for v in opts["variants"]]
        for v in variants:
            v.check(opts["d_key"])
        config = _train_config(opts)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    opts["backend"] = opts["backend"] or default_backend_name()
    workers = worker_count(opts["workers"])
    rows = capacity_sweep(
        variants, opts["s_list"], config, setting=opts["setting"], d_key=opts["d_key"],
        d_emb=opts["d_emb"], seed=opts["seed"], workers=workers, dtype=DTYPES[opts["dtype"]],
        backend=opts["backend"],
    )
    extra = {"variants": [dataclasses.asdict(v) for v in variants], "train": dataclasses.asdict(config)}
    write_results(rows, opts["out"], "sweep", opts, extra)
    _print_rows(rows)
    return EXIT_OK


def cmd_version(opts: dict) -> int:
    print(f"fastweights {__version__} (kernel: {default_backend_name()})")
    return EXIT_OK


COMMANDS = {"gradcheck": cmd_gradcheck, "equiv": cmd_equiv, "train": cmd_train,
            "sweep": cmd_sweep, "version": cmd_version}


def main(argv: list[str] | None = None) -> int:
    parser, cmds = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    explicit = {k: v for k, v in vars(ns).items() if k != "command"}
    cmd = cmds[ns.command]
    try:
        opts = resolve(cmd, explicit)
        return COMMANDS[ns.command](opts)
    except UsageError as exc:
        cmd.parser.print_usage(sys.stderr)
        print(f"fastweights {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_FAIL
    except Exception as exc:  # anything else is our fault, not the caller's
        print(f"fastweights {ns.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
