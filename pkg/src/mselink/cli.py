"""Command-line interface.

Every subcommand can take its options from an INI file (``--config``),
section ``[run]``; explicit flags win over the file. ``mselink run FILE``
dispatches on the file's ``command`` key. Exit codes: 0 success, 2 model
error (including non-convergence and inestimable terms), 3 data error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import BootstrapConfig, summary as bootstrap_summary
from .bootstrap import run as run_bootstrap
from .em import EMError, ModelError, fit_em
from .formula import DesignError, FormulaError, parse
from .graph import GraphError, collapsibility, read_graph
from .ingest import IngestionError, IncompleteTable, marginal_summary, read_table, subset_registers
from .latent import LatentSpec, fit_lc_margins, fit_lcmse, maori_at_least_k
from .loglin import ConvergenceError, deviance_normed
from .popsize import REPORT_VERSION, EstimateReport, PredictionError, report

log = logging.getLogger("mselink")

EXIT_OK, EXIT_MODEL, EXIT_DATA = 0, 2, 3

MODEL_ERRORS = (ModelError, FormulaError, DesignError, PredictionError, EMError, ConvergenceError)
DATA_ERRORS = (IngestionError, GraphError, FileNotFoundError, IsADirectoryError, UnicodeDecodeError)


class NotConverged(ModelError):
    pass


# --- configuration ----------------------------------------------------------

_PATH_KEYS = ("data", "graph", "output")


def load_config(path: str | Path) -> dict[str, str]:
    """Read the ``[run]`` section; relative paths resolve against the file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    cp = configparser.ConfigParser(interpolation=None)
    cp.read(path, encoding="utf-8")
    if "run" not in cp:
        raise IngestionError(f"{path}: no [run] section")
    out = dict(cp["run"])
    for key in _PATH_KEYS:
        if key in out and not Path(out[key]).is_absolute():
            out[key] = str((path.parent / out[key]).resolve())
    return out


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:  # noqa: SLF001
        if isinstance(action, argparse._SubParsersAction):  # noqa: SLF001
            return action.choices[command]
    raise KeyError(command)


def _config_defaults(sp: argparse.ArgumentParser, conf: dict[str, str], command: str) -> dict:
    """Turn config strings into parser defaults for ``command``."""
    cmd = conf.pop("command", None)
    if cmd and cmd != command:
        raise IngestionError(f"config is for command {cmd!r}, not {command!r}")
    actions = {a.dest: a for a in sp._actions}  # noqa: SLF001
    out = {}
    for key, raw in conf.items():
        dest = key.replace("-", "_")
        act = actions.get(dest)
        if act is None or dest in ("config", "help"):
            raise IngestionError(f"unknown config key {key!r}")
        raw = raw.strip()
        if isinstance(act, argparse._StoreTrueAction):  # noqa: SLF001
            out[dest] = raw.lower() in ("1", "true", "yes", "on")
        elif act.type is not None:
            try:
                out[dest] = act.type(raw)
            except ValueError:
                raise IngestionError(f"config key {key!r}: bad value {raw!r}") from None
        else:
            if act.choices and raw not in act.choices:
                raise IngestionError(f"config key {key!r} must be one of {list(act.choices)}")
            out[dest] = raw
    return out


# --- helpers -----------------------------------------------------------------


def _load_table(args) -> IncompleteTable:
    if not args.data:
        raise IngestionError("no data file given (--data)")
    table = read_table(args.data)
    if getattr(args, "registers", None):
        regs = [r for r in args.registers.replace(",", " ").replace(" ", "")]
        table = subset_registers(table, regs)
    return table


def _report_dict(rep: EstimateReport) -> dict:
    return {
        "n_observed": rep.n_observed,
        "n_unobserved": rep.n_unobserved,
        "N_hat": rep.N_hat,
        "registers": rep.registers,
        "joint_ethnicity": {"variables": list(rep.ethnicities), "cells": rep.joint},
    }


def _persons(x: float) -> str:
    return f"{x:,.0f}"


def _text_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(r[j])) for r in [header, *rows]) for j in range(len(header))]
    line = lambda r: "  ".join(str(c).rjust(w) if j else str(c).ljust(w) for j, (c, w) in enumerate(zip(r, widths)))  # noqa: E731
    return "\n".join([line(header), "  ".join("-" * w for w in widths), *(line(r) for r in rows)])


def _flatten(prefix: str, obj, out: list[tuple[str, str]]) -> None:
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, out)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _flatten(f"{prefix}.{i}", v, out)
    else:
        out.append((prefix, "" if obj is None else repr(obj) if isinstance(obj, float) else str(obj)))


def _to_csv(doc: dict) -> str:
    rows: list[tuple[str, str]] = []
    _flatten("", doc, rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["field", "value"])
    w.writerows(rows)
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _emit(args, doc: dict, text: str) -> None:
    doc = _jsonable({"report_version": REPORT_VERSION, "command": args.command, **doc})
    if args.format == "json":
        out = json.dumps(doc, indent=2) + "\n"
    elif args.format == "csv":
        out = _to_csv(doc)
    else:
        out = text.rstrip("\n") + "\n"
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(out, encoding="utf-8")
    else:
        sys.stdout.write(out)


def _estimate_text(rep: EstimateReport) -> str:
    lines = [
        f"observed persons     {_persons(rep.n_observed)}",
        f"estimated unlisted   {_persons(rep.n_unobserved)}",
        f"population estimate  {_persons(rep.N_hat)}",
        "",
        _text_table(
            ["register", "Maori", "non-Maori"],
            [[r, _persons(m["maori"]), _persons(m["non_maori"])] for r, m in rep.registers.items()],
        ),
    ]
    return "\n".join(lines)


# --- commands ------------------------------------------------------------------


def cmd_fit(args) -> int:
    table = _load_table(args)
    if not args.model:
        raise ModelError("no model formula given (--model)")
    formula = parse(args.model, table.schema)
    r = fit_em(table, formula)
    if not r.converged:
        raise NotConverged(f"EM did not converge in {r.iterations} iterations")
    rep = report(r, table.schema)
    params = [
        {"term": p.label, "estimate": p.estimate, "se": p.se, "z": p.z, "p": p.p, "boundary": p.boundary}
        for p in r.fit.parameters
    ]
    dev = r.deviance
    doc = {
        "data": Path(args.data).name,
        "model": formula.render(),
        "converged": r.converged,
        "iterations": r.iterations,
        "loglik": r.loglik,
        "deviance": dev,
        "normed_deviance": deviance_normed(dev, table.n),
        "estimate": _report_dict(rep),
        "parameters": params,
    }
    text = "\n".join(
        [
            f"model {formula.render()}  ({r.iterations} EM iterations, deviance {dev:.1f})",
            _estimate_text(rep),
            "",
            _text_table(
                ["term", "estimate", "se", "boundary"],
                [[p["term"], f"{p['estimate']:.4f}", f"{p['se']:.4f}", "*" if p["boundary"] else ""] for p in params],
            ),
        ]
    )
    _emit(args, doc, text)
    return EXIT_OK


def _latent_fit_dict(fit) -> dict:
    return {
        "class_sizes": fit.class_sizes,
        "conditionals": fit.conditionals,
        "deviance": fit.deviance,
        "normed_deviance": fit.normed_deviance,
        "df": fit.df,
        "loglik": fit.loglik,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "best_restart_seed": fit.seed,
        "N_hat": fit.N_hat,
        "secondary": fit.secondary,
    }


def _latent_text(fit) -> str:
    names = list(fit.conditionals)
    rows = [
        [f"class {k + 1}", f"{fit.class_sizes[k]:.3f}", *(f"{fit.conditionals[v][k]:.3f}" for v in names)]
        for k in range(len(fit.class_sizes))
    ]
    lines = [_text_table(["", "size", *(f"P({v}=1)" for v in names)], rows), ""]
    lines.append(f"deviance {fit.deviance:,.2f}  normed {fit.normed_deviance:.1f}  df {fit.df}")
    if fit.N_hat is not None:
        lines.append(f"population estimate {_persons(fit.N_hat)}")
    return "\n".join(lines)


def cmd_lcmse(args) -> int:
    table = _load_table(args)
    if args.two_stage:
        if not args.model:
            raise ModelError("--two-stage needs the loglinear --model whose ethnicity margins are analysed")
        r = fit_em(table, parse(args.model, table.schema))
        if not r.converged:
            raise NotConverged(f"EM did not converge in {r.iterations} iterations")
        rep = report(r, table.schema)
        margins = rep.joint_array()
        fit = fit_lc_margins(margins, classes=args.classes, names=rep.ethnicities, restarts=args.restarts)
        doc = {"data": Path(args.data).name, "model": args.model, "two_stage": True, "latent": _latent_fit_dict(fit)}
        text = _latent_text(fit)
        if args.at_least is not None:
            k = maori_at_least_k(margins, args.at_least)
            doc["maori_at_least_k"] = {"k": args.at_least, "persons": k}
            text += f"\nMaori in at least {args.at_least} registers {_persons(k)}"
        _emit(args, doc, text)
        return EXIT_OK
    if args.model:
        spec = LatentSpec.from_formula(args.model, table.schema, classes=args.classes)
    else:
        spec = LatentSpec.lcmse(table)
        if args.classes != 2:
            spec = LatentSpec(spec.loadings, spec.extra_terms, spec.interaction, args.classes)
    res = fit_lcmse(table, spec, restarts=args.restarts)
    doc = {
        "data": Path(args.data).name,
        "model": spec.formula(table.schema).render(),
        "two_stage": False,
        "latent": _latent_fit_dict(res.fit),
        "estimate": _report_dict(res.report),
    }
    _emit(args, doc, _latent_text(res.fit) + "\n\n" + _estimate_text(res.report))
    return EXIT_OK


def cmd_collapse(args) -> int:
    if not args.graph:
        raise IngestionError("no graph file given (--graph)")
    g = read_graph(args.graph)
    verdicts = collapsibility(g)
    if args.covariate:
        wanted = set(args.covariate.replace(",", " ").split())
        unknown = wanted - set(g.covariates)
        if unknown:
            raise GraphError(f"unknown covariate(s) {sorted(unknown)}")
        verdicts = [v for v in verdicts if v.covariate in wanted]
    doc = {
        "graph": Path(args.graph).name,
        "registers": g.registers,
        "verdicts": [
            {"covariate": v.covariate, "collapsible": v.collapsible, "witness": list(v.witness) if v.witness else None, "reason": v.reason}
            for v in verdicts
        ],
    }
    _emit(args, doc, "\n".join(v.describe() for v in verdicts))
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    table = _load_table(args)
    cfg = BootstrapConfig(replicates=args.replicates, seed=args.seed, level=args.level)
    if args.latent:
        model = LatentSpec.from_formula(args.model, table.schema) if args.model else LatentSpec.lcmse(table)
    else:
        if not args.model:
            raise ModelError("no model formula given (--model)")
        model = parse(args.model, table.schema)
    res = run_bootstrap(table, model, cfg, workers=args.workers)
    doc = {"data": Path(args.data).name, "model": args.model, "latent": args.latent, "bootstrap": bootstrap_summary(res)}
    rows = [
        [k, _persons(iv.point) if abs(iv.point) > 1 else f"{iv.point:.3f}",
         _persons(iv.lower) if abs(iv.point) > 1 else f"{iv.lower:.3f}",
         _persons(iv.upper) if abs(iv.point) > 1 else f"{iv.upper:.3f}"]
        for k, iv in res.intervals.items()
    ]
    lo, hi = (1 - args.level) / 2 * 100, (1 + args.level) / 2 * 100
    text = _text_table(["statistic", "estimate", f"{lo:g}%", f"{hi:g}%"], rows)
    text += f"\n\n{res.converged}/{res.replicates} replicates converged" + (" (DEGRADED)" if res.degraded else "")
    _emit(args, doc, text)
    return EXIT_OK


def cmd_summary(args) -> int:
    table = _load_table(args)
    s = table.schema
    margins = marginal_summary(table)
    doc = {
        "data": Path(args.data).name,
        "registers": list(s.registers),
        "ethnicities": list(s.ethnicities),
        "covariates": list(s.covariates),
        "patterns": len(table),
        "n_observed": table.n,
        "dropped_unlisted": table.dropped_unlisted,
        "has_item_missing": table.has_item_missing(),
        "margins": margins,
    }
    rows = [
        [r, _persons(m["1"]), _persons(m["0"]), _persons(m["item_missing"]), _persons(m["struct_missing"])]
        for r, m in margins.items()
    ]
    text = f"{len(table)} patterns, {_persons(table.n)} persons\n\n" + _text_table(
        ["register", "Maori", "non-Maori", "item missing", "not listed"], rows
    )
    _emit(args, doc, text)
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "lcmse": cmd_lcmse,
    "collapse": cmd_collapse,
    "bootstrap": cmd_bootstrap,
    "summary": cmd_summary,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mselink", description="Population size estimation from linked registers.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="INI file with a [run] section")
        if data:
            sp.add_argument("--data", help="CSV count table")
            sp.add_argument("--registers", help="analyse only these registers, e.g. ABC")
        sp.add_argument("--format", choices=("json", "text", "csv"), default="text")
        sp.add_argument("--output", help="write here instead of standard output")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("fit", help="fit a loglinear model by EM and estimate the population")
    common(sp)
    sp.add_argument("--model", help='bracket formula, e.g. "[Ac][ac][Ca]"')

    sp = sub.add_parser("lcmse", help="latent class models for ethnicity")
    common(sp)
    sp.add_argument("--model", help="latent formula (default: the integrated LCMSE model)")
    sp.add_argument("--classes", type=int, default=2)
    sp.add_argument("--restarts", type=int, default=20)
    sp.add_argument("--two-stage", action="store_true", help="fit the latent classes to the ethnicity margins of --model")
    sp.add_argument("--at-least", type=int, default=None, help="also report persons Maori in at least K registers")

    sp = sub.add_parser("collapse", help="collapsibility of an interaction graph over its covariates")
    common(sp, data=False)
    sp.add_argument("--graph", help="graph file")
    sp.add_argument("--covariate", help="restrict to these covariates")

    sp = sub.add_parser("bootstrap", help="hybrid bootstrap percentile intervals")
    common(sp)
    sp.add_argument("--model", help="bracket formula (or latent formula with --latent)")
    sp.add_argument("--latent", action="store_true")
    sp.add_argument("--replicates", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("summary", help="describe a count table")
    common(sp)

    sp = sub.add_parser("run", help="run the command named in a config file")
    sp.add_argument("config_file")
    sp.add_argument("--format", choices=("json", "text", "csv"), default=None)
    sp.add_argument("--output")
    sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s: %(message)s")
    try:
        if args.command == "run":
            conf = load_config(args.config_file)
            cmd = conf.get("command")
            if cmd not in COMMANDS:
                raise IngestionError(f"config needs command = one of {sorted(COMMANDS)}")
            argv = [cmd, "--config", args.config_file]
            if args.format:
                argv += ["--format", args.format]
            if args.output:
                argv += ["--output", args.output]
            if args.verbose:
                argv.append("-v")
            args = parser.parse_args(argv)
        if getattr(args, "config", None):
            sp = _subparser(parser, args.command)
            sp.set_defaults(**_config_defaults(sp, load_config(args.config), args.command))
            args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except MODEL_ERRORS as exc:
        print(f"mselink: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except DATA_ERRORS as exc:
        print(f"mselink: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"mselink: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
