"""Command-line entry point: ``ratemaking <subcommand>``.

Every subcommand writes its files under ``--out`` and is a pure function of
its inputs and ``--seed``. Exit codes: 0 success, 2 input error,
3 non-convergence (outputs still written), 4 tariff exclusion.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .bands import SchemeError, UnknownLevelError, load_scheme
from .design import (DesignError, FormulaError, RatingData, aggregate_cells, build_design, cells_to_data,
                     frequency_data, parse_formula, severity_data)
from .diagnostics import Thresholds, diagnose, flag_points, simulated_envelope
from .families import get_family
from .glm import FitControl, FittedModel, fit, fit_negbin, load_model, model_from_dict, save_model
from .ingest import CSVFormatError, read_claims, read_policies, rejection_summary
from .selection import compare_models, merge_levels
from .synth import GeneratorSpecError, generate, load_generator_spec, write_portfolio
from .tariff import TariffError, TariffExclusionError, build_tariff, load_tariff, quote, save_tariff, tariff_text

DEFAULT_SEED = 20190601
EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_EXCLUDED = 0, 2, 3, 4
BUILTIN_MODELS = {"builtin:table6": "table6_frequency.json", "builtin:table9": "table9_severity.json"}
FAMILIES = ("poisson", "negative_binomial", "gamma", "inverse_gaussian", "bernoulli")


class InputError(Exception):
    """Bad user input; reported on stderr with exit status 2."""


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    seed: int
    jobs: int
    out: Path


# ---------------------------------------------------------------- helpers

def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {path}")
    return p


def _scheme(args):
    try:
        return load_scheme(args.scheme, _existing(args.bands, "banding scheme"))
    except (SchemeError, KeyError) as exc:
        raise InputError(str(exc)) from None


def _control(args) -> FitControl:
    return FitControl(max_iter=args.max_iter, tol=args.tol)


def load_rating_data(policies: Path, claims: Path | None, formula, family: str, scheme,
                     cells: bool = False, stderr=sys.stderr, dimensions: Sequence[str] | None = None) -> RatingData:
    """Read, validate and band the CSVs into model-ready rows."""
    try:
        pols, rej = read_policies(policies, scheme)
    except CSVFormatError as exc:
        raise InputError(f"{policies}: {exc}") from None
    if rej:
        print(f"policies: {rejection_summary(rej)}", file=stderr)
    if not pols:
        raise InputError(f"{policies}: no usable rows ({rejection_summary(rej)})")
    if formula.role == "frequency" or family == "bernoulli":
        data = frequency_data(pols, scheme)
        if family == "bernoulli":
            data = RatingData(data.factors, (data.y > 0).astype(float), data.exposure)
        elif cells:
            data = cells_to_data(aggregate_cells(data, dimensions or formula.mains))
        return data
    if claims is None:
        raise InputError(f"response {formula.response!r} is a severity; pass --claims")
    try:
        cl, crej = read_claims(claims, {p.policy_id for p in pols})
    except CSVFormatError as exc:
        raise InputError(f"{claims}: {exc}") from None
    if crej:
        print(f"claims: {rejection_summary(crej)}", file=stderr)
    if not cl:
        raise InputError(f"{claims}: no usable claims")
    return severity_data(pols, cl, scheme)


def fit_model(data: RatingData, formula, family: str, link: str, scheme, control: FitControl) -> FittedModel:
    design = build_design(data, formula, scheme)
    if family == "negative_binomial":
        return fit_negbin(design, control)
    return fit(design, get_family(family), link, control)


def coefficient_text(model: FittedModel) -> str:
    """Level, estimate, std. error, Pr(>|z|), exp(estimate); relativities to three decimals."""
    rows = model.coefficient_table()
    w = max([5] + [len(r["label"]) for r in rows])
    lines = [f"{'Level':<{w}}  {'beta':>9}  {'Std.Err':>8}  {'Pr(>|z|)':>8}  {'exp(beta)':>9}"]
    for r in rows:
        lines.append(f"{r['label']:<{w}}  {r['estimate']:>9.4f}  {r['std_error']:>8.4f}  "
                     f"{r['p_value']:>8.4f}  {r['exp_estimate']:>9.3f}")
    for lb in model.aliased:
        lines.append(f"{lb:<{w}}  {'(not estimable: no data)':>42}")
    lines.append("")
    lines.append(f"family {model.family.name}, link {model.link.name}; n = {model.n}, p = {model.p}")
    lines.append(f"deviance {model.deviance:.1f}, dispersion {model.dispersion:.4g}, "
                 f"logLik {model.loglik:.1f}, AIC {model.aic:.1f}, BIC {model.bic:.1f}")
    if model.nb_v is not None:
        lines.append(f"overdispersion v = {model.nb_v:.4g}")
    lines.append(f"iterations {model.iterations}, converged {'yes' if model.converged else 'NO'}"
                 + (f", flags {', '.join(model.flags)}" if model.flags else ""))
    return "\n".join(lines) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _model_source(spec: str) -> FittedModel:
    if spec in BUILTIN_MODELS:
        text = resources.files("ratemaking").joinpath("data", BUILTIN_MODELS[spec]).read_text(encoding="utf-8")
        return model_from_dict(json.loads(text))
    path = _existing(spec, "model file")
    try:
        return load_model(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"{spec}: not a model file ({exc})") from None


# ---------------------------------------------------------------- subcommands

def cmd_fit(args, cfg: RunConfig) -> int:
    scheme = _scheme(args)
    formula = parse_formula(args.formula)
    data = load_rating_data(_existing(args.policies, "policies file"), _existing(args.claims, "claims file"),
                            formula, args.family, scheme, args.cells)
    model = fit_model(data, formula, args.family, args.link, scheme, _control(args))
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_model(model, cfg.out / "model.json")
    text = coefficient_text(model)
    _write(cfg.out / "coefficients.txt", text)
    print(text, end="")
    if not model.converged:
        print("error: fit did not converge; model written with converged=false", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _formulas(args) -> list[str]:
    out = list(args.formula or [])
    if args.formulas_file:
        for line in _existing(args.formulas_file, "formula file").read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                out.append(line)
    return out


def cmd_select(args, cfg: RunConfig) -> int:
    scheme = _scheme(args)
    texts = _formulas(args)
    if not texts:
        raise InputError("give at least one --formula")
    formulas = [parse_formula(t) for t in texts]
    if len({f.response for f in formulas}) != 1:
        raise InputError("all candidate formulas must share one response")
    if len(formulas) < 2 and not args.merge:
        raise InputError("comparison needs at least two formulas (or use --merge)")
    data = load_rating_data(_existing(args.policies, "policies file"), _existing(args.claims, "claims file"),
                            formulas[0], args.family, scheme, args.cells,
                            dimensions=list(dict.fromkeys(d for f in formulas for d in f.mains)))
    control = _control(args)
    cfg.out.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    target = formulas[0]
    if len(formulas) >= 2:
        table = compare_models(data, args.family, args.link, formulas, scheme, control, jobs=cfg.jobs)
        _write(cfg.out / "comparison.csv", table.to_csv())
        _write(cfg.out / "comparison.txt", table.to_text())
        print(table.to_text(), end="")
        if table.best_aic is None:
            print("error: no candidate converged", file=sys.stderr)
            return EXIT_NONCONVERGED
        if any(not r.converged for r in table.rows):
            status = EXIT_NONCONVERGED
        target = parse_formula(table.best_aic.formula)
    for dim in args.merge or ():
        grouping = merge_levels(data, args.family, args.link, target, dim, scheme, args.alpha, control)
        _write(cfg.out / f"grouping_{dim}.json", json.dumps(grouping.to_dict(), indent=2, ensure_ascii=False) + "\n")
        print(f"\nlevel grouping for {dim} (alpha = {args.alpha:g}, formula {target}):")
        for new, olds in grouping.groups.items():
            print(f"  {new}: {', '.join(olds)}")
        for s in grouping.history:
            print(f"  merged {s.first} + {s.second} -> {s.merged_into} (p = {s.p_value:.4f})")
        data = data.relabel(dim, grouping.mapping)
        scheme = grouping.scheme
    return status


def _rebuild(model: FittedModel, data: RatingData, cells: bool = False) -> FittedModel:
    """Refit ``model``'s specification on ``data``; fail if it does not reproduce the stored fit."""
    try:
        design = build_design(data, model.formula, model.levels)
    except (UnknownLevelError, DesignError) as exc:
        raise InputError(f"model/data mismatch: {exc}") from None
    if design.labels != model.labels:
        raise InputError("model/data mismatch: the data do not support the model's coefficients")
    m = fit(design, model.family, model.link, model.control, start=model.coefficients)
    if not cells and design.n != model.n:
        raise InputError(f"model/data mismatch: model was fitted on n = {model.n} rows, these data have {design.n}")
    if not np.all(np.abs(m.coefficients - model.coefficients) <= 1e-3 * np.sqrt(np.diag(m.covariance)) + 1e-8):
        raise InputError("model/data mismatch: refitting on these data gives different estimates")
    return m


def _svg_envelope(env) -> str:
    W, H, pad = 480, 360, 40
    x, lo, hi, obs = env.theoretical, env.lower, env.upper, env.observed
    xmax = float(x.max()) if x.size else 1.0
    ymax = float(max(hi.max(), obs.max())) if obs.size else 1.0
    xmax, ymax = xmax or 1.0, ymax or 1.0

    def px(a):
        return pad + a / xmax * (W - 2 * pad)

    def py(b):
        return H - pad - b / ymax * (H - 2 * pad)

    def path(vals):
        return " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, vals))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
           f'<text x="{W / 2:.0f}" y="{H - 8}" font-size="12" text-anchor="middle">half-normal quantile (max {xmax:.3f})</text>',
           f'<text x="12" y="{pad - 12}" font-size="12">|standardized deviance residual| (max {ymax:.3f})</text>',
           f'<polyline fill="none" stroke="gray" points="{path(lo)}"/>',
           f'<polyline fill="none" stroke="gray" points="{path(hi)}"/>',
           f'<polyline fill="none" stroke="gray" stroke-dasharray="4,3" points="{path(env.median)}"/>']
    for a, b, l, h in zip(x, obs, lo, hi):
        colour = "black" if l <= b <= h else "red"
        out.append(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="1.5" fill="{colour}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _fmt(x: float) -> str:
    return repr(float(x))


def cmd_diagnose(args, cfg: RunConfig) -> int:
    scheme = _scheme(args)
    stored = _model_source(args.model)
    family = stored.family.name
    data = load_rating_data(_existing(args.policies, "policies file"), _existing(args.claims, "claims file"),
                            stored.formula, family, scheme, args.cells)
    model = _rebuild(stored, data, args.cells)
    envelope = None
    if args.envelope:
        pct = None if args.minmax else (args.percentiles[0], args.percentiles[1])
        envelope = simulated_envelope(model, args.envelope, pct, seed=cfg.seed, jobs=cfg.jobs)
    report = diagnose(model, envelope)
    t = Thresholds.default(report.n, report.p)
    t = Thresholds(args.cook if args.cook is not None else t.cook,
                   args.leverage if args.leverage is not None else t.leverage, args.residual)
    flags = flag_points(report, t)
    cfg.out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "y", "mu", "pearson", "deviance", "std_deviance", "leverage", "cook",
                "influential", "high_leverage", "outlier"])
    inf, lev, outl = (set(a.tolist()) for a in (flags.influential, flags.leverage, flags.outlier))
    for i in range(report.n):
        w.writerow([i, _fmt(report.y[i]), _fmt(report.mu[i]), _fmt(report.pearson[i]), _fmt(report.deviance[i]),
                    _fmt(report.standardized[i]), _fmt(report.leverage[i]), _fmt(report.cook[i]),
                    int(i in inf), int(i in lev), int(i in outl)])
    _write(cfg.out / "residuals.csv", buf.getvalue())
    lines = [f"observations: {report.n}, parameters: {report.p}",
             flags.summary(),
             f"scaled deviance {report.scaled_deviance:.1f} on {report.df} df, p = {report.p_deviance:.3f}",
             f"Pearson X2 {report.pearson_chi2:.1f} on {report.df} df, p = {report.p_pearson:.3f}"]
    if envelope is not None:
        band = "min/max" if envelope.percentiles is None else \
            f"{envelope.percentiles[0]:g}-{envelope.percentiles[1]:g} percentiles"
        lines.append(f"envelope: {envelope.replicates} replicates ({band}, seed {envelope.seed}), "
                     f"{100 * (1 - envelope.coverage):.1f}% of points outside"
                     + (f", {envelope.failed} replicates failed" if envelope.failed else ""))
        eb = io.StringIO()
        ew = csv.writer(eb, lineterminator="\n")
        ew.writerow(["rank", "theoretical", "observed", "lower", "median", "upper"])
        for i in range(envelope.observed.size):
            ew.writerow([i + 1, _fmt(envelope.theoretical[i]), _fmt(envelope.observed[i]), _fmt(envelope.lower[i]),
                         _fmt(envelope.median[i]), _fmt(envelope.upper[i])])
        _write(cfg.out / "envelope.csv", eb.getvalue())
        _write(cfg.out / "envelope.svg", _svg_envelope(envelope))
    text = "\n".join(lines) + "\n"
    _write(cfg.out / "diagnostics.txt", text)
    print(text, end="")
    return EXIT_OK


def cmd_tariff(args, cfg: RunConfig) -> int:
    freq, sev = _model_source(args.frequency), _model_source(args.severity)
    table = build_tariff(freq, sev)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_tariff(table, cfg.out / "tariff.json")
    text = tariff_text(table)
    _write(cfg.out / "tariff.txt", text)
    print(text, end="")
    return EXIT_OK


def _pairs(items: Sequence[str], what: str) -> dict[str, str]:
    out = {}
    for it in items or ():
        key, sep, val = it.partition("=")
        if not sep or not key or not val:
            raise InputError(f"{what} expects KEY=VALUE, got {it!r}")
        out[key.strip()] = val.strip()
    return out


def resolve_levels(table, levels: dict[str, str], raw: dict[str, str], scheme) -> dict[str, str]:
    """Turn ``dim=LEVEL``, ``d1:d2=L1:L2`` and raw ``field=value`` inputs into one level per dimension."""
    out: dict[str, str] = {}
    for key, val in levels.items():
        dims, lvs = key.split(":"), val.split(":")
        if len(dims) != len(lvs):
            raise InputError(f"--level {key}={val}: {len(dims)} dimensions but {len(lvs)} levels")
        out.update(zip(dims, lvs))
    if raw:
        for dim in table.dimensions:
            if dim in out or dim not in scheme:
                continue
            d = scheme[dim]
            if d.field in raw:
                value: object = raw[d.field]
                if d.numeric:
                    try:
                        value = float(raw[d.field])
                    except ValueError:
                        raise InputError(f"--raw {d.field}: not a number") from None
                out[dim] = d.band(value)
    return out


def cmd_quote(args, cfg: RunConfig) -> int:
    if args.tariff.startswith("builtin"):
        table = build_tariff(_model_source("builtin:table6"), _model_source("builtin:table9"))
    else:
        try:
            table = load_tariff(str(_existing(args.tariff, "tariff file")))
        except TariffError as exc:
            raise InputError(str(exc)) from None
    levels = resolve_levels(table, _pairs(args.level, "--level"), _pairs(args.raw, "--raw"),
                            _scheme(args) if args.raw else None)
    q = quote(table, levels, args.exposure, args.conversion)
    chain = " x ".join(f"{f:.3f}" for _, _, f in q.applied if abs(f - 1.0) > 5e-4)
    lines = [f"base {table.base_premium:.3f}" + (f" x {chain}" if chain else "")
             + f" x exposure {q.exposure:g} = {q.premium_smmlv:.3f} SMMLV"]
    if q.conversion is not None:
        lines.append(f"premium {q.premium:.3f} (conversion {q.conversion:g} per SMMLV, external input)")
    lines += [f"note: {n}" for n in q.notes]
    doc = {"levels": dict(sorted(levels.items())), "exposure": q.exposure,
           "factors": [{"group": g, "level": k, "factor": f} for g, k, f in q.applied],
           "premium_smmlv": q.premium_smmlv, "conversion": q.conversion,
           "premium": q.premium if q.conversion is not None else None, "notes": list(q.notes)}
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write(cfg.out / "quote.json", json.dumps(doc, indent=2, ensure_ascii=False) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig) -> int:
    try:
        spec = load_generator_spec(_existing(args.spec, "generator spec"))
        port = generate(spec, args.n, cfg.seed)
    except (GeneratorSpecError, json.JSONDecodeError) as exc:
        raise InputError(f"invalid generator spec: {exc}") from None
    p, c = write_portfolio(port, cfg.out)
    print(f"wrote {port.n} policies to {p} and {port.claim_amount.size} claims to {c} (seed {cfg.seed})")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(DEFAULT_SEED),
                        help=f"random seed for envelopes and simulation (default {DEFAULT_SEED})")
    parser.add_argument("--jobs", type=int, default=d(1), help="worker threads (default 1)")
    parser.add_argument("--out", default=d("ratemaking-out"), help="output directory (default ./ratemaking-out)")


def _data_flags(p: argparse.ArgumentParser, formula_required: bool = True) -> None:
    p.add_argument("--policies", required=True, help="policies.csv")
    p.add_argument("--claims", help="claims.csv (needed for severity models)")
    p.add_argument("--scheme", default="paper", help="banding scheme name (default paper)")
    p.add_argument("--bands", help="TOML file with banding schemes (default: bundled)")
    p.add_argument("--cells", action="store_true", help="aggregate frequency rows into rating cells")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--family", default="poisson", choices=FAMILIES)
    p.add_argument("--link", default="log", choices=("log", "logit", "identity"))
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-10)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ratemaking", description="GLM ratemaking: fit, select, diagnose, tariff, quote.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit one GLM and write model.json")
    _data_flags(p)
    p.add_argument("--formula", required=True, help='e.g. "claim_count ~ model + region + age + model:region"')
    _model_flags(p)

    p = sub.add_parser("select", parents=[common], help="compare formulas by AIC/BIC and merge levels")
    _data_flags(p)
    p.add_argument("--formula", action="append", help="candidate formula (repeat)")
    p.add_argument("--formulas-file", help="file with one candidate formula per line")
    p.add_argument("--merge", action="append", metavar="DIM", help="merge indistinguishable levels of DIM")
    p.add_argument("--alpha", type=float, default=0.05)
    _model_flags(p)

    p = sub.add_parser("diagnose", parents=[common], help="residuals, influence, envelope, goodness of fit")
    p.add_argument("--model", required=True, help="model.json from `fit`, or builtin:table6 / builtin:table9")
    _data_flags(p)
    p.add_argument("--envelope", type=int, default=100, help="envelope replicates (0 disables; default 100)")
    p.add_argument("--percentiles", type=float, nargs=2, default=(2.5, 97.5), metavar=("LOW", "HIGH"))
    p.add_argument("--minmax", action="store_true", help="use the min/max band instead of percentiles")
    p.add_argument("--cook", type=float, help="Cook's distance threshold (default 8/(n-2p))")
    p.add_argument("--leverage", type=float, help="leverage threshold (default 2p/n)")
    p.add_argument("--residual", type=float, default=2.0, help="|standardized residual| threshold (default 2)")

    p = sub.add_parser("tariff", parents=[common], help="combine frequency and severity models into a tariff")
    p.add_argument("--frequency", required=True, help="frequency model.json or builtin:table6")
    p.add_argument("--severity", required=True, help="severity model.json or builtin:table9")

    p = sub.add_parser("quote", parents=[common], help="pure premium for one risk")
    p.add_argument("--tariff", required=True, help="tariff.json, or 'builtin' for the shipped tables")
    p.add_argument("--level", action="append", metavar="DIM=LEVEL",
                   help="level for a dimension or joint group, e.g. age=E1 or model:region=M5:R2")
    p.add_argument("--raw", action="append", metavar="FIELD=VALUE", help="raw policy field to band, e.g. age=22")
    p.add_argument("--scheme", default="paper")
    p.add_argument("--bands")
    p.add_argument("--exposure", type=float, default=1.0)
    p.add_argument("--conversion", type=float, help="currency units per SMMLV (external input)")

    p = sub.add_parser("simulate", parents=[common], help="draw a synthetic policies.csv/claims.csv pair")
    p.add_argument("--spec", help="generator spec JSON (default: bundled demo)")
    p.add_argument("--n", type=int, default=20000, help="number of policies")
    return parser


COMMANDS = {"fit": cmd_fit, "select": cmd_select, "diagnose": cmd_diagnose, "tariff": cmd_tariff,
            "quote": cmd_quote, "simulate": cmd_simulate}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    cfg = RunConfig(args.subcommand, args.seed, args.jobs, Path(args.out))
    try:
        return COMMANDS[args.subcommand](args, cfg)
    except TariffExclusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXCLUDED
    except (InputError, FormulaError, DesignError, UnknownLevelError, TariffError, SchemeError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except np.linalg.LinAlgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
