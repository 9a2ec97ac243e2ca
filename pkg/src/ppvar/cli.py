"""ppv: enumerate plans, decompose predictive variance, run bundled examples and the sweep.

Exit codes: 0 success, 1 conservation or invariant failure, 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .conjugate import (
    BetaBinomialBackend,
    BetaBinomialSpec,
    NormalKnownVarBackend,
    NormalKnownVarSpec,
    beta_binomial_decomposition,
)
from .cscope import PlanError, PlanSyntaxError, enumerate_plans, parse_plan, term_labels
from .decomp import (
    DEFAULT_SEED,
    ConservationError,
    decompose_exact,
    decompose_mc,
    drop_term_report,
)
from .fileio import (
    RESULT_FIELDS,
    SpecError,
    bundled_path,
    fmt,
    load_dataset,
    load_model_spec,
    result_rows,
    write_csv,
    write_json,
    write_manifest,
    write_result,
)
from .glm import McmcSettings
from .hierarchy import (
    BackendError,
    Dataset,
    DegeneratePosteriorError,
    HierarchicalModel,
    NullEventError,
    joint_posterior,
)

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE = 0, 1, 2
EXAMPLES = ("normal-normal", "beta-binomial", "challenger", "bma-equivalence")
DROP_THRESHOLD = 0.05


class UsageError(Exception):
    pass


def _budget(text: str) -> tuple[int, int]:
    try:
        outer, inner = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"budget must look like OUTERxINNER, got {text!r}") from None
    if outer < 2 or inner < 2:
        raise argparse.ArgumentTypeError("budget needs at least 2 outer and 2 inner draws")
    return outer, inner


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _add_common(p: argparse.ArgumentParser, seed=True, fmt_choice=True):
    p.add_argument("--out", type=Path, default=Path("ppv-out"), help="output directory")
    if seed:
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    if fmt_choice:
        p.add_argument("--format", choices=("csv", "json"), default="csv", help="stdout format")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enumerate", help="list every decomposition plan for K factors")
    p.add_argument("-k", type=int, required=True)
    _add_common(p, seed=False)

    p = sub.add_parser("decompose", help="decompose Var(Y|D) for a model spec under one plan")
    p.add_argument("--model", type=Path, required=True,
                   help="JSON model spec, or a bundled name such as bernoulli_toy")
    p.add_argument("--data", type=Path, help="CSV with a 'y' column; omit for no data")
    p.add_argument("--plan", required=True, help='e.g. "1|2", "1,2", "2"')
    p.add_argument("--engine", choices=("exact", "mc"), default="exact")
    p.add_argument("--budget", type=_budget, default=(4096, 1024), help="OUTERxINNER draws")
    _add_common(p)

    p = sub.add_parser("example", help=f"run a bundled example: {', '.join(EXAMPLES)}")
    p.add_argument("name", help=f"one of {', '.join(EXAMPLES)}")
    p.add_argument("--engine", choices=("exact", "mc"), default="exact")
    p.add_argument("--budget", type=_budget, default=(4096, 1024))
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--tau0", type=float, default=1.0)
    p.add_argument("--theta0", type=float, default=0.0)
    p.add_argument("--n", type=int, default=4, help="normal-normal sample size")
    p.add_argument("--m", type=_positive_int, default=30, help="beta-binomial trials")
    p.add_argument("--a", type=float, default=1.0)
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--method", choices=("mcmc", "laplace"), default="mcmc")
    p.add_argument("--prior-sd", type=float, default=10.0)
    p.add_argument("--chain-length", type=_positive_int, default=McmcSettings.chain_length)
    p.add_argument("--burn-in", type=int, default=McmcSettings.burn_in)
    p.add_argument("--t-new", type=float, default=31.0)
    p.add_argument("--s-new", type=float, default=200.0)
    p.add_argument("--family", choices=("normal-normal", "beta-binomial"), default="normal-normal")
    p.add_argument("--models", type=_positive_int, default=3, help="BMA component count")
    _add_common(p)

    p = sub.add_parser("sweep", help="simulated binomial sample-size sweep")
    p.add_argument("--config", type=Path, help="JSON with SweepConfig fields")
    _add_common(p, fmt_choice=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (SpecError, PlanSyntaxError, PlanError, UsageError) as exc:
        print(f"ppv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BackendError, DegeneratePosteriorError) as exc:
        print(f"ppv {args.command}: model and data are incompatible: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConservationError, NullEventError, ex.ModelFitError) as exc:
        print(f"ppv {args.command}: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


def _emit(rows: list[dict], fields, fmt_name: str, extra: dict | None = None):
    if fmt_name == "json":
        doc = {"rows": rows}
        if extra:
            doc.update(extra)
        print(json.dumps(doc, indent=2))
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([fmt(r[f]) for f in fields])


# ---------------------------------------------------------------- enumerate


def cmd_enumerate(args) -> int:
    try:
        plans = enumerate_plans(args.k)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = [
        {
            "index": i + 1,
            "plan": p.text(),
            "blocks": [list(b) for b in p.blocks],
            "latent": sorted(p.latent),
            "terms": [lbl.pattern for lbl in term_labels(p)],
        }
        for i, p in enumerate(plans)
    ]
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    paths = [
        write_csv(out / "plans.csv", ("index", "plan", "latent", "terms"),
                  [dict(r, latent=" ".join(map(str, r["latent"])), terms=" + ".join(r["terms"])) for r in rows]),
        write_json(out / "plans.json", {"k": args.k, "count": len(plans), "plans": rows}),
    ]
    write_manifest(out, "enumerate", {"k": args.k}, None, paths)
    if args.format == "json":
        print(json.dumps({"k": args.k, "count": len(plans), "plans": rows}, indent=2))
    else:
        print(len(plans))
        for r in rows:
            print(r["plan"] + ("  latent: " + ",".join(map(str, r["latent"])) if r["latent"] else ""))
    return EXIT_OK


# ---------------------------------------------------------------- decompose


def _run_plan(model: HierarchicalModel, data: Dataset, plan_text: str, engine: str, budget, seed: int):
    plan = parse_plan(plan_text, model.K)
    posterior = joint_posterior(model, data)
    if engine == "exact":
        return decompose_exact(model, data, posterior, plan)
    return decompose_mc(model, data, posterior, plan, budget, seed)


def _finish_result(args, result, command: str, config: dict, inputs: dict | None = None,
                   summary: dict | None = None, extra_outputs=()) -> int:
    paths = write_result(result, args.out) + list(extra_outputs)
    summary = dict(summary or {})
    summary.update({"total": result.total, "residual": result.residual, "conserved": result.conserved()})
    write_manifest(args.out, command, config, result.seed if result.engine != "exact" else args.seed,
                   paths, inputs, summary)
    _emit(result_rows(result), RESULT_FIELDS, args.format,
          {"total": result.total, "residual": result.residual})
    if not result.conserved():
        print(f"conservation check failed: residual {result.residual!r}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def _resolve(path: Path) -> Path:
    """A missing path that names a bundled file resolves to that file."""
    if path.exists():
        return path
    try:
        return bundled_path(str(path))
    except KeyError:
        return path


def cmd_decompose(args) -> int:
    args.model = _resolve(args.model)
    args.data = _resolve(args.data) if args.data else None
    model = load_model_spec(args.model)
    data = load_dataset(args.data) if args.data else Dataset.empty()
    result = _run_plan(model, data, args.plan, args.engine, args.budget, args.seed)
    config = {
        "model": str(args.model),
        "data": str(args.data) if args.data else None,
        "plan": args.plan,
        "engine": args.engine,
        "budget": list(args.budget) if args.engine == "mc" else None,
    }
    inputs = {"model": str(args.model)}
    if args.data:
        inputs["data"] = str(args.data)
    return _finish_result(args, result, "decompose", config, inputs)


# ---------------------------------------------------------------- examples


def cmd_example(args) -> int:
    if args.name not in EXAMPLES:
        raise UsageError(f"unknown example {args.name!r}; valid names: {', '.join(EXAMPLES)}")
    return {
        "normal-normal": _example_normal_normal,
        "beta-binomial": _example_beta_binomial,
        "challenger": _example_challenger,
        "bma-equivalence": _example_bma,
    }[args.name](args)


def _single_parameter_model(backend) -> HierarchicalModel:
    return HierarchicalModel((), {(): backend}, parameter="theta")


def _example_normal_normal(args) -> int:
    if args.n < 0:
        raise UsageError("--n must be nonnegative")
    try:
        spec = NormalKnownVarSpec(args.sigma, args.theta0, args.tau0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    # the variance split depends on n only; the responses sit at theta0
    data = Dataset(np.full(args.n, args.theta0)) if args.n else Dataset.empty()
    model = _single_parameter_model(NormalKnownVarBackend(spec))
    result = _run_plan(model, data, "1", args.engine, args.budget, args.seed)
    config = {"example": "normal-normal", "sigma": args.sigma, "tau0": args.tau0,
              "theta0": args.theta0, "n": args.n, "engine": args.engine,
              "budget": list(args.budget) if args.engine == "mc" else None}
    return _finish_result(args, result, "example normal-normal", config)


def _example_beta_binomial(args) -> int:
    try:
        spec = BetaBinomialSpec(args.m, args.a, args.b)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    split = beta_binomial_decomposition(spec)
    model = _single_parameter_model(BetaBinomialBackend(spec))
    result = _run_plan(model, Dataset.empty(), "1", args.engine, args.budget, args.seed)
    config = {"example": "beta-binomial", "m": args.m, "a": args.a, "b": args.b,
              "engine": args.engine, "budget": list(args.budget) if args.engine == "mc" else None}
    summary = {"e_var": split.e_var, "var_e": split.var_e, "var_e_dominates": split.var_e_dominates}
    print(f"var_e_dominates: {fmt(split.var_e_dominates)}", file=sys.stderr)
    return _finish_result(args, result, "example beta-binomial", config, summary=summary)


MODEL_FIELDS = ("model", "link", "subset", "log_marginal", "prior", "posterior", "mean", "variance",
                "acceptance_rate")


def _example_challenger(args) -> int:
    config = ex.ChallengerConfig(
        method=args.method, prior_sd=args.prior_sd, t_new=args.t_new, s_new=args.s_new,
        seed=args.seed, mcmc=McmcSettings(args.chain_length, args.burn_in),
    )
    run = ex.run_challenger(config)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    models = [
        {"model": f"m{r.model_id}", "link": r.link, "subset": r.subset, "log_marginal": r.log_marginal,
         "prior": r.prior, "posterior": r.posterior, "mean": r.mean, "variance": r.variance,
         "acceptance_rate": r.acceptance_rate}
        for r in run.models
    ]
    extra = [
        write_csv(out / "models.csv", MODEL_FIELDS, models),
        write_csv(out / "subset_importance.csv", ("subset", "probability"),
                  [{"subset": s, "probability": p} for s, p in run.subset_importance]),
    ]
    extra += write_result(run.restricted, out, "restricted")
    drop = drop_term_report(run.result, DROP_THRESHOLD)
    summary = {
        "terms": dict(zip(ex.TERM_NAMES, run.result.values)),
        "proportions": dict(zip(ex.TERM_NAMES, run.result.proportions)),
        "restricted_total": run.restricted.total,
        "restricted_terms": list(run.restricted.values),
        "drop_threshold": DROP_THRESHOLD,
        "flagged_terms": [f.label.pattern for f in drop.flagged],
        "suggestion": drop.suggestion,
        "reduced_expression": drop.reduced_expression,
    }
    return _finish_result(args, run.result, "example challenger", config.snapshot(), summary=summary,
                          extra_outputs=extra)


def _example_bma(args) -> int:
    rng = np.random.default_rng(np.random.SeedSequence([int(args.seed)]))
    model, data = ex.random_bma(rng, args.models, args.family)
    report = ex.bma_equivalence_check(model, data)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, res in report.forms.items():
        for r in result_rows(res):
            rows.append(dict(r, form=name, form_total=res.term_sum))
    fields = ("form",) + RESULT_FIELDS + ("form_total",)
    paths = [
        write_csv(out / "bma_forms.csv", fields, rows),
        write_json(out / "bma_forms.json", {
            "forms": {n: {"plan": r.plan.text(), "terms": result_rows(r), "total": r.term_sum}
                      for n, r in report.forms.items()},
            "mixture_total": report.mixture_total,
            "max_relative_gap": report.max_relative_gap,
        }),
    ]
    config = {"example": "bma-equivalence", "family": args.family, "models": args.models}
    write_manifest(out, "example bma-equivalence", config, args.seed, paths,
                   summary={"totals": report.totals, "mixture_total": report.mixture_total})
    _emit(rows, fields, args.format, {"mixture_total": report.mixture_total})
    return EXIT_OK


# ---------------------------------------------------------------- sweep

SWEEP_FAIL_LIMIT = 0.10


def _load_sweep_config(path: Path | None, seed: int) -> ex.SweepConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(path.read_text())
        except OSError as exc:
            raise SpecError(str(path), None, "", f"cannot read config: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise SpecError(str(path), exc.lineno, "", f"invalid JSON: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise SpecError(str(path), 1, "", "config must be a JSON object")
        allowed = set(ex.SweepConfig.__dataclass_fields__) - {"seed"}
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise SpecError(str(path), None, unknown[0], f"unknown config field; expected one of {sorted(allowed)}")
    try:
        return ex.SweepConfig(**raw, seed=seed)
    except (TypeError, ValueError) as exc:
        raise SpecError(str(path) if path else "<config>", None, "", str(exc)) from None


def cmd_sweep(args) -> int:
    config = _load_sweep_config(args.config, args.seed)
    sweep = ex.run_sweep(config)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for o in sorted(sweep.outcomes, key=lambda o: (o.n, o.replicate)):
        if o.error is not None:
            continue
        for label, v, p in zip(sweep.labels, o.values, o.proportions):
            rows.append({"n": o.n, "replicate": o.replicate, "term_label": label, "value": v, "proportion": p})
    curves = sweep.curves()
    value_fields = ("n", "replicates", "total") + ex.TERM_NAMES
    prop_fields = ("n", "replicates") + ex.TERM_NAMES
    prop_rows = [
        {"n": c["n"], "replicates": c["replicates"], **{t: c.get(f"{t}_proportion") for t in ex.TERM_NAMES}}
        for c in curves
    ]
    paths = [
        write_csv(out / "sweep.csv", ("n", "replicate", "term_label", "value", "proportion"), rows),
        write_csv(out / "curves_values.csv", value_fields, [{f: c.get(f) for f in value_fields} for c in curves]),
        write_csv(out / "curves_proportions.csv", prop_fields, prop_rows),
    ]
    failures = [{"n": o.n, "replicate": o.replicate, "error": o.error} for o in sweep.failures]
    if failures:
        paths.append(write_csv(out / "failures.csv", ("n", "replicate", "error"), failures))
    summary = {"failed_replicates": len(failures), "failure_fraction": sweep.failure_fraction}
    if any(c["replicates"] for c in curves):
        summary["trends"] = ex.sweep_trends(curves)
    write_manifest(out, "sweep", config.snapshot(), config.seed, paths,
                   {"config": str(args.config)} if args.config else None, summary)
    for c in curves:
        print(",".join(fmt(c.get(f)) for f in value_fields))
    if failures:
        print(f"{len(failures)} of {len(sweep.outcomes)} replicates failed", file=sys.stderr)
    return EXIT_INVARIANT if sweep.failure_fraction > SWEEP_FAIL_LIMIT else EXIT_OK


COMMANDS = {
    "enumerate": cmd_enumerate,
    "decompose": cmd_decompose,
    "example": cmd_example,
    "sweep": cmd_sweep,
}


if __name__ == "__main__":
    sys.exit(main())
