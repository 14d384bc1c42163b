"""Command-line interface: ``matchml {estimate,simulate,audit,presets}``.

Exit codes: 0 ok, 2 usage, 3 data, 4 estimation.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import html
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from matchml import __version__
from matchml.data import DataError, Dataset, load_csv, read_table, split
from matchml.dml import DmlConfig, DmlError, mdml_run
from matchml.estimators import (
    ArmConfig,
    EmptyMatchedGroup,
    auto_k,
    cate_from_crf,
    crf_estimate,
)
from matchml.matching import MatchingError, build_index
from matchml.representation import (
    PRESETS,
    FitError,
    fit_prognostic,
    fit_propensity_representation,
    make_diagonal,
    make_identity,
    resolve_preset,
)
from matchml.rng import U64_MAX
from matchml.simulation import DGPS, METHODS, run_coverage_experiment, run_mae_experiment

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ESTIMATION = 0, 2, 3, 4
REP_KINDS = ("identity", "diagonal", "prognostic", "propensity-score", "external")


class UsageError(Exception):
    pass


class EstimationFailure(Exception):
    pass


def _seed(text) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _q(text) -> float:
    if text.lower() in ("inf", "infinity", "max"):
        return math.inf
    v = float(text)
    if v < 1:
        raise argparse.ArgumentTypeError("q must be >= 1 or inf")
    return v


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, args, inputs=()):
    cfg = {k: (v if isinstance(v, (int, float, str, bool, type(None))) else str(v))
           for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": command,
        "config": cfg,
        "seed": args.seed,
        "inputs": {str(p): _digest(p) for p in inputs},
        "version": __version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def _add_common(p: argparse.ArgumentParser, top: bool):
    default = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p.add_argument("--seed", type=_seed, default=default(None),
                   help="unsigned 64-bit seed (fallback: $MATCHML_SEED, then 0)")
    p.add_argument("--out", default=default("matchml-out"), help="output directory")
    p.add_argument("--threads", type=int, default=default(0), help="worker threads (0 = auto)")


# ---------------------------------------------------------------------------
# estimate


def _resolve_rep(args):
    if args.preset and args.rep:
        raise UsageError("use either --preset or --rep, not both")
    if args.preset:
        try:
            name = resolve_preset(args.preset)
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from None
        kind, q = PRESETS[name]
        return kind, (args.q if args.q is not None else q)
    if not args.rep:
        raise UsageError("one of --preset or --rep is required")
    return args.rep, (args.q if args.q is not None else 2.0)


def _weights(args, ds: Dataset):
    if args.weights:
        w = [float(v) for v in args.weights.split(",")]
        if len(w) != ds.p:
            raise UsageError(f"--weights needs {ds.p} values, got {len(w)}")
        return np.array(w)
    sd = ds.covariates.std(axis=0, ddof=1)
    if np.any(sd <= 0):
        raise DataError("constant covariate; pass --weights explicitly")
    return 1.0 / sd


def _read_queries(path, names, phi_cols=()):
    header, rows = read_table(path)
    id_col = next((c for c in ("query_id", "id") if c in header), None)
    need = list(phi_cols) if phi_cols else list(names)
    missing = [c for c in need if c not in header]
    if missing:
        raise DataError(f"{path}: query file lacks columns {missing}")
    Q = np.empty((len(rows), len(need)))
    ids = []
    for r, rec in enumerate(rows):
        ids.append(rec[header.index(id_col)] if id_col else str(r))
        for j, c in enumerate(need):
            try:
                Q[r, j] = float(rec[header.index(c)])
            except ValueError:
                raise DataError(f"non-numeric value at row {r + 2}, column {c!r} of {path}") from None
    if not np.all(np.isfinite(Q)):
        raise DataError(f"{path}: non-finite query values")
    return ids, Q


def cmd_estimate(args) -> int:
    if (args.knn is None) == (args.caliper is None):
        raise UsageError("give exactly one of --knn K and --caliper G")
    if not (args.cate_at or args.ate or args.att):
        raise UsageError("nothing to do: pass --cate-at, --ate and/or --att")
    kind, q = _resolve_rep(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    header, _ = read_table(args.data)
    phi_cols = sorted((c for c in header if c.startswith(args.phi_prefix)),
                      key=lambda c: int(c[len(args.phi_prefix):]) if c[len(args.phi_prefix):].isdigit() else 0)
    if kind == "external" and not phi_cols:
        raise DataError(f"--rep external needs {args.phi_prefix}1..{args.phi_prefix}d columns in {args.data}")
    ds = load_csv(args.data, args.outcome, args.treatment, exclude=phi_cols)
    t = ds.level_of(args.t) if args.t is not None else ds.M
    tp = ds.level_of(args.t_prime) if args.t_prime is not None else 1
    if t == tp:
        raise UsageError("--t and --t-prime must differ")

    if args.knn is not None and args.knn != "auto":
        try:
            k_fixed = int(args.knn)
        except ValueError:
            raise UsageError("--knn takes a positive integer or 'auto'") from None
        if k_fixed < 1:
            raise UsageError("--knn must be positive")
    if args.caliper is not None and not args.caliper > 0:
        raise UsageError("--caliper must be positive")

    if args.cate_at:
        _estimate_cate(args, ds, kind, q, t, tp, phi_cols, out)
    if args.ate or args.att:
        if kind == "external":
            raise UsageError("--ate/--att need an in-core representation, not --rep external")
        cfg = DmlConfig(
            folds=args.folds, inner_fraction=args.inner_fraction,
            mode="knn" if args.knn is not None else "caliper",
            k="auto" if args.knn in (None, "auto") else int(args.knn),
            gamma=args.caliper, representation=kind,
            weights=tuple(_weights(args, ds)) if kind == "diagonal" else None,
            q=q, lam=args.lam, clip=args.clip, alpha=args.alpha, seed=args.seed,
        )
        try:
            res = mdml_run(ds, cfg, t, tp)
        except (DmlError, MatchingError, FitError) as exc:
            raise EstimationFailure(str(exc)) from exc
        doc = {}
        if args.ate:
            doc["ATE"] = res.ate.to_dict(cfg)
            doc["ARF"] = res.arf.to_dict(cfg)
        if args.att:
            doc["ATT"] = res.att.to_dict(cfg)
        doc["labels"] = {"t": ds.labels[t], "t_prime": ds.labels[tp]}
        (out / "dml.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
        res.ate.scores.to_csv(out / "scores.csv")
    inputs = [args.data] + ([args.cate_at] if args.cate_at else [])
    _write_manifest(out, "estimate", args, inputs)
    return EXIT_OK


def _estimate_cate(args, ds, kind, q, t, tp, phi_cols, out):
    seed = args.seed
    match_rows = np.arange(ds.n)
    if kind in ("prognostic", "propensity-score"):
        plan = split(ds, args.train_fraction, seed)
        match_rows = plan.match_indices
        if kind == "prognostic":
            rep = fit_prognostic(ds, plan.train_indices, arms=(t, tp), lam=args.lam)
        else:
            rep = fit_propensity_representation(ds, plan.train_indices, t=t, clip=args.clip)
    elif kind == "identity":
        rep = make_identity(ds.p)
    elif kind == "diagonal":
        rep = make_diagonal(_weights(args, ds))
    else:
        rep = None
    (out / "representation.json").write_text(rep.to_json() if rep is not None else
                                              json.dumps({"kind": "external", "columns": phi_cols}))

    if rep is None:
        header, rows = read_table(args.data)
        E_all = np.array([[float(r[header.index(c)]) for c in phi_cols] for r in rows])
    ids, Q = _read_queries(args.cate_at, ds.covariate_names, phi_cols if rep is None else ())
    Xm, ym, Tm = ds.covariates[match_rows], ds.outcomes[match_rows], ds.treatments[match_rows]

    def embed(Z, arm):
        if rep is None:
            return Z
        return rep.transform(Z, arm=arm)

    indexes, configs = {}, {}
    for arm in (t, tp):
        E = E_all[match_rows] if rep is None else embed(Xm, arm)
        indexes[arm] = build_index(E, Tm, Xm)
        if args.knn is not None:
            k = auto_k(indexes[arm].arm_size(arm)) if args.knn == "auto" else int(args.knn)
            configs[arm] = ArmConfig("knn", k=k, q=q)
        else:
            configs[arm] = ArmConfig("caliper", gamma=args.caliper, q=q)

    rows, audit, failed = [], [], []
    for qid, xq in zip(ids, Q):
        ests = []
        for arm in (t, tp):
            v = embed(xq[None, :], arm)[0]
            try:
                g = configs[arm].query(indexes[arm], v, arm)
            except MatchingError as exc:
                raise EstimationFailure(f"query {qid}: {exc}") from exc
            if g.size == 0:
                failed.append(qid)
                break
            ests.append(crf_estimate(g, ym))
            if args.audit:
                audit.append({
                    "query_id": qid,
                    "t": ds.labels[arm],
                    "mode": g.mode,
                    "gamma_used": g.gamma_used,
                    "members": [
                        {"index": int(match_rows[i]), "distance": float(d), "outcome": float(ym[i]),
                         "treatment": ds.labels[int(Tm[i])],
                         "covariates": [float(v) for v in Xm[i]]}
                        for i, d in zip(g.indices, g.distances)
                    ],
                })
        if len(ests) == 2:
            c = cate_from_crf(ests[0], ests[1], args.alpha)
            rows.append([qid, ds.labels[t], ds.labels[tp], c.tau, c.se, c.ci_low, c.ci_high,
                         ests[0].n_matched, ests[1].n_matched, ests[0].radius, ests[1].radius])
    if failed:
        raise EstimationFailure(
            f"empty matched groups for {len(failed)} queries: {', '.join(map(str, failed))}; "
            "use a larger caliper"
        )
    with (out / "cate.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "t", "t_prime", "tau_hat", "se", "ci_low", "ci_high",
                    "n_matched_t", "n_matched_tprime", "radius_t", "radius_tprime"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], *(_fmt(v) for v in r[3:])])
    if args.audit:
        (out / "audit.json").write_text(json.dumps({"covariate_names": list(ds.covariate_names),
                                                    "groups": audit}, indent=2))


# ---------------------------------------------------------------------------
# simulate


def _svg_plot(path, experiment, rows, summary):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "matchml"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if experiment == "mae":
        labels = [f"{s['method']}\n{s['metric']}" for s in summary]
        ax.bar(range(len(summary)), [s["mean"] for s in summary],
               yerr=[0 if math.isnan(s["se"]) else s["se"] for s in summary])
        ax.set_xticks(range(len(summary)), labels, fontsize=7)
        ax.set_ylabel("mean absolute error")
    else:
        widths = [r["width"] for r in rows]
        ax.boxplot(widths)
        ax.set_ylabel("interval width")
        ax.set_title(f"coverage {summary['coverage']:.3f}")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim_kw = dict(noise_convention=args.noise_convention, shared_noise=args.shared_noise,
                  heterogeneity=not args.no_heterogeneity)
    threads = args.threads or (os.cpu_count() or 1)
    if args.experiment == "mae":
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        unknown = [m for m in methods if m not in METHODS]
        if unknown:
            raise UsageError(f"unknown methods {unknown}; valid: {sorted(METHODS)}")
        try:
            rows, summary = run_mae_experiment(
                args.dgp, args.n, methods, n_queries=args.n_queries, reps=args.reps,
                seed=args.seed, p=args.p, ate=args.with_ate, folds=args.folds,
                redraw_coefficients=args.redraw, threads=threads, **sim_kw)
        except (DmlError, MatchingError, FitError) as exc:
            raise EstimationFailure(str(exc)) from exc
        tidy = [(r["method"], r["rep"], r["metric"], r["value"]) for r in rows]
        doc = {"experiment": "mae", "dgp": args.dgp, "n": args.n, "reps": args.reps,
               "results": summary}
    else:
        if args.reps < 50:
            raise UsageError("coverage experiments need --reps >= 50")
        try:
            res = run_coverage_experiment(
                args.dgp, args.n, estimand=args.estimand, reps=args.reps, alpha=args.alpha,
                seed=args.seed, p=args.p, method=args.methods.split(",")[0], folds=args.folds,
                n_queries=args.n_queries, redraw_coefficients=args.redraw, threads=threads,
                **sim_kw)
        except (DmlError, MatchingError, FitError) as exc:
            raise EstimationFailure(str(exc)) from exc
        tidy = [(args.methods.split(",")[0], r["rep"], key, r[key]) for r in res.rows
                for key in ("estimate", "truth", "ci_low", "ci_high", "covered", "width")]
        rows, summary = res.rows, res.summary()
        doc = {"experiment": "coverage", "dgp": args.dgp, "n": args.n, **summary}
    with (out / "results.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "rep", "metric", "value"])
        for m, rep, metric, v in tidy:
            w.writerow([m, rep, metric, _fmt(v)])
    (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    if args.plot:
        _svg_plot(out / "plot.svg", args.experiment, rows, summary)
    _write_manifest(out, "simulate", args)
    return EXIT_OK


# ---------------------------------------------------------------------------
# audit


def _render_text(group, names):
    lines = [f"query {group['query_id']}  arm {group['t']}  mode {group['mode']}  "
             f"gamma_used {group['gamma_used']:.6g}  members {len(group['members'])}"]
    cols = ["index", "distance", "outcome", "treatment", *names]
    lines.append("  ".join(f"{c:>10}" for c in cols))
    for m in group["members"]:
        cells = [m["index"], f"{m['distance']:.6g}", f"{m['outcome']:.6g}", m["treatment"],
                 *(f"{v:.6g}" for v in m.get("covariates", []))]
        lines.append("  ".join(f"{str(c):>10}" for c in cells))
    return "\n".join(lines)


def _render_html(group, names):
    head = "".join(f"<th>{html.escape(c)}</th>" for c in
                   ["index", "distance", "outcome", "treatment", *names])
    body = []
    for m in group["members"]:
        cells = [m["index"], f"{m['distance']:.6g}", f"{m['outcome']:.6g}", m["treatment"],
                 *(f"{v:.6g}" for v in m.get("covariates", []))]
        body.append("<tr>" + "".join(f"<td>{html.escape(str(c))}</td>" for c in cells) + "</tr>")
    title = html.escape(f"query {group['query_id']}, arm {group['t']}, {group['mode']}, "
                        f"gamma_used {group['gamma_used']:.6g}")
    return f"<h2>{title}</h2>\n<table>\n<tr>{head}</tr>\n" + "\n".join(body) + "\n</table>"


def cmd_audit(args) -> int:
    run = Path(args.run)
    path = run / "audit.json" if run.is_dir() else run
    if not path.is_file():
        raise DataError(f"no audit file at {path}; rerun estimate with --audit")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed audit JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        groups, names = doc["groups"], doc.get("covariate_names", [])
    except (TypeError, KeyError):
        raise DataError(f"{path}: audit JSON lacks a 'groups' list") from None
    if args.query_id is not None:
        groups = [g for g in groups if str(g.get("query_id")) == str(args.query_id)]
        if not groups:
            raise DataError(f"query id {args.query_id!r} not found in {path}")
    if args.format == "html":
        text = "<html><body>\n" + "\n".join(_render_html(g, names) for g in groups) + "\n</body></html>"
    else:
        text = "\n\n".join(_render_text(g, names) for g in groups)
    if args.output:
        Path(args.output).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_presets(args) -> int:
    for name, (kind, q) in PRESETS.items():
        print(f"{name:<18} representation={kind:<17} q={'inf' if math.isinf(q) else int(q)}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="matchml", description="Matched machine learning estimators.")
    _add_common(p, top=True)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="CATE estimates with intervals, optional M-DML ATE/ATT")
    _add_common(e, top=False)
    e.add_argument("--data", required=True, help="input CSV with header row")
    e.add_argument("--outcome", default="y", help="outcome column (default: y)")
    e.add_argument("--treatment", default="t", help="treatment column (default: t)")
    e.add_argument("--preset", help=f"one of {sorted(PRESETS)} (aliases: prognostic, propensity, nn)")
    e.add_argument("--rep", choices=REP_KINDS, help="representation kind instead of a preset")
    e.add_argument("--q", type=_q, help="Lq norm (number >= 1 or 'inf'); overrides the preset")
    mode = e.add_mutually_exclusive_group()
    mode.add_argument("--knn", metavar="K", help="KNN matching with K neighbours, or 'auto'")
    mode.add_argument("--caliper", metavar="G", type=float, help="caliper matching with radius G")
    e.add_argument("--weights", help="comma-separated diagonal weights (cem/mahalanobis/diagonal)")
    e.add_argument("--lam", type=float, default=0.0, help="ridge penalty for prognostic fits")
    e.add_argument("--clip", type=float, default=0.01, help="propensity clip epsilon")
    e.add_argument("--train-fraction", type=float, default=0.25,
                   help="share of units used to learn the representation")
    e.add_argument("--cate-at", metavar="CSV", help="query covariates; one report row per query")
    e.add_argument("--t", help="treatment label of interest (default: highest)")
    e.add_argument("--t-prime", help="comparison treatment label (default: lowest)")
    e.add_argument("--alpha", type=float, default=0.05, help="1 - confidence level")
    e.add_argument("--ate", action="store_true", help="cross-fitted ATE (and ARF) to dml.json")
    e.add_argument("--att", action="store_true", help="cross-fitted ATT to dml.json")
    e.add_argument("--folds", type=int, default=5, help="cross-fitting folds")
    e.add_argument("--inner-fraction", type=float, default=0.5,
                   help="training share of each fold complement")
    e.add_argument("--audit", action="store_true", help="write matched groups to audit.json")
    e.add_argument("--phi-prefix", default="phi_", help="prefix of external representation columns")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="Monte Carlo experiments on synthetic DGPs")
    _add_common(s, top=False)
    s.add_argument("experiment", choices=("coverage", "mae"))
    s.add_argument("--dgp", choices=DGPS, default="selection", help="data generating process")
    s.add_argument("--n", type=int, default=2000, help="units per replication")
    s.add_argument("--p", type=int, default=20, help="number of covariates")
    s.add_argument("--reps", type=int, default=200, help="replications (coverage needs >= 50)")
    s.add_argument("--alpha", type=float, default=0.05, help="1 - confidence level")
    s.add_argument("--estimand", choices=("ate", "cate"), default="ate", help="coverage target")
    s.add_argument("--methods", default="prognostic",
                   help=f"comma-separated, from {sorted(METHODS)}")
    s.add_argument("--n-queries", type=int, default=200, help="fresh CATE query points per replication")
    s.add_argument("--folds", type=int, default=5, help="cross-fitting folds")
    s.add_argument("--with-ate", action="store_true", help="mae: also score M-DML ATE error")
    s.add_argument("--redraw", action="store_true", help="redraw coefficients every replication")
    s.add_argument("--noise-convention", choices=("sd", "variance"), default="sd",
                   help="whether sigma_i is a standard deviation or a variance")
    s.add_argument("--shared-noise", action="store_true",
                   help="feed the outcome noise into treatment assignment")
    s.add_argument("--no-heterogeneity", action="store_true",
                   help="zero the effect-modification coefficients")
    s.add_argument("--plot", action="store_true", help="also write plot.svg")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("audit", help="render matched groups from an estimate run")
    _add_common(a, top=False)
    a.add_argument("--run", required=True, help="estimate output directory or audit.json path")
    a.add_argument("--query-id", help="only this query")
    a.add_argument("--format", choices=("text", "html"), default="text")
    a.add_argument("--output", help="write here instead of stdout")
    a.set_defaults(func=cmd_audit)

    pr = sub.add_parser("presets", help="list matching presets")
    _add_common(pr, top=False)
    pr.set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if args.seed is None:
        env = os.environ.get("MATCHML_SEED")
        try:
            args.seed = _seed(env) if env else 0
        except argparse.ArgumentTypeError as exc:
            parser.print_usage(sys.stderr)
            print(f"matchml: error: MATCHML_SEED: {exc}", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"matchml: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"matchml: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimationFailure, EmptyMatchedGroup, MatchingError, FitError, DmlError) as exc:
        print(f"matchml: estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
