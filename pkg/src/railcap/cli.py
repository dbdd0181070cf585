"""Command line entry point: ``railcap {eval,solve,static,sweep,validate}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from railcap import ctmc, gp, model, solver
from railcap.scenario import SCHEMA_VERSION, Scenario, load_scenario

log = logging.getLogger("railcap")

EXIT_OK = 0
EXIT_SCENARIO = 2
EXIT_NUMERICAL = 3
EXIT_RESOURCE = 4

SUMMARY_FIELDS = (
    "weight", "seed", "variant", "status", "total_traffic", "objective",
    "distance", "delta_traffic", "feasible",
)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _finite(obj):
    """Replace non-finite floats by None, recursively."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not math.isfinite(obj):
        return None
    return obj


def dumps(obj) -> str:
    return json.dumps(_finite(obj), sort_keys=True, allow_nan=False, default=_json_default)


class HistoryWriter:
    """Streams run records as JSON lines; timing goes to a separate CSV.

    Keeping wall-clock out of the history makes iteration-capped runs
    byte-for-byte reproducible.
    """

    def __init__(self, path: Path, meta: dict):
        self.path = path
        self.meta = meta
        self._fh = open(path, "w")
        self._timing = open(path.with_suffix(".timing.csv"), "w", newline="")
        self._timing.write("iteration,elapsed_secs\n")

    def __call__(self, rec: dict) -> None:
        rec = dict(rec)
        elapsed = rec.pop("elapsed", None)
        self._fh.write(dumps({**self.meta, **rec}) + "\n")
        self._fh.flush()
        self._timing.write(f"{rec['iteration']},{elapsed:.3f}\n")
        self._timing.flush()

    def close(self):
        self._fh.close()
        self._timing.close()


def read_history(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_summary(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: "" if row.get(k) is None else row[k] for k in SUMMARY_FIELDS})


def _out_dir(args) -> Path | None:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scenario(args) -> Scenario:
    sc = load_scenario(args.scenario)
    over = {"B": getattr(args, "b", None)}
    if getattr(args, "variant", None):
        v = solver.BoConfig.from_variant(args.variant)
        over.update(acquisition=v.acquisition, mean=v.mean, tr_mode=v.tr_mode)
    for attr, key in (("seed", "seed"), ("max_iters", "max_iterations"), ("time_limit_secs", "time_limit")):
        over[key] = getattr(args, attr, None)
    sc = sc.with_overrides(**over)
    if getattr(args, "weight", None) is not None:
        sc = replace(sc, objective=replace(sc.objective, weight=float(args.weight)))
    return sc


def _parse_lam(text: str, d: int) -> np.ndarray:
    try:
        lam = np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise model.ScenarioError(f"--lam: {exc}") from exc
    if lam.shape != (d,):
        raise model.ScenarioError(f"--lam: expected {d} comma-separated rates, got {len(lam)}")
    if not np.all(np.isfinite(lam)) or np.any(lam < 0):
        raise model.ScenarioError("--lam: rates must be finite and non-negative")
    return lam


def format_report(junction: model.Junction, rep: ctmc.QueueReport) -> str:
    head = f"{'route':<8}{'lambda':>10}{'mu':>10}{'rho':>9}{'L_MM':>11}{'L_GI':>11}{'L_limit':>10}{'c':>12}{'loss':>12}"
    lines = [head]
    for r, route in enumerate(junction.routes):
        vals = (rep.arrival[r], rep.service[r], rep.rho[r], rep.l_mm[r], rep.l_gi[r],
                rep.l_limit[r], rep.c[r], rep.loss[r])
        cells = "".join(f"{v:>{w}.6g}" if np.isfinite(v) else f"{'-':>{w}}"
                        for v, w in zip(vals, (10, 10, 9, 11, 11, 10, 12, 12)))
        lines.append(f"{route.name:<8}{cells}")
    status = "feasible" if rep.feasible else "infeasible"
    lines.append(f"states: {rep.n_states}  max c: {rep.max_violation:.6g}  ({status})")
    return "\n".join(lines)


def cmd_validate(args) -> int:
    sc = load_scenario(args.scenario)
    j = sc.junction
    print(f"{sc.name}: {j.k} routes, {len(j.train_types)} train types, {j.d} requests")
    print(f"conflicting route pairs: {int(np.triu(j.conflicts, 1).sum())}")
    print(f"B={sc.config.B} v_A={sc.config.v_a} v_S={sc.config.v_s} variant={sc.config.variant}")
    return EXIT_OK


def cmd_eval(args) -> int:
    sc = _scenario(args)
    lam = _parse_lam(args.lam, sc.junction.d)
    rep, chain = ctmc.evaluate_constraints(
        sc.junction, lam, sc.config.B, sc.config.v_a, sc.config.v_s, keep_chain=True,
    )
    print(format_report(sc.junction, rep))
    out = _out_dir(args)
    if out is not None:
        doc = {"schema_version": SCHEMA_VERSION, "scenario": sc.name, "B": sc.config.B,
               "lam": lam.tolist(), "report": rep.to_dict()}
        (out / "eval.json").write_text(dumps(doc) + "\n")
    if args.dump_ctmc:
        if chain is None:
            log.warning("no active routes; nothing to dump")
        else:
            ctmc.dump_chain(chain, args.dump_ctmc)
    return EXIT_OK


def _meta(sc: Scenario, spec, config) -> dict:
    return {"schema_version": SCHEMA_VERSION, "scenario": sc.name, "variant": config.variant,
            "seed": config.seed, "weight": spec.weight, "B": config.B}


def _print_incumbent(sc: Scenario, hist: solver.RunHistory) -> None:
    inc = hist.incumbent
    if inc is None:
        print("no evaluations")
        return
    rec = hist.records[inc.index]
    lam = np.asarray(rec["lam"], dtype=float)
    print(f"incumbent: iteration {inc.index}, objective {inc.objective:.6g}, "
          f"total {lam.sum():.6g} trains/h, {'feasible' if inc.feasible else 'infeasible'}")
    for o in range(sc.junction.d):
        print(f"  {sc.junction.request_name(o):<12}{lam[o]:10.4f}")


def cmd_solve(args) -> int:
    sc = _scenario(args)
    cfg, spec = sc.config, sc.objective
    out = _out_dir(args)
    writer = HistoryWriter(out / "history.jsonl", _meta(sc, spec, cfg)) if out else None
    try:
        hist = solver.run_bo(sc.junction, sc.ub, spec, cfg, callback=writer)
    finally:
        if writer is not None:
            writer.close()
    _print_incumbent(sc, hist)
    if out is not None:
        write_summary(out / "summary.csv", [solver.summarize(sc.junction, spec, hist, None)])
    return EXIT_OK


def _static(sc: Scenario) -> solver.StaticResult:
    direction = solver.request_direction(sc.junction, sc.objective)
    return solver.static_capacity(sc.junction, direction, sc.config.B, sc.config.v_a, sc.config.v_s)


def cmd_static(args) -> int:
    sc = _scenario(args)
    res = _static(sc)
    names = [sc.junction.routes[r].name for r in res.binding_routes]
    print(f"n_max = {res.n_max:.4f} trains/h  bracket [{res.bracket[0]:.4f}, {res.bracket[1]:.4f}]")
    print(f"binding routes: {', '.join(names) or '-'}")
    if not res.monotone:
        print("warning: constraints not monotone along the ray; grid scan used")
    out = _out_dir(args)
    if out is not None:
        doc = {"schema_version": SCHEMA_VERSION, "scenario": sc.name, "B": sc.config.B,
               "n_max": res.n_max, "bracket": list(res.bracket), "binding_routes": names,
               "monotone": res.monotone, "capped": res.capped, "evaluations": res.evaluations}
        (out / "static.json").write_text(dumps(doc) + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    sc = _scenario(args)
    if args.weights:
        weights = [float(w) for w in args.weights.split(",")]
    elif args.weight is not None:
        weights = [float(args.weight)]
    else:
        weights = list(sc.weights) or [sc.objective.weight]
    seeds = [sc.config.seed + i for i in range(args.seeds)]
    n_max = None if args.no_static else _static(sc).n_max
    if n_max is not None:
        print(f"static n_max = {n_max:.4f} trains/h")
    res = solver.weight_sweep(sc.junction, sc.ub, sc.objective, weights, seeds, sc.config, n_max=n_max)
    out = _out_dir(args)
    if out is not None:
        for h in res.histories:
            meta = {"schema_version": SCHEMA_VERSION, "scenario": sc.name, "variant": h.variant,
                    "seed": h.seed, "weight": h.weight, "B": sc.config.B}
            with open(out / f"history_w{h.weight:g}_s{h.seed}.jsonl", "w") as fh:
                for rec in h.records:
                    fh.write(dumps({**meta, **{k: v for k, v in rec.items() if k != "elapsed"}}) + "\n")
        write_summary(out / "summary.csv", res.rows)
    for row in res.rows:
        tot = row.get("total_traffic")
        print(f"w={row['weight']:g} seed={row['seed']} {row['status']} "
              f"total={'-' if tot is None else f'{tot:.4f}'}")
    return EXIT_OK if all(r["status"] == "ok" for r in res.rows) else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="railcap", description="Junction capacity under dynamic traffic.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp_, out=True):
        sp_.add_argument("--scenario", required=True, help="scenario file or bundled name")
        sp_.add_argument("--b", type=int, help="queue capacity B (overrides the scenario)")
        if out:
            sp_.add_argument("--out", help="directory for exported results")

    def bo_flags(sp_):
        sp_.add_argument("--variant", choices=solver.VARIANTS)
        sp_.add_argument("--weight", type=float)
        sp_.add_argument("--seed", type=int)
        sp_.add_argument("--max-iters", type=int)
        sp_.add_argument("--time-limit-secs", type=float)

    s = sub.add_parser("validate", help="check a scenario file")
    s.add_argument("--scenario", required=True)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("eval", help="evaluate the queue constraints at one rate vector")
    common(s)
    s.add_argument("--lam", required=True, help="comma-separated request rates (trains/h)")
    s.add_argument("--dump-ctmc", metavar="PATH", help="write states and stationary probabilities")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("solve", help="run constrained Bayesian optimization")
    common(s)
    bo_flags(s)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("static", help="capacity along the target traffic distribution")
    common(s)
    s.set_defaults(func=cmd_static)

    s = sub.add_parser("sweep", help="optimization runs over weights and seeds")
    common(s)
    bo_flags(s)
    s.add_argument("--weights", help="comma-separated weights (default: the scenario's list)")
    s.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    s.add_argument("--no-static", action="store_true", help="skip the static baseline")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.monotonic()
    try:
        code = args.func(args)
    except model.ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except ctmc.StateSpaceTooLarge as exc:
        print(f"resource cap: {exc}; try a smaller --b", file=sys.stderr)
        return EXIT_RESOURCE
    except (ctmc.CtmcError, gp.GpNumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    log.info("done in %.1f s", time.monotonic() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
