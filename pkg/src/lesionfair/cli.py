"""Command-line entry point.

Subcommands::

    build             metadata -> filtered cohort, LP plans, manifests
    solve             LP for one scenario from a bounds table
    train-toy         train strategies on synthetic data, write predictions
    eval              subgroup AUC report and boxplot table from predictions
    reproduce-table1  check the five scenario counts against reference values

Exit codes: 0 success, 1 usage error, 2 data error, 3 infeasible/capacity.
"""

from __future__ import annotations

import argparse
import csv
import glob
import io
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Optional, Sequence

from . import cohort as cohort_mod
from . import fairness_eval as fe
from . import scenario as sc
from . import strategies as st
from .config import OUT_ENV, RunConfig, default_out_dir, load_config
from .errors import ConfigError, DataError, LesionFairError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def write_atomic(path: Path, text: str) -> None:
    """Write ``text`` via a temp file in the same directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _render(writer, *args) -> str:
    buf = io.StringIO()
    writer(*args, buf)
    return buf.getvalue()


def _out_dir(args) -> Path:
    out = args.out or default_out_dir()
    if out is None:
        raise UsageError(f"--out is required (or set {OUT_ENV})")
    return Path(out)


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seeds", None):
        cfg.scenarios["seeds"] = list(args.seeds)
        if len(set(args.seeds)) != len(args.seeds):
            raise ConfigError("--seeds: must be distinct")
    return cfg


def _columns(spec) -> cohort_mod.ColumnMap:
    if spec == "default":
        return cohort_mod.ColumnMap()
    if spec == "isic":
        return cohort_mod.ColumnMap.isic()
    if isinstance(spec, dict):
        return cohort_mod.ColumnMap.from_dict(spec)
    raise ConfigError(f"cohort.columns: unknown preset {spec!r}")


def _load_bounds(path: Optional[str]) -> cohort_mod.CohortTable:
    if path is None:
        return cohort_mod.ARCHIVE_SNAPSHOT
    p = Path(path)
    if not p.exists():
        raise DataError(f"bounds file not found: {p}")
    return cohort_mod.CohortTable.from_dict(json.loads(p.read_text(encoding="utf-8")))


# -- subcommands -------------------------------------------------------------


def cmd_build(args) -> int:
    metadata = Path(args.metadata)
    if not metadata.exists():
        raise DataError(f"metadata file not found: {metadata}")
    cfg = _config(args)
    out = _out_dir(args)
    columns = _columns(cfg.cohort["columns"])
    delimiter = cfg.cohort["delimiter"]
    with open(metadata, encoding="utf-8", newline="") as fh:
        raw = cohort_mod.parse_metadata(fh, columns, delimiter)

    pairs = []
    if args.duplicates:
        with open(args.duplicates, encoding="utf-8", newline="") as fh:
            pairs = [(row[0], row[1]) for row in csv.reader(fh) if len(row) >= 2 and row[0] != "keep"]
    prepared = cohort_mod.prepare(raw, cfg.cohort["seed"], pairs)

    specs = sc.load_scenario_config(cfg.scenarios)
    plans = sc.build_all_scenarios(prepared, specs)

    out_delim = delimiter or ","
    write_atomic(out / "cohort_filtered.csv", _render(lambda c, s: cohort_mod.write_cohort(c, s, columns, out_delim), prepared))
    write_atomic(out / "filter_report.json", _dump(prepared.report()))
    write_atomic(out / "cohort_table.json", _dump(cohort_mod.tabulate(prepared).to_dict()))
    write_atomic(out / "manifest.csv", _render(sc.write_manifest, plans))
    for plan in plans:
        write_atomic(out / "plans" / f"{plan.scenario}_seed{plan.seed}.json", sc.dump_summary(plan))
    for plan in plans:
        t = plan.targets
        print(
            f"{plan.scenario:7s} seed={plan.seed} malignant={t.malignant} ({t.sex_totals['x3']}/{t.sex_totals['x4']}) "
            f"benign={t.benign} train={len(plan.train)} val={len(plan.val)} test={len(plan.test)}"
        )
    return 0


def cmd_solve(args) -> int:
    table = _load_bounds(args.bounds)
    spec = sc.ScenarioSpec(sc.fraction_from_name(args.scenario), test_cell_size=args.test_cell_size)
    problem, solution, targets = sc.solve_scenario(table, spec, reserve=not args.no_reserve)
    payload = {
        "scenario": spec.name,
        "objective": solution.objective_value,
        "solution": solution.to_dict(),
        "targets": targets.to_dict(),
        "problem": problem.to_dict(),
    }
    text = _dump(payload)
    if args.out:
        write_atomic(Path(args.out) / f"solve_{spec.name}.json", text)
    sys.stdout.write(text)
    return 0


def _toy_jobs(args, cfg: RunConfig) -> list[dict]:
    syn = cfg.synthetic
    if args.plans:
        paths = sorted(p for pattern in args.plans for p in glob.glob(pattern))
        if not paths:
            raise DataError(f"no plan summaries match {args.plans}")
        jobs = []
        for path in paths:
            summary = json.loads(Path(path).read_text(encoding="utf-8"))
            sizes = summary["sizes"]
            jobs.append(
                {
                    "scenario": summary["scenario"],
                    "seed": int(summary["seed"]),
                    "female_fraction": float(summary["female_fraction"]),
                    "n_train": sizes["train"],
                    "n_val": sizes["val"],
                    "n_test": sizes["test"],
                }
            )
        return jobs
    f = sc.fraction_from_name(args.scenario)
    return [
        {"scenario": args.scenario, "seed": s, "female_fraction": f, "n_train": syn["n_train"], "n_val": syn["n_val"], "n_test": syn["n_test"]}
        for s in cfg.seeds
    ]


def cmd_train_toy(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    tr, syn = cfg.training, dict(cfg.synthetic)
    for key, flag in (("rho", args.rho), ("feature_dim", args.feature_dim)):
        if flag is not None:
            syn[key] = flag
    lam = tr["lambda"] if args.lam is None else args.lam
    lr = tr["learning_rate"] if args.learning_rate is None else args.learning_rate
    hidden = tr["hidden_dim"] if args.hidden_dim is None else args.hidden_dim
    strategies = args.strategy or tr["strategies"]

    for job in _toy_jobs(args, cfg):
        seed = job["seed"]

        def make(n, f, rho, stream):
            return st.generate_synthetic(
                st.SyntheticConfig(
                    feature_dim=syn["feature_dim"],
                    n_samples=n,
                    class_signal=syn["class_signal"],
                    sex_signal=syn["sex_signal"],
                    rho=rho,
                    noise_scale=syn["noise_scale"],
                    seed=seed * 100 + stream,
                    female_fraction=f,
                ),
                id_prefix=f"{job['scenario']}_{['train', 'val', 'test'][stream - 1]}_",
            )

        train_set = make(job["n_train"], job["female_fraction"], syn["rho"], 1)
        val_set = make(job["n_val"], job["female_fraction"], syn["rho"], 2)
        # balanced evaluation set: equal sexes, no sex/label correlation
        test_set = make(job["n_test"], 0.5, 0.0, 3)

        for name in strategies:
            config = st.StrategyConfig(
                strategy=name,
                lam=lam,
                learning_rate=lr,
                batch_size=tr["batch_size"],
                max_epochs=tr["max_epochs"],
                patience=tr["patience"],
                min_delta=tr["min_delta"],
                seed=seed,
                adversarial_mode=tr["adversarial_mode"],
                adversary_lr_scale=tr["adversary_lr_scale"],
            )
            net = st.Network.init(syn["feature_dim"], hidden, seed)
            try:
                net, log = st.train(net, train_set, val_set, config)
            except LesionFairError as exc:
                raise type(exc)(f"scenario {job['scenario']}, seed {seed}, strategy {name}: {exc}") from exc
            preds = fe.PredictionSet(
                ids=test_set.ids,
                scores=st.predict(net, test_set),
                labels=test_set.y.astype(int),
                sexes=["F" if a == 1 else "M" for a in test_set.a],
                scenario=job["scenario"],
                seed=seed,
                strategy=name,
            )
            stem = f"{job['scenario']}_{name}_seed{seed}"
            log_payload = log.to_dict()
            log_payload.update(
                {
                    "scenario": job["scenario"],
                    "lambda": lam,
                    "learning_rate": lr,
                    "hidden_dim": hidden,
                    "synthetic": syn,
                    "sizes": {k: job[k] for k in ("n_train", "n_val", "n_test")},
                    "female_fraction": job["female_fraction"],
                    "sex_probe_auc": st.sex_probe_auc(net, test_set, seed),
                }
            )
            write_atomic(out / "predictions" / f"{stem}.csv", _render(fe.write_predictions, preds))
            write_atomic(out / "logs" / f"{stem}.json", _dump(log_payload))
            print(
                f"{job['scenario']:7s} {name:11s} seed={seed} epochs={log.stopping_epoch} best={log.best_epoch} "
                f"auc={fe.auc(preds):.4f} female={fe.auc(preds, 'F'):.4f} male={fe.auc(preds, 'M'):.4f}"
            )
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    runs = fe.load_prediction_files(args.predictions)
    results = fe.evaluate(runs, args.mode)
    write_atomic(out / "report.json", fe.report_json(results, args.mode))
    rows = fe.emit_boxplot_data(rep for _, rep in results)
    write_atomic(out / "boxplot.csv", _render(fe.write_boxplot_csv, rows))
    for sig, rep in results:
        print(
            f"{rep.scenario:7s} {rep.strategy:11s} F={rep.auc_female:.4f} M={rep.auc_male:.4f} "
            f"{sig.direction.marker} {sig.band} (U={sig.u:g}, p={sig.p_value:.4g}, {sig.method.value})"
        )
    return 0


def cmd_reproduce_table1(args) -> int:
    table = _load_bounds(args.bounds)
    result = sc.reproduce_table1(table, args.test_cell_size)
    for name, row in result.items():
        mal, ben = row["malignant"], row["benign"]
        print(
            f"{name:7s} malignant {sum(mal):5d} ({mal[0]}/{mal[1]})  benign {sum(ben):5d} ({ben[0]}/{ben[1]})  "
            f"{'OK' if row['match'] else 'MISMATCH expected ' + str(row['expected'])}"
        )
    if args.out:
        write_atomic(Path(args.out) / "table1.json", _dump(result))
    return 0 if all(r["match"] for r in result.values()) else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lesionfair", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("build", help="filter metadata and emit scenario manifests")
    b.add_argument("--metadata", required=True)
    b.add_argument("--config")
    b.add_argument("--out")
    b.add_argument("--duplicates", help="CSV of (keep_id, drop_id) duplicate pairs")
    b.add_argument("--seeds", type=int, nargs="+")
    b.set_defaults(func=cmd_build)

    s = sub.add_parser("solve", help="solve one scenario LP")
    s.add_argument("--scenario", required=True)
    s.add_argument("--bounds", help="cohort table JSON (default: archive snapshot)")
    s.add_argument("--test-cell-size", type=int, default=sc.DEFAULT_TEST_CELL_SIZE)
    s.add_argument("--no-reserve", action="store_true", help="treat bounds as already net of the test set")
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve)

    t = sub.add_parser("train-toy", help="train strategies on synthetic data")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--strategy", action="append", choices=[s.value for s in st.Strategy])
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--rho", type=float)
    t.add_argument("--feature-dim", type=int)
    t.add_argument("--hidden-dim", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--seeds", type=int, nargs="+")
    t.add_argument("--scenario", default="F50M50")
    t.add_argument("--plans", nargs="+", help="plan summary JSON files (globs) whose sizes and sex mix to mirror")
    t.set_defaults(func=cmd_train_toy)

    e = sub.add_parser("eval", help="subgroup AUC and significance report")
    e.add_argument("--predictions", required=True, help="glob of prediction files")
    e.add_argument("--out")
    e.add_argument("--mode", choices=["auc", "lesion"], default="auc")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("reproduce-table1", help="check scenario counts against reference values")
    r.add_argument("--bounds")
    r.add_argument("--test-cell-size", type=int, default=sc.DEFAULT_TEST_CELL_SIZE)
    r.add_argument("--out")
    r.set_defaults(func=cmd_reproduce_table1)
    return p


def _fail(kind: str, message: str, code: int, command: Optional[str]) -> int:
    sys.stderr.write(json.dumps({"error": kind, "command": command, "message": message}) + "\n")
    return code


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        if args.verbose > 1:
            sys.stderr.write(f"lesionfair {command}: {vars(args)}\n")
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), 1, command)
    except LesionFairError as exc:
        return _fail(type(exc).__name__, str(exc), exc.exit_code, command)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        return _fail(type(exc).__name__, str(exc), 2, command)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
