"""Command-line experiment orchestration.

Subcommands::

    odenet generate  --config recipe.json [--out DIR] [--seed N]
    odenet train     --config recipe.json [--out DIR] [--seed N] [--runs K]
    odenet evaluate  --config recipe.json [--checkpoint FILE] [--out DIR]
    odenet bifurcate --config recipe.json --checkpoint FILE [--out DIR]
    odenet resonance --config resonance.json [--out DIR]
    odenet eigs      (--checkpoint FILE | --truth SYSTEM) --point-source SRC

Every artifact is byte-stable for a fixed config and seed; wall-clock
timestamps only ever go to the ``log.txt`` sidecar.  Exit codes: 0 success,
2 config error, 3 numeric failure, 4 an acceptance gate in the config
failed.  ``ODENET_WORKERS`` controls process parallelism across runs.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .data import generate_corpus, load_corpus, save_corpus
from .errors import ConfigError, NumericError, OdenetError
from .metrics import (
    CYCLE_DEFAULTS,
    MetricsReport,
    bifurcation_sweep,
    build_test_points,
    kinetic_error,
    param_error,
    rhs_error,
    solution_error,
    true_cycle,
    zigzag_fraction,
)
from .model import KAPPA_LAYOUT
from .systems import jacobian_eigs, make_system
from .training import (
    build_model,
    infer_trajectory,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_GATE = 4

TESTPOINT_DEFAULTS = {
    "URP": {"t_settle": 30.0, "t_spread": 10.0},
    "BF": {"t_settle": 500.0, "t_spread": 250.0},
}


def _log(out: Path, message: str) -> None:
    stamp = datetime.datetime.now().isoformat(timespec="seconds")
    with open(out / "log.txt", "a") as fh:
        fh.write(f"[{stamp}] {message}\n")


def _out_dir(cfg: ExperimentConfig, args) -> Path:
    out = Path(args.out) if args.out else Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "runs", None):
        cfg.runs = args.runs
    return cfg


def _corpus_path(out: Path) -> Path:
    return out / "corpus.jsonl"


def _ensure_corpus(cfg: ExperimentConfig, out: Path):
    path = _corpus_path(out)
    if not path.exists():
        system = make_system(cfg.system)
        corpus = generate_corpus(system, cfg.pathology, cfg.seed)
        save_corpus(corpus, path)
    return load_corpus(path)


def cmd_generate(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    system = make_system(cfg.system)
    corpus = generate_corpus(system, cfg.pathology, cfg.seed)
    save_corpus(corpus, _corpus_path(out))
    n_obs = sum(len(t.observations) for t in corpus)
    n_val = sum(len(o.channels) for t in corpus for o in t.observations)
    print(
        f"{cfg.name}: wrote {len(corpus)} trajectories, {n_obs} observations, "
        f"{n_val} measured values to {_corpus_path(out)}"
    )
    _log(out, f"generate {cfg.name} seed={cfg.seed}")
    return EXIT_OK


def _train_one(config_doc: dict, run: int, out: str) -> str:
    # worker-safe entry: reconstruct everything from plain JSON data
    from .config import config_from_dict

    cfg = config_from_dict(config_doc)
    out_path = Path(out)
    corpus = load_corpus(_corpus_path(out_path))
    rcfg = cfg.rollout_for_run(run)
    model = build_model(
        cfg.system, cfg.composer, rcfg, corpus,
        kappa_trainable=cfg.kappa_trainable, kappa_init=cfg.kappa_init or None,
    )
    history = train(model, corpus, rcfg)
    run_dir = out_path / f"run{run}"
    run_dir.mkdir(exist_ok=True)
    ckpt = run_dir / "checkpoint.json"
    save_checkpoint(ckpt, model, meta={"name": cfg.name, "run": run})
    with open(run_dir / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for e, value in enumerate(history):
            writer.writerow([e, repr(value)])
    return str(ckpt)


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    _ensure_corpus(cfg, out)
    doc = json.loads(Path(args.config).read_text())
    doc["seed"] = cfg.seed
    workers = int(os.environ.get("ODENET_WORKERS", "1"))
    runs = list(range(cfg.runs))
    if workers > 1 and cfg.runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            paths = list(pool.map(_train_one, [doc] * cfg.runs, runs, [str(out)] * cfg.runs))
    else:
        paths = [_train_one(doc, r, str(out)) for r in runs]
    for p in paths:
        print(f"checkpoint: {p}")
    _log(out, f"train {cfg.name} seed={cfg.seed} runs={cfg.runs}")
    return EXIT_OK


def _evaluate_model(cfg: ExperimentConfig, model, corpus) -> MetricsReport:
    system = make_system(cfg.system)
    ev = cfg.evaluation
    tp_defaults = TESTPOINT_DEFAULTS[cfg.system]
    pts = build_test_points(
        system,
        ev.n_test_points,
        cfg.seed,
        cfg.pathology.ic_box,
        cfg.pathology.param_ranges or None,
        t_settle=ev.t_settle if ev.t_settle is not None else tp_defaults["t_settle"],
        t_spread=ev.t_spread if ev.t_spread is not None else tp_defaults["t_spread"],
    )
    report = MetricsReport(metadata={
        "name": cfg.name,
        "seed": cfg.seed,
        "n_test_points": ev.n_test_points,
        "l2_convention": "sum of per-row roots over (rows*channels)",
    })
    if "rhs" in cfg.metrics:
        report.rhs = rhs_error(model, system, pts)
    if "solution" in cfg.metrics:
        cycle = true_cycle(system, n_points=ev.n_cycle_points)
        report.solution = solution_error(
            model, system, cycle, horizon=ev.horizon, dt_eval=ev.dt_eval,
            max_dt=cfg.rollout.max_dt,
        )
    if "kinetic" in cfg.metrics and cfg.composer == "GRAY_FUNCTIONAL":
        report.kinetic = kinetic_error(model, system, pts)
        if cfg.system == "BF":
            report.metadata["kinetic_per_unit"] = kinetic_error(
                model, system, pts, per_unit=True
            ).as_dict()
    if "params" in cfg.metrics and cfg.kappa_trainable:
        truth_kappa = system.kappa_true()
        learned = {k: model.rhs.kappa_value(k) for k in cfg.kappa_trainable}
        report.param_rel_error = param_error(
            {k: truth_kappa[k] for k in cfg.kappa_trainable}, learned
        )
        report.metadata["kappa_learned"] = learned
    return report


def _check_gates(cfg: ExperimentConfig, aggregate: dict) -> list[str]:
    failures = []
    for key, limit in cfg.gates.items():
        value = aggregate.get(key)
        if value is None or not np.isfinite(value) or value > limit:
            failures.append(f"{key}={value} > {limit}")
    return failures


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    corpus = _ensure_corpus(cfg, out)
    if args.checkpoint:
        ckpts = [Path(args.checkpoint)]
    else:
        ckpts = sorted(out.glob("run*/checkpoint.json"))
    if not ckpts:
        raise ConfigError(f"no checkpoints found under {out}")
    rows = []
    for ckpt in ckpts:
        model = load_checkpoint(ckpt)
        report = _evaluate_model(cfg, model, corpus)
        tag = ckpt.parent.name if ckpt.parent != out else ckpt.stem
        with open(out / f"report_{tag}.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        rows.append((tag, report))
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MetricsReport.CSV_FIELDS)
        for tag, report in rows:
            writer.writerow(report.csv_row(f"{cfg.name}/{tag}"))
    aggregate = {}
    for i, key in enumerate(MetricsReport.CSV_FIELDS[1:], start=1):
        values = [r.csv_row("")[i] for _, r in rows]
        values = [v for v in values if v != ""]
        if values:
            aggregate[key] = float(np.mean(values))
            aggregate[f"{key}_std"] = float(np.std(values))
    with open(out / "aggregate.json", "w") as fh:
        json.dump(aggregate, fh, indent=2)
    for tag, report in rows:
        print(f"{cfg.name}/{tag}: {json.dumps(report.to_dict()['rhs'])} rhs, "
              f"{json.dumps(report.to_dict()['solution'])} solution")
    _log(out, f"evaluate {cfg.name} checkpoints={len(rows)}")
    failures = _check_gates(cfg, aggregate)
    if failures:
        print("gate failures: " + "; ".join(failures), file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


def cmd_bifurcate(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    doc = json.loads(Path(args.config).read_text())
    sweep_cfg = doc.get("bifurcation", {})
    param = sweep_cfg.get("param", "da")
    lo = sweep_cfg.get("lo", 0.2)
    hi = sweep_cfg.get("hi", 0.5)
    step = sweep_cfg.get("step", 0.005)
    values = np.arange(lo, hi + step / 2, step)
    system = make_system(cfg.system)
    cyc = CYCLE_DEFAULTS[cfg.system]
    probe = np.asarray(cyc["probe_ic"])
    t_end, t_cut = cyc["t_end"], cyc["t_cut"]

    def truth_rhs(v):
        return system.with_params(**{param: float(v)}).rhs_at()

    truth_sweep = bifurcation_sweep(truth_rhs, values, probe, t_end=t_end, t_cut=t_cut)
    sweeps = {"truth": truth_sweep}
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        if param in model.rhs.param_names:
            idx = model.rhs.param_names.index(param)

            def model_rhs(v):
                row = np.zeros(len(model.rhs.param_names))
                row[idx] = v
                return model.rhs.physical_rhs_at(row)

            sweeps["model"] = bifurcation_sweep(model_rhs, values, probe, t_end=t_end, t_cut=t_cut)
        elif param in model.rhs.kappa:
            # sweep a coupling constant of the learned skeleton in place
            saved = np.float64(model.rhs.kappa[param].tensor.data)

            def model_rhs(v):
                model.rhs.kappa[param].tensor.data = np.float64(v)
                return model.rhs.physical_rhs_at(None)

            try:
                sweeps["model"] = bifurcation_sweep(model_rhs, values, probe, t_end=t_end, t_cut=t_cut)
            finally:
                model.rhs.kappa[param].tensor.data = saved
        else:
            raise ConfigError(f"model cannot be swept over '{param}'")
    dim = system.dim
    with open(out / f"bifurcation_{param}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["side", "value", "kind"]
            + [f"min_{c}" for c in range(dim)]
            + [f"max_{c}" for c in range(dim)]
        )
        for side, sweep in sweeps.items():
            for row in sweep.rows:
                writer.writerow(
                    [side, repr(row.value), row.kind]
                    + [repr(float(v)) for v in row.channel_min]
                    + [repr(float(v)) for v in row.channel_max]
                )
    summary = {side: sweep.hopf_estimates for side, sweep in sweeps.items()}
    with open(out / f"bifurcation_{param}_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"flip estimates: {summary}")
    _log(out, f"bifurcate {cfg.name} param={param}")
    return EXIT_OK


def cmd_resonance(args) -> int:
    doc = json.loads(Path(args.config).read_text())
    base = Path(args.config).parent
    out = Path(args.out) if args.out else Path(doc.get("out", "runs/resonance"))
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    rows = []
    for case, rel in doc["cases"].items():
        case_cfg = load_config(base / rel)
        case_cfg.seed = seed
        case_out = out / case_cfg.name
        case_out.mkdir(parents=True, exist_ok=True)
        corpus = _ensure_corpus(case_cfg, case_out)
        best = None
        for run in range(case_cfg.runs):
            rcfg = case_cfg.rollout_for_run(run)
            model = build_model(
                case_cfg.system, case_cfg.composer, rcfg, corpus,
                kappa_trainable=case_cfg.kappa_trainable,
                kappa_init=case_cfg.kappa_init or None,
            )
            history = train(model, corpus, rcfg)
            final = history[-1] if history else float("inf")
            run_dir = case_out / f"run{run}"
            run_dir.mkdir(exist_ok=True)
            save_checkpoint(run_dir / "checkpoint.json", model, meta={"case": case, "run": run})
            if best is None or final < best[0]:
                best = (final, model)
        model = best[1]
        report = _evaluate_model(case_cfg, model, corpus)
        nn_frac, ref_frac = dual_rollout_zigzag(model, corpus, case_cfg, case_out)
        rows.append(
            {
                "case": case,
                "name": case_cfg.name,
                "output_scale": case_cfg.rollout.output_scale,
                "sampling": case_cfg.pathology.sampling,
                "chunking": case_cfg.rollout.chunking,
                "solution_l2": report.solution.l2 if report.solution else "",
                "rhs_l2": report.rhs.l2 if report.rhs else "",
                "zigzag_nn": nn_frac,
                "zigzag_reference": ref_frac,
            }
        )
    with open(out / "resonance.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    for r in rows:
        print(
            f"case {r['case']}: rhs_l2={r['rhs_l2']}, "
            f"zigzag nn={r['zigzag_nn']:.2f} ref={r['zigzag_reference']:.2f}"
        )
    _log(out, f"resonance seed={seed}")
    return EXIT_OK


def dual_rollout_zigzag(model, corpus, cfg: ExperimentConfig, out: Path, channel: int = 4):
    """Roll one trajectory through the model's own steps vs the reference.

    Returns the zig-zag fractions of the requested channel for the
    network-iteration rollout (sampled at every solver sub-step) and for a
    reference adaptive integration of the same learned RHS at the same
    times.
    """
    from .systems import reference_integrate as ref_int

    traj = corpus[0]
    key_times = traj.times()
    if traj.ic_given:
        x0 = np.array([traj.observations[0].channels[c] for c in range(model.rhs.dim)])
    else:
        x0 = model.ics.learned_physical(traj.id, model.rhs.scaling)
    params = None
    if model.rhs.param_names:
        params = np.array([traj.params[n] for n in model.rhs.param_names])
    times, states = infer_trajectory(
        model, x0, params, key_times, max_dt=cfg.rollout.max_dt,
        chunking=cfg.rollout.chunking, dense=True,
    )
    f = model.rhs.physical_rhs_at(params)
    ref_states = ref_int(f, x0, times)
    with open(out / "dual_rollout.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["t"] + [f"nn_{c}" for c in range(model.rhs.dim)] + [f"ref_{c}" for c in range(model.rhs.dim)]
        )
        for i, t in enumerate(times):
            writer.writerow(
                [repr(float(t))]
                + [repr(float(v)) for v in states[i]]
                + [repr(float(v)) for v in ref_states[i]]
            )
    return zigzag_fraction(states[:, channel]), zigzag_fraction(ref_states[:, channel])


def cmd_eigs(args) -> int:
    out = Path(args.out) if args.out else Path("runs/eigs")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    system_tag = args.truth or (model.rhs.system if model else None)
    if system_tag is None:
        raise ConfigError("eigs needs --checkpoint or --truth SYSTEM")
    system = make_system(system_tag)

    def add_rows(evaluator, label, point):
        for i, lam in enumerate(jacobian_eigs(evaluator, point)):
            rows.append([label, i, repr(float(lam.real)), repr(float(lam.imag))])

    source = args.point_source
    if source == "CYCLE":
        cycle = true_cycle(system, n_points=args.cycle_points)
        for k, point in enumerate(cycle.states):
            add_rows(system, f"truth/cycle{k}", point)
            if model:
                add_rows(model.rhs.physical_rhs_at(None), f"model/cycle{k}", point)
    elif source in ("TRUE_IC", "LEARNED_IC"):
        if not args.corpus:
            raise ConfigError(f"--point-source {source} needs --corpus")
        corpus = load_corpus(args.corpus)
        traj = next((t for t in corpus if t.id == args.trajectory), None)
        if traj is None:
            raise ConfigError(f"trajectory {args.trajectory} not in corpus")
        if source == "TRUE_IC":
            if traj.true_x0 is None:
                raise ConfigError("corpus does not retain the true initial state")
            point = np.asarray(traj.true_x0)
        else:
            if model is None or model.ics is None:
                raise ConfigError("LEARNED_IC needs a checkpoint with trained ICs")
            point = model.ics.learned_physical(traj.id, model.rhs.scaling)
        params = None
        if system.param_names:
            params = np.array([traj.params[n] for n in system.param_names])
        add_rows(system.rhs_at(params), f"truth/{source.lower()}", point)
        if model:
            add_rows(model.rhs.physical_rhs_at(params), f"model/{source.lower()}", point)
    else:
        point = np.array([float(v) for v in source.split(",")])
        if point.size != system.dim:
            raise ConfigError(f"state literal needs {system.dim} components")
        add_rows(system, "truth/state", point)
        if model:
            add_rows(model.rhs.physical_rhs_at(None), "model/state", point)
    with open(out / "eigs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "eig_index", "real", "imag"])
        writer.writerows(rows)
    for r in rows[:12]:
        print(",".join(str(v) for v in r))
    if len(rows) > 12:
        print(f"... {len(rows)} rows -> {out / 'eigs.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odenet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, runs=False, checkpoint=False):
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        if runs:
            p.add_argument("--runs", type=int, default=None)
        if checkpoint:
            p.add_argument("--checkpoint", default=None)

    common(sub.add_parser("generate", help="simulate and store a training corpus"))
    common(sub.add_parser("train", help="train one or more models"), runs=True)
    common(sub.add_parser("evaluate", help="metric report for trained checkpoints"),
           runs=True, checkpoint=True)
    common(sub.add_parser("bifurcate", help="parameter sweep of truth and model"),
           checkpoint=True)
    res = sub.add_parser("resonance", help="run the step-size resonance case table")
    res.add_argument("--config", required=True)
    res.add_argument("--out", default=None)
    res.add_argument("--seed", type=int, default=None)
    eigs = sub.add_parser("eigs", help="Jacobian eigenvalues at chosen states")
    eigs.add_argument("--checkpoint", default=None)
    eigs.add_argument("--truth", default=None, choices=["URP", "BF"])
    eigs.add_argument("--point-source", required=True,
                      help="TRUE_IC | LEARNED_IC | CYCLE | comma-separated state")
    eigs.add_argument("--corpus", default=None)
    eigs.add_argument("--trajectory", type=int, default=0)
    eigs.add_argument("--cycle-points", type=int, default=200)
    eigs.add_argument("--out", default=None)
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "bifurcate": cmd_bifurcate,
    "resonance": cmd_resonance,
    "eigs": cmd_eigs,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OdenetError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
