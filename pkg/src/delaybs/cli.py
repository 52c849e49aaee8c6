"""``delaybs`` command-line front end.

Every command writes ``manifest.json`` into ``--out`` (also on failure)
with the command, a hash of the effective config, the seed, package
versions and an error record when the command failed.  Exit codes: 0 on
success, 2 on bad usage, 1 on any other error.
"""

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .errors import BadUsage, DelayBSError

log = logging.getLogger("delaybs")

COMMANDS = ("kernel", "simulate", "dataset", "train", "evaluate", "probe", "bench", "reproduce")

BENCHMARK_DELAYS = {
    "D1": {"family": "cosine-chebyshev", "params": {"offset": 3.0, "amplitude": 0.5, "order": 5.0}},
    "D2": {"family": "exponential", "params": {"amplitude": 0.5, "rate": -1.6}},
}
BENCHMARK_X0 = {"amplitude": 5.0, "order": 4.0, "shift": 0.2}
BENCHMARK_DT = {"D1": 0.02, "D2": 0.005}

SCALES = {
    "desk": {
        "counts": {"D1": 20, "D2": 40},
        "strides": {"D1": 10, "D2": 20},
        "T": 10.0,
        "gain_range": [0.5, 1.5],
        "gain_runs": 1,
        "horizon": 20.0,
        "model": {"branch": "dense", "epochs": 250, "loss_units": "normalized"},
        "bench": {"grids": [0.08, 0.05, 0.025], "reps": 10, "steps": 10},
    },
    "paper": {
        "counts": {"D1": 600, "D2": 300},
        "strides": {"D1": 1, "D2": 1},
        "T": 10.0,
        "gain_range": None,
        "gain_runs": 1,
        "horizon": 20.0,
        "model": {"branch": "conv", "epochs": 250},
        "bench": {"grids": [0.08, 0.05, 0.025], "reps": 10, "steps": 10},
    },
}


def _parser():
    p = argparse.ArgumentParser(prog="delaybs", description="Delay-compensating boundary control toolkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--scale", choices=("desk", "paper"), default="desk")
    common.add_argument("--plot", action="store_true", help="also write SVG charts")
    sub = p.add_subparsers(dest="command")

    sub.add_parser("kernel", parents=[common], help="solve the backstepping kernel")
    s = sub.add_parser("simulate", parents=[common], help="run one closed loop")
    s.add_argument("--controller", choices=("analytic", "zero", "neural"), default="analytic")
    s.add_argument("--model", help="model file for --controller neural")
    s.add_argument("--noise", type=float, default=0.0, help="std of the noise on the delay handed to the controller")
    sub.add_parser("dataset", parents=[common], help="generate supervised records")
    t = sub.add_parser("train", parents=[common], help="train the operator network")
    t.add_argument("--dataset", required=True)
    e = sub.add_parser("evaluate", parents=[common], help="score a model on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--dataset", required=True)
    pr = sub.add_parser("probe", parents=[common], help="empirical Lipschitz quotients")
    pr.add_argument("--kind", action="append", help="probe kind (repeatable); default all")
    pr.add_argument("--pairs", type=int, default=100)
    b = sub.add_parser("bench", parents=[common], help="time analytic vs neural controllers")
    b.add_argument("--model", required=True)
    sub.add_parser("reproduce", parents=[common], help="run every stage at the chosen --scale")
    return p


def _load_cfg(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise BadUsage(f"config file {path} does not exist")
    from .coefficients import load_config

    return load_config(path)


def _scenario(cfg, region=None):
    from .coefficients import scenario_from_config

    c = dict(cfg)
    if region is not None:
        c["tau"] = BENCHMARK_DELAYS[region]
        c.setdefault("grid", {})
        c["grid"] = {**c["grid"], "dt": c["grid"].get("dt", BENCHMARK_DT[region])}
    return scenario_from_config(c)


def _sim_config(grid_cfg, cfg, **kw):
    from .simulator import SimConfig

    return SimConfig(ds=grid_cfg["ds"], dr=grid_cfg["dr"], dt=grid_cfg["dt"], T=float(cfg.get("T", 10.0)), **kw)


# commands ----------------------------------------------------------------------


def cmd_kernel(args, cfg, out):
    from .errors import DegenerateSlope
    from .kernel import kernel_bound, solve_kernel

    coeffs, tau, _, _ = _scenario(cfg)
    kc = cfg.get("kernel", {})
    kg = solve_kernel(coeffs, tau, tol_K=kc.get("tol", 1e-8), max_iter=kc.get("max_iter", 200))
    try:
        kbar = kernel_bound(coeffs, tau).K_bar
    except DegenerateSlope:
        try:
            kbar = kernel_bound(coeffs, tau, slopes="delayed").K_bar
        except DegenerateSlope:
            kbar = None
    kg.write(out / "kernel.csv", out / "kernel.json", kbar)
    if args.plot:
        Z = np.where(kg.valid, kg.K, np.nan)
        io.heatmap(out / "kernel.svg", Z, title="K(s, q)")
    return {"residual": kg.residual, "iterations": kg.iterations, "sup_K": kg.sup, "K_bar": kbar}


def _controller(args):
    if args.controller == "neural":
        if not args.model:
            raise BadUsage("--controller neural needs --model")
        from .operator_learning import NeuralController, load_model

        return NeuralController(load_model(args.model))
    return args.controller


def cmd_simulate(args, cfg, out):
    from .simulator import simulate

    coeffs, tau, x0, grid_cfg = _scenario(cfg)
    ctrl = _controller(args)
    sc = _sim_config(grid_cfg, cfg, controller=ctrl, noise_sigma=args.noise, noise_seed=args.seed,
                     snapshot_stride=int(cfg.get("snapshot_stride", 50)))
    tr = simulate(coeffs, tau, x0, sc)
    tr.write_csv(out / "trace.csv")
    tr.write_config(out / "sim_config.json")
    ratio = float(tr.x_l2[-1] / tr.x_l2[0])
    summary = {
        "region": tau.region,
        "controller": args.controller,
        "final_time": float(tr.t[-1]),
        "x_l2_initial": float(tr.x_l2[0]),
        "x_l2_final": float(tr.x_l2[-1]),
        "ratio": ratio,
        "diverged": tr.diverged,
        "converged": bool(not tr.diverged and ratio < 1.0),
    }
    io.write_json(out / "summary.json", summary)
    if args.plot:
        io.line_chart(out / "decay.svg", {"||x||": (tr.t, tr.x_l2)}, "closed loop", "t", "||x||_L2", logy=True)
    return summary


def _dataset_spec(cfg, scale):
    from .coefficients import D1, D2

    preset = SCALES[scale]
    dcfg = cfg.get("dataset", {})
    counts = {**preset["counts"], **dcfg.get("counts", {})}
    strides = {**preset["strides"], **dcfg.get("strides", {})}
    dts = {**BENCHMARK_DT, **dcfg.get("dt", {})}
    T = float(dcfg.get("T", preset["T"]))
    grid = cfg.get("grid", {})
    ds, dr = grid.get("ds", 0.025), grid.get("dr", 0.025)
    configs = {r: {"ds": ds, "dr": dr, "dt": dts[r], "T": T} for r in (D1, D2)}
    gains = {"gain_range": dcfg.get("gain_range", preset["gain_range"]),
             "gain_runs": int(dcfg.get("gain_runs", preset["gain_runs"]))}
    return counts, configs, strides, gains


def _generate(args, cfg):
    from .coefficients import ScenarioSampler, standard_coefficients
    from .operator_learning import generate_dataset

    counts, configs, strides, gains = _dataset_spec(cfg, args.scale)
    n = int(round(1.0 / configs["D1"]["ds"])) + 1
    coeffs = standard_coefficients(grid=n, **cfg.get("coefficients", {}))
    sampler = ScenarioSampler(seed=args.seed, n=n)
    ds = generate_dataset(sampler, counts, configs, coeffs, strides, workers=args.workers, **gains)
    return ds, coeffs


def cmd_dataset(args, cfg, out):
    ds, _ = _generate(args, cfg)
    ds.write_jsonl(out / "dataset.jsonl")
    return {"records": len(ds), "scenarios": len(ds.scenarios), "skipped": sum(s["skipped"] for s in ds.scenarios)}


def _model_config(args, cfg):
    from .operator_learning import ModelConfig

    mc = {**SCALES[args.scale]["model"], **cfg.get("model", {})}
    mc.setdefault("seed", args.seed)
    return ModelConfig(**mc)


def _write_loss(path, model):
    io.write_csv(path, ["epoch", "loss", "best"], zip(range(len(model.loss_curve)), model.loss_curve,
                                                        np.minimum.accumulate(model.loss_curve)))


def _train(args, cfg, ds, out):
    from .errors import Divergence
    from .operator_learning import evaluate, save_model, train

    mconf = _model_config(args, cfg)
    try:
        model = train(ds, mconf, workers=args.workers)
    except Divergence as e:
        if e.checkpoint is not None:
            save_model(e.checkpoint, out / "model_checkpoint.json")
        raise
    save_model(model, out / "model.json")
    _write_loss(out / "loss.csv", model)
    if args.plot:
        io.line_chart(out / "loss.svg", {"smooth-L1": (np.arange(len(model.loss_curve)), model.loss_curve)},
                      "training loss", "epoch", "loss", logy=True)
    return model, {"final_loss": model.loss_curve[-1], "parameters": model.n_params, **{
        f"train_{k}": v for k, v in evaluate(model, ds).items()}}


def cmd_train(args, cfg, out):
    from .operator_learning import Dataset

    ds = Dataset.read_jsonl(args.dataset)
    _, summary = _train(args, cfg, ds, out)
    return summary


def cmd_evaluate(args, cfg, out):
    from .operator_learning import Dataset, evaluate, load_model

    model = load_model(args.model)
    ds = Dataset.read_jsonl(args.dataset)
    res = evaluate(model, ds)
    io.write_json(out / "metrics.json", res)
    return res


def cmd_probe(args, cfg, out):
    from .analysis import PROBE_KINDS, lipschitz_probe

    kinds = args.kind or list(PROBE_KINDS)
    bad = [k for k in kinds if k not in PROBE_KINDS]
    if bad:
        raise BadUsage(f"unknown probe kind(s) {bad}; choose from {PROBE_KINDS}")
    results = {}
    rows = []
    for k in kinds:
        r = lipschitz_probe(k, n_pairs=args.pairs, seed=args.seed, workers=args.workers)
        results[k] = r.to_dict()
        rows.extend((k, i, q, r.ceiling) for i, q in enumerate(r.quotients))
    io.write_json(out / "probes.json", results)
    io.write_csv(out / "quotients.csv", ["kind", "pair", "quotient", "ceiling"], rows)
    return {k: {"max": v["max"], "ceiling": v["ceiling"], "passed": v["passed"]} for k, v in results.items()}


def _bench(args, cfg, model, out):
    from .analysis import bench_controllers

    bc = {**SCALES[args.scale]["bench"], **cfg.get("bench", {})}
    scen = []
    for region in ("D1", "D2"):
        coeffs, tau, x0, _ = _scenario(cfg, region)
        scen.append((tau, x0))
    rows = bench_controllers(scen, model, coeffs, grids=bc["grids"], reps=bc["reps"], steps=bc["steps"])
    io.write_csv(out / "timing.csv", ["ds", "analytic_s", "neural_s", "speedup", "reps"],
                 [(r.ds, r.analytic_seconds, r.neural_seconds, r.speedup, r.reps) for r in rows])
    return {f"speedup_{r.ds:g}": r.speedup for r in rows}


def cmd_bench(args, cfg, out):
    from .operator_learning import load_model

    return _bench(args, cfg, load_model(args.model), out)


def cmd_reproduce(args, cfg, out):
    from .analysis import constants_for, state_error, verify_envelope
    from .controller import AnalyticController
    from .operator_learning import NeuralController, label_audit
    from .simulator import simulate

    summary = {"scale": args.scale}
    t0 = time.perf_counter()
    ds, coeffs = _generate(args, cfg)
    frac, _ = label_audit(ds.subset(np.arange(0, len(ds), max(1, len(ds) // 200))), coeffs)
    summary["dataset"] = {"records": len(ds), "label_audit_pass_fraction": frac}
    log.info("dataset: %d records in %.1fs", len(ds), time.perf_counter() - t0)
    model, tsum = _train(args, cfg, ds, out)
    summary["train"] = tsum
    log.info("training done, loss %.4g", tsum["final_loss"])

    run_cfg = {"T": SCALES[args.scale]["horizon"], **cfg}
    for region in ("D1", "D2"):
        co, tau, x0, grid_cfg = _scenario(cfg, region)
        an = AnalyticController(co, tau)
        runs = {}
        for name, ctrl, noise in (
            ("analytic", an, 0.0),
            ("zero", "zero", 0.0),
            ("neural", NeuralController(model), 0.0),
            ("neural_noisy", NeuralController(model), 0.05),
        ):
            sc = _sim_config(grid_cfg, run_cfg, controller=ctrl, noise_sigma=noise, noise_seed=args.seed,
                             snapshot_stride=int(round(0.1 / grid_cfg["dt"])))
            runs[name] = simulate(co, tau, x0, sc, shadow=an if name.startswith("neural") else None)
        io.write_csv(out / f"decay_{region}.csv", ["t"] + [f"x_l2_{k}" for k in runs],
                     _aligned_rows(runs))
        ts, es = state_error(runs["analytic"], runs["neural"])
        io.write_csv(out / f"es_{region}.csv", ["t", "e_s"], zip(ts, es))
        const = constants_for(an.law)
        env = verify_envelope(runs["neural"], const, law=an.law)
        io.write_json(out / f"envelope_{region}.json", {"constants": const.to_dict(), "report": env.to_dict()})
        x0n = float(runs["analytic"].x_l2[0])
        summary[region] = {
            "analytic_ratio": float(runs["analytic"].x_l2[-1] / x0n),
            "zero_ratio": float(runs["zero"].x_l2[-1] / x0n),
            "zero_diverged": runs["zero"].diverged,
            "neural_ratio": float(runs["neural"].x_l2[-1] / x0n),
            "noisy_ratio": float(runs["neural_noisy"].x_l2[-1] / x0n),
            "e_s_final": float(es[-1]),
            "e_s_final_rel": float(es[-1] / x0n),
            "envelope_passed": env.passed,
            "epsilon": env.epsilon,
        }
        if args.plot:
            io.line_chart(out / f"decay_{region}.svg", {k: (v.t, v.x_l2) for k, v in runs.items()},
                          f"{region} closed loop", "t", "||x||_L2", logy=True)
            io.line_chart(out / f"es_{region}.svg", {"e_s": (ts, es)}, f"{region} state error", "t", "e_s")
    summary["bench"] = _bench(args, cfg, model, out)
    return summary


def _aligned_rows(runs):
    t = max((r.t for r in runs.values()), key=len)
    cols = []
    for r in runs.values():
        v = np.full(t.size, np.nan)
        v[: r.x_l2.size] = r.x_l2
        cols.append(v)
    return [(t[i], *[c[i] for c in cols]) for i in range(t.size)]


HANDLERS = {
    "kernel": cmd_kernel,
    "simulate": cmd_simulate,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "probe": cmd_probe,
    "bench": cmd_bench,
    "reproduce": cmd_reproduce,
}


def _setup_logging():
    level = os.environ.get("DELAYBS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def run_command(argv):
    """Parse ``argv``, run the command and return the exit code."""
    _setup_logging()
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    out = Path(args.out)
    manifest = {"command": args.command, "argv": list(argv), "seed": args.seed, "versions": io.versions()}
    code = 0
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfg = _load_cfg(args.config)
        manifest["config_hash"] = io.config_hash({"config": cfg, "scale": args.scale})
        t0 = time.perf_counter()
        result = HANDLERS[args.command](args, cfg, out)
        manifest["seconds"] = time.perf_counter() - t0
        manifest["status"] = "ok"
        manifest["result"] = result
    except BadUsage as e:
        code = 2
        manifest["status"] = "error"
        manifest["error"] = {"type": type(e).__name__, "message": str(e)}
    except (DelayBSError, OSError, ValueError, KeyError) as e:
        code = 1
        manifest["status"] = "error"
        manifest["error"] = {"type": type(e).__name__, "message": str(e)}
    if code:
        print(f"delaybs {args.command}: {manifest['error']['type']}: {manifest['error']['message']}", file=sys.stderr)
    try:
        out.mkdir(parents=True, exist_ok=True)
        io.write_json(out / "manifest.json", manifest)
    except OSError as e:
        print(f"delaybs: cannot write manifest: {e}", file=sys.stderr)
        code = code or 1
    return code


def main(argv=None):
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
