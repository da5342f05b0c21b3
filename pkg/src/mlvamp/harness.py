"""Experiment orchestration and the command-line interface: instance
generation, method execution, aggregation, and CSV emission."""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time

import numpy as np

from .admm import check_fixed_point, run_fixed
from .baseline import OptimizerOptions, minimize
from .driver import EffectiveChain, RunOptions, RunResult, nmse_db, run
from .model import (SyntheticConfig, Trajectory, build_random_network,
                    forward_sample, load_model, save_model)
from .oracles import grid_prox_input, grid_relu_pair
from .se import SEState, _se_nmse_db, disturbance_model, run_se

_METHODS = ("mlvamp", "baseline", "se")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    network: SyntheticConfig = SyntheticConfig()
    ny_sweep: tuple = (20, 50, 100, 150, 200, 300, 500)
    instances: int = 40
    methods: tuple = _METHODS
    run_options: RunOptions = RunOptions()
    optimizer: OptimizerOptions = OptimizerOptions()
    se_iters: int = 200
    mc_samples: int = 100000
    master_seed: int = 0
    out_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "ny_sweep", tuple(self.ny_sweep))
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.instances < 1:
            raise ValueError("instances must be at least 1")
        if not self.ny_sweep:
            raise ValueError("ny_sweep must be nonempty")
        bad = [m for m in self.methods if m not in _METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}")


@dataclasses.dataclass(frozen=True)
class RunRecord:
    ny: int
    seed: int
    method: str
    layer: int
    half_iter: int
    nmse_db: float
    wall_ms: float
    converged: bool


def _from_dict(cls, doc: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}")
    return cls(**doc)


def load_experiment_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be an object")
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ValueError(f"{path}: unknown keys {unknown}")
    kwargs = dict(doc)
    if "network" in kwargs:
        kwargs["network"] = _from_dict(SyntheticConfig, kwargs["network"],
                                       f"{path}: network")
    if "run_options" in kwargs:
        kwargs["run_options"] = _from_dict(RunOptions, kwargs["run_options"],
                                           f"{path}: run_options")
    if "optimizer" in kwargs:
        kwargs["optimizer"] = _from_dict(OptimizerOptions, kwargs["optimizer"],
                                         f"{path}: optimizer")
    return ExperimentConfig(**kwargs)


def _mlvamp_records(ny: int, inst: int, result: RunResult, wall_ms: float
                    ) -> list[RunRecord]:
    out = []
    for half, row in enumerate(result.nmse_db):
        for layer, val in enumerate(row):
            out.append(RunRecord(ny=ny, seed=inst, method="mlvamp",
                                 layer=layer, half_iter=half, nmse_db=val,
                                 wall_ms=wall_ms, converged=result.converged))
    return out


def _se_records(ny: int, se: SEState, wall_ms: float) -> list[RunRecord]:
    out = []
    n_vars = len(se.tau0)
    for k in range(se.iterations):
        for layer in range(n_vars):
            for half, side in ((2 * k, "forward"), (2 * k + 1, "reverse")):
                out.append(RunRecord(
                    ny=ny, seed=0, method="se", layer=layer, half_iter=half,
                    nmse_db=_se_nmse_db(se, layer, k, side),
                    wall_ms=wall_ms, converged=se.converged))
    return out


def run_experiment(cfg: ExperimentConfig, failures: list | None = None
                   ) -> list[RunRecord]:
    """Sweep output dimensions and instances; run each enabled method.

    Per-instance failures are appended to `failures` (when given) and the
    sweep continues. Seeds derive from the master seed and the (sweep,
    instance) position only, so enabling one method never shifts another's
    randomness.
    """
    records: list[RunRecord] = []
    for iy, ny in enumerate(cfg.ny_sweep):
        for inst in range(cfg.instances):
            ss = np.random.SeedSequence(cfg.master_seed, spawn_key=(iy, inst))
            net_seed, z_seed, noise_seed, opt_seed = ss.spawn(4)
            try:
                net_cfg = dataclasses.replace(cfg.network, output_dim=ny)
                network = build_random_network(net_cfg, net_seed)
                rng = np.random.default_rng(z_seed)
                z0 = rng.normal(
                    0.0, 1.0 / math.sqrt(net_cfg.prior_precision),
                    size=net_cfg.input_dim)
                traj = forward_sample(network, z0, noise_seed)
                y = traj.z0[-1]

                if "se" in cfg.methods and inst == 0:
                    t0 = time.perf_counter()
                    se = run_se(disturbance_model(network),
                                iters=cfg.se_iters,
                                mc_samples=cfg.mc_samples,
                                seed=cfg.master_seed)
                    wall = (time.perf_counter() - t0) * 1e3
                    records.extend(_se_records(ny, se, wall))
                if "mlvamp" in cfg.methods:
                    t0 = time.perf_counter()
                    res = run(network, y, truth=traj, opts=cfg.run_options)
                    wall = (time.perf_counter() - t0) * 1e3
                    records.extend(_mlvamp_records(ny, inst, res, wall))
                if "baseline" in cfg.methods:
                    t0 = time.perf_counter()
                    opts = dataclasses.replace(
                        cfg.optimizer,
                        seed=int(opt_seed.generate_state(1)[0]))
                    opt = minimize(network, y, opts)
                    wall = (time.perf_counter() - t0) * 1e3
                    records.append(RunRecord(
                        ny=ny, seed=inst, method="baseline", layer=0,
                        half_iter=0, nmse_db=nmse_db(opt.z0, traj.z0[0]),
                        wall_ms=wall, converged=True))
            except Exception as exc:
                if failures is not None:
                    failures.append((ny, inst, str(exc)))
    if cfg.out_path is not None:
        write_csv(records, cfg.out_path)
    return records


@dataclasses.dataclass(frozen=True)
class AggregateRow:
    ny: int
    method: str
    median_nmse_db: float
    count: int


def aggregate(records) -> list[AggregateRow]:
    """Median over instances of the layer-0 NMSE at each instance's final
    half-iteration, per output dimension and method."""
    if not records:
        raise ValueError("no records to aggregate")
    groups: dict = {}
    for r in records:
        if r.layer != 0:
            continue
        per_seed = groups.setdefault((r.ny, r.method), {})
        cur = per_seed.get(r.seed)
        if cur is None or r.half_iter > cur[0]:
            per_seed[r.seed] = (r.half_iter, r.nmse_db)
    rows = []
    for (ny, method) in sorted(groups):
        vals = [v for _, v in groups[(ny, method)].values()]
        rows.append(AggregateRow(ny=ny, method=method,
                                 median_nmse_db=float(np.median(vals)),
                                 count=len(vals)))
    return rows


CSV_HEADER = "ny,seed,method,layer,half_iter,nmse_db,wall_ms,converged"


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def write_csv(records, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in records:
            fh.write(f"{r.ny},{r.seed},{r.method},{r.layer},{r.half_iter},"
                     f"{_fmt(r.nmse_db)},{_fmt(r.wall_ms)},"
                     f"{'true' if r.converged else 'false'}\n")


def read_csv(path: str) -> list[RunRecord]:
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        out = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 fields")
            out.append(RunRecord(
                ny=int(parts[0]), seed=int(parts[1]), method=parts[2],
                layer=int(parts[3]), half_iter=int(parts[4]),
                nmse_db=float(parts[5]), wall_ms=float(parts[6]),
                converged=parts[7] == "true"))
    return out


def _load_vector(path: str, key: str) -> np.ndarray:
    with open(path) as fh:
        doc = json.load(fh)
    if key not in doc:
        raise ValueError(f"{path}: missing field {key!r}")
    return np.asarray(doc[key], dtype=float)


def _cmd_gen(args) -> int:
    cfg = SyntheticConfig(
        input_dim=args.input_dim, hidden_dims=tuple(args.hidden_dims),
        output_dim=args.output_dim, positive_fraction=args.positive_fraction,
        condition_number=args.kappa, snr_db=args.snr_db,
        prior_precision=args.prior_precision)
    network = build_random_network(cfg, args.seed)
    save_model(network, args.out)
    print(f"wrote {args.out}: {network.num_layers} layers, input "
          f"{network.input_dim}, output {network.output_dim}")
    if args.sample_out:
        rng = np.random.default_rng(
            np.random.SeedSequence(args.seed, spawn_key=(1,)))
        z0 = rng.normal(0.0, 1.0 / math.sqrt(cfg.prior_precision),
                        size=cfg.input_dim)
        traj = forward_sample(network, z0,
                              np.random.SeedSequence(args.seed, spawn_key=(2,)))
        with open(args.sample_out, "w") as fh:
            json.dump({"signals": [z.tolist() for z in traj.z0],
                       "z0": traj.z0[0].tolist(),
                       "y": traj.z0[-1].tolist()}, fh)
            fh.write("\n")
        print(f"wrote {args.sample_out}")
    return 0


def _cmd_infer(args) -> int:
    network = load_model(args.model)
    y = _load_vector(args.observation, "y")
    truth = None
    if args.truth:
        with open(args.truth) as fh:
            doc = json.load(fh)
        if "signals" not in doc:
            raise ValueError(f"{args.truth}: missing field 'signals'")
        truth = Trajectory(z0=tuple(np.asarray(z, dtype=float)
                                    for z in doc["signals"]))
    opts = RunOptions(max_iters=args.max_iters, damping=args.damping)
    t0 = time.perf_counter()
    res = run(network, y, truth=truth, opts=opts)
    wall = (time.perf_counter() - t0) * 1e3
    print(f"converged={res.converged} iterations={res.iterations} "
          f"wall_ms={wall:.1f}")
    if truth is not None:
        print(f"final layer-0 nmse_db={_fmt(res.nmse_db[-1][0])}")
        if args.trace_out:
            write_csv(_mlvamp_records(network.output_dim, 0, res, wall),
                      args.trace_out)
            print(f"wrote {args.trace_out}")
    if args.estimate_out:
        with open(args.estimate_out, "w") as fh:
            json.dump({"zhat": [z.tolist() for z in res.state.zhat_plus]}, fh)
            fh.write("\n")
        print(f"wrote {args.estimate_out}")
    return 0


def _cmd_predict(args) -> int:
    network = load_model(args.model)
    se = run_se(disturbance_model(network), iters=args.iters,
                mc_samples=args.mc_samples, seed=args.seed)
    lines = ["iter,layer,forward_nmse_db,reverse_nmse_db"]
    n_vars = len(se.tau0)
    for k in range(se.iterations):
        for layer in range(n_vars):
            lines.append(
                f"{k},{layer},{_fmt(_se_nmse_db(se, layer, k, 'forward'))},"
                f"{_fmt(_se_nmse_db(se, layer, k, 'reverse'))}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out}: {se.iterations} iterations, "
              f"converged={se.converged}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_verify(args) -> int:
    network = load_model(args.model)
    y = _load_vector(args.observation, "y")
    chain = EffectiveChain(network)
    gammas = [(args.gamma, args.gamma)] * chain.num_vars
    res, duals = run_fixed(network, y, gammas, args.iters)
    report = check_fixed_point(network, y, res.state, duals)
    print(f"primal_gap={max(report.primal_gap):.3e} "
          f"dual_gap={max(report.dual_gap):.3e} "
          f"stationarity={max(report.stationarity_residual):.3e}")
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


def _cmd_experiment(args) -> int:
    if args.config:
        cfg = load_experiment_config(args.config)
    else:
        cfg = ExperimentConfig()
    if args.snr_db is not None:
        cfg = dataclasses.replace(
            cfg, network=dataclasses.replace(cfg.network, snr_db=args.snr_db))
    if args.damping is not None:
        cfg = dataclasses.replace(
            cfg, run_options=dataclasses.replace(cfg.run_options,
                                                 damping=args.damping))
    if args.max_iters is not None:
        cfg = dataclasses.replace(
            cfg, run_options=dataclasses.replace(cfg.run_options,
                                                 max_iters=args.max_iters))
    if args.mc_samples is not None:
        cfg = dataclasses.replace(cfg, mc_samples=args.mc_samples)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=args.seed)

    failures: list = []
    records = run_experiment(cfg, failures=failures)
    write_csv(records, args.out)
    print(f"wrote {args.out}: {len(records)} records")
    for row in aggregate(records):
        print(f"ny={row.ny} method={row.method} "
              f"median_nmse_db={_fmt(row.median_nmse_db)} n={row.count}")
    total = len(cfg.ny_sweep) * cfg.instances
    for ny, inst, msg in failures:
        print(f"failure: ny={ny} instance={inst}: {msg}", file=sys.stderr)
    if len(failures) > 0.1 * total:
        print(f"error: {len(failures)}/{total} instances failed",
              file=sys.stderr)
        return 1
    return 0


def _cmd_oracle(args) -> int:
    if args.problem == "prox-relu":
        zp, zc = grid_relu_pair(args.r_prev, args.r_cur, args.gamma_plus,
                                args.gamma_minus)
        print(f"z_prev={zp:.6f} z_cur={zc:.6f}")
    else:
        z = grid_prox_input(args.r, args.gamma, args.prior)
        print(f"z={z:.6f}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlvamp",
        description="MAP inference in multi-layer stochastic networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a random network model file")
    p.add_argument("--input-dim", type=int, default=20)
    p.add_argument("--hidden-dims", type=int, nargs="+", default=[100, 500])
    p.add_argument("--output-dim", type=int, default=300)
    p.add_argument("--positive-fraction", type=float, default=0.4)
    p.add_argument("--kappa", type=float, default=10.0)
    p.add_argument("--snr-db", type=float, default=20.0)
    p.add_argument("--prior-precision", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--sample-out",
                   help="also sample one trajectory and write its signals")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("infer", help="run the message-passing solver")
    p.add_argument("--model", required=True)
    p.add_argument("--observation", required=True,
                   help="JSON file with field 'y'")
    p.add_argument("--truth", help="JSON file with field 'signals'")
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--damping", type=float, default=0.8)
    p.add_argument("--trace-out", help="write the per-half NMSE trace CSV")
    p.add_argument("--estimate-out", help="write the estimates as JSON")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("predict", help="run the state-evolution predictor")
    p.add_argument("--model", required=True)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--mc-samples", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("verify",
                       help="fixed-precision run plus fixed-point report")
    p.add_argument("--model", required=True)
    p.add_argument("--observation", required=True)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--iters", type=int, default=300)
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("experiment", help="full sweep over output dimensions")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--out", required=True)
    p.add_argument("--snr-db", type=float)
    p.add_argument("--damping", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--mc-samples", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("oracle", help="brute-force reference solvers")
    psub = p.add_subparsers(dest="problem", required=True)
    pr = psub.add_parser("prox-relu")
    pr.add_argument("--r-prev", type=float, required=True)
    pr.add_argument("--r-cur", type=float, required=True)
    pr.add_argument("--gamma-plus", type=float, default=1.0)
    pr.add_argument("--gamma-minus", type=float, default=1.0)
    pr.set_defaults(func=_cmd_oracle)
    pi = psub.add_parser("prox-input")
    pi.add_argument("--r", type=float, required=True)
    pi.add_argument("--gamma", type=float, default=1.0)
    pi.add_argument("--prior", type=float, default=1.0)
    pi.set_defaults(func=_cmd_oracle)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return int(code) if code is not None else 0
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
