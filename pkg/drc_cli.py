# drc_cli.py - Command Handlers Module
import math
import json
import time
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd

import config
from ambiguity import AmbiguitySpec, feasibility_threshold, feasibility_oracle
from database import Database, SWEEP_COLUMNS, COMPARISON_COLUMNS
from error_handler import DRCError, ConfigError, InfeasibleRadiusError, EXIT_OK
from experiment import ExperimentConfig, build_manifest, write_manifest, write_table, write_samples_csv
from synthesis import (SynthesisRequest, MomentSpec, synthesize_sinkhorn, synthesize_wasserstein,
                       synthesize_nominal, synthesize_h2,
                       evaluate_expected_cost, q_swap_certificate)
from system import ClosedLoopMap, SampleSet, GaussianSampler, monte_carlo_cost, rollout

logger = logging.getLogger(__name__)

NOMINAL_LABEL = "nominal (H2 on empirical moments)"
FEASIBILITY_COLUMNS = ["eps", "rho_min", "oracle", "oracle_stderr", "oracle_method", "agree"]
SUMMARY_COLUMNS = ["controller", "rho", "eps", "count", "median", "q25", "q75"]


def _cell_request(experiment: ExperimentConfig, samples: SampleSet, rho: float, eps: float,
                  strategy: str, backend: str, x0=None) -> SynthesisRequest:
    return SynthesisRequest(experiment.system, experiment.cost, samples, experiment.reference(),
                            AmbiguitySpec(rho, eps), strategy, backend, experiment.tolerances, x0=x0)


def _sweep_cell(task: Dict[str, Any]) -> Dict[str, Any]:
    """One (rho, eps) cell; runs in a worker process when --jobs > 1"""
    experiment = ExperimentConfig(task["raw"], task["base_dir"])
    experiment.apply_tolerances()
    samples = SampleSet(task["samples"])
    record = {"rho": task["rho"], "eps": task["eps"], "status": "ok", "wc_cost": math.nan,
              "lambda_star": math.nan, "rho_min": math.nan, "solve_time": 0.0, "backend": task["backend"]}
    start = time.perf_counter()
    try:
        req = _cell_request(experiment, samples, task["rho"], task["eps"], task["strategy"], task["backend"],
                            task.get("x0"))
        record["rho_min"] = feasibility_threshold(req.noise_samples, req.noise_ref, task["eps"])
        bundle = synthesize_sinkhorn(req)
        record.update(wc_cost=bundle.wc_cost, lambda_star=bundle.lambda_star)
        if bundle.boundary:
            record["status"] = "boundary"
    except InfeasibleRadiusError as error:
        record.update(status="infeasible", rho_min=error.rho_min)
    except Exception as error:
        # any failure stays inside its cell
        logger.error(f"Sweep cell rho={task['rho']:g}, eps={task['eps']:g} failed: {error}")
        record["status"] = f"failed: {type(error).__name__}"
    record["solve_time"] = time.perf_counter() - start
    return record


def _compare_replication(task: Dict[str, Any]) -> List[Dict[str, Any]]:
    """All controllers for one seed replication, scored under the true moments"""
    experiment = ExperimentConfig(task["raw"], task["base_dir"])
    experiment.apply_tolerances()
    samples = experiment.sampler(seed=task["sample_seed"]).sample_set(task["n"])
    truth = experiment.true_moments()
    x0 = task.get("x0")
    if x0 is not None:
        samples = samples.with_fixed_initial_state(x0)
        truth = truth.given_initial_state(x0)
    system, cost = experiment.system, experiment.cost
    rows = []

    def score(controller: str, rho: float, eps: float, build: Callable[[], Any]):
        row = {"replication": task["replication"], "controller": controller, "rho": rho, "eps": eps,
               "status": "ok", "realized_cost": math.nan, "mc_mean": math.nan, "mc_stderr": math.nan}
        try:
            bundle = build()
            row["realized_cost"] = evaluate_expected_cost(bundle.map, truth, cost)
            if task["monte_carlo"] > 0:
                sampler = GaussianSampler(truth.mean, truth.cov, seed=task["mc_seed"])
                mc = monte_carlo_cost(system, cost, bundle.map, sampler, task["monte_carlo"])
                row.update(mc_mean=mc["mean"], mc_stderr=mc["stderr"])
        except InfeasibleRadiusError:
            row["status"] = "infeasible"
        except Exception as error:
            logger.error(f"Replication {task['replication']}, {controller} failed: {error}")
            row["status"] = f"failed: {type(error).__name__}"
        rows.append(row)

    for rho in task["rho_grid"]:
        score("wasserstein", rho, 0.0, lambda: synthesize_wasserstein(
            _cell_request(experiment, samples, rho, 0.0, task["strategy"], task["backend"], x0)))
        for eps in task["eps_grid"]:
            if eps > 0:
                score("sinkhorn", rho, eps, lambda: synthesize_sinkhorn(
                    _cell_request(experiment, samples, rho, eps, task["strategy"], task["backend"], x0)))
    score(NOMINAL_LABEL, math.nan, math.nan, lambda: synthesize_nominal(system, cost, samples))
    score("h2-true", math.nan, math.nan, lambda: synthesize_h2(system, cost, truth))
    return rows


def _summarize(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    frame = pd.DataFrame(rows)
    frame = frame[frame["status"] == "ok"]
    grouped = frame.groupby(["controller", "rho", "eps"], dropna=False)["realized_cost"]
    summary = grouped.agg(count="count", median="median",
                          q25=lambda v: v.quantile(0.25), q75=lambda v: v.quantile(0.75))
    return summary.reset_index()[SUMMARY_COLUMNS]


class ExperimentRunner:
    """एक CLI invocation: config load करता है और subcommand चलाता है"""

    def __init__(self, args, db: Optional[Database] = None):
        self.args = args
        self.db = db
        self.experiment: Optional[ExperimentConfig] = None

    def _database(self) -> Database:
        if self.db is None:
            self.db = Database()
        return self.db

    def _load(self) -> ExperimentConfig:
        if not getattr(self.args, "config", None):
            raise ConfigError("--config PATH is required for this command")
        experiment = ExperimentConfig.from_file(self.args.config)
        if getattr(self.args, "strategy", None):
            experiment.strategy = self.args.strategy
        if getattr(self.args, "backend", None):
            experiment.backend = self.args.backend
        if getattr(self.args, "seed", None) is not None:
            experiment.seed = self.args.seed
        experiment.apply_tolerances()
        self.experiment = experiment
        return experiment

    def _out_dir(self, experiment: Optional[ExperimentConfig]) -> Path:
        out = getattr(self.args, "out", None) or (experiment.output_dir if experiment else config.OUTPUT_DIR)
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def _x0(self, experiment: ExperimentConfig) -> Optional[List[float]]:
        """--x0 as a list, checked against the state dimension"""
        x0 = getattr(self.args, "x0", None)
        if x0 is None:
            return None
        if len(x0) != experiment.system.d:
            raise ConfigError(f"--x0 has {len(x0)} entries, the state has d = {experiment.system.d}")
        return [float(v) for v in x0]

    def _start(self, command: str, experiment: Optional[ExperimentConfig], out_dir: Path, **extra):
        seed = experiment.seed if experiment else config.DEFAULT_SEED
        manifest = build_manifest(command, experiment, seed, **extra)
        manifest_hash = write_manifest(str(out_dir), manifest)
        run_id = self._database().register_run(command, manifest)
        logger.info(f"Run {run_id} ({command}) writing to {out_dir}")
        return manifest_hash, run_id

    def _pick(self, name: str, grid: List[float]) -> float:
        value = getattr(self.args, name, None)
        return float(grid[0] if value is None else value)

    def _map(self, worker: Callable, tasks: List[Dict[str, Any]]) -> List[Any]:
        jobs = getattr(self.args, "jobs", None) or config.JOBS
        if jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                return list(pool.map(worker, tasks))
        return [worker(task) for task in tasks]

    def cmd_synthesize(self) -> int:
        experiment = self._load()
        rho = self._pick("rho", experiment.rho_grid)
        eps = self._pick("eps", experiment.eps_grid)
        samples = experiment.load_samples()
        x0 = self._x0(experiment)
        out_dir = self._out_dir(experiment)
        manifest_hash, run_id = self._start("synthesize", experiment, out_dir, rho=rho, eps=eps, x0=x0)

        req = _cell_request(experiment, samples, rho, eps, experiment.strategy, experiment.backend, x0)
        bundle = synthesize_sinkhorn(req)
        certificate = q_swap_certificate(bundle, req)

        stacked = req.stacked
        columns = [f"c{j}" for j in range(stacked.s)]
        write_table(str(out_dir / "phi_x.csv"), bundle.map.phi_x.tolist(), columns, manifest_hash)
        write_table(str(out_dir / "phi_u.csv"), bundle.map.phi_u.tolist(), columns, manifest_hash)
        controller = bundle.controller()
        if controller is not None:
            write_table(str(out_dir / "controller_K.csv"), controller.K.tolist(),
                        [f"c{j}" for j in range(controller.K.shape[1])], manifest_hash)

        summary = {**bundle.to_dict(), "certificate": {k: v for k, v in certificate.items() if k != "violations"},
                   "controller_recovered": controller is not None, "manifest_sha256": manifest_hash, "run_id": run_id}
        (out_dir / "solution.json").write_text(json.dumps(summary, indent=2, default=str), encoding="utf-8")
        print(f"wc_cost={bundle.wc_cost:.12g} lambda*={bundle.lambda_star:.12g} (rho={rho:g}, eps={eps:g})")
        return EXIT_OK

    def cmd_sweep(self) -> int:
        experiment = self._load()
        samples = experiment.load_samples()
        x0 = self._x0(experiment)
        out_dir = self._out_dir(experiment)
        manifest_hash, run_id = self._start("sweep", experiment, out_dir, x0=x0)

        base = {"raw": experiment.raw, "base_dir": str(experiment.base_dir), "samples": np.array(samples.trajectories),
                "strategy": experiment.strategy, "backend": experiment.backend, "x0": x0}
        tasks = [{**base, "rho": rho, "eps": eps} for rho in experiment.rho_grid for eps in experiment.eps_grid]
        tasks += [{**base, "rho": rho, "eps": 0.0} for rho in experiment.rho_grid]
        results = self._map(_sweep_cell, tasks)

        wasserstein = {r["rho"]: r["wc_cost"] for r in results[len(results) - len(experiment.rho_grid):]}
        reference_moments = MomentSpec.from_reference(experiment.reference())
        if x0 is not None:
            reference_moments = reference_moments.given_initial_state(x0)
        reference = synthesize_h2(experiment.system, experiment.cost, reference_moments)
        h2_cost = evaluate_expected_cost(reference.map, reference_moments, experiment.cost)
        records = results[:len(results) - len(experiment.rho_grid)]
        for record in records:
            record.update(wasserstein_cost=wasserstein[record["rho"]], h2_reference_cost=h2_cost)
        records.sort(key=lambda r: (r["rho"], r["eps"]))

        write_table(str(out_dir / "sweep.csv"), records, list(SWEEP_COLUMNS), manifest_hash)
        self._database().save_sweep_records(run_id, records)
        failed = sum(1 for r in records if r["status"] not in ("ok", "boundary"))
        print(f"sweep: {len(records)} cells, {failed} without wc_cost -> {out_dir / 'sweep.csv'}")
        return EXIT_OK

    def cmd_compare(self) -> int:
        experiment = self._load()
        generator = (experiment.raw.get("samples") or {}).get("generator")
        if not generator:
            raise ConfigError("compare redraws samples per replication and needs samples.generator")
        experiment.true_moments()
        x0 = self._x0(experiment)
        out_dir = self._out_dir(experiment)
        manifest_hash, run_id = self._start("compare", experiment, out_dir, nominal_definition=NOMINAL_LABEL,
                                            replications=experiment.replications, x0=x0)

        streams = np.random.SeedSequence(experiment.seed).spawn(experiment.replications)
        tasks = []
        for index, stream in enumerate(streams):
            sample_seed, mc_seed = (int(v) for v in stream.generate_state(2))
            tasks.append({"raw": experiment.raw, "base_dir": str(experiment.base_dir), "replication": index,
                          "sample_seed": sample_seed, "mc_seed": mc_seed, "n": int(generator["n"]),
                          "rho_grid": experiment.rho_grid, "eps_grid": experiment.eps_grid,
                          "strategy": experiment.strategy, "backend": experiment.backend,
                          "monte_carlo": experiment.monte_carlo, "x0": x0})
        rows = [row for replication in self._map(_compare_replication, tasks) for row in replication]

        write_table(str(out_dir / "compare.csv"), rows, list(COMPARISON_COLUMNS), manifest_hash)
        summary = _summarize(rows)
        write_table(str(out_dir / "compare_summary.csv"), summary, SUMMARY_COLUMNS, manifest_hash)
        self._database().save_comparison_rows(run_id, rows)
        print(summary.to_string(index=False))
        return EXIT_OK

    def cmd_feasibility(self) -> int:
        experiment = self._load()
        samples = experiment.load_samples()
        ref = experiment.reference()
        x0 = self._x0(experiment)
        if x0 is not None:
            # the ball lives on the disturbance block only
            samples = samples.disturbances(experiment.system.d)
            ref = ref.given_initial_state(x0)
        out_dir = self._out_dir(experiment)
        manifest_hash, _ = self._start("feasibility", experiment, out_dir, x0=x0)

        rows = []
        for eps in experiment.eps_grid:
            closed = feasibility_threshold(samples, ref, eps)
            if eps == 0:
                oracle = {"rho_min": 0.0, "stderr": 0.0, "method": "exact"}
            else:
                oracle = feasibility_oracle(samples, ref, eps, seed=experiment.seed)
            slack = config.ORACLE_REL_TOL * max(abs(closed), 1e-12) + 3.0 * oracle["stderr"]
            rows.append({"eps": eps, "rho_min": closed, "oracle": oracle["rho_min"],
                         "oracle_stderr": oracle["stderr"], "oracle_method": oracle["method"],
                         "agree": bool(abs(closed - oracle["rho_min"]) <= slack)})
            print(f"eps={eps:.6e}  rho_min={closed:.12g}  oracle={oracle['rho_min']:.12g}  "
                  f"agree={rows[-1]['agree']}")

        values = [row["rho_min"] for row in rows]
        if any(b < a - 1e-12 * (1 + abs(a)) for a, b in zip(values, values[1:])):
            logger.warning("rho_min column is not nondecreasing in eps")
        write_table(str(out_dir / "feasibility.csv"), rows, FEASIBILITY_COLUMNS, manifest_hash)
        return EXIT_OK

    def cmd_generate_samples(self) -> int:
        experiment = self._load()
        generator = (experiment.raw.get("samples") or {}).get("generator") or {}
        n = getattr(self.args, "n", None) or generator.get("n")
        if not n:
            raise ConfigError("sample count missing: pass --n or set samples.generator.n")
        seed = getattr(self.args, "seed", None)
        sampler = experiment.sampler(seed=seed)
        out_dir = self._out_dir(experiment)
        manifest_hash, _ = self._start("gen-samples", experiment, out_dir, n=int(n), sample_seed=sampler.seed)
        samples = sampler.sample_set(int(n))
        path = write_samples_csv(str(out_dir / "samples.csv"), samples, experiment.system, manifest_hash)
        print(f"{samples.n} x {samples.s} samples -> {path}")
        return EXIT_OK

    def _load_map(self, experiment: ExperimentConfig) -> ClosedLoopMap:
        directory = Path(self.args.solution)
        try:
            phi_x, phi_u = (
                pd.read_csv(directory / name, comment="#", float_precision="round_trip").to_numpy(dtype=float)
                for name in ("phi_x.csv", "phi_u.csv"))
        except OSError as error:
            raise ConfigError(f"cannot read solution from {directory}: {error}")
        system = experiment.system
        return ClosedLoopMap(phi_x, phi_u, system.d, system.m, system.p)

    def cmd_rollout(self) -> int:
        experiment = self._load()
        x0 = self._x0(experiment)
        if getattr(self.args, "solution", None):
            closed_loop = self._load_map(experiment)
        else:
            rho = self._pick("rho", experiment.rho_grid)
            eps = self._pick("eps", experiment.eps_grid)
            req = _cell_request(experiment, experiment.load_samples(), rho, eps,
                                experiment.strategy, experiment.backend, x0)
            closed_loop = synthesize_sinkhorn(req).map

        if experiment.raw.get("true_distribution"):
            moments = experiment.true_moments()
        else:
            moments = MomentSpec.from_reference(experiment.reference())
        if x0 is not None:
            moments = moments.given_initial_state(x0)
        count = getattr(self.args, "count", None) or experiment.monte_carlo or 100_000
        out_dir = self._out_dir(experiment)
        manifest_hash, _ = self._start("rollout", experiment, out_dir, rollouts=int(count), x0=x0)

        sampler = GaussianSampler(moments.mean, moments.cov, seed=experiment.seed)
        example = rollout(experiment.system, experiment.cost, closed_loop, sampler.draw(1)[0])
        mc = monte_carlo_cost(experiment.system, experiment.cost, closed_loop, sampler, int(count))
        analytic = evaluate_expected_cost(closed_loop, moments, experiment.cost)
        z_score = (mc["mean"] - analytic) / mc["stderr"] if mc["stderr"] > 0 else 0.0

        states = example["states"]
        inputs = example["inputs"]
        trajectory = np.hstack([states, inputs])
        columns = [f"x_{j + 1}" for j in range(states.shape[1])] + [f"u_{j + 1}" for j in range(inputs.shape[1])]
        write_table(str(out_dir / "rollout.csv"), trajectory.tolist(), columns, manifest_hash)
        report = {**mc, "analytic": analytic, "z_score": z_score, "within_3se": bool(abs(z_score) <= 3.0),
                  "example_cost": example["cost"], "manifest_sha256": manifest_hash}
        (out_dir / "rollout.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
        print(f"monte-carlo={mc['mean']:.10g} +/- {mc['stderr']:.3g}  analytic={analytic:.10g}  z={z_score:.2f}")
        return EXIT_OK

    def cmd_registry(self) -> int:
        """Run registry maintenance: list, backup, cleanup"""
        db = self._database()
        days = getattr(self.args, "cleanup_days", None)
        if days is not None:
            db.cleanup_old_runs(days)
        if getattr(self.args, "backup", False):
            if not db.backup_database(config.BACKUP_PATH):
                raise DRCError(f"backup of {db.db_name} into {config.BACKUP_PATH} failed")
            print(f"backup written to {config.BACKUP_PATH} (keeping {config.MAX_BACKUP_FILES})")

        runs = db.recent_runs(getattr(self.args, "limit", None) or 20)
        for run in runs:
            print(f"#{run['id']:<5} {run['command']:<12} seed={run['seed']}  {run['created_at']}  "
                  f"{(run['config_hash'] or '')[:12]}")
        if not runs:
            print("no runs registered")
        return EXIT_OK

    COMMANDS = {
        "synthesize": "cmd_synthesize",
        "sweep": "cmd_sweep",
        "compare": "cmd_compare",
        "feasibility": "cmd_feasibility",
        "gen-samples": "cmd_generate_samples",
        "rollout": "cmd_rollout",
        "registry": "cmd_registry",
    }

    def run(self, command: str) -> int:
        return getattr(self, self.COMMANDS[command])()
