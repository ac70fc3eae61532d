# experiment.py - Experiment Configuration and File I/O Module
import json
import hashlib
import logging
import platform
from datetime import datetime
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import psutil

import config
from ambiguity import GaussianReference
from error_handler import ConfigError, ValidationError
from synthesis import MomentSpec
from system import SystemSpec, CostSpec, SampleSet, GaussianSampler

logger = logging.getLogger(__name__)

VERSIONED_PACKAGES = ("numpy", "scipy", "cvxpy", "POT", "pandas")


def sample_header(N: int, d: int, p: int) -> List[str]:
    """x0_1..x0_d, then w{t}_1..w{t}_p for t = 0..N-2"""
    header = [f"x0_{j + 1}" for j in range(d)]
    for t in range(N - 1):
        header += [f"w{t}_{j + 1}" for j in range(p)]
    return header


def write_samples_csv(path: str, samples: SampleSet, system: SystemSpec,
                      manifest_hash: Optional[str] = None) -> str:
    """एक trajectory per row, header mandatory"""
    header = sample_header(system.N, system.d, system.p)
    if samples.s != len(header):
        raise ValidationError(f"samples have {samples.s} columns, header needs {len(header)}")
    frame = pd.DataFrame(np.array(samples.trajectories), columns=header)
    _write_frame(path, frame, manifest_hash)
    logger.info(f"Wrote {samples.n} trajectories to {path}")
    return path


def read_samples_csv(path: str, system: Optional[SystemSpec] = None) -> SampleSet:
    try:
        frame = pd.read_csv(path, comment="#", float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as error:
        raise ConfigError(f"cannot read samples from {path}: {error}")
    columns = list(frame.columns)
    if not columns or not columns[0].startswith("x0_"):
        raise ConfigError(f"{path}: header must start with x0_1 (got {columns[:1]})")
    if system is not None and columns != sample_header(system.N, system.d, system.p):
        raise ConfigError(f"{path}: header does not match N={system.N}, d={system.d}, p={system.p}")
    return SampleSet(frame.to_numpy(dtype=float))


def _write_frame(path: str, frame: pd.DataFrame, manifest_hash: Optional[str]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        if manifest_hash:
            handle.write(f"# manifest_sha256={manifest_hash}\n")
        frame.to_csv(handle, index=False, float_format=config.CSV_FLOAT_FORMAT)


def write_table(path: str, rows: List[Any], columns: List[str],
                manifest_hash: Optional[str] = None) -> str:
    """Result rows को CSV में full double precision के साथ लिखता है"""
    frame = pd.DataFrame(rows, columns=columns)
    _write_frame(path, frame, manifest_hash)
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def _matrix(value, name: str) -> np.ndarray:
    try:
        return np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"'{name}' must be a number or nested list of numbers")


def _gaussian_block(block: Dict[str, Any], s: int, name: str):
    """(mean, cov) from {"mean": vec|null, "cov": mat} or {"cov_scale": c}"""
    mean = np.zeros(s) if block.get("mean") is None else np.ravel(_matrix(block["mean"], f"{name}.mean"))
    if "cov" in block:
        cov = np.atleast_2d(_matrix(block["cov"], f"{name}.cov"))
    elif "cov_scale" in block:
        cov = float(block["cov_scale"]) * np.eye(s)
    else:
        raise ConfigError(f"'{name}' needs either 'cov' or 'cov_scale'")
    if mean.size != s or cov.shape != (s, s):
        raise ConfigError(f"'{name}' has mean {mean.size} / covariance {cov.shape}, expected dimension {s}")
    return mean, cov


class ExperimentConfig:
    """JSON experiment description; matrices are nested lists, row-major"""

    def __init__(self, data: Dict[str, Any], base_dir: str = "."):
        if not isinstance(data, dict):
            raise ConfigError("experiment config must be a JSON object")
        self.raw = data
        self.base_dir = Path(base_dir)
        self.name = data.get("name", "experiment")
        self.seed = int(data.get("seed", config.DEFAULT_SEED))
        self.strategy = data.get("strategy", config.STRATEGY)
        self.backend = data.get("backend", config.BACKEND)
        self.replications = int(data.get("replications", config.DEFAULT_REPLICATIONS))
        self.monte_carlo = int(data.get("monte_carlo", 0))
        self.output_dir = data.get("output_dir", config.OUTPUT_DIR)
        self.tolerances = dict(data.get("tolerances", {}))
        unknown = set(self.tolerances) - set(config.TUNABLE)
        if unknown:
            raise ConfigError(f"unknown tolerance names: {', '.join(sorted(unknown))}")

        self.system = self._build_system(data.get("system"))
        self.cost = self._build_cost(data.get("cost"))
        self.rho_grid = [float(r) for r in data.get("rho_grid", [])]
        self.eps_grid = self._build_eps_grid(data.get("eps_grid"))
        if not self.rho_grid:
            raise ConfigError("rho_grid must be a nonempty list")
        if any(r < 0 for r in self.rho_grid) or any(e < 0 for e in self.eps_grid):
            raise ConfigError("rho_grid and eps_grid entries must be >= 0")

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                data = json.load(handle)
        except json.JSONDecodeError as error:
            raise ConfigError(f"{path} is not valid JSON: {error}")
        logger.info(f"Loaded experiment config {path}")
        return cls(data, base_dir=str(Path(path).parent))

    def _resolve(self, path: str) -> Path:
        candidate = Path(path)
        return candidate if candidate.is_absolute() else self.base_dir / candidate

    def _build_system(self, block: Optional[Dict[str, Any]]) -> SystemSpec:
        if not block:
            raise ConfigError("config needs a 'system' block")
        if "path" in block:
            with open(self._resolve(block["path"]), "r", encoding="utf-8") as handle:
                block = json.load(handle)
        try:
            if block.get("preset") == "mass_spring":
                return SystemSpec.mass_spring(int(block["horizon"]), float(block.get("mass", 1.0)),
                                              float(block.get("spring", 1.0)), float(block.get("damping", 1.0)),
                                              float(block.get("sampling_time", 1.0)))
            if "preset" in block:
                raise ConfigError(f"unknown system preset '{block['preset']}'")
            return SystemSpec(int(block["horizon"]), _matrix(block["A"], "A"), _matrix(block["B"], "B"),
                              _matrix(block["E"], "E"))
        except KeyError as error:
            raise ConfigError(f"system block is missing {error}")

    def _build_cost(self, block: Optional[Dict[str, Any]]) -> CostSpec:
        N, d, m = self.system.N, self.system.d, self.system.m
        if not block:
            return CostSpec.identity(N, d, m)
        if "D" in block:
            return CostSpec(_matrix(block["D"], "cost.D"))
        if "state_weight" in block and "input_weight" in block:
            return CostSpec.from_weights(N, _matrix(block["state_weight"], "state_weight"),
                                         _matrix(block["input_weight"], "input_weight"))
        raise ConfigError("cost block needs 'D' or both 'state_weight' and 'input_weight'")

    @staticmethod
    def _build_eps_grid(block) -> List[float]:
        if block is None:
            lo, hi, count = config.DEFAULT_EPS_GRID
        elif isinstance(block, dict) and "logspace" in block:
            lo, hi, count = block["logspace"]
        elif isinstance(block, list) and block:
            return sorted(float(e) for e in block)
        else:
            raise ConfigError("eps_grid must be a nonempty list or {\"logspace\": [lo, hi, count]}")
        if lo <= 0 or hi < lo or int(count) < 1:
            raise ConfigError(f"invalid logspace eps grid ({lo}, {hi}, {count})")
        return [float(e) for e in np.logspace(np.log10(lo), np.log10(hi), int(count))]

    def reference(self) -> GaussianReference:
        block = self.raw.get("reference")
        if not block:
            raise ConfigError("config needs a 'reference' block")
        mean, cov = _gaussian_block(block, self.system.s, "reference")
        return GaussianReference(mean, cov)

    def true_moments(self) -> MomentSpec:
        block = self.raw.get("true_distribution")
        if not block:
            raise ConfigError("this command needs a 'true_distribution' block")
        mean, cov = _gaussian_block(block, self.system.s, "true_distribution")
        return MomentSpec(mean, cov)

    def sampler(self, seed: Optional[int] = None) -> GaussianSampler:
        block = (self.raw.get("samples") or {}).get("generator")
        if not block:
            raise ConfigError("samples block has no 'generator'")
        if block.get("distribution", "gaussian") != "gaussian":
            raise ConfigError(f"unsupported distribution '{block['distribution']}'")
        mean, cov = _gaussian_block(block, self.system.s, "samples.generator")
        return GaussianSampler(mean, cov, seed=block.get("seed", self.seed) if seed is None else seed)

    def load_samples(self, seed: Optional[int] = None) -> SampleSet:
        block = self.raw.get("samples")
        if not block:
            raise ConfigError("config needs a 'samples' block")
        if "path" in block:
            return read_samples_csv(str(self._resolve(block["path"])), self.system)
        n = int(block.get("generator", {}).get("n", 0))
        if n < 1:
            raise ConfigError("samples.generator.n must be >= 1")
        return self.sampler(seed).sample_set(n)

    def apply_tolerances(self):
        """Experiment-level tolerance overrides को config module पर लागू करता है"""
        for name, value in self.tolerances.items():
            setattr(config, name, type(getattr(config, name))(value))
        if self.tolerances:
            logger.info(f"Tolerance overrides: {self.tolerances}")

    def config_hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {}
    for package in VERSIONED_PACKAGES:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "not installed"
    return versions


def host_info() -> Dict[str, Any]:
    memory = psutil.virtual_memory()
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "logical_cpus": psutil.cpu_count(logical=True),
        "memory_total_mb": round(memory.total / (1024 * 1024)),
    }


def build_manifest(command: str, experiment: Optional[ExperimentConfig], seed: int,
                   **extra) -> Dict[str, Any]:
    manifest = {
        "command": command,
        "config_hash": experiment.config_hash() if experiment else None,
        "config_name": experiment.name if experiment else None,
        "seed": seed,
        "rng": config.RNG_ALGORITHM,
        "tolerances": config.tolerance_snapshot(),
        "backend": experiment.backend if experiment else config.BACKEND,
        "strategy": experiment.strategy if experiment else config.STRATEGY,
        "eps_grid": experiment.eps_grid if experiment else None,
        "versions": package_versions(),
        "host": host_info(),
        "created_at": datetime.now().isoformat(timespec="seconds"),
    }
    manifest.update(extra)
    return manifest


def write_manifest(out_dir: str, manifest: Dict[str, Any]) -> str:
    """manifest.json लिखता है; return value उसका sha256 है"""
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    text = json.dumps(manifest, indent=2, sort_keys=True, default=str)
    (Path(out_dir) / "manifest.json").write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
