# config.py - Configuration File
import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Solver Settings
BACKEND = os.getenv("DRC_BACKEND", "CLARABEL")
STRATEGY = os.getenv("DRC_STRATEGY", "outer")  # "outer" or "direct"
SOLVER_FEAS_TOL = 1e-8
SOLVER_MAX_ITER = int(os.getenv("DRC_SOLVER_MAX_ITER", "500"))

# Output Settings
OUTPUT_DIR = os.getenv("DRC_OUTPUT_DIR", "results")
RESULTS_DB = os.getenv("DRC_RESULTS_DB", "drc_results.db")
CSV_FLOAT_FORMAT = "%.16e"
JOBS = int(os.getenv("DRC_JOBS", "1"))
DEFAULT_SEED = int(os.getenv("DRC_SEED", "0"))
RNG_ALGORITHM = "numpy.random.PCG64 (SeedSequence)"

# Closed-loop maps
ACHIEVABILITY_TOL = 1e-6
CAUSALITY_TOL = 1e-9
PSD_CLIP_REL = 1e-10  # eigenvalues of D below PSD_CLIP_REL * ||D|| are set to 0
CONDITION_WARN = 1e10

# Discrete Sinkhorn oracle
SINKHORN_STOP_THRESHOLD = 1e-10
SINKHORN_MAX_ITER = 10_000
SINKHORN_LOG_DOMAIN_BELOW = 0.1
SINKHORN_ACCEPT_RESIDUAL = 1e-8
ATOM_MATCH_TOL = 1e-12

# Feasibility oracle
MC_SAMPLES = int(os.getenv("DRC_MC_SAMPLES", "1000000"))
QUADRATURE_NODES = 64
QUADRATURE_MAX_DIM = 3
ORACLE_REL_TOL = 1e-3

# Multiplier search
LAMBDA_REL_TOL = 1e-9
SYNTHESIS_LAMBDA_REL_TOL = 1e-6
LAMBDA_MARGIN = 1e-9
LAMBDA_START_OFFSET = 1e-6
LAMBDA_CAP = 1e12
STRICT_PSD_DELTA = 1e-9

# Certificates
CERTIFICATE_TOL = 1e-6
RISK_CHECK_REL_TOL = 1e-5
BOUNDARY_REL_TOL = 1e-6

# Sweep defaults: logspace(lo, hi, count)
DEFAULT_EPS_GRID = (1e-4, 10.0, 25)
DEFAULT_REPLICATIONS = 20

# Logging Settings
LOG_LEVEL = os.getenv("DRC_LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("DRC_LOG_FILE", "drc.log")

# Backup Settings
BACKUP_PATH = os.getenv("DRC_BACKUP_PATH", "./backups/")
MAX_BACKUP_FILES = int(os.getenv("DRC_MAX_BACKUP_FILES", "7"))

# Names of constants an experiment may override through its "tolerances" block
TUNABLE = (
    "ACHIEVABILITY_TOL", "CAUSALITY_TOL", "PSD_CLIP_REL", "CONDITION_WARN",
    "SINKHORN_STOP_THRESHOLD", "SINKHORN_MAX_ITER", "SINKHORN_ACCEPT_RESIDUAL",
    "MC_SAMPLES", "ORACLE_REL_TOL", "LAMBDA_REL_TOL", "SYNTHESIS_LAMBDA_REL_TOL",
    "STRICT_PSD_DELTA", "SOLVER_FEAS_TOL", "CERTIFICATE_TOL", "RISK_CHECK_REL_TOL",
)


def tolerance_snapshot():
    """Current tunable values, recorded in every run manifest"""
    return {name: globals()[name] for name in TUNABLE}
