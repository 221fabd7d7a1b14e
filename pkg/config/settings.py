import os
from dotenv import load_dotenv

load_dotenv()

_ROOT = os.path.dirname(os.path.dirname(__file__))

# Tail-table cache (HARDWALL_CACHE_DIR overrides the default, --cache-dir overrides both)
CACHE_DIR = os.getenv('HARDWALL_CACHE_DIR', '') or os.path.join(_ROOT, 'data', 'cache')

# Experiment outputs (CSV + JSON reports)
OUTPUT_DIR = os.getenv('HARDWALL_OUTPUT_DIR', '') or os.path.join(_ROOT, 'data', 'reports')

# Run log (SQLite)
RUN_LOG_PATH = os.getenv('RUN_LOG_PATH', '') or os.path.join(_ROOT, 'data', 'run_log.db')

# Tail grid defaults
DX = float(os.getenv('HARDWALL_DX', '0.01'))
N_REF = int(os.getenv('HARDWALL_N_REF', '512'))
GRID_LEFT_MARGIN = float(os.getenv('HARDWALL_GRID_LEFT_MARGIN', '40'))
GRID_RIGHT_EDGE = float(os.getenv('HARDWALL_GRID_RIGHT_EDGE', '12'))
KERNEL_HALF_WIDTH = float(os.getenv('HARDWALL_KERNEL_HALF_WIDTH', '8'))

# Conditioned laws
K_PLUS_DELTA = int(os.getenv('HARDWALL_K_PLUS_DELTA', '10'))
PROPAGATION_DX = float(os.getenv('HARDWALL_PROPAGATION_DX', '0.05'))
N_SPINE = int(os.getenv('HARDWALL_N_SPINE', '48'))

# Runner
SEED = int(os.getenv('HARDWALL_SEED', '20240601'))
THREADS = int(os.getenv('HARDWALL_THREADS', '1'))
# workers inside one free-field draw; results do not depend on it
FIELD_THREADS = int(os.getenv('HARDWALL_FIELD_THREADS', '1'))
BUDGET_SECONDS = float(os.getenv('HARDWALL_BUDGET_SECONDS', '600'))
MEMORY_BUDGET_MB = float(os.getenv('HARDWALL_MEMORY_BUDGET_MB', '512'))

LOG_LEVEL = os.getenv('HARDWALL_LOG_LEVEL', 'INFO').upper()
