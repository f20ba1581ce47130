import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Global constants
RUN_ROOT = os.getenv('IPP_RUN_ROOT', 'runs')
LOG_DIR = os.getenv('IPP_LOG_DIR', 'logs')

# Void class id for unlabelled pixels
VOID_CLASS = 0

# Occupancy grid mapping
P_HIT = 0.7
P_MISS = 0.4
LOG_ODDS_MIN = -2.0
LOG_ODDS_MAX = 3.5
TAU_OCC = 0.65
TAU_FREE = 0.35
SEMANTIC_P_FLOOR = 0.01

# Checkpoint / map file format versions
CHECKPOINT_VERSION = 1
MAP_FORMAT_VERSION = 1
