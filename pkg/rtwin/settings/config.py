import os

from dotenv import load_dotenv

# Load Environment Variables
load_dotenv()


ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SETTINGS_DIR = os.path.join(ROOT_DIR, "settings")

# DEFAULT ENGINE CONFIG FILE (overridable with RTWIN_CONFIG)
DEFAULT_CONFIG_FILE = os.getenv(
    "RTWIN_CONFIG", os.path.join(SETTINGS_DIR, "settings.yaml")
)

# GLOBAL
SEED = int(os.getenv("RTWIN_SEED", "0"))
THREADS = int(os.getenv("RTWIN_THREADS", "0"))  # 0 means one per physical core

# GRID (OpenKBP layout)
DESK_SHAPE = (16, 16, 16)
VOXEL_DIMS_MM = (3.0, 3.0, 3.0)

# SPARSE CSV FILE NAMES
CT_FILE = "ct.csv"
DOSE_FILE = "dose.csv"
FEASIBLE_MASK_FILE = "possible_dose_mask.csv"
VOXEL_DIMENSIONS_FILE = "voxel_dimensions.csv"
PATIENT_META_FILE = "patient.yaml"
RESERVED_FILE_NAMES = [CT_FILE, DOSE_FILE, FEASIBLE_MASK_FILE, VOXEL_DIMENSIONS_FILE]

# ROI ROLES (unknown names default to organ-at-risk)
TARGET_ROI_NAMES = ["PTV", "PTV56", "PTV63", "PTV70", "target"]
OAR_ROI_NAMES = [
    "Brainstem",
    "SpinalCord",
    "RightParotid",
    "LeftParotid",
    "Esophagus",
    "Larynx",
    "Mandible",
    "oar",
]

# PHANTOM
PRESCRIPTION_GY = 60.0
KERNEL_WIDTH_MM = 9.0
FEASIBLE_MARGIN_MM = 6.0
TARGET_HU = 100.0
OAR_HU = -50.0
SHIFT_VOXELS = 2

# SURROGATE
DROPOUT_RATE = 0.1
DISTANCE_SCALE_MM = 10.0
SMOOTHING_SCALES_MM = (3.0, 9.0)
INIT_LOW = 0.0
INIT_HIGH = 0.5
PARAM_FORMAT_VERSION = 1

# TRAINING
LEARNING_RATE = 5e-3
ITERATIONS = 20000
MINIBATCH = 0  # 0 means the whole cohort
TOLERANCE = 1e-12

# UNCERTAINTY AND DVH
N_DVH_LEVELS = 100
BAND_CONFIDENCE = 95.0
UNCERTAINTY_AGGREGATION = "target_mean"

# CALIBRATION
N_PARTICLES = 500
OBSERVATION_NOISE_GY = 0.5
PROCESS_NOISE = 0.02
RIDGE = 1.0
MAP_ITERATIONS = 500
MAP_TOLERANCE = 1e-14
MAP_GRAD_TOLERANCE = 1e-9

# DECISION
ENSEMBLE_SIZE = 30
MIN_SAMPLES_PER_ALPHA = 5
SCALE_BOUNDS = (0.8, 1.2)
MAX_MODULATION = 2.0
MIN_RECOMMENDED_K = 20
UTILITY_LAMBDA = 1.0
UTILITY_GAMMA = 0.01
TCP_ALPHA = 0.3  # Gy^-1
TCP_CLONOGENS = 1e6
NTCP_MODEL = "lkb"
NTCP_TD50 = 50.0
NTCP_M = 0.2
NTCP_N = 0.1
NTCP_GAMMA50 = 2.0

# SCENARIO
N_FRACTIONS = 30
SHIFT_FRACTION = 10
RECALIBRATE_EVERY = 4
TRIGGER_FACTOR = 1.5
TRIGGER_WINDOW = 3
OBSERVATION_WINDOW = 2
NTCP_REFERENCE = 0.15
SCENARIO_ENSEMBLE_SIZE = 60
SCENARIO_DROPOUT_RATE = 0.3
SCENARIO_INIT_RANGE = (1.0, 2.0)
SCENARIO_LEARNING_RATE = 2e-5
SCENARIO_ITERATIONS = 6000
SCENARIO_PRIOR_SPREAD = 0.05

# LOG CONFIG
LOG_FOLDER = os.getenv("RTWIN_LOG_FOLDER", os.path.join(ROOT_DIR, "logs"))
RTWIN_LOG_FILE = os.path.join(LOG_FOLDER, "rtwin.log")

# PROGRESS BAR
BAR_FORMAT = "{l_bar}{bar}| {n_fmt}/{total_fmt} [{elapsed}, {rate_fmt}{postfix}]"
