"""
Configuration File
Centralized settings for the rowhammer defense simulator.
"""
import os

class Config:
    """Simulator configuration (times in ns, sizes in bytes)"""

    # Application
    APP_NAME = "Row Refresh Simulator"
    VERSION = "1.0.0"

    # Output
    OUTPUT_DIR = "output"
    DEFAULT_METRICS_PATH = os.path.join(OUTPUT_DIR, "metrics.csv")
    DEFAULT_METRICS_FORMAT = "csv"
    SAMPLE_INTERVAL = 1_000_000  # 1 ms

    # DRAM geometry: 64 MiB, 8 banks x 1024 rows x 8 KiB
    DRAM_BANK_FNS = [0x22000, 0x44000, 0x88000]
    DRAM_ROW_SHIFT = 16
    DRAM_ROW_BITS = 10
    DRAM_COLUMN_BITS = 13
    DRAM_ROWS_PER_BANK = 1024
    DRAM_ROW_SIZE = 8192

    # DRAM timing
    DRAM_T_RC = 50
    DRAM_REFRESH_PERIOD = 64_000_000
    DRAM_LATENCY_HIT = 10
    DRAM_LATENCY_CLOSED = 25
    DRAM_LATENCY_CONFLICT = 60
    DRAM_FAULT_SERVICE_TIME = 1000

    # Disturbance model
    DRAM_MAX_DISTANCE = 6
    DRAM_WEIGHT_DECAY = 0.5
    DRAM_HC_FIRST = 20000
    DRAM_HC_SPREAD = 0.25
    DRAM_FLIP_DENSITY = 0.1

    # CPU-side costs
    FLUSH_COST = 20
    INVLPG_COST = 20
    CACHE_HIT_LATENCY = 1

    # Defense
    DEFENSE_MODE = "softtrr"
    TIMER_INR = 1_000_000  # 1 ms
    COUNT_LIMIT = 2
    DEFENSE_MAX_DISTANCE = 6
    RING_CAPACITY = 1024
    RING_GROWTH_LOAD = 0.8
    RING_GROWTH_FACTOR = 4
    TREE_NODE_BYTES = 64
    RING_ENTRY_BYTES = 24
    CHIPTRR_K = 4
    CHIPTRR_THRESHOLD = 4000

    # Attack
    ATTACK_SCENARIO = "none"
    ATTACK_PATTERN = "none"
    ATTACK_M = 50
    ATTACK_DURATION = 10_000_000_000  # per victim, 10 s
    SEED = int(os.getenv("ROWSIM_SEED", 1))
    FAST_FORWARD = True
    FUZZ_BUDGET = 200

    # Mapping probe
    PROBE_SAMPLES = 10_000
    PROBE_BIT_RANGE = (6, 22)
    PROBE_MAX_BITS = 4

    # Logging
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

    @classmethod
    def create_directories(cls):
        """Create necessary directories"""
        os.makedirs(cls.OUTPUT_DIR, exist_ok=True)


class DevelopmentConfig(Config):
    """Development environment configuration"""
    DEBUG = True
    LOG_LEVEL = os.getenv("LOG_LEVEL", "DEBUG")


class ProductionConfig(Config):
    """Production environment configuration"""
    DEBUG = False
    LOG_LEVEL = os.getenv("LOG_LEVEL", "WARNING")


def select_config(env: str) -> Config:
    """Settings for an ENV value; unset or unknown values get the INFO-level base"""
    if env == "production":
        return ProductionConfig()
    if env == "development":
        return DevelopmentConfig()
    return Config()


ENV = os.getenv("ENV", "").lower()
config = select_config(ENV)
