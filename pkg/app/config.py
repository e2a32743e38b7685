
import os
from dotenv import load_dotenv

load_dotenv()


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    return int(value) if value not in (None, "") else default


def _env_float(name: str, default: float) -> float:
    value = os.getenv(name)
    return float(value) if value not in (None, "") else default


class Config:
    LOG_LEVEL = os.getenv('HABSEL_LOG_LEVEL', 'INFO')
    THREADS = _env_int('HABSEL_THREADS', 1)

    # Sampler defaults
    CHAINS = _env_int('HABSEL_CHAINS', 4)
    WARMUP = _env_int('HABSEL_WARMUP', 5000)
    SAMPLES = _env_int('HABSEL_SAMPLES', 10000)
    THIN = _env_int('HABSEL_THIN', 5)
    SEED = _env_int('HABSEL_SEED', 0)
    RHAT_WARN = _env_float('HABSEL_RHAT_WARN', 1.05)

    # Log-uniform prior box shared by every parameter block
    PRIOR_LO = _env_float('HABSEL_PRIOR_LO', -20.0)
    PRIOR_HI = _env_float('HABSEL_PRIOR_HI', 20.0)

    MAP_MAX_ITER = _env_int('HABSEL_MAP_MAX_ITER', 2000)
    MAP_TOL = _env_float('HABSEL_MAP_TOL', 1e-8)

    # Singular values below RANK_RTOL * largest count as zero
    RANK_RTOL = _env_float('HABSEL_RANK_RTOL', 1e-9)

    @property
    def prior_bounds(self):
        """Returns the (lo, hi) prior box in log space"""
        return (self.PRIOR_LO, self.PRIOR_HI)


config = Config()
