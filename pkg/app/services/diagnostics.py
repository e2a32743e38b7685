import logging
from typing import List, Optional, Tuple

import arviz as az
import numpy as np

from app.errors import FitError
from app.schemas import ParameterSummary

logger = logging.getLogger(__name__)

# Split R-hat halves each chain; fewer draws give no usable halves
MIN_DRAWS = 4


def _finite_or_none(value: float) -> Optional[float]:
    return float(value) if np.isfinite(value) else None


def convergence(draws: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Split R-hat and mean ESS per parameter for draws shaped (chain, draw, parameter)"""
    n_chains, n_draws, n_params = draws.shape
    if n_chains < 2 or n_draws < MIN_DRAWS:
        logger.warning(f"{n_chains} chains of {n_draws} draws are too few for R-hat and ESS")
        return np.full(n_params, np.nan), np.full(n_params, np.nan)
    dataset = az.convert_to_dataset({"theta": draws})
    with np.errstate(invalid="ignore", divide="ignore"):
        rhat = az.rhat(dataset, method="split")["theta"].values
        ess = az.ess(dataset, method="mean")["theta"].values
    return np.asarray(rhat, dtype=float), np.asarray(ess, dtype=float)


def summarize(names: List[str], draws: np.ndarray) -> List[ParameterSummary]:
    """Posterior summary rows for draws shaped (chain, draw, parameter)"""
    n_chains, n_draws, n_params = draws.shape
    if n_params == 0:
        return []
    if n_chains * n_draws == 0:
        logger.error(f"Cannot summarise {n_params} parameters from zero draws")
        raise FitError("no posterior draws to summarise")
    pooled = draws.reshape(n_chains * n_draws, n_params)
    mean = pooled.mean(axis=0)
    sd = pooled.std(axis=0, ddof=1) if pooled.shape[0] > 1 else np.zeros(n_params)
    q025, median, q975 = np.quantile(pooled, [0.025, 0.5, 0.975], axis=0)
    rhat, ess = convergence(draws)
    return [
        ParameterSummary(
            name=name,
            mean=float(mean[p]),
            median=float(median[p]),
            sd=float(sd[p]),
            q025=float(q025[p]),
            q975=float(q975[p]),
            rhat=_finite_or_none(rhat[p]),
            ess=_finite_or_none(ess[p]),
        )
        for p, name in enumerate(names)
    ]


def rhat_flags(summaries: List[ParameterSummary], threshold: float) -> List[str]:
    """Names of parameters whose R-hat exceeds the threshold"""
    return [s.name for s in summaries if s.rhat is not None and s.rhat > threshold]
