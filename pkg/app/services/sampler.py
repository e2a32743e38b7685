"""
Adaptive random-walk Metropolis-within-Gibbs chains over the free log-parameters.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from app.model_service import ObservationIndex, ParameterLayout
from app.schemas import CountTable, InferenceConfig, ModelVariant, SurveyDesign

logger = logging.getLogger(__name__)

# Robbins-Monro decay exponent for the step-size adaptation
ADAPT_DECAY = 0.6
SCALAR_TARGET = 0.44
VECTOR_TARGET = 0.234
INITIAL_LOG_STEP = np.log(0.1)
LOG_STEP_LIMITS = (-12.0, 3.0)
JITTER_SD = 0.1
MAX_START_ATTEMPTS = 20


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, chain)"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, chain])))


@dataclass
class UpdateGroups:
    """Coordinates of one block split into groups that touch disjoint observations.

    ``coord_group`` maps every coordinate of the block to its group and
    ``pair_group`` maps every observation pair to the group whose parameters
    enter its intensity (-1 when none does).
    """
    name: str
    coords: np.ndarray
    coord_group: np.ndarray
    pair_group: np.ndarray
    n_groups: int
    target: np.ndarray = field(init=False)

    def __post_init__(self):
        sizes = np.bincount(self.coord_group, minlength=self.n_groups)
        self.target = np.where(sizes > 1, VECTOR_TARGET, SCALAR_TARGET)


@dataclass
class ChainResult:
    chain: int
    draws: np.ndarray
    acceptance: Dict[str, float]
    log_steps: Dict[str, np.ndarray]
    failed: bool = False
    message: str = ""


def build_groups(layout: ParameterLayout, index: ObservationIndex) -> List[UpdateGroups]:
    groups: List[UpdateGroups] = []
    sl = layout.slices

    n = sl["log_N"].stop - sl["log_N"].start
    if n:
        J = index.n_sites
        if layout.single_abundance:
            keys = layout.N_index
        else:
            keys = layout.N_index[:, 0] * J + layout.N_index[:, 1]
        lookup = np.full(index.n_species * (1 if layout.single_abundance else J), -1)
        lookup[keys] = np.arange(n)
        groups.append(UpdateGroups(
            "log_N", np.arange(sl["log_N"].start, sl["log_N"].stop), np.arange(n),
            lookup[index.abundance_group], n,
        ))

    n = sl["log_S"].stop - sl["log_S"].start
    if n:
        species = layout.S_index[:, 0]
        rows, coord_group = np.unique(species, return_inverse=True)
        lookup = np.full(index.n_species, -1)
        lookup[rows] = np.arange(rows.size)
        groups.append(UpdateGroups(
            "log_S", np.arange(sl["log_S"].start, sl["log_S"].stop), coord_group,
            lookup[index.species], rows.size,
        ))

    n = sl["log_q"].stop - sl["log_q"].start
    if n:
        groups.append(UpdateGroups(
            "log_q", np.arange(sl["log_q"].start, sl["log_q"].stop), np.zeros(n, dtype=np.int64),
            np.where(index.is_opp, 0, -1), 1,
        ))

    n = sl["log_P"].stop - sl["log_P"].start
    if n:
        lookup = np.full(index.n_species, -1)
        lookup[layout.P_index] = np.arange(n)
        groups.append(UpdateGroups(
            "log_P", np.arange(sl["log_P"].start, sl["log_P"].stop), np.arange(n),
            np.where(index.is_opp, lookup[index.species], -1), n,
        ))

    n = sl["log_E1"].stop - sl["log_E1"].start
    if n:
        lookup = np.full(max(index.n_opp, 1), -1)
        lookup[layout.E1_index] = np.arange(n)
        groups.append(UpdateGroups(
            "log_E1", np.arange(sl["log_E1"].start, sl["log_E1"].stop), np.arange(n),
            np.where(index.is_opp, lookup[index.opp_idx], -1), n,
        ))
    return groups


class BlockSampler:
    """One chain of the blockwise sampler.

    Each sweep updates the blocks in the order log_N, log_S, log_q, log_P,
    log_E1. Inside a block every group is proposed at once and accepted or
    rejected on its own likelihood difference. Proposals leaving the prior
    box are rejected.
    """

    def __init__(self, variant: ModelVariant, design: SurveyDesign, counts: CountTable,
                 config: InferenceConfig, alpha: Optional[np.ndarray] = None):
        self.config = config
        self.layout = ParameterLayout(variant, design)
        self.index = ObservationIndex(variant, design, counts, alpha)
        self.lo, self.hi = self.layout.bounds(config.prior)
        self.groups = build_groups(self.layout, self.index)

    def pair_log_likelihood(self, theta: np.ndarray) -> np.ndarray:
        params = self.layout.unpack(theta)
        return self.index.pair_log_likelihood(self.index.log_intensity(params))

    def initial_state(self, start: np.ndarray, rng: np.random.Generator) -> Optional[np.ndarray]:
        for attempt in range(MAX_START_ATTEMPTS):
            theta = np.clip(start + JITTER_SD * rng.standard_normal(start.size), self.lo, self.hi)
            if np.isfinite(self.pair_log_likelihood(theta).sum()):
                return theta
            logger.debug(f"Start attempt {attempt} has non-finite log-likelihood")
        return None

    def _update(self, theta: np.ndarray, pair_ll: np.ndarray, group: UpdateGroups,
                log_step: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One Metropolis update of every group of a block; returns the acceptance indicator per group"""
        proposal = theta.copy()
        steps = np.exp(log_step[group.coord_group])
        proposal[group.coords] += steps * rng.standard_normal(group.coords.size)

        outside = (proposal[group.coords] < self.lo[group.coords]) | (proposal[group.coords] > self.hi[group.coords])
        inside = np.bincount(group.coord_group, weights=outside.astype(float), minlength=group.n_groups) == 0

        new_ll = self.pair_log_likelihood(proposal)
        touched = group.pair_group >= 0
        with np.errstate(invalid="ignore"):
            diff = np.where(touched, new_ll - pair_ll, 0.0)
        delta = np.bincount(group.pair_group[touched], weights=diff[touched], minlength=group.n_groups)
        delta = np.where(np.isnan(delta), -np.inf, delta)

        log_u = np.log(rng.uniform(size=group.n_groups))
        accept = inside & (log_u < delta)

        moved = accept[group.coord_group]
        theta[group.coords[moved]] = proposal[group.coords[moved]]
        pairs = touched.copy()
        pairs[touched] = accept[group.pair_group[touched]]
        pair_ll[pairs] = new_ll[pairs]
        return accept

    def run(self, chain: int, start: np.ndarray) -> ChainResult:
        cfg = self.config
        rng = chain_rng(cfg.rng_seed, chain)
        theta = self.initial_state(start, rng)
        if theta is None:
            logger.warning(f"Chain {chain}: no finite starting point after {MAX_START_ATTEMPTS} attempts")
            return ChainResult(chain, np.empty((0, start.size)), {}, {}, failed=True,
                               message="no finite starting point")

        pair_ll = self.pair_log_likelihood(theta)
        log_steps = {g.name: np.full(g.n_groups, INITIAL_LOG_STEP) for g in self.groups}
        accepted = {g.name: 0.0 for g in self.groups}
        n_keep = cfg.n_samples // cfg.thin
        draws = np.empty((n_keep, theta.size))
        kept = 0

        for t in range(cfg.n_warmup + cfg.n_samples):
            warmup = t < cfg.n_warmup
            for group in self.groups:
                accept = self._update(theta, pair_ll, group, log_steps[group.name], rng)
                if warmup:
                    rate = (t + 1) ** -ADAPT_DECAY
                    log_steps[group.name] = np.clip(
                        log_steps[group.name] + rate * (accept - group.target), *LOG_STEP_LIMITS
                    )
                else:
                    accepted[group.name] += accept.mean()
            if not warmup:
                s = t - cfg.n_warmup + 1
                if s % cfg.thin == 0 and kept < n_keep:
                    draws[kept] = theta
                    kept += 1
            if t + 1 == cfg.n_warmup:
                logger.debug(
                    f"Chain {chain}: warmup done, median steps "
                    + ", ".join(f"{k}={np.exp(np.median(v)):.3g}" for k, v in log_steps.items())
                )

        acceptance = {name: total / cfg.n_samples for name, total in accepted.items()}
        return ChainResult(chain, draws, acceptance, log_steps)


def run_chain(variant: ModelVariant, design: SurveyDesign, counts: CountTable,
              config: InferenceConfig, alpha: Optional[np.ndarray],
              chain: int, start: np.ndarray) -> ChainResult:
    """Picklable entry point for worker processes"""
    sampler = BlockSampler(variant, design, counts, config, alpha)
    return sampler.run(chain, start)
