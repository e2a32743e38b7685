import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import gammaln, logsumexp

from app.errors import DimensionError
from app.schemas import (
    OPPORTUNISTIC,
    STANDARDIZED,
    CountTable,
    ModelVariant,
    PriorBounds,
    SurveyDesign,
    TildeParams,
    VariantTag,
)

logger = logging.getLogger(__name__)


def active_species(variant: ModelVariant, design: SurveyDesign) -> np.ndarray:
    """Species carrying free parameters under a variant"""
    if variant.uses_opportunistic:
        return np.ones(design.n_species, dtype=bool)
    return design.monitored[:, STANDARDIZED].copy()


def check_dimensions(params: TildeParams, design: SurveyDesign) -> None:
    I, J, H = design.n_species, design.n_sites, design.n_habitats
    expected = {
        "log_N": (I, J),
        "log_P": (I,),
        "log_E1": (design.n_opp_cells,),
        "log_q": (H,),
        "log_S": (I, H),
    }
    for name, shape in expected.items():
        actual = getattr(params, name).shape
        if actual != shape:
            raise DimensionError(f"{name} has shape {actual}, expected {shape}")


def _as_log_alpha(alpha: Optional[np.ndarray], n_habitats: int) -> np.ndarray:
    if alpha is None:
        return np.zeros((2, n_habitats))
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim == 1:
        alpha = np.vstack([alpha, alpha])
    if alpha.shape != (2, n_habitats):
        raise DimensionError(f"alpha has shape {alpha.shape}, expected (2, {n_habitats})")
    if np.any(alpha <= 0):
        raise ValueError("alpha must be > 0")
    return np.log(alpha)


class ObservationIndex:
    """In-scope (species, cell) pairs of a variant, in species-major design order.

    Every likelihood sum runs over these flat arrays, so the summation order
    depends only on the design and never on the order of the counts file.
    """

    def __init__(self, variant: ModelVariant, design: SurveyDesign,
                 counts: Optional[CountTable] = None, alpha: Optional[np.ndarray] = None):
        self.variant = variant
        self.n_species = design.n_species
        self.n_sites = design.n_sites
        self.n_habitats = design.n_habitats
        self.n_opp = design.n_opp_cells

        in_scope = np.ones(design.n_cells, dtype=bool)
        if not variant.uses_opportunistic:
            in_scope = design.cell_dataset == STANDARDIZED
        mask = (
            design.monitored[:, design.cell_dataset]
            & active_species(variant, design)[:, None]
            & in_scope[None, :]
        )
        species, cell = np.nonzero(mask)
        self.species = species
        self.cell = cell
        self.site = design.cell_site[cell]
        self.dataset = design.cell_dataset[cell]
        self.is_opp = self.dataset == OPPORTUNISTIC
        self.opp = design.opp_position[cell]
        self.opp_idx = np.maximum(self.opp, 0)

        with np.errstate(divide="ignore"):
            self.log_V = np.log(design.cell_habitat_area[cell])
        effort = np.where(self.is_opp, 1.0, design.known_effort[cell])
        self.log_E0 = np.log(effort)
        self.log_alpha = _as_log_alpha(alpha, design.n_habitats)

        if counts is not None:
            self.X = counts.dense(design)[species, cell].astype(float)
        else:
            self.X = np.zeros(species.size)
        self.log_fact = gammaln(self.X + 1.0)

        if variant.single_abundance:
            self.abundance_group = species.copy()
        else:
            self.abundance_group = species * design.n_sites + self.site

    @property
    def n_obs(self) -> int:
        return int(self.species.size)

    def log_terms(self, params: TildeParams) -> Tuple[np.ndarray, np.ndarray]:
        """Per-pair habitat terms log(alpha_h q~_hk S~_ih V_hc) and their log-sum"""
        log_q = np.vstack([np.zeros(self.n_habitats), params.log_q])
        terms = log_q[self.dataset] + params.log_S[self.species] + self.log_V + self.log_alpha[self.dataset]
        with np.errstate(divide="ignore", invalid="ignore"):
            log_area = logsumexp(terms, axis=1)
        return terms, log_area

    def log_intensity(self, params: TildeParams) -> np.ndarray:
        _, log_area = self.log_terms(params)
        return self._log_intensity(params, log_area)

    def _log_intensity(self, params: TildeParams, log_area: np.ndarray) -> np.ndarray:
        if self.n_opp:
            log_E = np.where(self.is_opp, params.log_E1[self.opp_idx], self.log_E0)
        else:
            log_E = self.log_E0
        log_P = np.where(self.is_opp, params.log_P[self.species], 0.0)
        return params.log_N[self.species, self.site] + log_E + log_P + log_area

    def pair_log_likelihood(self, log_lam: np.ndarray) -> np.ndarray:
        lam = np.exp(log_lam)
        with np.errstate(invalid="ignore"):
            x_log_lam = np.where(self.X > 0, self.X * log_lam, 0.0)
        return x_log_lam - lam - self.log_fact

    def log_likelihood(self, params: TildeParams) -> float:
        return float(np.sum(self.pair_log_likelihood(self.log_intensity(params))))

    def gradient_arrays(self, params: TildeParams) -> Dict[str, np.ndarray]:
        """d logL / d(log parameter) for every entry of every block, fixed or free"""
        I, J, H = self.n_species, self.n_sites, self.n_habitats
        terms, log_area = self.log_terms(params)
        residual = self.X - np.exp(self._log_intensity(params, log_area))

        finite = np.isfinite(log_area)
        weights = np.zeros_like(terms)
        weights[finite] = np.exp(terms[finite] - log_area[finite, None])
        weighted = residual[:, None] * weights

        g_N = np.bincount(self.species * J + self.site, weights=residual, minlength=I * J).reshape(I, J)
        g_S = np.column_stack(
            [np.bincount(self.species, weights=weighted[:, h], minlength=I) for h in range(H)]
        )
        opp = self.is_opp
        g_q = weighted[opp].sum(axis=0) if opp.any() else np.zeros(H)
        g_P = np.bincount(self.species[opp], weights=residual[opp], minlength=I)
        g_E1 = np.bincount(self.opp[opp], weights=residual[opp], minlength=self.n_opp)
        return {"log_N": g_N, "log_S": g_S, "log_q": g_q, "log_P": g_P, "log_E1": g_E1}


class ParameterLayout:
    """Mapping between TildeParams and the flat vector of free log-parameters.

    Free blocks come in the order log_N, log_S, log_q, log_P, log_E1.
    """

    def __init__(self, variant: ModelVariant, design: SurveyDesign):
        self.variant = variant
        self.design = design
        I, J, H = design.n_species, design.n_sites, design.n_habitats
        active = active_species(variant, design)
        self.active = active
        self.single_abundance = variant.single_abundance

        if self.single_abundance:
            self.N_index = np.flatnonzero(active)
        else:
            self.N_index = np.argwhere(np.repeat(active[:, None], J, axis=1))

        if variant.has_habitat and H > 1:
            self.S_index = np.argwhere(np.repeat(active[:, None], H - 1, axis=1)) + [0, 1]
        else:
            self.S_index = np.zeros((0, 2), dtype=np.int64)

        if variant.uses_opportunistic and variant.has_habitat and H > 1:
            self.q_index = np.arange(1, H)
        else:
            self.q_index = np.zeros(0, dtype=np.int64)

        if variant.uses_opportunistic:
            both = design.monitored[:, 0] & design.monitored[:, 1]
            anchor = design.anchor_species
            if anchor is not None:
                both[anchor] = False
            self.P_index = np.flatnonzero(both)
            self.E1_index = np.arange(design.n_opp_cells)
        else:
            self.P_index = np.zeros(0, dtype=np.int64)
            self.E1_index = np.zeros(0, dtype=np.int64)

        sizes = [
            ("log_N", len(self.N_index)),
            ("log_S", len(self.S_index)),
            ("log_q", len(self.q_index)),
            ("log_P", len(self.P_index)),
            ("log_E1", len(self.E1_index)),
        ]
        self.slices: Dict[str, slice] = {}
        start = 0
        for name, size in sizes:
            self.slices[name] = slice(start, start + size)
            start += size
        self.n_free = start

    @property
    def names(self) -> List[str]:
        names: List[str] = []
        if self.single_abundance:
            names += [f"log_N[{i}]" for i in self.N_index]
        else:
            names += [f"log_N[{i},{j}]" for i, j in self.N_index]
        names += [f"log_S[{i},{h}]" for i, h in self.S_index]
        names += [f"log_q[{h}]" for h in self.q_index]
        names += [f"log_P[{i}]" for i in self.P_index]
        opp_ids = self.design.opp_cell_ids
        names += [f"log_E1[{opp_ids[c]}]" for c in self.E1_index]
        return names

    def block_of(self, position: int) -> str:
        for name, sl in self.slices.items():
            if sl.start <= position < sl.stop:
                return name
        raise IndexError(position)

    def pack(self, params: TildeParams) -> np.ndarray:
        theta = np.empty(self.n_free)
        if self.single_abundance:
            theta[self.slices["log_N"]] = params.log_N[self.N_index, 0]
        else:
            theta[self.slices["log_N"]] = params.log_N[self.N_index[:, 0], self.N_index[:, 1]]
        theta[self.slices["log_S"]] = params.log_S[self.S_index[:, 0], self.S_index[:, 1]]
        theta[self.slices["log_q"]] = params.log_q[self.q_index]
        theta[self.slices["log_P"]] = params.log_P[self.P_index]
        theta[self.slices["log_E1"]] = params.log_E1[self.E1_index]
        return theta

    def unpack(self, theta: np.ndarray) -> TildeParams:
        """Free vector to TildeParams; fixed and inactive entries are 0"""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_free,):
            raise DimensionError(f"free vector has shape {theta.shape}, expected ({self.n_free},)")
        d = self.design
        I, J, H = d.n_species, d.n_sites, d.n_habitats
        log_N = np.zeros((I, J))
        if self.single_abundance:
            log_N[self.N_index, :] = theta[self.slices["log_N"]][:, None]
        else:
            log_N[self.N_index[:, 0], self.N_index[:, 1]] = theta[self.slices["log_N"]]
        log_S = np.zeros((I, H))
        log_S[self.S_index[:, 0], self.S_index[:, 1]] = theta[self.slices["log_S"]]
        log_q = np.zeros(H)
        log_q[self.q_index] = theta[self.slices["log_q"]]
        log_P = np.zeros(I)
        log_P[self.P_index] = theta[self.slices["log_P"]]
        log_E1 = np.zeros(d.n_opp_cells)
        log_E1[self.E1_index] = theta[self.slices["log_E1"]]
        return TildeParams.model_construct(log_N=log_N, log_P=log_P, log_E1=log_E1, log_q=log_q, log_S=log_S,
                                         anchor=d.anchor_species)

    def gradient(self, arrays: Dict[str, np.ndarray]) -> np.ndarray:
        g = np.empty(self.n_free)
        if self.single_abundance:
            g[self.slices["log_N"]] = arrays["log_N"][self.N_index].sum(axis=1)
        else:
            g[self.slices["log_N"]] = arrays["log_N"][self.N_index[:, 0], self.N_index[:, 1]]
        g[self.slices["log_S"]] = arrays["log_S"][self.S_index[:, 0], self.S_index[:, 1]]
        g[self.slices["log_q"]] = arrays["log_q"][self.q_index]
        g[self.slices["log_P"]] = arrays["log_P"][self.P_index]
        g[self.slices["log_E1"]] = arrays["log_E1"][self.E1_index]
        return g

    def bounds(self, prior: Dict[str, PriorBounds]) -> Tuple[np.ndarray, np.ndarray]:
        lo = np.empty(self.n_free)
        hi = np.empty(self.n_free)
        for name, sl in self.slices.items():
            lo[sl] = prior[name].lo
            hi[sl] = prior[name].hi
        return lo, hi


class PoissonModelService:
    """Intensities, log-likelihood and gradient of the habitat-stratified Poisson model."""

    def _validate(self, params: TildeParams, variant: ModelVariant, design: SurveyDesign) -> None:
        check_dimensions(params, design)
        if variant.tag == VariantTag.OPP_STAND_NO_HAB and (np.any(params.log_S != 0) or np.any(params.log_q != 0)):
            raise DimensionError("opp-stand-no-hab requires S~ = q~ = 1")
        if variant.single_abundance and np.any(params.log_N != params.log_N[:, :1]):
            raise DimensionError("one-quadrat-hab requires a single log_N value per species")

    def intensity(self, params: TildeParams, variant: ModelVariant, design: SurveyDesign,
                  species: int, cell_id: int, alpha: Optional[np.ndarray] = None) -> float:
        """lambda_ick for one species and one cell.

        Returns 0 when the species is not monitored by the cell's dataset or the
        cell lies outside the variant (opportunistic cells in stand-only-hab).
        """
        self._validate(params, variant, design)
        if not 0 <= species < design.n_species:
            raise DimensionError(f"species {species} out of range")
        pos = design.cell_position(cell_id)
        k = int(design.cell_dataset[pos])
        if not design.monitored[species, k]:
            return 0.0
        if k == OPPORTUNISTIC and not variant.uses_opportunistic:
            return 0.0
        if not active_species(variant, design)[species]:
            return 0.0

        log_alpha = _as_log_alpha(alpha, design.n_habitats)[k]
        log_q = params.log_q if k == OPPORTUNISTIC else np.zeros(design.n_habitats)
        with np.errstate(divide="ignore"):
            log_V = np.log(design.cell_habitat_area[pos])
            log_area = logsumexp(log_q + params.log_S[species] + log_V + log_alpha)
        j = int(design.cell_site[pos])
        if k == OPPORTUNISTIC:
            log_E = params.log_E1[design.opp_position[pos]]
            log_P = params.log_P[species]
        else:
            log_E = np.log(design.known_effort[pos])
            log_P = 0.0
        return float(np.exp(params.log_N[species, j] + log_E + log_P + log_area))

    def log_likelihood(self, params: TildeParams, variant: ModelVariant, design: SurveyDesign,
                       counts: CountTable, alpha: Optional[np.ndarray] = None) -> float:
        self._validate(params, variant, design)
        return ObservationIndex(variant, design, counts, alpha).log_likelihood(params)

    def grad_log_likelihood(self, params: TildeParams, variant: ModelVariant, design: SurveyDesign,
                            counts: CountTable, alpha: Optional[np.ndarray] = None) -> np.ndarray:
        """Gradient over the free log-parameters, in ParameterLayout order"""
        self._validate(params, variant, design)
        index = ObservationIndex(variant, design, counts, alpha)
        return ParameterLayout(variant, design).gradient(index.gradient_arrays(params))

    def count_free_params(self, variant: ModelVariant, design: SurveyDesign) -> int:
        return ParameterLayout(variant, design).n_free

    def n_observations(self, variant: ModelVariant, design: SurveyDesign) -> int:
        return ObservationIndex(variant, design).n_obs


model_service = PoissonModelService()
