from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PrivateAttr,
    ValidationInfo,
    field_validator,
    model_validator,
)

from app.config import config

STANDARDIZED = 0
OPPORTUNISTIC = 1


def _as_float_array(v: Any, ndim: int) -> np.ndarray:
    arr = np.array(v, dtype=float)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    return arr


# =============================================================================
# Survey data
# =============================================================================

class CellRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    cell_id: int = Field(..., ge=0)
    dataset: Literal[0, 1]
    site_id: int = Field(..., ge=0)
    habitat_area: List[float]
    known_effort: Optional[float] = None

    @field_validator('habitat_area')
    @classmethod
    def validate_habitat_area(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("habitat_area cannot be empty")
        if any(not np.isfinite(a) or a < 0 for a in v):
            raise ValueError("habitat areas must be finite and >= 0")
        if sum(v) <= 0:
            raise ValueError("cell area (sum of habitat areas) must be > 0")
        return v

    @field_validator('known_effort')
    @classmethod
    def validate_known_effort(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and (not np.isfinite(v) or v <= 0):
            raise ValueError("known_effort must be a positive real")
        return v

    @model_validator(mode='after')
    def validate_effort_presence(self) -> 'CellRecord':
        if self.dataset == STANDARDIZED and self.known_effort is None:
            raise ValueError(f"cell {self.cell_id}: standardized cells require known_effort")
        if self.dataset == OPPORTUNISTIC and self.known_effort is not None:
            raise ValueError(f"cell {self.cell_id}: opportunistic cells cannot carry known_effort")
        return self

    @property
    def area(self) -> float:
        return float(sum(self.habitat_area))


class SurveyDesign(BaseModel):
    """Sites, cells and habitat areas shared by every model variant.

    Structural consistency (shapes, id ranges, non-negative areas) is checked
    on construction. The cross-cell invariants of a usable design are reported
    by ``survey_data_service.validate_design``.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    n_species: int = Field(..., ge=1)
    n_sites: int = Field(..., ge=1)
    n_habitats: int = Field(..., ge=1)
    site_habitat_area: np.ndarray
    monitored: np.ndarray
    cells: List[CellRecord]

    _cell_ids: np.ndarray = PrivateAttr()
    _cell_dataset: np.ndarray = PrivateAttr()
    _cell_site: np.ndarray = PrivateAttr()
    _cell_area: np.ndarray = PrivateAttr()
    _known_effort: np.ndarray = PrivateAttr()
    _opp_pos: np.ndarray = PrivateAttr()
    _cell_pos: Dict[int, int] = PrivateAttr()

    @field_validator('site_habitat_area', mode='before')
    @classmethod
    def coerce_site_area(cls, v: Any) -> np.ndarray:
        arr = _as_float_array(v, 2)
        if np.any(~np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("site_habitat_area must be finite and >= 0")
        return arr

    @field_validator('monitored', mode='before')
    @classmethod
    def coerce_monitored(cls, v: Any) -> np.ndarray:
        arr = np.array(v, dtype=bool)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError(f"monitored must be an I x 2 boolean matrix, got shape {arr.shape}")
        return arr

    @model_validator(mode='after')
    def validate_shapes(self) -> 'SurveyDesign':
        J, H = self.n_sites, self.n_habitats
        if self.site_habitat_area.shape != (J, H):
            raise ValueError(
                f"site_habitat_area has shape {self.site_habitat_area.shape}, expected ({J}, {H})"
            )
        if self.monitored.shape != (self.n_species, 2):
            raise ValueError(
                f"monitored has shape {self.monitored.shape}, expected ({self.n_species}, 2)"
            )
        if not self.cells:
            raise ValueError("design has no cells")
        seen = set()
        for cell in self.cells:
            if cell.cell_id in seen:
                raise ValueError(f"duplicate cell_id {cell.cell_id}")
            seen.add(cell.cell_id)
            if cell.site_id >= J:
                raise ValueError(f"cell {cell.cell_id} references unknown site {cell.site_id}")
            if len(cell.habitat_area) != H:
                raise ValueError(
                    f"cell {cell.cell_id} has {len(cell.habitat_area)} habitat areas, expected {H}"
                )
        return self

    def model_post_init(self, __context: Any) -> None:
        self._cell_ids = np.array([c.cell_id for c in self.cells], dtype=np.int64)
        self._cell_dataset = np.array([c.dataset for c in self.cells], dtype=np.int64)
        self._cell_site = np.array([c.site_id for c in self.cells], dtype=np.int64)
        self._cell_area = np.array([c.habitat_area for c in self.cells], dtype=float)
        self._known_effort = np.array(
            [c.known_effort if c.known_effort is not None else np.nan for c in self.cells],
            dtype=float,
        )
        opp = self._cell_dataset == OPPORTUNISTIC
        opp_pos = np.full(len(self.cells), -1, dtype=np.int64)
        opp_pos[opp] = np.arange(int(opp.sum()))
        self._opp_pos = opp_pos
        self._cell_pos = {int(cid): pos for pos, cid in enumerate(self._cell_ids)}

    # ----- derived views -----

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_opp_cells(self) -> int:
        return int((self._cell_dataset == OPPORTUNISTIC).sum())

    @property
    def cell_ids(self) -> np.ndarray:
        return self._cell_ids

    @property
    def cell_dataset(self) -> np.ndarray:
        return self._cell_dataset

    @property
    def cell_site(self) -> np.ndarray:
        return self._cell_site

    @property
    def cell_habitat_area(self) -> np.ndarray:
        """C x H matrix of V_hc in design cell order"""
        return self._cell_area

    @property
    def known_effort(self) -> np.ndarray:
        """Known standardized effort per cell, NaN for opportunistic cells"""
        return self._known_effort

    @property
    def opp_position(self) -> np.ndarray:
        """Index of each cell among opportunistic cells, -1 for standardized cells"""
        return self._opp_pos

    @property
    def opp_cell_ids(self) -> np.ndarray:
        return self._cell_ids[self._cell_dataset == OPPORTUNISTIC]

    @property
    def site_area(self) -> np.ndarray:
        """V_j = sum_h V_hj"""
        return self.site_habitat_area.sum(axis=1)

    @property
    def habitat_totals(self) -> np.ndarray:
        """V_h = sum_j V_hj"""
        return self.site_habitat_area.sum(axis=0)

    @property
    def anchor_species(self) -> Optional[int]:
        both = np.flatnonzero(self.monitored[:, 0] & self.monitored[:, 1])
        return int(both[0]) if both.size else None

    def cell_position(self, cell_id: int) -> int:
        try:
            return self._cell_pos[int(cell_id)]
        except KeyError:
            raise ValueError(f"unknown cell_id {cell_id}")

    def has_cell(self, cell_id: int) -> bool:
        return int(cell_id) in self._cell_pos


class CountTable(BaseModel):
    """Sparse counts X_ick; a missing (species, cell) pair means a count of 0."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    species_ids: np.ndarray
    cell_ids: np.ndarray
    counts: np.ndarray

    @field_validator('species_ids', 'cell_ids', 'counts', mode='before')
    @classmethod
    def coerce_int_array(cls, v: Any, info: ValidationInfo) -> np.ndarray:
        arr = np.asarray(v)
        if arr.size == 0:
            return np.zeros(0, dtype=np.int64)
        if arr.ndim != 1:
            raise ValueError(f"{info.field_name} must be one-dimensional")
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError(f"{info.field_name} must contain integers")
        arr = arr.astype(np.int64)
        if np.any(arr < 0):
            raise ValueError(f"{info.field_name} must be >= 0")
        return arr

    @model_validator(mode='after')
    def validate_lengths(self) -> 'CountTable':
        n = len(self.counts)
        if len(self.species_ids) != n or len(self.cell_ids) != n:
            raise ValueError("species_ids, cell_ids and counts must have equal length")
        keys = self.species_ids * (int(self.cell_ids.max(initial=0)) + 1) + self.cell_ids
        if np.unique(keys).size != n:
            raise ValueError("duplicate (species_id, cell_id) entries")
        return self

    @classmethod
    def empty(cls) -> 'CountTable':
        return cls(species_ids=[], cell_ids=[], counts=[])

    def dense(self, design: SurveyDesign) -> np.ndarray:
        """I x C matrix in design cell order, zeros where no entry exists"""
        out = np.zeros((design.n_species, design.n_cells), dtype=np.int64)
        if self.counts.size:
            pos = np.array([design.cell_position(c) for c in self.cell_ids], dtype=np.int64)
            out[self.species_ids, pos] = self.counts
        return out

    def get(self, species_id: int, cell_id: int) -> int:
        hit = np.flatnonzero((self.species_ids == species_id) & (self.cell_ids == cell_id))
        return int(self.counts[hit[0]]) if hit.size else 0


# =============================================================================
# Model parameters
# =============================================================================

class VariantTag(str, Enum):
    OPP_STAND_HAB = "opp-stand-hab"
    STAND_ONLY_HAB = "stand-only-hab"
    OPP_STAND_NO_HAB = "opp-stand-no-hab"
    ONE_QUADRAT_HAB = "one-quadrat-hab"


class ModelVariant(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    tag: VariantTag
    habitat_totals: Optional[np.ndarray] = None

    @model_validator(mode='after')
    def validate_totals(self) -> 'ModelVariant':
        if self.tag == VariantTag.ONE_QUADRAT_HAB and self.habitat_totals is None:
            raise ValueError("one-quadrat-hab requires habitat_totals (V_h)")
        return self

    @classmethod
    def for_design(cls, tag: "VariantTag | str", design: SurveyDesign) -> 'ModelVariant':
        tag = VariantTag(tag)
        totals = design.habitat_totals if tag == VariantTag.ONE_QUADRAT_HAB else None
        return cls(tag=tag, habitat_totals=totals)

    @property
    def uses_opportunistic(self) -> bool:
        return self.tag != VariantTag.STAND_ONLY_HAB

    @property
    def has_habitat(self) -> bool:
        return self.tag != VariantTag.OPP_STAND_NO_HAB

    @property
    def single_abundance(self) -> bool:
        return self.tag == VariantTag.ONE_QUADRAT_HAB


class TildeParams(BaseModel):
    """Identifiable parameters in log space.

    Fixed entries (log q~_1, log S~_i1, log P~ of the anchor species) are
    exactly 0. Entries of log_P for species not surveyed by the opportunistic
    dataset are unused.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    log_N: np.ndarray
    log_P: np.ndarray
    log_E1: np.ndarray
    log_q: np.ndarray
    log_S: np.ndarray
    anchor: Optional[int] = None

    @field_validator('log_N', 'log_S', mode='before')
    @classmethod
    def coerce_matrix(cls, v: Any) -> np.ndarray:
        return _as_float_array(v, 2)

    @field_validator('log_P', 'log_E1', 'log_q', mode='before')
    @classmethod
    def coerce_vector(cls, v: Any) -> np.ndarray:
        return _as_float_array(v, 1)

    @model_validator(mode='after')
    def validate_fixed_entries(self) -> 'TildeParams':
        I = self.log_N.shape[0]
        if self.log_S.shape[0] != I or self.log_P.shape[0] != I:
            raise ValueError("log_N, log_S and log_P disagree on the number of species")
        if self.log_S.shape[1] != self.log_q.shape[0]:
            raise ValueError("log_S and log_q disagree on the number of habitats")
        if self.log_q[0] != 0.0 or np.any(self.log_S[:, 0] != 0.0):
            raise ValueError("reference habitat entries of log_q and log_S must be exactly 0")
        if self.anchor is not None:
            if not 0 <= self.anchor < I:
                raise ValueError(f"anchor species {self.anchor} is out of range for {I} species")
            if self.log_P[self.anchor] != 0.0:
                raise ValueError(f"log_P of anchor species {self.anchor} must be exactly 0")
        return self

    @classmethod
    def zeros(cls, design: SurveyDesign) -> 'TildeParams':
        I, J, H = design.n_species, design.n_sites, design.n_habitats
        return cls(
            log_N=np.zeros((I, J)),
            log_P=np.zeros(I),
            log_E1=np.zeros(design.n_opp_cells),
            log_q=np.zeros(H),
            log_S=np.zeros((I, H)),
            anchor=design.anchor_species,
        )


class RawParams(BaseModel):
    """Parameters of the un-reparametrized model, used by the generator and oracles."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    N: np.ndarray
    P: np.ndarray
    E: np.ndarray
    q: np.ndarray
    S: np.ndarray

    @field_validator('N', 'P', 'q', 'S', mode='before')
    @classmethod
    def coerce_matrix(cls, v: Any) -> np.ndarray:
        return _as_float_array(v, 2)

    @field_validator('E', mode='before')
    @classmethod
    def coerce_vector(cls, v: Any) -> np.ndarray:
        return _as_float_array(v, 1)

    @model_validator(mode='after')
    def validate_ranges(self) -> 'RawParams':
        for name in ('N', 'P', 'E', 'q', 'S'):
            arr = getattr(self, name)
            if np.any(~np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError(f"{name} must be finite and >= 0")
        if np.any(self.S > 1) or np.any(self.q > 1):
            raise ValueError("S and q must lie in [0, 1]")
        if self.P.shape[1] != 2 or self.q.shape[1] != 2:
            raise ValueError("P must be I x 2 and q must be H x 2")
        return self


# =============================================================================
# Identifiability
# =============================================================================

class IdentMatrix(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    Y: np.ndarray
    rank: int
    column_labels: List[str]


class IdentifiabilityReport(BaseModel):
    rank: int
    required: int
    identifiable: bool
    deficient_columns: List[str] = Field(default_factory=list)
    warnings: List[str] = Field(default_factory=list)


# =============================================================================
# Inference
# =============================================================================

class PriorBounds(BaseModel):
    lo: float = config.PRIOR_LO
    hi: float = config.PRIOR_HI

    @field_validator('hi')
    @classmethod
    def validate_order(cls, v: float, info: ValidationInfo) -> float:
        lo = info.data.get('lo')
        if lo is not None and not lo < v:
            raise ValueError("prior bounds require lo < hi")
        return v


PARAMETER_BLOCKS = ("log_N", "log_S", "log_q", "log_P", "log_E1")


def _default_prior() -> Dict[str, PriorBounds]:
    return {block: PriorBounds() for block in PARAMETER_BLOCKS}


class InferenceConfig(BaseModel):
    n_chains: int = Field(config.CHAINS, ge=2)
    n_warmup: int = Field(config.WARMUP, ge=0)
    n_samples: int = Field(config.SAMPLES, ge=1)
    thin: int = Field(config.THIN, ge=1)
    rng_seed: int = config.SEED
    prior: Dict[str, PriorBounds] = Field(default_factory=_default_prior)
    map_max_iter: int = Field(config.MAP_MAX_ITER, ge=1)
    map_tol: float = Field(config.MAP_TOL, gt=0)
    threads: int = Field(config.THREADS, ge=1)
    reference_site: int = Field(0, ge=0)
    keep_draws: bool = False
    force: bool = False
    rhat_warn: float = config.RHAT_WARN

    @field_validator('prior')
    @classmethod
    def validate_prior(cls, v: Dict[str, PriorBounds]) -> Dict[str, PriorBounds]:
        unknown = set(v) - set(PARAMETER_BLOCKS)
        if unknown:
            raise ValueError(f"unknown prior blocks: {sorted(unknown)}")
        full = _default_prior()
        full.update(v)
        return full

    @model_validator(mode='after')
    def validate_thinning(self) -> 'InferenceConfig':
        if self.n_samples < self.thin:
            raise ValueError(
                f"n_samples ({self.n_samples}) must be at least thin ({self.thin}) to keep any draws"
            )
        return self

    @classmethod
    def with_bounds(cls, lo: float, hi: float, **kwargs: Any) -> 'InferenceConfig':
        prior = {block: PriorBounds(lo=lo, hi=hi) for block in PARAMETER_BLOCKS}
        return cls(prior=prior, **kwargs)


class ParameterSummary(BaseModel):
    name: str
    mean: float
    median: float
    sd: float
    q025: float
    q975: float
    rhat: Optional[float] = None
    ess: Optional[float] = None


class PosteriorSummary(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    variant: VariantTag
    data_digest: str = ""
    reference_site: int = 0
    n_obs: int
    n_free: int
    free_names: List[str]
    map_point: List[float]
    map_log_likelihood: float
    map_converged: bool
    bic: float
    parameters: List[ParameterSummary] = Field(default_factory=list)
    relative_abundance: List[ParameterSummary] = Field(default_factory=list)
    habitat_selection: List[ParameterSummary] = Field(default_factory=list)
    acceptance: Dict[str, float] = Field(default_factory=dict)
    n_chains: int = 0
    n_draws_per_chain: int = 0
    alpha: Optional[List[List[float]]] = None
    warnings: List[str] = Field(default_factory=list)
    draws: Optional[np.ndarray] = Field(default=None, exclude=True)

    @property
    def is_map_only(self) -> bool:
        return not self.parameters

    def point(self, estimate: str = "mean") -> np.ndarray:
        """Free-parameter vector for a point estimate: mean, median or map"""
        if estimate == "map" or self.is_map_only:
            return np.array(self.map_point, dtype=float)
        if estimate not in ("mean", "median"):
            raise ValueError(f"unknown estimate '{estimate}', use mean, median or map")
        return np.array([getattr(p, estimate) for p in self.parameters], dtype=float)


# =============================================================================
# Simulation
# =============================================================================

Range = Tuple[float, float]


class SimConfig(BaseModel):
    n_species: int = Field(20, ge=1)
    n_sites: int = Field(30, ge=1)
    n_habitats: int = Field(2, ge=1)
    cells_std_per_site: int = Field(10, ge=1)
    cells_opp_per_site: int = Field(30, ge=1)
    rng_seed: int = config.SEED
    N_range: Range = (20.0, 200.0)
    P_range: Range = (0.1, 1.0)
    E0_range: Range = (0.5, 2.0)
    E1_range: Range = (0.5, 5.0)
    q_range: Range = (0.1, 1.0)
    S_range: Range = (0.1, 1.0)
    cell_area_range: Range = (0.5, 1.5)
    remainder_share_range: Range = (0.0, 0.5)
    dirichlet_concentration: float = Field(1.0, gt=0)
    monitored: Optional[List[List[bool]]] = None
    alpha: Optional[List[List[float]]] = None
    max_retries: int = Field(20, ge=1)

    @field_validator('N_range', 'P_range', 'E0_range', 'E1_range', 'q_range',
                     'S_range', 'cell_area_range')
    @classmethod
    def validate_positive_range(cls, v: Range, info: ValidationInfo) -> Range:
        lo, hi = v
        if not (0 < lo <= hi < np.inf):
            raise ValueError(f"{info.field_name} must satisfy 0 < lo <= hi < inf")
        if info.field_name in ('P_range', 'q_range', 'S_range') and hi > 1:
            raise ValueError(f"{info.field_name} must lie within (0, 1]")
        return v

    @field_validator('remainder_share_range')
    @classmethod
    def validate_share_range(cls, v: Range) -> Range:
        lo, hi = v
        if not (0 <= lo <= hi < 1):
            raise ValueError("remainder_share_range must satisfy 0 <= lo <= hi < 1")
        return v

    @field_validator('alpha', mode='before')
    @classmethod
    def coerce_alpha(cls, v: Any) -> Any:
        if v is None:
            return v
        arr = np.array(v, dtype=float)
        if arr.ndim == 1:
            arr = np.vstack([arr, arr])
        return arr.tolist()

    @model_validator(mode='after')
    def validate_dimensions(self) -> 'SimConfig':
        if self.monitored is not None:
            shape = np.array(self.monitored, dtype=bool).shape
            if shape != (self.n_species, 2):
                raise ValueError(f"monitored must be {self.n_species} x 2, got {shape}")
        if self.alpha is not None:
            arr = np.array(self.alpha, dtype=float)
            if arr.shape != (2, self.n_habitats) or np.any(arr <= 0):
                raise ValueError(f"alpha must be positive with {self.n_habitats} habitats")
        return self


# =============================================================================
# Validation (holdout prediction and scoring)
# =============================================================================

class HoldoutPoint(BaseModel):
    habitat: int = Field(..., ge=0)
    area: float = Field(..., gt=0)
    effort: float = Field(..., gt=0)


class HoldoutQuadrat(BaseModel):
    quadrat_id: int = Field(..., ge=0)
    site_id: int = Field(..., ge=0)
    points: List[HoldoutPoint]

    @field_validator('points')
    @classmethod
    def validate_points(cls, v: List[HoldoutPoint]) -> List[HoldoutPoint]:
        if not v:
            raise ValueError("a quadrat needs at least one observation point")
        return v


class HoldoutSurvey(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    n_species: int = Field(..., ge=1)
    quadrats: List[HoldoutQuadrat]
    counts: np.ndarray

    @field_validator('counts', mode='before')
    @classmethod
    def coerce_counts(cls, v: Any) -> np.ndarray:
        arr = _as_float_array(v, 2)
        if np.any(arr < 0):
            raise ValueError("holdout counts must be >= 0")
        return arr

    @model_validator(mode='after')
    def validate_counts_shape(self) -> 'HoldoutSurvey':
        expected = (self.n_species, len(self.quadrats))
        if self.counts.shape != expected:
            raise ValueError(f"holdout counts have shape {self.counts.shape}, expected {expected}")
        ids = [q.quadrat_id for q in self.quadrats]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate quadrat_id in holdout survey")
        return self


class SpeciesCorrelation(BaseModel):
    species_id: int
    r: Optional[float] = None
    defined: bool = True
    monitored_standardized: bool = True


class CorrelationSummary(BaseModel):
    group: str
    n_species: int
    n_excluded: int
    median: Optional[float] = None
    q1: Optional[float] = None
    q3: Optional[float] = None


class RelativeDifference(BaseModel):
    species_id: int
    site_id: int
    fitted: float
    truth: float
    relative_difference: float


class ValidationReport(BaseModel):
    model: str
    correlations: List[SpeciesCorrelation] = Field(default_factory=list)
    summaries: List[CorrelationSummary] = Field(default_factory=list)
    relative_differences: List[RelativeDifference] = Field(default_factory=list)
    median_abs_relative_difference: Optional[float] = None


# =============================================================================
# Detectability
# =============================================================================

class DistanceBin(BaseModel):
    habitat_id: int = Field(..., ge=0)
    total_count: float = Field(..., ge=0)
    near_count: float = Field(..., ge=0)
    dataset: Optional[Literal[0, 1]] = None

    @field_validator('near_count')
    @classmethod
    def validate_near_le_total(cls, v: float, info: ValidationInfo) -> float:
        total = info.data.get('total_count')
        if total is not None and v > total:
            raise ValueError("near_count cannot exceed total_count")
        return v


class DistanceBinnedCounts(BaseModel):
    n_habitats: int = Field(..., ge=1)
    bins: List[DistanceBin]
    near_threshold: Optional[float] = None

    @model_validator(mode='after')
    def validate_bins(self) -> 'DistanceBinnedCounts':
        keys = set()
        for b in self.bins:
            if b.habitat_id >= self.n_habitats:
                raise ValueError(f"habitat_id {b.habitat_id} out of range")
            key = (b.dataset, b.habitat_id)
            if key in keys:
                raise ValueError(f"duplicate bin for habitat {b.habitat_id}")
            keys.add(key)
        datasets = {b.dataset for b in self.bins}
        if None in datasets and len(datasets) > 1:
            raise ValueError("bins must either all carry a dataset or none")
        return self

    @property
    def per_dataset(self) -> bool:
        return any(b.dataset is not None for b in self.bins)


class AlphaVector(BaseModel):
    """Detectability multipliers as a 2 x H table (row k = dataset k)."""
    table: List[List[Optional[float]]]
    shared: bool = True
    undefined: List[str] = Field(default_factory=list)
    near_threshold: Optional[float] = None

    @field_validator('table')
    @classmethod
    def validate_table(cls, v: List[List[Optional[float]]]) -> List[List[Optional[float]]]:
        if len(v) != 2 or len({len(row) for row in v}) != 1:
            raise ValueError("alpha table must have two rows of equal length")
        for row in v:
            if row[0] is not None and row[0] != 1.0:
                raise ValueError("reference habitat alpha must be exactly 1")
            if any(a is not None and not a > 0 for a in row):
                raise ValueError("alpha values must be > 0")
        return v

    @property
    def n_habitats(self) -> int:
        return len(self.table[0])


# =============================================================================
# CLI plumbing
# =============================================================================

class RunManifest(BaseModel):
    command: str
    config: Dict[str, Any]
    seeds: Dict[str, int] = Field(default_factory=dict)
    input_digests: Dict[str, str] = Field(default_factory=dict)
    outputs: List[str] = Field(default_factory=list)
    tool_version: str
    started_at: str
    finished_at: str
    wall_clock_s: float


class BicDifference(BaseModel):
    variant_a: str
    variant_b: str
    bic_a: float
    bic_b: float
    delta_bic: float
