from typing import List, Optional, Sequence, Tuple

import numpy as np
import pytest

from app.schemas import (
    CellRecord,
    CountTable,
    InferenceConfig,
    ModelVariant,
    SimConfig,
    SurveyDesign,
    TildeParams,
)
from app.services.simulation_service import simulation_service

# (dataset, site_id, habitat_area, known_effort or None)
CellRow = Tuple[int, int, Sequence[float], Optional[float]]


def build_design(site_habitat_area, monitored, cells: List[CellRow]) -> SurveyDesign:
    site_habitat_area = np.asarray(site_habitat_area, dtype=float)
    monitored = np.asarray(monitored, dtype=bool)
    records = [
        CellRecord(cell_id=c, dataset=k, site_id=j, habitat_area=list(v), known_effort=e)
        for c, (k, j, v, e) in enumerate(cells)
    ]
    return SurveyDesign(
        n_species=monitored.shape[0],
        n_sites=site_habitat_area.shape[0],
        n_habitats=site_habitat_area.shape[1],
        site_habitat_area=site_habitat_area,
        monitored=monitored,
        cells=records,
    )


def random_design(rng: np.random.Generator, I: int, J: int, H: int,
                  n_std: int = 2, n_opp: int = 3, all_monitored: bool = False) -> SurveyDesign:
    """Small design with mixed opportunistic cells and single-habitat standardized cells.

    Species 0 is always monitored in both datasets; the others get a random
    non-empty monitoring pattern unless ``all_monitored``.
    """
    cells: List[CellRow] = []
    site_area = np.zeros((J, H))
    for j in range(J):
        for n, k in ((n_std, 0), (n_opp, 1)):
            for _ in range(n):
                v = rng.uniform(0.2, 1.5) * rng.dirichlet(np.ones(H))
                if k == 0:
                    single = np.zeros(H)
                    single[rng.integers(H)] = v.sum()
                    v = single
                site_area[j] += v
                cells.append((k, j, v.tolist(), float(rng.uniform(0.3, 3.0)) if k == 0 else None))
    site_area *= rng.uniform(1.0, 1.5, size=(J, 1))
    patterns = np.array([[True, True], [True, False], [False, True]])
    monitored = np.ones((I, 2), dtype=bool)
    if not all_monitored:
        monitored[1:] = patterns[rng.integers(3, size=I - 1)]
    return build_design(site_area, monitored, cells)


def random_params(rng: np.random.Generator, design: SurveyDesign, scale: float = 1.0) -> TildeParams:
    I, J, H = design.n_species, design.n_sites, design.n_habitats
    log_S = scale * rng.normal(size=(I, H))
    log_S[:, 0] = 0.0
    log_q = scale * rng.normal(size=H)
    log_q[0] = 0.0
    return TildeParams(
        log_N=rng.normal(1.0, scale, size=(I, J)),
        log_P=np.where(np.arange(I) == design.anchor_species, 0.0, scale * rng.normal(size=I)),
        log_E1=scale * rng.normal(size=design.n_opp_cells),
        log_q=log_q,
        log_S=log_S,
        anchor=design.anchor_species,
    )


def random_counts(rng: np.random.Generator, design: SurveyDesign, high: int = 8) -> CountTable:
    """Counts for every monitored (species, cell) pair, zero for the others"""
    X = rng.integers(0, high, size=(design.n_species, design.n_cells))
    X = np.where(design.monitored[:, design.cell_dataset], X, 0)
    species, pos = np.nonzero(X)
    return CountTable(species_ids=species, cell_ids=design.cell_ids[pos], counts=X[species, pos])


def variant_params(params: TildeParams, variant: ModelVariant) -> TildeParams:
    """Project parameters onto the constraints of a variant"""
    update = {}
    if not variant.has_habitat:
        update["log_S"] = np.zeros_like(params.log_S)
        update["log_q"] = np.zeros_like(params.log_q)
    if variant.single_abundance:
        update["log_N"] = np.repeat(params.log_N[:, :1], params.log_N.shape[1], axis=1)
    return params.model_copy(update=update) if update else params


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def minimal_design():
    """One species, one site, one habitat, one cell per dataset"""
    return build_design(
        [[1.0]],
        [[True, True]],
        [(0, 0, [1.0], 1.0), (1, 0, [1.0], None)],
    )


@pytest.fixture
def single_cell_design():
    """One species counted in a single standardized cell of unit area and effort"""
    return build_design([[1.0]], [[True, False]], [(0, 0, [1.0], 1.0)])


@pytest.fixture(scope="session")
def small_simulation():
    config = SimConfig(n_species=4, n_sites=3, n_habitats=2, cells_std_per_site=4,
                       cells_opp_per_site=6, rng_seed=11)
    return config, simulation_service.simulate(config)


@pytest.fixture(scope="session")
def default_simulation():
    config = SimConfig(rng_seed=2021)
    return config, simulation_service.simulate(config)


@pytest.fixture
def quick_inference():
    return InferenceConfig(n_chains=2, n_warmup=100, n_samples=200, thin=2, rng_seed=3)
