import logging
from typing import Any, Dict, Optional, Tuple

import numpy as np

from app.errors import DimensionError, SimulationError
from app.reparam_service import reparam_service
from app.schemas import (
    OPPORTUNISTIC,
    STANDARDIZED,
    CellRecord,
    CountTable,
    RawParams,
    SimConfig,
    SurveyDesign,
)
from app.survey_data_service import survey_data_service

logger = logging.getLogger(__name__)


def simulation_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))


class SimulationService:

    def _uniform(self, rng: np.random.Generator, bounds: Tuple[float, float], size) -> np.ndarray:
        lo, hi = bounds
        return rng.uniform(lo, hi, size=size)

    def draw_design(self, config: SimConfig, rng: np.random.Generator) -> SurveyDesign:
        """Sites, cells and habitat areas.

        Standardized cells take the whole of their area in the habitat that
        dominates their composition draw; opportunistic cells keep the mixed
        composition. A site covers, per habitat, the larger of what its two
        cell sets visit plus an unvisited remainder.
        """
        J, H = config.n_sites, config.n_habitats
        concentration = np.full(H, config.dirichlet_concentration)
        cells = []
        site_area = np.zeros((J, H))
        next_id = 0

        for j in range(J):
            visited = np.zeros((2, H))
            for dataset, n_cells in ((STANDARDIZED, config.cells_std_per_site),
                                     (OPPORTUNISTIC, config.cells_opp_per_site)):
                area = self._uniform(rng, config.cell_area_range, n_cells)
                shares = rng.dirichlet(concentration, size=n_cells)
                if dataset == STANDARDIZED:
                    single = np.zeros_like(shares)
                    single[np.arange(n_cells), np.argmax(shares, axis=1)] = 1.0
                    shares = single
                habitat_area = area[:, None] * shares
                visited[dataset] = habitat_area.sum(axis=0)
                for row in habitat_area:
                    cells.append({
                        "cell_id": next_id,
                        "dataset": dataset,
                        "site_id": j,
                        "habitat_area": row.tolist(),
                    })
                    next_id += 1

            base = visited.max(axis=0)
            share = self._uniform(rng, config.remainder_share_range, None)
            remainder = share * base.sum() / (1.0 - share)
            site_area[j] = base + remainder * rng.dirichlet(concentration)

        monitored = (
            np.array(config.monitored, dtype=bool)
            if config.monitored is not None
            else np.ones((config.n_species, 2), dtype=bool)
        )
        # known efforts are filled in once E is drawn
        records = [
            CellRecord(**c, known_effort=1.0) if c["dataset"] == STANDARDIZED else CellRecord(**c)
            for c in cells
        ]
        return SurveyDesign(
            n_species=config.n_species,
            n_sites=J,
            n_habitats=H,
            site_habitat_area=site_area,
            monitored=monitored,
            cells=records,
        )

    def draw_raw(self, config: SimConfig, design: SurveyDesign, rng: np.random.Generator) -> RawParams:
        I, J, H = config.n_species, config.n_sites, config.n_habitats
        N = self._uniform(rng, config.N_range, (I, J))
        P = self._uniform(rng, config.P_range, (I, 2)) * design.monitored
        q = self._uniform(rng, config.q_range, (H, 2))
        S = self._uniform(rng, config.S_range, (I, H))
        E0 = self._uniform(rng, config.E0_range, design.n_cells)
        E1 = self._uniform(rng, config.E1_range, design.n_cells)
        E = np.where(design.cell_dataset == STANDARDIZED, E0, E1)
        return RawParams(N=N, P=P, E=E, q=q, S=S)

    def with_known_effort(self, design: SurveyDesign, raw: RawParams) -> SurveyDesign:
        """Design whose standardized cells carry E_c0 / V_c"""
        effort = reparam_service.known_effort_from_raw(raw, design)
        cells = [
            cell.model_copy(update={"known_effort": float(effort[pos])})
            if cell.dataset == STANDARDIZED else cell
            for pos, cell in enumerate(design.cells)
        ]
        return SurveyDesign(
            n_species=design.n_species,
            n_sites=design.n_sites,
            n_habitats=design.n_habitats,
            site_habitat_area=design.site_habitat_area,
            monitored=design.monitored,
            cells=cells,
        )

    def draw_counts(self, raw: RawParams, design: SurveyDesign, rng: np.random.Generator,
                    alpha: Optional[np.ndarray] = None) -> CountTable:
        lam = reparam_service.raw_intensity_matrix(raw, design, alpha)
        X = rng.poisson(lam)
        species, pos = np.nonzero(X)
        return CountTable(species_ids=species, cell_ids=design.cell_ids[pos], counts=X[species, pos])

    def simulate(self, config: SimConfig) -> Tuple[SurveyDesign, CountTable, RawParams]:
        rng = simulation_rng(config.rng_seed)
        for attempt in range(1, config.max_retries + 1):
            design = self.draw_design(config, rng)
            violations = survey_data_service.validate_design(design)
            report = reparam_service.check_identifiability(design)
            if not violations and report.identifiable:
                break
            logger.info(
                f"Simulated design attempt {attempt} rejected: "
                f"{violations[0] if violations else 'rank ' + str(report.rank) + ' < ' + str(report.required)}"
            )
        else:
            logger.error(f"No valid simulated design after {config.max_retries} attempts")
            raise SimulationError(f"no valid identifiable design after {config.max_retries} attempts")

        raw = self.draw_raw(config, design, rng)
        design = self.with_known_effort(design, raw)
        alpha = None if config.alpha is None else np.array(config.alpha, dtype=float)
        counts = self.draw_counts(raw, design, rng, alpha)
        logger.info(
            f"Simulated I={config.n_species}, J={config.n_sites}, H={config.n_habitats}: "
            f"{design.n_cells} cells, {int(counts.counts.sum())} individuals counted"
        )
        return design, counts, raw

    def truth_relative_abundances(self, raw: RawParams, reference_site: int = 0) -> np.ndarray:
        if not 0 <= reference_site < raw.N.shape[1]:
            raise DimensionError(f"reference site {reference_site} is out of range for {raw.N.shape[1]} sites")
        return raw.N / raw.N[:, reference_site:reference_site + 1]

    def truth_payload(self, raw: RawParams, config: SimConfig, reference_site: int = 0) -> Dict[str, Any]:
        return {
            "N": raw.N.tolist(),
            "P": raw.P.tolist(),
            "E": raw.E.tolist(),
            "q": raw.q.tolist(),
            "S": raw.S.tolist(),
            "reference_site": reference_site,
            "relative_abundance": self.truth_relative_abundances(raw, reference_site).tolist(),
            "sim_config": config.model_dump(mode="json"),
        }

    def parse_truth(self, payload: Dict[str, Any]) -> RawParams:
        return RawParams(**{k: payload[k] for k in ("N", "P", "E", "q", "S")})


simulation_service = SimulationService()
