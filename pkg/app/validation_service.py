import io
import logging
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError
from scipy import stats
from scipy.special import logsumexp

from app.errors import DimensionError, SurveyDataError
from app.model_service import active_species
from app.reparam_service import reparam_service
from app.schemas import (
    CorrelationSummary,
    HoldoutQuadrat,
    HoldoutSurvey,
    ModelVariant,
    RelativeDifference,
    SpeciesCorrelation,
    SurveyDesign,
    TildeParams,
    VariantTag,
)
from app.storage import PathLike, store

logger = logging.getLogger(__name__)

HOLDOUT_COUNTS_HEADER = ["species_id", "quadrat_id", "count"]


class HoldoutFile(BaseModel):
    n_species: int
    quadrats: List[HoldoutQuadrat]


class ValidationService:

    # ----- predictors -----

    def _log_site_weight(self, params: TildeParams, variant: ModelVariant, design: SurveyDesign) -> np.ndarray:
        """log of the per-site habitat normaliser, I x J

        Sum_h S~_ih V_hj for habitat variants, V_j without habitat, and the
        pooled Sum_h S~_ih V_h (same for every site) for one-quadrat-hab.
        """
        with np.errstate(divide="ignore"):
            if variant.single_abundance:
                pooled = logsumexp(params.log_S + np.log(design.habitat_totals)[None, :], axis=1)
                return np.repeat(pooled[:, None], design.n_sites, axis=1)
            log_S = params.log_S if variant.has_habitat else np.zeros_like(params.log_S)
            return logsumexp(log_S[:, None, :] + np.log(design.site_habitat_area)[None, :, :], axis=2)

    def abundance_index(self, params: TildeParams, variant: ModelVariant, design: SurveyDesign) -> np.ndarray:
        """N-hat up to a per-species constant; NaN rows for species without estimates"""
        log_index = params.log_N + self._log_site_weight(params, variant, design)
        index = np.exp(log_index)
        index[~active_species(variant, design)] = np.nan
        return index

    def predict_holdout(self, params: TildeParams, variant: ModelVariant, design: SurveyDesign,
                        holdout: HoldoutSurvey) -> np.ndarray:
        """Expected holdout count per species and quadrat, I x Q.

        X-hat_ij = N-hat_ij * Sum_c E_c S~_ih(c) V_c / D_ij, with D_ij the
        site normaliser of the variant and S~ = 1 without habitat.
        """
        I, J, H = design.n_species, design.n_sites, design.n_habitats
        if holdout.n_species != I:
            raise DimensionError(f"holdout has {holdout.n_species} species, design has {I}")
        log_S = params.log_S if variant.has_habitat else np.zeros_like(params.log_S)
        N_hat = self.abundance_index(params, variant, design)
        log_D = self._log_site_weight(params, variant, design)

        prediction = np.empty((I, len(holdout.quadrats)))
        for q, quadrat in enumerate(holdout.quadrats):
            j = quadrat.site_id
            if j >= J:
                raise DimensionError(f"quadrat {quadrat.quadrat_id} references unknown site {j}")
            habitats = np.array([p.habitat for p in quadrat.points])
            if np.any(habitats >= H):
                raise DimensionError(
                    f"quadrat {quadrat.quadrat_id} has habitat {habitats.max()} but the design has {H}"
                )
            exposure = np.array([p.effort * p.area for p in quadrat.points])
            weight = np.exp(log_S[:, habitats]) @ exposure
            prediction[:, q] = N_hat[:, j] * weight / np.exp(log_D[:, j])
        return prediction

    # ----- scoring -----

    def pearson_by_species(self, predicted: np.ndarray, observed: np.ndarray,
                           monitored_standardized: Optional[np.ndarray] = None
                           ) -> Tuple[List[SpeciesCorrelation], List[CorrelationSummary]]:
        predicted = np.asarray(predicted, dtype=float)
        observed = np.asarray(observed, dtype=float)
        if predicted.shape != observed.shape:
            raise DimensionError(f"predicted shape {predicted.shape} differs from observed {observed.shape}")
        if predicted.shape[1] < 2:
            raise ValueError("Pearson correlation needs at least 2 quadrats")
        I = predicted.shape[0]
        if monitored_standardized is None:
            monitored_standardized = np.ones(I, dtype=bool)

        correlations: List[SpeciesCorrelation] = []
        for i in range(I):
            a, b = predicted[i], observed[i]
            defined = bool(np.all(np.isfinite(a)) and np.ptp(a) > 0 and np.ptp(b) > 0)
            r = None
            if defined:
                r = float(np.clip(stats.pearsonr(a, b)[0], -1.0, 1.0))
            else:
                logger.debug(f"Correlation undefined for species {i}")
            correlations.append(SpeciesCorrelation(
                species_id=i, r=r, defined=defined,
                monitored_standardized=bool(monitored_standardized[i]),
            ))

        groups = [("all", np.ones(I, dtype=bool))]
        if not np.all(monitored_standardized):
            groups += [
                ("monitored_standardized", np.asarray(monitored_standardized, dtype=bool)),
                ("not_monitored_standardized", ~np.asarray(monitored_standardized, dtype=bool)),
            ]
        summaries = [self.summarize_correlations(name, [c for c, m in zip(correlations, mask) if m])
                     for name, mask in groups]
        return correlations, summaries

    def summarize_correlations(self, group: str, correlations: List[SpeciesCorrelation]) -> CorrelationSummary:
        values = np.array([c.r for c in correlations if c.defined], dtype=float)
        n_excluded = sum(1 for c in correlations if not c.defined)
        if n_excluded:
            logger.warning(f"{n_excluded} species excluded from '{group}' correlations (constant vector)")
        if values.size == 0:
            return CorrelationSummary(group=group, n_species=0, n_excluded=n_excluded)
        q1, median, q3 = np.percentile(values, [25, 50, 75])
        return CorrelationSummary(
            group=group,
            n_species=int(values.size),
            n_excluded=n_excluded,
            median=float(median),
            q1=float(q1),
            q3=float(q3),
        )

    def relative_abundance_errors(self, fitted: np.ndarray, truth: np.ndarray,
                                  reference_site: int,
                                  species: Optional[np.ndarray] = None
                                  ) -> Tuple[List[RelativeDifference], float]:
        """(fitted - truth) / truth for every species and non-reference site"""
        fitted = np.asarray(fitted, dtype=float)
        truth = np.asarray(truth, dtype=float)
        if fitted.shape != truth.shape:
            raise DimensionError(f"fitted shape {fitted.shape} differs from truth {truth.shape}")
        if species is None:
            species = np.arange(truth.shape[0])
        rows: List[RelativeDifference] = []
        for i in species:
            for j in range(truth.shape[1]):
                if j == reference_site:
                    continue
                if truth[i, j] == 0:
                    raise ValueError(f"true relative abundance is zero for species {i}, site {j}")
                rows.append(RelativeDifference(
                    species_id=int(i),
                    site_id=j,
                    fitted=float(fitted[i, j]),
                    truth=float(truth[i, j]),
                    relative_difference=float((fitted[i, j] - truth[i, j]) / truth[i, j]),
                ))
        median_abs = float(np.median([abs(r.relative_difference) for r in rows])) if rows else 0.0
        return rows, median_abs

    # ----- per-site tables -----

    def relative_density_map(self, params: TildeParams, variant: ModelVariant, design: SurveyDesign,
                             reference_site: int, species: Optional[int] = None) -> pd.DataFrame:
        """N-hat_ij V_j0 / (N-hat_ij0 V_j) per species and site"""
        if species is not None and not 0 <= species < design.n_species:
            logger.error(f"Density map requested for species {species} outside 0..{design.n_species - 1}")
            raise DimensionError(f"species {species} is out of range for {design.n_species} species")
        relative = self.relative_abundances(params, variant, design, reference_site)
        site_area = design.site_area
        density = relative * site_area[reference_site] / site_area[None, :]
        rows = [species] if species is not None else list(np.flatnonzero(active_species(variant, design)))
        return pd.DataFrame(
            [
                {"species_id": int(i), "site_id": j, "relative_density": float(density[i, j])}
                for i in rows for j in range(design.n_sites)
            ],
            columns=["species_id", "site_id", "relative_density"],
        )

    def relative_abundances(self, params: TildeParams, variant: ModelVariant, design: SurveyDesign,
                            reference_site: int) -> np.ndarray:
        if variant.tag == VariantTag.OPP_STAND_NO_HAB:
            params = params.model_copy(update={"log_S": np.zeros_like(params.log_S)})
        return reparam_service.relative_abundance_matrix(params, design, reference_site)

    def habitat_preferences(self, params: TildeParams, variant: ModelVariant,
                            design: Optional[SurveyDesign] = None) -> pd.DataFrame:
        """S~_ih scaled so that each species' largest preference is 1"""
        log_S = params.log_S if variant.has_habitat else np.zeros_like(params.log_S)
        preference = np.exp(log_S - log_S.max(axis=1, keepdims=True))
        species = (
            np.flatnonzero(active_species(variant, design)) if design is not None
            else np.arange(log_S.shape[0])
        )
        return pd.DataFrame(
            [
                {"species_id": int(i), "habitat_id": h, "preference": float(preference[i, h])}
                for i in species for h in range(log_S.shape[1])
            ],
            columns=["species_id", "habitat_id", "preference"],
        )

    # ----- files -----

    def parse_holdout(self, survey_text: str, counts_text: str,
                      survey_path: Optional[str] = None, counts_path: Optional[str] = None) -> HoldoutSurvey:
        try:
            holdout_file = HoldoutFile.model_validate_json(survey_text)
        except ValidationError as e:
            first = e.errors()[0]
            loc = ".".join(str(p) for p in first.get("loc", ()))
            raise SurveyDataError(f"{loc}: {first.get('msg')}" if loc else str(first.get("msg")), path=survey_path)

        try:
            frame = pd.read_csv(io.StringIO(counts_text))
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise SurveyDataError(f"cannot parse holdout counts CSV: {e}", path=counts_path)
        if list(frame.columns) != HOLDOUT_COUNTS_HEADER:
            raise SurveyDataError(
                f"expected header {','.join(HOLDOUT_COUNTS_HEADER)}", path=counts_path, line=1
            )

        position = {q.quadrat_id: k for k, q in enumerate(holdout_file.quadrats)}
        counts = np.zeros((holdout_file.n_species, len(holdout_file.quadrats)))
        for row, (i, q, x) in enumerate(frame.itertuples(index=False, name=None)):
            if pd.isna(x) or x < 0:
                raise SurveyDataError("count must be a nonnegative number", path=counts_path, line=row + 2)
            if not 0 <= i < holdout_file.n_species:
                raise SurveyDataError(f"unknown species_id {i}", path=counts_path, line=row + 2)
            if q not in position:
                raise SurveyDataError(f"unknown quadrat_id {q}", path=counts_path, line=row + 2)
            counts[int(i), position[q]] += x
        try:
            return HoldoutSurvey(n_species=holdout_file.n_species, quadrats=holdout_file.quadrats, counts=counts)
        except ValidationError as e:
            raise SurveyDataError(e.errors()[0].get("msg", str(e)), path=survey_path)

    def load_holdout(self, survey_file: PathLike, counts_file: PathLike) -> HoldoutSurvey:
        logger.info(f"Loading holdout survey from {survey_file} and {counts_file}")
        return self.parse_holdout(
            store.read_text(survey_file), store.read_text(counts_file),
            survey_path=str(survey_file), counts_path=str(counts_file),
        )

    def prediction_frame(self, prediction: np.ndarray, holdout: HoldoutSurvey) -> pd.DataFrame:
        I, Q = prediction.shape
        return pd.DataFrame({
            "species_id": np.repeat(np.arange(I), Q),
            "quadrat_id": np.tile([q.quadrat_id for q in holdout.quadrats], I),
            "predicted": prediction.reshape(-1),
            "observed": holdout.counts.reshape(-1),
        })


validation_service = ValidationService()
