import io
import logging
from typing import List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.errors import AlphaError, DimensionError, SurveyDataError
from app.model_service import model_service
from app.schemas import (
    AlphaVector,
    DistanceBin,
    DistanceBinnedCounts,
    ModelVariant,
    SurveyDesign,
    TildeParams,
    VariantTag,
)
from app.storage import PathLike, store

logger = logging.getLogger(__name__)

BINS_REQUIRED = ["habitat_id", "total_count", "near_count"]
BINS_OPTIONAL = ["dataset", "near_threshold"]


class DetectabilityService:

    def compute_alpha(self, bins: DistanceBinnedCounts) -> AlphaVector:
        """Habitat detectability relative to habitat 0 from near/total count ratios.

        Habitats whose near count is zero, or that carry no bin at all, get an
        undefined entry (None) listed in ``undefined``; using them later raises
        AlphaError.
        """
        H = bins.n_habitats
        datasets = [0, 1] if bins.per_dataset else [None]
        table: List[List[Optional[float]]] = []
        undefined: List[str] = []

        for dataset in datasets:
            total = np.full(H, np.nan)
            near = np.full(H, np.nan)
            for b in bins.bins:
                if b.dataset == dataset:
                    total[b.habitat_id] = b.total_count
                    near[b.habitat_id] = b.near_count
            label = "" if dataset is None else f"dataset {dataset} "

            if not (near[0] > 0):
                logger.error(f"Reference habitat 0 has no near-distance count ({label.strip() or 'shared'})")
                raise AlphaError(f"{label}reference habitat 0 needs a positive near_count")
            reference = total[0] / near[0]

            row: List[Optional[float]] = [1.0]
            for h in range(1, H):
                if np.isnan(total[h]):
                    undefined.append(f"{label}habitat {h}: no distance bin")
                    row.append(None)
                elif near[h] <= 0:
                    undefined.append(f"{label}habitat {h}: near_count is 0")
                    row.append(None)
                else:
                    row.append(float((total[h] / near[h]) / reference))
            table.append(row)

        if len(table) == 1:
            table = [table[0], list(table[0])]
        for message in undefined:
            logger.warning(f"Undefined detectability for {message}")
        return AlphaVector(
            table=table,
            shared=not bins.per_dataset,
            undefined=undefined,
            near_threshold=bins.near_threshold,
        )

    def alpha_array(self, alpha: AlphaVector, design: Optional[SurveyDesign] = None) -> np.ndarray:
        """2 x H array of alpha, rejecting undefined entries for habitats in use.

        A habitat is in use when the design gives it positive total area. Without
        a design every habitat counts as in use. Undefined entries of unused
        habitats are set to 1, which has no effect on any intensity.
        """
        table = np.array([[np.nan if a is None else a for a in row] for row in alpha.table], dtype=float)
        H = alpha.n_habitats
        if design is not None:
            if design.n_habitats != H:
                raise DimensionError(f"alpha covers {H} habitats, design has {design.n_habitats}")
            in_use = design.habitat_totals > 0
        else:
            in_use = np.ones(H, dtype=bool)

        missing = np.isnan(table) & in_use[None, :]
        if missing.any():
            k, h = np.argwhere(missing)[0]
            logger.error(f"Detectability undefined for habitat {h} in dataset {k}")
            raise AlphaError(f"alpha is undefined for habitat {h} (dataset {k}), which the design uses")
        return np.where(np.isnan(table), 1.0, table)

    def intensity_with_alpha(self, params: TildeParams, design: SurveyDesign, alpha: np.ndarray,
                             species: int, cell_id: int,
                             variant: Optional[ModelVariant] = None) -> float:
        """lambda with each habitat term weighted by the fixed alpha"""
        if variant is None:
            variant = ModelVariant.for_design(VariantTag.OPP_STAND_HAB, design)
        return model_service.intensity(params, variant, design, species, cell_id, alpha=alpha)

    def absorb_alpha(self, params: TildeParams, alpha: np.ndarray) -> TildeParams:
        """Parameters whose plain intensity equals the alpha-weighted intensity of ``params``.

        S~'_ih = S~_ih alpha_0h and q~'_h = q~_h alpha_1h / alpha_0h.
        """
        alpha = np.asarray(alpha, dtype=float)
        if alpha.ndim == 1:
            alpha = np.vstack([alpha, alpha])
        if alpha.shape != (2, params.log_q.shape[0]):
            raise DimensionError(f"alpha has shape {alpha.shape}, expected (2, {params.log_q.shape[0]})")
        log_alpha = np.log(alpha)
        log_alpha = log_alpha - log_alpha[:, :1]
        return TildeParams(
            log_N=params.log_N,
            log_P=params.log_P,
            log_E1=params.log_E1,
            log_q=params.log_q + log_alpha[1] - log_alpha[0],
            log_S=params.log_S + log_alpha[0][None, :],
            anchor=params.anchor,
        )

    # ----- files -----

    def parse_bins(self, text: str, n_habitats: Optional[int] = None,
                   path: Optional[str] = None) -> DistanceBinnedCounts:
        try:
            frame = pd.read_csv(io.StringIO(text))
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise SurveyDataError(f"cannot parse distance bins CSV: {e}", path=path)
        missing = [c for c in BINS_REQUIRED if c not in frame.columns]
        unknown = [c for c in frame.columns if c not in BINS_REQUIRED + BINS_OPTIONAL]
        if missing or unknown:
            raise SurveyDataError(
                f"expected columns {','.join(BINS_REQUIRED)} (optional {','.join(BINS_OPTIONAL)}), "
                f"got {','.join(frame.columns)}",
                path=path, line=1,
            )
        if frame.empty:
            raise SurveyDataError("distance bins file has no rows", path=path)

        threshold = None
        if "near_threshold" in frame.columns:
            values = frame["near_threshold"].dropna().unique()
            if len(values) > 1:
                raise SurveyDataError("near_threshold must be the same on every row", path=path)
            threshold = float(values[0]) if len(values) else None

        bins = []
        for row, record in enumerate(frame.to_dict(orient="records")):
            dataset = record.get("dataset")
            try:
                bins.append(DistanceBin(
                    habitat_id=record["habitat_id"],
                    total_count=record["total_count"],
                    near_count=record["near_count"],
                    dataset=None if dataset is None or pd.isna(dataset) else int(dataset),
                ))
            except (ValidationError, ValueError) as e:
                raise SurveyDataError(f"invalid distance bin: {e}", path=path, line=row + 2)

        if n_habitats is None:
            n_habitats = max(b.habitat_id for b in bins) + 1
        try:
            return DistanceBinnedCounts(n_habitats=n_habitats, bins=bins, near_threshold=threshold)
        except ValidationError as e:
            raise SurveyDataError(e.errors()[0].get("msg", str(e)), path=path)

    def load_bins(self, path: PathLike, n_habitats: Optional[int] = None) -> DistanceBinnedCounts:
        logger.info(f"Loading distance bins from {path}")
        return self.parse_bins(store.read_text(path), n_habitats=n_habitats, path=str(path))

    def load_alpha(self, path: PathLike) -> AlphaVector:
        try:
            return AlphaVector.model_validate(store.read_json(path))
        except ValidationError as e:
            raise SurveyDataError(e.errors()[0].get("msg", str(e)), path=str(path))
        except ValueError as e:
            raise SurveyDataError(f"invalid JSON: {e}", path=str(path))


detectability_service = DetectabilityService()
