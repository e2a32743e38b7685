import io
import json
import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from app.errors import SurveyDataError
from app.schemas import (
    OPPORTUNISTIC,
    STANDARDIZED,
    CellRecord,
    CountTable,
    SurveyDesign,
)
from app.storage import PathLike, sha256_bytes, store

logger = logging.getLogger(__name__)

COUNTS_HEADER = ["species_id", "cell_id", "count"]

# Relative slack when comparing summed cell areas with site areas
AREA_RTOL = 1e-9


class DesignFile(BaseModel):
    n_species: int
    n_sites: int
    n_habitats: int
    site_habitat_area: List[List[float]]
    monitored: List[List[bool]]
    cells: List[CellRecord]


def _format_validation_error(e: ValidationError) -> str:
    first = e.errors()[0]
    loc = ".".join(str(p) for p in first.get("loc", ()))
    return f"{loc}: {first.get('msg')}" if loc else str(first.get("msg"))


class SurveyDataService:

    # ----- parsing -----

    def parse_design(self, text: str, path: Optional[str] = None) -> SurveyDesign:
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as e:
            raise SurveyDataError(f"invalid JSON: {e.msg}", path=path, line=e.lineno)
        try:
            design_file = DesignFile.model_validate(payload)
            return SurveyDesign(**design_file.model_dump())
        except ValidationError as e:
            raise SurveyDataError(_format_validation_error(e), path=path)

    def parse_counts(self, text: str, design: SurveyDesign, path: Optional[str] = None) -> CountTable:
        try:
            frame = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False)
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise SurveyDataError(f"cannot parse counts CSV: {e}", path=path)
        if list(frame.columns) != COUNTS_HEADER:
            raise SurveyDataError(
                f"expected header {','.join(COUNTS_HEADER)}, got {','.join(frame.columns)}",
                path=path, line=1,
            )

        values = {}
        for column in COUNTS_HEADER:
            numeric = pd.to_numeric(frame[column].str.strip(), errors="coerce")
            bad = numeric.isna() | (numeric % 1 != 0)
            if bad.any():
                row = int(np.flatnonzero(bad.to_numpy())[0])
                raise SurveyDataError(
                    f"{column} must be an integer, got '{frame[column].iloc[row]}'",
                    path=path, line=row + 2,
                )
            negative = numeric < 0
            if negative.any():
                row = int(np.flatnonzero(negative.to_numpy())[0])
                raise SurveyDataError(f"{column} must be >= 0", path=path, line=row + 2)
            values[column] = numeric.to_numpy().astype(np.int64)

        species, cells, counts = values["species_id"], values["cell_id"], values["count"]
        for row, (i, c) in enumerate(zip(species, cells)):
            if i >= design.n_species:
                raise SurveyDataError(f"unknown species_id {i}", path=path, line=row + 2)
            if not design.has_cell(c):
                raise SurveyDataError(f"unknown cell_id {c}", path=path, line=row + 2)

        keys = species * (int(design.cell_ids.max()) + 1) + cells
        _, first, occurrences = np.unique(keys, return_index=True, return_counts=True)
        if np.any(occurrences > 1):
            dup = np.flatnonzero(keys == keys[first[np.argmax(occurrences > 1)]])
            raise SurveyDataError(
                f"duplicate entry for species {species[dup[1]]}, cell {cells[dup[1]]}",
                path=path, line=int(dup[1]) + 2,
            )

        table = CountTable(species_ids=species, cell_ids=cells, counts=counts)
        violations = self.validate_counts(design, table)
        if violations:
            raise SurveyDataError(violations[0], path=path)
        return table

    def load_design(self, design_file: PathLike, counts_file: PathLike) -> Tuple[SurveyDesign, CountTable]:
        logger.info(f"Loading survey design from {design_file}")
        design = self.parse_design(store.read_text(design_file), path=str(design_file))
        violations = self.validate_design(design)
        if violations:
            for v in violations:
                logger.error(f"Design invariant violated: {v}")
            raise SurveyDataError(violations[0], path=str(design_file))

        logger.info(f"Loading counts from {counts_file}")
        counts = self.parse_counts(store.read_text(counts_file), design, path=str(counts_file))
        logger.info(
            f"Loaded design with I={design.n_species}, J={design.n_sites}, H={design.n_habitats}, "
            f"{design.n_cells} cells and {len(counts.counts)} count entries"
        )
        return design, counts

    # ----- invariants -----

    def validate_design(self, design: SurveyDesign) -> List[str]:
        """One message per violated design rule, empty when the design is usable"""
        violations: List[str] = []
        J, H = design.n_sites, design.n_habitats

        for j in np.flatnonzero(design.site_area <= 0):
            violations.append(f"site {j} has zero total habitat area")

        for dataset, label in ((STANDARDIZED, "standardized"), (OPPORTUNISTIC, "opportunistic")):
            covered = np.zeros(J, dtype=bool)
            covered[design.cell_site[design.cell_dataset == dataset]] = True
            for j in np.flatnonzero(~covered):
                violations.append(f"site {j} has no {label} cell")

        for i in np.flatnonzero(~design.monitored.any(axis=1)):
            violations.append(f"species {i} is monitored in neither dataset")
        if not (design.monitored[:, 0] & design.monitored[:, 1]).any():
            violations.append(
                "no species is monitored in both datasets (joint-monitoring rule)"
            )

        for dataset, label in ((STANDARDIZED, "standardized"), (OPPORTUNISTIC, "opportunistic")):
            mask = design.cell_dataset == dataset
            covered_area = np.zeros((J, H))
            np.add.at(covered_area, design.cell_site[mask], design.cell_habitat_area[mask])
            excess = covered_area > design.site_habitat_area * (1 + AREA_RTOL) + AREA_RTOL
            for j, h in zip(*np.nonzero(excess)):
                violations.append(
                    f"site {j} habitat {h}: {label} cells cover {covered_area[j, h]:g}, "
                    f"more than the site area {design.site_habitat_area[j, h]:g}"
                )
        return violations

    def validate_counts(self, design: SurveyDesign, counts: CountTable) -> List[str]:
        violations: List[str] = []
        for i, c, x in zip(counts.species_ids, counts.cell_ids, counts.counts):
            if i >= design.n_species:
                violations.append(f"count references unknown species {i}")
                continue
            if not design.has_cell(c):
                violations.append(f"count references unknown cell {c}")
                continue
            dataset = design.cell_dataset[design.cell_position(c)]
            if x > 0 and not design.monitored[i, dataset]:
                violations.append(
                    f"species {i} has a nonzero count in cell {c} but is not monitored in dataset {dataset}"
                )
        return violations

    def data_digest(self, design: SurveyDesign, counts: CountTable) -> str:
        """Digest of the canonical design and counts content, independent of file layout"""
        payload = json.dumps(self.design_payload(design), sort_keys=True).encode("utf-8")
        frame = self.counts_frame(design, counts)
        frame = frame[frame["count"] > 0]
        table = frame.to_csv(index=False, lineterminator="\n").encode("utf-8")
        return sha256_bytes(payload + b"\n" + table)

    # ----- writing -----

    def design_payload(self, design: SurveyDesign) -> dict:
        return {
            "n_species": design.n_species,
            "n_sites": design.n_sites,
            "n_habitats": design.n_habitats,
            "site_habitat_area": design.site_habitat_area.tolist(),
            "monitored": design.monitored.tolist(),
            "cells": [c.model_dump(exclude_none=True) for c in design.cells],
        }

    def counts_frame(self, design: SurveyDesign, counts: CountTable) -> pd.DataFrame:
        frame = pd.DataFrame({
            "species_id": counts.species_ids,
            "cell_id": counts.cell_ids,
            "count": counts.counts,
        })
        if len(frame):
            frame["_pos"] = [design.cell_position(c) for c in frame["cell_id"]]
            frame = frame.sort_values(["species_id", "_pos"], kind="mergesort").drop(columns="_pos")
        return frame.reset_index(drop=True)

    def write_design(self, design: SurveyDesign, counts: CountTable, out_dir: PathLike,
                     design_name: str = "design.json", counts_name: str = "counts.csv") -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        design_path = store.write_json(out_dir / design_name, self.design_payload(design))
        counts_path = store.write_frame(out_dir / counts_name, self.counts_frame(design, counts))
        logger.info(f"Wrote design to {design_path} and counts to {counts_path}")
        return design_path, counts_path


survey_data_service = SurveyDataService()
