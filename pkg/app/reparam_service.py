import logging
from typing import List, Optional

import numpy as np
from scipy.special import logsumexp

from app.config import config
from app.errors import DimensionError
from app.schemas import (
    OPPORTUNISTIC,
    STANDARDIZED,
    IdentifiabilityReport,
    IdentMatrix,
    ModelVariant,
    RawParams,
    SurveyDesign,
    TildeParams,
    VariantTag,
)

logger = logging.getLogger(__name__)

# Null-space components below this magnitude are treated as zero
NULL_SUPPORT_TOL = 1e-8


class ReparamService:

    # ----- raw model -----

    def _check_raw(self, raw: RawParams, design: SurveyDesign) -> None:
        I, J, H = design.n_species, design.n_sites, design.n_habitats
        expected = {"N": (I, J), "P": (I, 2), "E": (design.n_cells,), "q": (H, 2), "S": (I, H)}
        for name, shape in expected.items():
            actual = getattr(raw, name).shape
            if actual != shape:
                raise DimensionError(f"raw {name} has shape {actual}, expected {shape}")

    def raw_intensity_matrix(self, raw: RawParams, design: SurveyDesign,
                             alpha: Optional[np.ndarray] = None) -> np.ndarray:
        """I x C matrix of lambda_ick under the un-reparametrized model, cells in design order.

        Habitat detectability alpha (2 x H) multiplies the observed habitat
        terms only; the spatial distribution of animals and observers is
        unaffected by it.
        """
        self._check_raw(raw, design)
        H = design.n_habitats
        if alpha is None:
            alpha = np.ones((2, H))
        alpha = np.asarray(alpha, dtype=float)
        if alpha.ndim == 1:
            alpha = np.vstack([alpha, alpha])

        V = design.cell_habitat_area                    # C x H
        k = design.cell_dataset                         # C
        q = raw.q[:, k].T                               # C x H
        observer = q / (q * V).sum(axis=1, keepdims=True)
        selection = raw.S[:, None, :] / (raw.S @ design.site_habitat_area.T)[:, design.cell_site, None]
        habitat_sum = (selection * (alpha[k] * observer * V)[None, :, :]).sum(axis=2)   # I x C
        N = raw.N[:, design.cell_site]
        P = raw.P[:, k]
        lam = N * raw.E[None, :] * P * habitat_sum
        monitored = design.monitored[:, k]
        return np.where(monitored, lam, 0.0)

    def known_effort_from_raw(self, raw: RawParams, design: SurveyDesign) -> np.ndarray:
        """E~_c0 = E_c0 / V_c for every cell, the value a design stores as known_effort"""
        return raw.E / design.cell_habitat_area.sum(axis=1)

    # ----- change of variables -----

    def to_tilde(self, raw: RawParams, design: SurveyDesign,
                 variant: Optional[ModelVariant] = None) -> TildeParams:
        """Identifiable parameters of a raw parameter set.

        The design's known standardized efforts are taken to be E_c0 / V_c.
        For one-quadrat-hab the first column of N holds N_i; for
        opp-stand-no-hab the raw S and q are ignored (treated as uniform).
        """
        self._check_raw(raw, design)
        tag = variant.tag if variant is not None else VariantTag.OPP_STAND_HAB
        I, J, H = design.n_species, design.n_sites, design.n_habitats
        mon = design.monitored
        anchor = design.anchor_species
        if anchor is None:
            raise ValueError("no species is monitored in both datasets; P~ has no anchor")

        if np.any(raw.N <= 0) or np.any(raw.E <= 0):
            raise ValueError("raw N and E must be > 0")
        if np.any(raw.P[mon] <= 0):
            raise ValueError("raw P must be > 0 wherever a species is monitored")
        if np.any(raw.S[:, 0] <= 0) or np.any(raw.q[0, :] <= 0):
            raise ValueError("reference habitat S_i1 and q_1k must be > 0")

        has_habitat = tag != VariantTag.OPP_STAND_NO_HAB
        if has_habitat:
            S_t = raw.S / raw.S[:, :1]
            q_t = raw.q / raw.q[:1, :]
        else:
            S_t = np.ones((I, H))
            q_t = np.ones((H, 2))

        P = raw.P
        P0 = np.where(mon[:, 0], P[:, 0], P[:, 1] * P[anchor, 0] / P[anchor, 1])
        P_t = np.where(mon[:, 1], P[:, 1] * P[anchor, 0] / (P0 * P[anchor, 1]), 1.0)

        if tag == VariantTag.ONE_QUADRAT_HAB:
            denom = S_t @ design.habitat_totals
            N_t = np.repeat((raw.N[:, 0] * P0 / denom)[:, None], J, axis=1)
        else:
            denom = S_t @ design.site_habitat_area.T      # I x J
            N_t = raw.N * P0[:, None] / denom

        opp = design.cell_dataset == OPPORTUNISTIC
        V_opp = design.cell_habitat_area[opp]
        E_t = raw.E[opp] * P[anchor, 1] / (P[anchor, 0] * (V_opp @ q_t[:, OPPORTUNISTIC]))

        with np.errstate(divide="ignore"):
            log_S = np.log(S_t)
            log_q = np.log(q_t[:, OPPORTUNISTIC])
        log_S[:, 0] = 0.0
        log_q[0] = 0.0
        log_P = np.log(P_t)
        log_P[anchor] = 0.0
        return TildeParams(
            log_N=np.log(N_t),
            log_P=log_P,
            log_E1=np.log(E_t),
            log_q=log_q,
            log_S=log_S,
            anchor=anchor,
        )

    # ----- relative abundances -----

    def check_site(self, design: SurveyDesign, site: int, role: str = "reference site") -> None:
        if not 0 <= site < design.n_sites:
            logger.error(f"{role} {site} outside 0..{design.n_sites - 1}")
            raise DimensionError(f"{role} {site} is out of range for {design.n_sites} sites")

    def _log_weighted_area(self, tilde: TildeParams, design: SurveyDesign) -> np.ndarray:
        """log sum_h S~_ih V_hj, I x J"""
        with np.errstate(divide="ignore"):
            log_V = np.log(design.site_habitat_area)
            return logsumexp(tilde.log_S[:, None, :] + log_V[None, :, :], axis=2)

    def relative_abundance(self, tilde: TildeParams, design: SurveyDesign,
                           species: int, site: int, reference_site: int) -> float:
        """N_ij / N_ij0 recovered from identifiable parameters"""
        self.check_site(design, site, "site")
        self.check_site(design, reference_site)
        weighted = self._log_weighted_area(tilde, design)[species]
        if not (np.isfinite(weighted[site]) and np.isfinite(weighted[reference_site])):
            raise ValueError(
                f"sum_h S~_ih V_hj is zero for species {species} at site {site} or {reference_site}"
            )
        log_ratio = (
            tilde.log_N[species, site] - tilde.log_N[species, reference_site]
            + weighted[site] - weighted[reference_site]
        )
        return float(np.exp(log_ratio))

    def relative_abundance_matrix(self, tilde: TildeParams, design: SurveyDesign,
                                  reference_site: int) -> np.ndarray:
        self.check_site(design, reference_site)
        weighted = self._log_weighted_area(tilde, design)
        log_abundance = tilde.log_N + weighted
        if not np.all(np.isfinite(weighted)):
            raise ValueError("sum_h S~_ih V_hj is zero for some species and site")
        return np.exp(log_abundance - log_abundance[:, reference_site:reference_site + 1])

    # ----- identifiability -----

    def standardized_habitats(self, design: SurveyDesign) -> np.ndarray:
        """Dominant habitat of each standardized cell, lowest index on ties"""
        V = design.cell_habitat_area[design.cell_dataset == STANDARDIZED]
        return np.argmax(V, axis=1)

    def build_ident_matrix(self, design: SurveyDesign) -> IdentMatrix:
        J, H = design.n_sites, design.n_habitats
        std = design.cell_dataset == STANDARDIZED
        sites = design.cell_site[std]
        habitats = self.standardized_habitats(design)
        Y = np.zeros((sites.size, J + H - 1))
        rows = np.arange(sites.size)
        Y[rows, sites] = 1.0
        non_reference = habitats > 0
        Y[rows[non_reference], J + habitats[non_reference] - 1] = 1.0
        labels = [f"site {j}" for j in range(J)] + [f"habitat {h}" for h in range(1, H)]
        return IdentMatrix(Y=Y, rank=self._rank(Y), column_labels=labels)

    def _rank(self, Y: np.ndarray) -> int:
        if Y.size == 0:
            return 0
        s = np.linalg.svd(Y, compute_uv=False)
        return int(np.sum(s > config.RANK_RTOL * s.max())) if s.max() > 0 else 0

    def _deficient_columns(self, ident: IdentMatrix) -> List[str]:
        Y = ident.Y
        n_cols = Y.shape[1]
        if ident.rank == n_cols:
            return []
        if Y.shape[0] == 0:
            return list(ident.column_labels)
        _, _, Vt = np.linalg.svd(Y, full_matrices=True)
        null_space = Vt[ident.rank:]
        support = np.max(np.abs(null_space), axis=0) > NULL_SUPPORT_TOL
        return [label for label, hit in zip(ident.column_labels, support) if hit]

    def check_identifiability(self, design: SurveyDesign) -> IdentifiabilityReport:
        J, H = design.n_sites, design.n_habitats
        ident = self.build_ident_matrix(design)
        required = J + H - 1
        warnings: List[str] = []

        std = design.cell_dataset == STANDARDIZED
        n_mixed = int(((design.cell_habitat_area[std] > 0).sum(axis=1) > 1).sum())
        if n_mixed:
            message = (
                f"{n_mixed} standardized cells cover several habitats; "
                "each is attributed to its dominant habitat"
            )
            logger.warning(message)
            warnings.append(message)

        opp = design.cell_dataset == OPPORTUNISTIC
        if H > 1 and opp.any():
            visited = design.cell_habitat_area[opp].sum(axis=0)
            for h in np.flatnonzero(visited <= 0):
                message = (
                    f"habitat {h} has zero visited area in opportunistic cells; "
                    f"q~_{h} is unconstrained by data"
                )
                logger.warning(message)
                warnings.append(message)

        report = IdentifiabilityReport(
            rank=ident.rank,
            required=required,
            identifiable=ident.rank == required,
            deficient_columns=self._deficient_columns(ident),
            warnings=warnings,
        )
        logger.info(f"Identifiability: rank {report.rank} of {required} required")
        return report


reparam_service = ReparamService()
