import logging
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy.optimize import minimize
from scipy.special import logsumexp

from app.errors import DimensionError, FitError, IdentifiabilityError, SurveyDataError
from app.model_service import ObservationIndex, ParameterLayout, model_service
from app.reparam_service import reparam_service
from app.schemas import (
    CountTable,
    InferenceConfig,
    ModelVariant,
    ParameterSummary,
    PosteriorSummary,
    SurveyDesign,
    TildeParams,
)
from app.services import diagnostics
from app.services.sampler import ChainResult, run_chain
from app.storage import PathLike, store
from app.survey_data_service import survey_data_service

logger = logging.getLogger(__name__)

# Pseudo-count used only to place the deterministic starting point
START_PSEUDO_COUNT = 0.5


def bic_value(log_likelihood: float, n_free: int, n_obs: int) -> float:
    return -2.0 * log_likelihood + n_free * np.log(n_obs)


def projected_gradient_norm(theta: np.ndarray, gradient: np.ndarray,
                            lo: np.ndarray, hi: np.ndarray) -> float:
    """Sup-norm of the ascent gradient projected onto the prior box"""
    if theta.size == 0:
        return 0.0
    step = np.clip(theta + gradient, lo, hi) - theta
    return float(np.max(np.abs(step)))


class InferenceService:

    # ----- checks -----

    def ensure_identifiable(self, design: SurveyDesign, config: InferenceConfig) -> None:
        report = reparam_service.check_identifiability(design)
        if report.identifiable:
            return
        message = (
            f"design is not identifiable: rank {report.rank} < required {report.required}"
            f" (deficient columns: {', '.join(report.deficient_columns) or 'none'})"
        )
        if config.force:
            logger.warning(f"{message}; continuing because force is set")
            return
        logger.error(message)
        raise IdentifiabilityError(message, report=report.model_dump())

    # ----- MAP -----

    def initial_point(self, layout: ParameterLayout, index: ObservationIndex,
                      config: InferenceConfig) -> np.ndarray:
        """Deterministic start: all non-abundance parameters at 0 and each abundance
        set to its count-matching value given the others"""
        base = layout.unpack(np.zeros(layout.n_free))
        log_base = index.log_intensity(base)
        n_groups = int(index.abundance_group.max()) + 1 if index.n_obs else 0
        totals = np.bincount(index.abundance_group, weights=index.X, minlength=n_groups)
        with np.errstate(divide="ignore"):
            log_exposure = np.full(n_groups, -np.inf)
            for g in np.unique(index.abundance_group):
                log_exposure[g] = logsumexp(log_base[index.abundance_group == g])
        theta = np.zeros(layout.n_free)
        sl = layout.slices["log_N"]
        if layout.single_abundance:
            groups = layout.N_index
        else:
            groups = layout.N_index[:, 0] * index.n_sites + layout.N_index[:, 1]
        if groups.size:
            known = groups < n_groups
            values = np.zeros(groups.size)
            g = groups[known]
            with np.errstate(divide="ignore", invalid="ignore"):
                values[known] = np.log(totals[g] + START_PSEUDO_COUNT) - log_exposure[g]
            values[~np.isfinite(values)] = 0.0
            theta[sl] = values
        lo, hi = layout.bounds(config.prior)
        return np.clip(theta, lo, hi)

    def fit_map(self, variant: ModelVariant, design: SurveyDesign, counts: CountTable,
                config: InferenceConfig, alpha: Optional[np.ndarray] = None) -> Tuple[TildeParams, float, bool]:
        self.ensure_identifiable(design, config)
        layout = ParameterLayout(variant, design)
        index = ObservationIndex(variant, design, counts, alpha)
        lo, hi = layout.bounds(config.prior)
        theta0 = self.initial_point(layout, index, config)

        def objective(theta: np.ndarray) -> Tuple[float, np.ndarray]:
            params = layout.unpack(theta)
            value = index.log_likelihood(params)
            if not np.isfinite(value):
                return np.inf, np.zeros_like(theta)
            return -value, -layout.gradient(index.gradient_arrays(params))

        start_value, _ = objective(theta0)
        if not np.isfinite(start_value):
            logger.error(f"Non-finite log-likelihood at the initial point for {variant.tag.value}")
            raise FitError("log-likelihood is not finite at the deterministic initial point")

        logger.info(f"MAP fit of {variant.tag.value}: {layout.n_free} free parameters, {index.n_obs} observations")
        if layout.n_free == 0:
            theta = theta0
        else:
            result = minimize(
                objective,
                x0=theta0,
                method="L-BFGS-B",
                jac=True,
                bounds=list(zip(lo, hi)),
                options={
                    "maxiter": config.map_max_iter,
                    "maxls": 50,
                    # run to the ftol limit; convergence is judged on the projected gradient
                    "gtol": 0.0,
                    "ftol": 64 * np.finfo(float).eps,
                },
            )
            theta = result.x
            logger.debug(f"L-BFGS-B stopped after {result.nit} iterations: {result.message}")
            if -result.fun < -start_value:
                theta = theta0

        params = layout.unpack(theta)
        log_l = index.log_likelihood(params)
        gradient = layout.gradient(index.gradient_arrays(params))
        norm = projected_gradient_norm(theta, gradient, lo, hi)
        converged = norm < config.map_tol
        if converged:
            logger.info(f"MAP converged: logL = {log_l:.6f}")
        else:
            logger.warning(f"MAP not converged: projected gradient {norm:.3g} >= {config.map_tol:g}")
        return params, float(log_l), bool(converged)

    # ----- BIC -----

    def compute_bic(self, variant: ModelVariant, design: SurveyDesign, counts: CountTable,
                    params: TildeParams, alpha: Optional[np.ndarray] = None) -> float:
        log_l = model_service.log_likelihood(params, variant, design, counts, alpha)
        if not np.isfinite(log_l):
            logger.error(f"Non-finite log-likelihood while computing BIC for {variant.tag.value}")
            raise FitError("BIC is undefined: log-likelihood is not finite")
        n_free = model_service.count_free_params(variant, design)
        n_obs = model_service.n_observations(variant, design)
        return float(bic_value(log_l, n_free, n_obs))

    # ----- MCMC -----

    def _run_chains(self, variant: ModelVariant, design: SurveyDesign, counts: CountTable,
                    config: InferenceConfig, alpha: Optional[np.ndarray],
                    start: np.ndarray) -> List[ChainResult]:
        chains = range(config.n_chains)
        if config.threads == 1:
            return [run_chain(variant, design, counts, config, alpha, c, start) for c in chains]
        workers = min(config.threads, config.n_chains)
        logger.info(f"Running {config.n_chains} chains on {workers} worker processes")
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_chain, variant, design, counts, config, alpha, c, start) for c in chains]
            return [f.result() for f in futures]

    def zero_count_species(self, variant: ModelVariant, design: SurveyDesign, counts: CountTable) -> List[int]:
        layout = ParameterLayout(variant, design)
        totals = counts.dense(design).sum(axis=1)
        return [int(i) for i in np.flatnonzero(layout.active & (totals == 0))]

    def derived_summaries(self, layout: ParameterLayout, design: SurveyDesign, draws: np.ndarray,
                          reference_site: int) -> Tuple[List[ParameterSummary], List[ParameterSummary]]:
        """Posterior summaries of N_ij / N_ij0 and of S~_ih over draws shaped (chain, draw, parameter)"""
        n_chains, n_draws, _ = draws.shape
        J, H = design.n_sites, design.n_habitats
        active = np.flatnonzero(layout.active)
        log_N = np.empty((n_chains, n_draws, active.size, J))
        log_S = np.empty((n_chains, n_draws, active.size, H))
        for c in range(n_chains):
            for d in range(n_draws):
                params = layout.unpack(draws[c, d])
                log_N[c, d] = params.log_N[active]
                log_S[c, d] = params.log_S[active]

        with np.errstate(divide="ignore"):
            log_V = np.log(design.site_habitat_area)
        weighted = logsumexp(log_S[..., None, :] + log_V, axis=-1)
        log_abundance = log_N + weighted
        relative = np.exp(log_abundance - log_abundance[..., reference_site:reference_site + 1])

        sites = [j for j in range(J) if j != reference_site]
        rel_names = [f"N_rel[{i},{j}]" for i in active for j in sites]
        rel_draws = relative[..., sites].reshape(n_chains, n_draws, -1)
        relative_abundance = diagnostics.summarize(rel_names, rel_draws)

        habitat_selection: List[ParameterSummary] = []
        if layout.S_index.size:
            sel_names = [f"S[{i},{h}]" for i in active for h in range(1, H)]
            sel_draws = np.exp(log_S[..., 1:]).reshape(n_chains, n_draws, -1)
            habitat_selection = diagnostics.summarize(sel_names, sel_draws)
        return relative_abundance, habitat_selection

    def fit_mcmc(self, variant: ModelVariant, design: SurveyDesign, counts: CountTable,
                 config: InferenceConfig, alpha: Optional[np.ndarray] = None) -> PosteriorSummary:
        if config.reference_site >= design.n_sites:
            raise ValueError(f"reference site {config.reference_site} out of range")
        map_params, map_log_l, converged = self.fit_map(variant, design, counts, config, alpha)
        layout = ParameterLayout(variant, design)
        start = layout.pack(map_params)
        warnings: List[str] = []

        for i in self.zero_count_species(variant, design, counts):
            message = f"species {i} has zero total count; its abundance posterior is prior-dominated"
            logger.warning(message)
            warnings.append(message)
        if not converged:
            warnings.append("MAP optimisation did not converge")

        logger.info(
            f"Sampling {variant.tag.value}: {config.n_chains} chains, {config.n_warmup} warmup, "
            f"{config.n_samples} samples, thin {config.thin}"
        )
        results = self._run_chains(variant, design, counts, config, alpha, start)
        good = [r for r in results if not r.failed]
        if not good:
            logger.error("All chains failed to initialise")
            raise FitError("all chains failed to find a finite starting point")
        for r in results:
            if r.failed:
                message = f"chain {r.chain} failed: {r.message}"
                logger.warning(message)
                warnings.append(message)

        draws = np.stack([r.draws for r in good])
        parameters = diagnostics.summarize(layout.names, draws)
        flagged = diagnostics.rhat_flags(parameters, config.rhat_warn)
        if flagged:
            message = f"{len(flagged)} parameters have R-hat above {config.rhat_warn:g}"
            logger.warning(f"{message}: {', '.join(flagged[:10])}")
            warnings.append(message)

        relative_abundance, habitat_selection = self.derived_summaries(
            layout, design, draws, config.reference_site
        )
        acceptance = {
            name: float(np.mean([r.acceptance[name] for r in good])) for name in good[0].acceptance
        }
        bic = self.compute_bic(variant, design, counts, map_params, alpha)
        logger.info(f"Finished {variant.tag.value}: BIC = {bic:.3f}")

        return PosteriorSummary(
            variant=variant.tag,
            data_digest=survey_data_service.data_digest(design, counts),
            reference_site=config.reference_site,
            n_obs=model_service.n_observations(variant, design),
            n_free=layout.n_free,
            free_names=layout.names,
            map_point=layout.pack(map_params).tolist(),
            map_log_likelihood=map_log_l,
            map_converged=converged,
            bic=bic,
            parameters=parameters,
            relative_abundance=relative_abundance,
            habitat_selection=habitat_selection,
            acceptance=acceptance,
            n_chains=len(good),
            n_draws_per_chain=int(draws.shape[1]),
            alpha=None if alpha is None else np.broadcast_to(alpha, (2, design.n_habitats)).tolist(),
            warnings=warnings,
            draws=draws if config.keep_draws else None,
        )

    def fit_map_summary(self, variant: ModelVariant, design: SurveyDesign, counts: CountTable,
                        config: InferenceConfig, alpha: Optional[np.ndarray] = None) -> PosteriorSummary:
        """PosteriorSummary carrying only the MAP fields, enough for BIC comparison and prediction"""
        params, log_l, converged = self.fit_map(variant, design, counts, config, alpha)
        layout = ParameterLayout(variant, design)
        return PosteriorSummary(
            variant=variant.tag,
            data_digest=survey_data_service.data_digest(design, counts),
            reference_site=config.reference_site,
            n_obs=model_service.n_observations(variant, design),
            n_free=layout.n_free,
            free_names=layout.names,
            map_point=layout.pack(params).tolist(),
            map_log_likelihood=log_l,
            map_converged=converged,
            bic=self.compute_bic(variant, design, counts, params, alpha),
            alpha=None if alpha is None else np.broadcast_to(alpha, (2, design.n_habitats)).tolist(),
            warnings=[] if converged else ["MAP optimisation did not converge"],
        )

    # ----- reading fits back -----

    def load_summary(self, path: PathLike) -> PosteriorSummary:
        try:
            return PosteriorSummary.model_validate(store.read_json(path))
        except ValidationError as e:
            raise SurveyDataError(e.errors()[0].get("msg", str(e)), path=str(path))
        except ValueError as e:
            raise SurveyDataError(f"invalid JSON: {e}", path=str(path))

    def params_from_summary(self, summary: PosteriorSummary, design: SurveyDesign,
                            estimate: str = "mean") -> Tuple[ModelVariant, TildeParams]:
        """Variant and point parameters of a fit, checked against the design"""
        variant = ModelVariant.for_design(summary.variant, design)
        layout = ParameterLayout(variant, design)
        if layout.names != summary.free_names:
            raise DimensionError(
                f"summary has {summary.n_free} free parameters that do not match the design "
                f"({layout.n_free} expected for {variant.tag.value})"
            )
        if estimate != "map" and summary.is_map_only:
            logger.warning(f"Summary holds no posterior draws; using the MAP point instead of the {estimate}")
        return variant, layout.unpack(summary.point(estimate))

    # ----- draws export -----

    def draws_frame(self, summary: PosteriorSummary, thin: int) -> pd.DataFrame:
        """Long table chain, iter, param_name, value of the retained draws"""
        if summary.draws is None:
            raise ValueError("summary carries no draws; fit with keep_draws")
        n_chains, n_draws, n_params = summary.draws.shape
        chain = np.repeat(np.arange(n_chains), n_draws * n_params)
        iteration = np.tile(np.repeat((np.arange(n_draws) + 1) * thin, n_params), n_chains)
        names = np.tile(np.array(summary.free_names, dtype=object), n_chains * n_draws)
        return pd.DataFrame({
            "chain": chain,
            "iter": iteration,
            "param_name": names,
            "value": summary.draws.reshape(-1),
        })


inference_service = InferenceService()
