import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from app import __version__
from app.config import config
from app.detectability_service import detectability_service
from app.errors import ComparisonError
from app.model_service import active_species
from app.reparam_service import reparam_service
from app.schemas import (
    BicDifference,
    InferenceConfig,
    ModelVariant,
    PosteriorSummary,
    PriorBounds,
    RunManifest,
    SimConfig,
    ValidationReport,
    VariantTag,
)
from app.services.inference_service import inference_service
from app.services.simulation_service import simulation_service
from app.storage import store
from app.survey_data_service import survey_data_service
from app.validation_service import validation_service

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
VARIANTS = [v.value for v in VariantTag]


class UsageError(Exception):
    """Bad command line or config file; maps to exit code 2."""


# -----------------------------------------------------------------------------
# Run bookkeeping
# -----------------------------------------------------------------------------

class RunContext:
    """Collects outputs of one subcommand and writes its manifest"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.outputs: List[Path] = []
        self.seeds: Dict[str, int] = {}
        self.started = datetime.now(timezone.utc)
        self.clock = time.perf_counter()

    def wrote(self, *paths: Path) -> None:
        self.outputs.extend(Path(p) for p in paths)

    def resolved_config(self) -> Dict[str, Any]:
        resolved = {}
        for key, value in sorted(vars(self.args).items()):
            if key == "handler":
                continue
            resolved[key] = str(value) if isinstance(value, Path) else value
        return resolved

    def write_manifests(self) -> None:
        if not self.outputs:
            return
        finished = datetime.now(timezone.utc)
        for directory in sorted({p.parent for p in self.outputs}):
            manifest = RunManifest(
                command=self.args.command,
                config=self.resolved_config(),
                seeds=self.seeds,
                input_digests=store.read_digests,
                outputs=sorted(str(p) for p in self.outputs if p.parent == directory),
                tool_version=__version__,
                started_at=self.started.isoformat(),
                finished_at=finished.isoformat(),
                wall_clock_s=time.perf_counter() - self.clock,
            )
            store.write_json(directory / MANIFEST_NAME, manifest)


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) in (None, [], "")]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s) {', '.join(missing)}")


def _inference_config(args: argparse.Namespace) -> InferenceConfig:
    bounds = PriorBounds(lo=args.prior_lo, hi=args.prior_hi)
    return InferenceConfig(
        n_chains=args.chains,
        n_warmup=args.warmup,
        n_samples=args.samples,
        thin=args.thin,
        rng_seed=args.seed,
        prior={block: bounds for block in ("log_N", "log_S", "log_q", "log_P", "log_E1")},
        map_max_iter=args.map_max_iter,
        map_tol=args.map_tol,
        threads=args.threads,
        reference_site=args.reference_site,
        keep_draws=args.draws_out is not None,
        force=args.force,
    )


def _load_fits(paths: Sequence[str]) -> List[PosteriorSummary]:
    return [inference_service.load_summary(p) for p in paths]


def compare_models(fits: List[PosteriorSummary]) -> Dict[str, Any]:
    """Pairwise BIC differences between fits of the same data"""
    if len(fits) < 2:
        raise ComparisonError("model comparison needs at least two fits")
    digests = {f.data_digest for f in fits}
    if len(digests) > 1:
        logger.error(f"Fits were made on different data: {sorted(digests)}")
        raise ComparisonError("fits were made on different data (data digests differ)")

    labels = []
    for fit in fits:
        label = fit.variant.value
        if label in labels:
            label = f"{label}#{sum(1 for l in labels if l.split('#')[0] == label) + 1}"
        labels.append(label)
    bic = np.array([f.bic for f in fits])
    delta = bic[:, None] - bic[None, :]
    pairs = [
        BicDifference(variant_a=labels[a], variant_b=labels[b], bic_a=float(bic[a]),
                      bic_b=float(bic[b]), delta_bic=float(delta[a, b]))
        for a in range(len(fits)) for b in range(len(fits)) if a != b
    ]
    return {
        "variants": labels,
        "bic": bic.tolist(),
        "delta_bic": delta.tolist(),
        "pairs": [p.model_dump() for p in pairs],
    }


# -----------------------------------------------------------------------------
# Subcommands
# -----------------------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace, run: RunContext) -> None:
    _require(args, "out")
    fields = dict(
        n_species=args.species,
        n_sites=args.sites,
        n_habitats=args.habitats,
        cells_std_per_site=args.std_cells,
        cells_opp_per_site=args.opp_cells,
        rng_seed=args.seed,
    )
    if args.sim_alpha is not None:
        fields["alpha"] = args.sim_alpha
    if args.monitored is not None:
        fields["monitored"] = args.monitored
    sim_config = SimConfig(**fields)
    run.seeds["seed"] = sim_config.rng_seed

    design, counts, raw = simulation_service.simulate(sim_config)
    out = Path(args.out)
    design_path, counts_path = survey_data_service.write_design(design, counts, out)
    truth_path = store.write_json(
        out / "truth.json", simulation_service.truth_payload(raw, sim_config, args.reference_site)
    )
    run.wrote(design_path, counts_path, truth_path)


def cmd_check_ident(args: argparse.Namespace, run: RunContext) -> None:
    _require(args, "design")
    design = survey_data_service.parse_design(store.read_text(args.design), path=str(args.design))
    report = reparam_service.check_identifiability(design)
    payload = report.model_dump(include={"rank", "required", "identifiable", "deficient_columns", "warnings"})
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.out:
        run.wrote(store.write_json(args.out, payload))


def cmd_fit(args: argparse.Namespace, run: RunContext) -> None:
    _require(args, "variant", "design", "counts", "out")
    if args.map_only and args.draws_out:
        raise UsageError("--draws-out cannot be combined with --map-only")
    design, counts = survey_data_service.load_design(args.design, args.counts)
    variant = ModelVariant.for_design(args.variant, design)
    inference = _inference_config(args)
    run.seeds["seed"] = inference.rng_seed

    alpha = None
    if args.alpha:
        alpha = detectability_service.alpha_array(detectability_service.load_alpha(args.alpha), design)

    if args.map_only:
        summary = inference_service.fit_map_summary(variant, design, counts, inference, alpha)
    else:
        summary = inference_service.fit_mcmc(variant, design, counts, inference, alpha)
    run.wrote(store.write_json(args.out, summary))
    if args.draws_out:
        run.wrote(store.write_frame(args.draws_out, inference_service.draws_frame(summary, inference.thin)))


def cmd_predict(args: argparse.Namespace, run: RunContext) -> None:
    _require(args, "fit", "design", "holdout", "holdout_counts", "out")
    design = survey_data_service.parse_design(store.read_text(args.design), path=str(args.design))
    summary = inference_service.load_summary(args.fit)
    variant, params = inference_service.params_from_summary(summary, design, args.estimate)
    holdout = validation_service.load_holdout(args.holdout, args.holdout_counts)
    prediction = validation_service.predict_holdout(params, variant, design, holdout)
    run.wrote(store.write_frame(args.out, validation_service.prediction_frame(prediction, holdout)))


def cmd_validate(args: argparse.Namespace, run: RunContext) -> None:
    _require(args, "fit", "design", "out")
    if not args.truth and not args.holdout:
        raise UsageError("validate: give --truth and/or --holdout with --holdout-counts")
    if args.holdout and not args.holdout_counts:
        raise UsageError("validate: --holdout needs --holdout-counts")
    design = survey_data_service.parse_design(store.read_text(args.design), path=str(args.design))
    holdout = validation_service.load_holdout(args.holdout, args.holdout_counts) if args.holdout else None
    truth = simulation_service.parse_truth(store.read_json(args.truth)) if args.truth else None

    out = Path(args.out)
    reports: List[ValidationReport] = []
    error_rows: List[Dict[str, Any]] = []
    correlation_rows: List[Dict[str, Any]] = []
    monitored_std = design.monitored[:, 0]

    for summary in _load_fits(args.fit):
        variant, params = inference_service.params_from_summary(summary, design, args.estimate)
        report = ValidationReport(model=variant.tag.value)
        if holdout is not None:
            prediction = validation_service.predict_holdout(params, variant, design, holdout)
            report.correlations, report.summaries = validation_service.pearson_by_species(
                prediction, holdout.counts, monitored_std
            )
            correlation_rows += [{"model": report.model, **c.model_dump()} for c in report.correlations]
        if truth is not None:
            fitted = validation_service.relative_abundances(params, variant, design, args.reference_site)
            expected = simulation_service.truth_relative_abundances(truth, args.reference_site)
            species = np.flatnonzero(active_species(variant, design))
            report.relative_differences, report.median_abs_relative_difference = (
                validation_service.relative_abundance_errors(fitted, expected, args.reference_site, species)
            )
            error_rows += [{"model": report.model, **r.model_dump()} for r in report.relative_differences]
        reports.append(report)
        logger.info(f"Validated {report.model}: median |relative difference| {report.median_abs_relative_difference}")

    run.wrote(store.write_json(out / "validation.json", [r.model_dump(mode="json") for r in reports]))
    if error_rows:
        run.wrote(store.write_frame(out / "relative_differences.csv", pd.DataFrame(error_rows)))
    if correlation_rows:
        run.wrote(store.write_frame(out / "correlations.csv", pd.DataFrame(correlation_rows)))


def cmd_alpha(args: argparse.Namespace, run: RunContext) -> None:
    _require(args, "bins", "out")
    bins = detectability_service.load_bins(args.bins, n_habitats=args.habitats)
    alpha = detectability_service.compute_alpha(bins)
    run.wrote(store.write_json(args.out, alpha))


def cmd_compare(args: argparse.Namespace, run: RunContext) -> None:
    _require(args, "fit", "out")
    table = compare_models(_load_fits(args.fit))
    out = Path(args.out)
    run.wrote(store.write_json(out, table))
    frame = pd.DataFrame(table["pairs"], columns=["variant_a", "variant_b", "bic_a", "bic_b", "delta_bic"])
    run.wrote(store.write_frame(out.with_suffix(".csv"), frame))


def cmd_density_map(args: argparse.Namespace, run: RunContext) -> None:
    _require(args, "fit", "design", "out")
    design = survey_data_service.parse_design(store.read_text(args.design), path=str(args.design))
    variant, params = inference_service.params_from_summary(
        inference_service.load_summary(args.fit), design, args.estimate
    )
    frame = validation_service.relative_density_map(params, variant, design, args.reference_site, args.species)
    run.wrote(store.write_frame(args.out, frame))


def cmd_preferences(args: argparse.Namespace, run: RunContext) -> None:
    _require(args, "fit", "design", "out")
    design = survey_data_service.parse_design(store.read_text(args.design), path=str(args.design))
    variant, params = inference_service.params_from_summary(
        inference_service.load_summary(args.fit), design, args.estimate
    )
    frame = validation_service.habitat_preferences(params, variant, design)
    if args.corrected_fit:
        corrected_variant, corrected = inference_service.params_from_summary(
            inference_service.load_summary(args.corrected_fit), design, args.estimate
        )
        other = validation_service.habitat_preferences(corrected, corrected_variant, design)
        frame = frame.merge(
            other.rename(columns={"preference": "preference_corrected"}),
            on=["species_id", "habitat_id"], how="left",
        )
    run.wrote(store.write_frame(args.out, frame))


# -----------------------------------------------------------------------------
# Argument parsing
# -----------------------------------------------------------------------------

def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m app",
        description="Joint standardized and opportunistic count models with habitat selection",
    )
    parser.add_argument("--config", help="JSON file supplying default values for any flag")
    parser.add_argument("--log-level", default=config.LOG_LEVEL,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], type=str.upper)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler: Callable, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        return p

    p = command("simulate", cmd_simulate, "generate a synthetic design, counts and ground truth")
    p.add_argument("--seed", type=int, default=config.SEED)
    p.add_argument("--out")
    p.add_argument("--species", type=int, default=20)
    p.add_argument("--sites", type=int, default=30)
    p.add_argument("--habitats", type=int, default=2)
    p.add_argument("--std-cells", type=int, default=10)
    p.add_argument("--opp-cells", type=int, default=30)
    p.add_argument("--alpha", dest="sim_alpha", type=_floats, default=None,
                   help="habitat detectability injected into the counts, e.g. 1,1.5")
    p.add_argument("--monitored", type=json.loads, default=None,
                   help="JSON I x 2 boolean matrix of monitored species")
    p.add_argument("--reference-site", type=int, default=0)

    p = command("check-ident", cmd_check_ident, "report the identifiability rank of a design")
    p.add_argument("--design")
    p.add_argument("--out")

    p = command("fit", cmd_fit, "fit a model variant by MAP and MCMC")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--design")
    p.add_argument("--counts")
    p.add_argument("--chains", type=int, default=config.CHAINS)
    p.add_argument("--warmup", type=int, default=config.WARMUP)
    p.add_argument("--samples", type=int, default=config.SAMPLES)
    p.add_argument("--thin", type=int, default=config.THIN)
    p.add_argument("--seed", type=int, default=config.SEED)
    p.add_argument("--threads", type=int, default=config.THREADS)
    p.add_argument("--prior-lo", type=float, default=config.PRIOR_LO)
    p.add_argument("--prior-hi", type=float, default=config.PRIOR_HI)
    p.add_argument("--map-max-iter", type=int, default=config.MAP_MAX_ITER)
    p.add_argument("--map-tol", type=float, default=config.MAP_TOL)
    p.add_argument("--reference-site", type=int, default=0)
    p.add_argument("--alpha", help="alpha JSON written by the alpha subcommand")
    p.add_argument("--force", action="store_true", help="fit even if the design is not identifiable")
    p.add_argument("--map-only", action="store_true", help="skip sampling; write MAP and BIC only")
    p.add_argument("--out")
    p.add_argument("--draws-out")

    estimate = dict(choices=["mean", "median", "map"], default="mean")

    p = command("predict", cmd_predict, "predict holdout counts from a fit")
    p.add_argument("--fit")
    p.add_argument("--design")
    p.add_argument("--holdout")
    p.add_argument("--holdout-counts")
    p.add_argument("--estimate", **estimate)
    p.add_argument("--out")

    p = command("validate", cmd_validate, "score fits against holdout counts and/or simulation truth")
    p.add_argument("--fit", action="append", default=[])
    p.add_argument("--design")
    p.add_argument("--holdout")
    p.add_argument("--holdout-counts")
    p.add_argument("--truth")
    p.add_argument("--reference-site", type=int, default=0)
    p.add_argument("--estimate", **estimate)
    p.add_argument("--out")

    p = command("alpha", cmd_alpha, "habitat detectability from distance-binned counts")
    p.add_argument("--bins")
    p.add_argument("--habitats", type=int, default=None)
    p.add_argument("--out")

    p = command("compare", cmd_compare, "pairwise BIC differences between fits")
    p.add_argument("--fit", action="append", default=[])
    p.add_argument("--out")

    p = command("density-map", cmd_density_map, "per-site relative densities")
    p.add_argument("--fit")
    p.add_argument("--design")
    p.add_argument("--species", type=int, default=None)
    p.add_argument("--reference-site", type=int, default=0)
    p.add_argument("--estimate", **estimate)
    p.add_argument("--out")

    p = command("preferences", cmd_preferences, "habitat preferences scaled to a maximum of 1")
    p.add_argument("--fit")
    p.add_argument("--design")
    p.add_argument("--corrected-fit", help="fit made with --alpha, reported alongside")
    p.add_argument("--estimate", **estimate)
    p.add_argument("--out")
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    """Parse flags, filling unset values from a --config JSON file"""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        overrides = json.loads(store.read_text(args.config))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}")
    except ValueError as e:
        raise UsageError(f"config file {args.config} is not valid JSON: {e}")
    if not isinstance(overrides, dict):
        raise UsageError("config file must hold a JSON object")

    sub = _subparser(parser, args.command)
    overrides = {k.replace("-", "_"): v for k, v in overrides.items()}
    if "alpha" in overrides and args.command == "simulate":
        overrides["sim_alpha"] = overrides.pop("alpha")
    known = {a.dest for a in sub._actions} - {"help", "handler"}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise UsageError(f"unknown key(s) in config file for {args.command}: {', '.join(unknown)}")
    sub.set_defaults(**overrides)
    return parser.parse_args(argv)


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    store.reset()
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    logging.basicConfig(
        level=getattr(logging, args.log_level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logging.getLogger().setLevel(args.log_level)
    context = RunContext(args)
    try:
        args.handler(args, context)
        context.write_manifests()
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0
