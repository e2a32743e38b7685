import numpy as np
import pytest

from conftest import build_design, random_design, random_params
from app.errors import DimensionError, SurveyDataError
from app.schemas import HoldoutPoint, HoldoutQuadrat, HoldoutSurvey, ModelVariant, TildeParams, VariantTag
from app.validation_service import validation_service


def _holdout(n_species, quadrats):
    return HoldoutSurvey(
        n_species=n_species,
        quadrats=[
            HoldoutQuadrat(quadrat_id=q, site_id=j, points=[HoldoutPoint(habitat=h, area=a, effort=e) for h, a, e in pts])
            for q, (j, pts) in enumerate(quadrats)
        ],
        counts=np.zeros((n_species, len(quadrats))),
    )


def _variant(tag, design):
    return ModelVariant.for_design(tag, design)


def test_single_point_covering_the_site_predicts_abundance(minimal_design):
    params = TildeParams.zeros(minimal_design).model_copy(update={"log_N": np.array([[np.log(7.0)]])})
    holdout = _holdout(1, [(0, [(0, 1.0, 1.0)])])

    prediction = validation_service.predict_holdout(
        params, _variant(VariantTag.OPP_STAND_HAB, minimal_design), minimal_design, holdout
    )

    np.testing.assert_allclose(prediction, [[7.0]], rtol=1e-14)


def test_prediction_matches_hand_formula(rng):
    design = random_design(rng, I=3, J=3, H=3, all_monitored=True)
    params = random_params(rng, design)
    holdout = _holdout(3, [
        (0, [(0, 0.5, 1.0), (2, 0.25, 2.0)]),
        (2, [(1, 1.0, 0.5)]),
        (1, [(0, 0.3, 1.0), (1, 0.3, 1.0), (2, 0.3, 1.0)]),
    ])

    prediction = validation_service.predict_holdout(params, _variant(VariantTag.OPP_STAND_HAB, design), design, holdout)

    # N-hat_ij / sum_h S~_ih V_hj = N~_ij, so X-hat = N~_ij sum_p E_p a_p S~_ih(p)
    S = np.exp(params.log_S)
    for q, quadrat in enumerate(holdout.quadrats):
        j = quadrat.site_id
        weight = sum(p.effort * p.area * S[:, p.habitat] for p in quadrat.points)
        np.testing.assert_allclose(prediction[:, q], np.exp(params.log_N[:, j]) * weight, rtol=1e-12)


def test_uniform_selection_matches_no_habitat_predictor(rng):
    design = random_design(rng, I=3, J=2, H=2, all_monitored=True)
    params = random_params(rng, design).model_copy(update={"log_S": np.zeros((3, 2)), "log_q": np.zeros(2)})
    holdout = _holdout(3, [(0, [(0, 1.0, 1.0)]), (1, [(1, 0.5, 3.0), (0, 0.5, 1.0)])])

    with_habitat = validation_service.predict_holdout(params, _variant(VariantTag.OPP_STAND_HAB, design), design, holdout)
    without = validation_service.predict_holdout(params, _variant(VariantTag.OPP_STAND_NO_HAB, design), design, holdout)

    np.testing.assert_allclose(with_habitat, without, rtol=1e-14)


def test_one_quadrat_predictor_uses_a_single_abundance(rng):
    design = random_design(rng, I=2, J=3, H=2, all_monitored=True)
    params = random_params(rng, design)
    params = params.model_copy(update={"log_N": np.repeat(params.log_N[:, :1], 3, axis=1)})
    holdout = _holdout(2, [(0, [(1, 0.5, 1.0)]), (2, [(1, 0.5, 1.0)])])

    prediction = validation_service.predict_holdout(
        params, _variant(VariantTag.ONE_QUADRAT_HAB, design), design, holdout
    )

    # identical points at two sites get identical predictions
    np.testing.assert_allclose(prediction[:, 0], prediction[:, 1], rtol=1e-14)
    np.testing.assert_allclose(prediction[:, 0], np.exp(params.log_N[:, 0] + params.log_S[:, 1]) * 0.5, rtol=1e-12)


def test_doubling_abundance_doubles_prediction(rng):
    design = random_design(rng, I=2, J=2, H=2, all_monitored=True)
    params = random_params(rng, design)
    doubled = params.model_copy(update={"log_N": params.log_N + np.log(2.0)})
    holdout = _holdout(2, [(0, [(0, 1.0, 1.0), (1, 0.2, 2.0)]), (1, [(1, 1.0, 1.0)])])
    variant = _variant(VariantTag.OPP_STAND_HAB, design)

    np.testing.assert_allclose(
        validation_service.predict_holdout(doubled, variant, design, holdout),
        2 * validation_service.predict_holdout(params, variant, design, holdout),
        rtol=1e-14,
    )


def test_holdout_outside_the_design(minimal_design):
    params = TildeParams.zeros(minimal_design)
    variant = _variant(VariantTag.OPP_STAND_HAB, minimal_design)

    with pytest.raises(DimensionError, match="habitat 1"):
        validation_service.predict_holdout(params, variant, minimal_design, _holdout(1, [(0, [(1, 1.0, 1.0)])]))
    with pytest.raises(DimensionError, match="unknown site 3"):
        validation_service.predict_holdout(params, variant, minimal_design, _holdout(1, [(3, [(0, 1.0, 1.0)])]))
    with pytest.raises(DimensionError, match="2 species"):
        validation_service.predict_holdout(params, variant, minimal_design, _holdout(2, [(0, [(0, 1.0, 1.0)])]))


def test_perfect_and_reversed_predictions():
    observed = np.array([[1.0, 4.0, 2.0, 8.0], [3.0, 0.0, 5.0, 1.0]])

    perfect, _ = validation_service.pearson_by_species(observed, observed)
    reversed_, _ = validation_service.pearson_by_species(100.0 - observed, observed)

    assert [c.r for c in perfect] == pytest.approx([1.0, 1.0])
    assert [c.r for c in reversed_] == pytest.approx([-1.0, -1.0])


def test_correlations_against_direct_formula():
    rng = np.random.default_rng(5)
    predicted = rng.uniform(0.5, 10.0, size=(5, 8))
    observed = rng.poisson(predicted).astype(float)
    observed[:, 0] += 1.0

    correlations, summaries = validation_service.pearson_by_species(predicted, observed)

    expected = []
    for a, b in zip(predicted, observed):
        da, db = a - a.mean(), b - b.mean()
        expected.append(da @ db / np.sqrt((da @ da) * (db @ db)))
    np.testing.assert_allclose([c.r for c in correlations], expected, rtol=1e-12)
    # five values: the quartiles are the 2nd, 3rd and 4th order statistics
    ordered = np.sort(expected)
    assert summaries[0].group == "all"
    assert summaries[0].q1 == pytest.approx(ordered[1], rel=1e-12)
    assert summaries[0].median == pytest.approx(ordered[2], rel=1e-12)
    assert summaries[0].q3 == pytest.approx(ordered[3], rel=1e-12)


def test_correlation_is_affine_invariant():
    rng = np.random.default_rng(8)
    predicted = rng.uniform(1.0, 5.0, size=(3, 6))
    observed = rng.uniform(0.0, 9.0, size=(3, 6))

    base, _ = validation_service.pearson_by_species(predicted, observed)
    shifted, _ = validation_service.pearson_by_species(3.5 * predicted + 2.0, observed)

    np.testing.assert_allclose([c.r for c in shifted], [c.r for c in base], rtol=1e-12)


def test_constant_vectors_are_excluded():
    predicted = np.array([[1.0, 2.0, 3.0], [2.0, 2.0, 2.0], [1.0, 3.0, 2.0]])
    observed = np.array([[1.0, 2.0, 4.0], [0.0, 1.0, 5.0], [0.0, 0.0, 0.0]])

    correlations, summaries = validation_service.pearson_by_species(predicted, observed)

    assert [c.defined for c in correlations] == [True, False, False]
    assert summaries[0].n_species == 1
    assert summaries[0].n_excluded == 2


def test_groups_by_standardized_monitoring():
    rng = np.random.default_rng(2)
    predicted = rng.uniform(1.0, 5.0, size=(4, 5))
    observed = rng.uniform(1.0, 5.0, size=(4, 5))

    _, summaries = validation_service.pearson_by_species(predicted, observed, np.array([True, True, True, False]))

    assert [(s.group, s.n_species) for s in summaries] == [
        ("all", 4), ("monitored_standardized", 3), ("not_monitored_standardized", 1),
    ]


def test_correlation_needs_two_quadrats():
    with pytest.raises(ValueError, match="at least 2 quadrats"):
        validation_service.pearson_by_species(np.ones((2, 1)), np.ones((2, 1)))


def test_relative_abundance_errors():
    truth = np.array([[1.0, 2.0, 0.5], [1.0, 4.0, 3.0]])

    rows, median = validation_service.relative_abundance_errors(truth, truth, reference_site=0)
    assert len(rows) == 4
    assert median == 0.0
    assert all(r.relative_difference == 0.0 for r in rows)

    rows, median = validation_service.relative_abundance_errors(2 * truth, truth, reference_site=0)
    assert all(r.relative_difference == 1.0 for r in rows)
    assert median == 1.0

    with pytest.raises(ValueError, match="zero"):
        validation_service.relative_abundance_errors(truth, np.array([[1.0, 0.0, 1.0], [1.0, 1.0, 1.0]]), 0)


def test_density_map_accounts_for_site_area():
    design = build_design(
        [[1.0], [2.0]],
        [[True, True]],
        [(0, 0, [0.5], 1.0), (1, 0, [0.5], None), (0, 1, [0.5], 1.0), (1, 1, [0.5], None)],
    )
    # equal abundance N~_ij V_j at both sites
    params = TildeParams.zeros(design).model_copy(update={"log_N": np.log([[4.0, 2.0]])})

    frame = validation_service.relative_density_map(params, _variant(VariantTag.OPP_STAND_HAB, design), design, 0)

    assert list(frame.columns) == ["species_id", "site_id", "relative_density"]
    np.testing.assert_allclose(frame["relative_density"], [1.0, 0.5], rtol=1e-14)


def test_density_map_of_uniform_density():
    design = build_design(
        [[1.0], [3.0]],
        [[True, True]],
        [(0, 0, [0.5], 1.0), (1, 0, [0.5], None), (0, 1, [0.5], 1.0), (1, 1, [0.5], None)],
    )
    params = TildeParams.zeros(design)

    frame = validation_service.relative_density_map(params, _variant(VariantTag.OPP_STAND_HAB, design), design, 1, species=0)

    np.testing.assert_allclose(frame["relative_density"], 1.0, rtol=1e-14)


def test_density_map_rejects_unknown_ids(minimal_design):
    params = TildeParams.zeros(minimal_design)
    variant = _variant(VariantTag.OPP_STAND_HAB, minimal_design)

    with pytest.raises(DimensionError, match="species 1 is out of range for 1 species"):
        validation_service.relative_density_map(params, variant, minimal_design, 0, species=1)
    with pytest.raises(DimensionError, match="reference site 2 is out of range for 1 sites"):
        validation_service.relative_density_map(params, variant, minimal_design, 2)


def test_habitat_preferences(rng):
    design = random_design(rng, I=3, J=2, H=3, all_monitored=True)
    params = random_params(rng, design)

    frame = validation_service.habitat_preferences(params, _variant(VariantTag.OPP_STAND_HAB, design), design)
    flat = validation_service.habitat_preferences(params, _variant(VariantTag.OPP_STAND_NO_HAB, design), design)

    assert len(frame) == 9
    np.testing.assert_allclose(frame.groupby("species_id")["preference"].max(), 1.0)
    assert (frame["preference"] > 0).all()
    np.testing.assert_array_equal(flat["preference"], 1.0)


def test_parse_holdout():
    survey = (
        '{"n_species": 2, "quadrats": ['
        '{"quadrat_id": 10, "site_id": 0, "points": [{"habitat": 0, "area": 1.0, "effort": 2.0}]},'
        '{"quadrat_id": 11, "site_id": 1, "points": [{"habitat": 1, "area": 0.5, "effort": 1.0}]}]}'
    )
    counts = "species_id,quadrat_id,count\n0,10,3\n1,11,4\n"

    holdout = validation_service.parse_holdout(survey, counts)

    np.testing.assert_array_equal(holdout.counts, [[3.0, 0.0], [0.0, 4.0]])

    with pytest.raises(SurveyDataError, match="unknown quadrat_id 12") as info:
        validation_service.parse_holdout(survey, counts + "1,12,1\n", counts_path="holdout.csv")
    assert info.value.line == 4
