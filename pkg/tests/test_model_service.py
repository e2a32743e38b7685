import numpy as np
import pytest
from scipy import stats

from conftest import build_design, random_counts, random_design, random_params
from app.errors import DimensionError
from app.model_service import ObservationIndex, ParameterLayout, model_service
from app.schemas import CountTable, ModelVariant, SurveyDesign, TildeParams, VariantTag

FD_STEP = 1e-5
FD_TOL = 1e-6


def _variant(tag, design):
    return ModelVariant.for_design(tag, design)


def _scaled(design: SurveyDesign, factor: float) -> SurveyDesign:
    cells = [c.model_copy(update={"habitat_area": [a * factor for a in c.habitat_area]}) for c in design.cells]
    return SurveyDesign(
        n_species=design.n_species,
        n_sites=design.n_sites,
        n_habitats=design.n_habitats,
        site_habitat_area=design.site_habitat_area * factor,
        monitored=design.monitored,
        cells=cells,
    )


def test_identity_intensity(minimal_design):
    variant = _variant(VariantTag.OPP_STAND_HAB, minimal_design)
    params = TildeParams.zeros(minimal_design)

    for cell_id in minimal_design.cell_ids:
        assert model_service.intensity(params, variant, minimal_design, 0, cell_id) == 1.0


def test_unit_intensity_and_zero_counts(minimal_design):
    variant = _variant(VariantTag.OPP_STAND_HAB, minimal_design)

    log_l = model_service.log_likelihood(TildeParams.zeros(minimal_design), variant, minimal_design, CountTable.empty())

    assert log_l == pytest.approx(-model_service.n_observations(variant, minimal_design))
    assert log_l == pytest.approx(-2.0)


def test_single_observation_closed_form(single_cell_design):
    variant = _variant(VariantTag.STAND_ONLY_HAB, single_cell_design)
    params = TildeParams.zeros(single_cell_design).model_copy(update={"log_N": np.array([[np.log(3.0)]])})
    counts = CountTable(species_ids=[0], cell_ids=[0], counts=[2])

    log_l = model_service.log_likelihood(params, variant, single_cell_design, counts)

    assert log_l == pytest.approx(2 * np.log(3.0) - 3.0 - np.log(2.0), rel=1e-12)


def test_log_likelihood_matches_scipy_poisson(rng):
    for _ in range(10):
        design = random_design(rng, I=3, J=2, H=3)
        params = random_params(rng, design)
        counts = random_counts(rng, design)
        variant = _variant(VariantTag.OPP_STAND_HAB, design)
        X = counts.dense(design)

        expected = 0.0
        for i in range(design.n_species):
            for pos, cell_id in enumerate(design.cell_ids):
                if design.monitored[i, design.cell_dataset[pos]]:
                    lam = model_service.intensity(params, variant, design, i, cell_id)
                    expected += stats.poisson.logpmf(X[i, pos], lam)

        assert model_service.log_likelihood(params, variant, design, counts) == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize("tag", list(VariantTag))
def test_gradient_matches_central_differences(rng, tag):
    for _ in range(50):
        I, J, H = (int(n) for n in rng.integers(1, 6, size=3))
        design = random_design(rng, I=I, J=J, H=H)
        counts = random_counts(rng, design)
        variant = _variant(tag, design)
        layout = ParameterLayout(variant, design)
        index = ObservationIndex(variant, design, counts)
        theta = rng.normal(0.0, 0.5, size=layout.n_free)

        def f(t):
            return index.log_likelihood(layout.unpack(t))

        grad = model_service.grad_log_likelihood(layout.unpack(theta), variant, design, counts)
        for k in range(layout.n_free):
            e = np.zeros(layout.n_free)
            e[k] = FD_STEP
            fd = (f(theta + e) - f(theta - e)) / (2 * FD_STEP)
            assert abs(grad[k] - fd) / max(abs(fd), 1.0) < FD_TOL, layout.names[k]


def test_gradient_of_single_cell(single_cell_design):
    variant = _variant(VariantTag.STAND_ONLY_HAB, single_cell_design)
    params = TildeParams.zeros(single_cell_design).model_copy(update={"log_N": np.array([[np.log(2.0)]])})
    counts = CountTable(species_ids=[0], cell_ids=[0], counts=[5])

    grad = model_service.grad_log_likelihood(params, variant, single_cell_design, counts)

    # d logL / d log N = X - lambda
    np.testing.assert_allclose(grad, [3.0])


def test_uniform_selection_reduces_to_no_habitat_model(rng):
    design = random_design(rng, I=4, J=3, H=3)
    counts = random_counts(rng, design)
    params = random_params(rng, design).model_copy(
        update={"log_S": np.zeros((4, 3)), "log_q": np.zeros(3)}
    )

    with_habitat = model_service.log_likelihood(params, _variant(VariantTag.OPP_STAND_HAB, design), design, counts)
    without = model_service.log_likelihood(params, _variant(VariantTag.OPP_STAND_NO_HAB, design), design, counts)

    assert with_habitat == without


def test_no_habitat_variant_rejects_selection_parameters(rng):
    design = random_design(rng, I=2, J=2, H=2)
    params = random_params(rng, design)

    with pytest.raises(DimensionError):
        model_service.log_likelihood(params, _variant(VariantTag.OPP_STAND_NO_HAB, design), design, CountTable.empty())


def test_free_parameter_counts(default_simulation):
    _, (design, _, _) = default_simulation

    counts = {tag: model_service.count_free_params(_variant(tag, design), design) for tag in VariantTag}

    assert counts[VariantTag.STAND_ONLY_HAB] == 620
    assert counts[VariantTag.OPP_STAND_HAB] == 600 + 20 + 1 + 19 + 900
    assert counts[VariantTag.OPP_STAND_NO_HAB] == 600 + 19 + 900
    assert counts[VariantTag.ONE_QUADRAT_HAB] == 20 + 20 + 1 + 19 + 900


def test_single_habitat_has_no_selection_parameters(rng):
    design = random_design(rng, I=3, J=2, H=1)
    layout = ParameterLayout(_variant(VariantTag.OPP_STAND_HAB, design), design)

    assert layout.slices["log_S"].start == layout.slices["log_S"].stop
    assert layout.slices["log_q"].start == layout.slices["log_q"].stop
    assert np.isfinite(model_service.log_likelihood(
        random_params(rng, design), _variant(VariantTag.OPP_STAND_HAB, design), design, random_counts(rng, design)
    ))


def test_area_units_are_absorbed_by_abundance(rng):
    design = random_design(rng, I=3, J=3, H=2)
    counts = random_counts(rng, design)
    params = random_params(rng, design)
    factor = 10.0
    variant = _variant(VariantTag.OPP_STAND_HAB, design)
    rescaled = params.model_copy(update={"log_N": params.log_N - np.log(factor)})

    scaled_design = _scaled(design, factor)
    original = model_service.log_likelihood(params, variant, design, counts)
    scaled = model_service.log_likelihood(rescaled, _variant(VariantTag.OPP_STAND_HAB, scaled_design),
                                          scaled_design, counts)

    assert scaled == pytest.approx(original, rel=1e-12)


def test_unmonitored_pairs_have_zero_intensity():
    design = build_design(
        [[1.0]],
        [[True, True], [False, True]],
        [(0, 0, [1.0], 1.0), (1, 0, [1.0], None)],
    )
    params = TildeParams.zeros(design)

    assert model_service.intensity(params, _variant(VariantTag.OPP_STAND_HAB, design), design, 1, 0) == 0.0
    assert model_service.intensity(params, _variant(VariantTag.STAND_ONLY_HAB, design), design, 0, 1) == 0.0
    assert model_service.n_observations(_variant(VariantTag.STAND_ONLY_HAB, design), design) == 1


def test_extreme_parameters_stay_finite(rng):
    design = random_design(rng, I=2, J=2, H=2)
    counts = random_counts(rng, design)
    variant = _variant(VariantTag.OPP_STAND_HAB, design)
    layout = ParameterLayout(variant, design)

    for value in (-20.0, 20.0):
        params = layout.unpack(np.full(layout.n_free, value))
        assert np.isfinite(model_service.log_likelihood(params, variant, design, counts))


def test_count_order_does_not_change_the_sum(rng):
    design = random_design(rng, I=3, J=2, H=2)
    counts = random_counts(rng, design)
    params = random_params(rng, design)
    variant = _variant(VariantTag.OPP_STAND_HAB, design)
    order = rng.permutation(len(counts.counts))
    shuffled = CountTable(species_ids=counts.species_ids[order], cell_ids=counts.cell_ids[order],
                          counts=counts.counts[order])

    assert (model_service.log_likelihood(params, variant, design, counts)
            == model_service.log_likelihood(params, variant, design, shuffled))


def test_dimension_mismatch(rng):
    design = random_design(rng, I=2, J=2, H=2)
    params = random_params(rng, design).model_copy(update={"log_E1": np.zeros(1)})

    with pytest.raises(DimensionError, match="log_E1"):
        model_service.log_likelihood(params, _variant(VariantTag.OPP_STAND_HAB, design), design, CountTable.empty())
