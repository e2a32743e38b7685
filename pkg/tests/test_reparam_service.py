from fractions import Fraction

import numpy as np
import pytest

from conftest import build_design, random_design
from app.errors import DimensionError
from app.model_service import ObservationIndex
from app.reparam_service import reparam_service
from app.schemas import ModelVariant, RawParams, SurveyDesign, TildeParams, VariantTag
from app.services.simulation_service import simulation_service


def _random_raw(rng, design, uniform_habitat=False):
    I, J, H = design.n_species, design.n_sites, design.n_habitats
    S = np.ones((I, H)) if uniform_habitat else rng.uniform(0.1, 1.0, size=(I, H))
    q = np.ones((H, 2)) if uniform_habitat else rng.uniform(0.1, 1.0, size=(H, 2))
    return RawParams(
        N=rng.uniform(20, 200, size=(I, J)),
        P=rng.uniform(0.1, 1.0, size=(I, 2)) * design.monitored,
        E=rng.uniform(0.5, 5.0, size=design.n_cells),
        q=q,
        S=S,
    )


def _exact_rank(Y):
    rows = [[Fraction(int(v)) for v in row] for row in Y]
    rank, n_cols = 0, len(rows[0]) if rows else 0
    for col in range(n_cols):
        pivot = next((r for r in range(rank, len(rows)) if rows[r][col] != 0), None)
        if pivot is None:
            continue
        rows[rank], rows[pivot] = rows[pivot], rows[rank]
        for r in range(len(rows)):
            if r != rank and rows[r][col] != 0:
                factor = rows[r][col] / rows[rank][col]
                rows[r] = [a - factor * b for a, b in zip(rows[r], rows[rank])]
        rank += 1
    return rank


@pytest.mark.parametrize("tag, uniform", [
    (VariantTag.OPP_STAND_HAB, False),
    (VariantTag.OPP_STAND_NO_HAB, True),
])
def test_raw_and_identifiable_intensities_agree(rng, tag, uniform):
    for _ in range(50):
        design = random_design(rng, I=int(rng.integers(2, 5)), J=int(rng.integers(2, 4)),
                               H=int(rng.integers(1, 4)))
        raw = _random_raw(rng, design, uniform_habitat=uniform)
        design = simulation_service.with_known_effort(design, raw)
        variant = ModelVariant.for_design(tag, design)

        tilde = reparam_service.to_tilde(raw, design, variant)
        index = ObservationIndex(variant, design)
        lam_tilde = np.exp(index.log_intensity(tilde))
        lam_raw = reparam_service.raw_intensity_matrix(raw, design)

        np.testing.assert_allclose(lam_tilde, lam_raw[index.species, index.cell], rtol=1e-12)
        unmonitored = ~design.monitored[:, design.cell_dataset]
        assert np.all(lam_raw[unmonitored] == 0.0)


def test_detectability_enters_both_forms_alike(rng):
    for _ in range(20):
        design = random_design(rng, I=3, J=2, H=3)
        raw = _random_raw(rng, design)
        design = simulation_service.with_known_effort(design, raw)
        alpha = np.column_stack([np.ones(2), rng.uniform(0.3, 2.0, size=(2, 2))])
        variant = ModelVariant.for_design(VariantTag.OPP_STAND_HAB, design)

        index = ObservationIndex(variant, design, alpha=alpha)
        lam_tilde = np.exp(index.log_intensity(reparam_service.to_tilde(raw, design)))
        lam_raw = reparam_service.raw_intensity_matrix(raw, design, alpha)

        np.testing.assert_allclose(lam_tilde, lam_raw[index.species, index.cell], rtol=1e-12)


def test_trivial_parameters_map_to_density():
    # every cell has unit area split evenly over two habitats
    cells = []
    for j in range(2):
        cells += [(0, j, [0.5, 0.5], 1.0), (1, j, [0.5, 0.5], None)]
    design = build_design([[2.0, 1.0], [3.0, 4.0]], [[True, True], [True, True]], cells)
    N = np.array([[10.0, 20.0], [30.0, 70.0]])
    raw = RawParams(N=N, P=np.ones((2, 2)), E=np.ones(4), q=np.ones((2, 2)), S=np.ones((2, 2)))

    tilde = reparam_service.to_tilde(raw, design)

    np.testing.assert_allclose(np.exp(tilde.log_N), N / design.site_area[None, :], rtol=1e-14)
    np.testing.assert_allclose(tilde.log_S, 0.0, atol=1e-15)
    np.testing.assert_allclose(tilde.log_q, 0.0, atol=1e-15)
    np.testing.assert_allclose(tilde.log_P, 0.0, atol=1e-15)
    np.testing.assert_allclose(tilde.log_E1, 0.0, atol=1e-15)


def test_relative_abundance_recovers_truth(rng):
    for _ in range(20):
        design = random_design(rng, I=3, J=4, H=2)
        raw = _random_raw(rng, design)
        design = simulation_service.with_known_effort(design, raw)
        tilde = reparam_service.to_tilde(raw, design)

        relative = reparam_service.relative_abundance_matrix(tilde, design, reference_site=1)

        np.testing.assert_allclose(relative, raw.N / raw.N[:, 1:2], rtol=1e-12)
        assert reparam_service.relative_abundance(tilde, design, 2, 3, 1) == pytest.approx(
            raw.N[2, 3] / raw.N[2, 1], rel=1e-12
        )


def test_relative_abundance_of_reference_site_is_one(rng):
    design = random_design(rng, I=2, J=3, H=2)
    tilde = reparam_service.to_tilde(_random_raw(rng, design), design)

    assert reparam_service.relative_abundance(tilde, design, 0, 2, 2) == 1.0


def test_sites_out_of_range(rng):
    design = random_design(rng, I=2, J=3, H=2)
    tilde = reparam_service.to_tilde(_random_raw(rng, design), design)

    with pytest.raises(DimensionError, match="reference site 3 is out of range for 3 sites"):
        reparam_service.relative_abundance_matrix(tilde, design, reference_site=3)
    with pytest.raises(DimensionError, match="site -1"):
        reparam_service.relative_abundance(tilde, design, 0, -1, 0)


def test_fixed_entries_are_exactly_zero(rng):
    design = random_design(rng, I=4, J=2, H=3)

    tilde = reparam_service.to_tilde(_random_raw(rng, design), design)

    assert tilde.anchor == design.anchor_species == 0
    assert tilde.log_P[0] == 0.0
    assert tilde.log_q[0] == 0.0
    assert np.all(tilde.log_S[:, 0] == 0.0)
    with pytest.raises(ValueError, match="log_P of anchor species 0 must be exactly 0"):
        TildeParams(log_N=tilde.log_N, log_P=tilde.log_P + 0.5, log_E1=tilde.log_E1,
                    log_q=tilde.log_q, log_S=tilde.log_S, anchor=0)
    with pytest.raises(ValueError, match="anchor species 7 is out of range"):
        TildeParams(log_N=tilde.log_N, log_P=tilde.log_P, log_E1=tilde.log_E1,
                    log_q=tilde.log_q, log_S=tilde.log_S, anchor=7)


def test_relative_abundance_needs_a_positive_weighted_area():
    design = build_design(
        [[1.0, 0.0], [0.0, 1.0]],
        [[True, True]],
        [(0, 0, [1.0, 0.0], 1.0), (1, 0, [1.0, 0.0], None), (0, 1, [0.0, 1.0], 1.0), (1, 1, [0.0, 1.0], None)],
    )
    tilde = TildeParams.zeros(design).model_copy(update={"log_S": np.array([[0.0, -np.inf]])})

    with pytest.raises(ValueError, match="is zero"):
        reparam_service.relative_abundance(tilde, design, 0, 1, 0)


def test_to_tilde_rejects_zero_abundance(rng):
    design = random_design(rng, I=2, J=2, H=2)
    raw = _random_raw(rng, design)
    raw = raw.model_copy(update={"N": np.where(np.eye(2, dtype=bool), 0.0, raw.N)})

    with pytest.raises(ValueError, match="N and E must be > 0"):
        reparam_service.to_tilde(raw, design)


def test_single_habitat_rank_is_number_of_sites(rng):
    design = random_design(rng, I=2, J=4, H=1)

    report = reparam_service.check_identifiability(design)

    assert report.rank == 4
    assert report.required == 4
    assert report.identifiable


def test_unvisited_habitat_is_deficient():
    cells = []
    for j in range(2):
        cells += [(0, j, [1.0, 0.0], 1.0), (1, j, [0.5, 0.5], None)]
    design = build_design([[2.0, 1.0], [2.0, 1.0]], [[True, True]], cells)

    report = reparam_service.check_identifiability(design)

    assert report.rank == 2
    assert not report.identifiable
    assert report.deficient_columns == ["habitat 1"]


def test_site_confounded_with_habitat():
    cells = [(0, 0, [1.0, 0.0], 1.0), (1, 0, [0.5, 0.5], None),
             (0, 1, [0.0, 1.0], 1.0), (1, 1, [0.5, 0.5], None)]
    design = build_design([[2.0, 1.0], [1.0, 2.0]], [[True, True]], cells)

    report = reparam_service.check_identifiability(design)

    assert report.rank == 2
    assert report.deficient_columns == ["site 1", "habitat 1"]


def test_default_design_rank_matches_exact_elimination(default_simulation):
    _, (design, _, _) = default_simulation

    ident = reparam_service.build_ident_matrix(design)

    assert ident.Y.shape == (300, 31)
    assert ident.rank == 31
    assert ident.rank == _exact_rank(ident.Y)
    assert ident.rank <= min(ident.Y.shape[0], 31)


def test_rank_ignores_row_order_and_duplicates(small_simulation):
    _, (design, _, _) = small_simulation
    rank = reparam_service.build_ident_matrix(design).rank
    next_id = int(design.cell_ids.max()) + 1
    duplicates = [c.model_copy(update={"cell_id": next_id + k}) for k, c in enumerate(design.cells) if c.dataset == 0]
    reordered = SurveyDesign(
        n_species=design.n_species,
        n_sites=design.n_sites,
        n_habitats=design.n_habitats,
        site_habitat_area=design.site_habitat_area,
        monitored=design.monitored,
        cells=list(reversed(design.cells)) + duplicates,
    )

    assert reparam_service.build_ident_matrix(reordered).rank == rank


def test_identifiability_warnings():
    cells = [(0, 0, [0.6, 0.4], 1.0), (1, 0, [1.0, 0.0], None),
             (0, 1, [0.0, 1.0], 1.0), (0, 1, [1.0, 0.0], 1.0), (1, 1, [1.0, 0.0], None)]
    design = build_design([[3.0, 1.0], [2.0, 2.0]], [[True, True]], cells)

    report = reparam_service.check_identifiability(design)

    assert report.identifiable
    assert any("standardized cells cover several habitats" in w for w in report.warnings)
    assert any("habitat 1 has zero visited area in opportunistic cells" in w for w in report.warnings)
