import numpy as np
import pytest

from dualcad.errors import ParameterError
from dualcad.phantom import (
    COMPARTMENT_RHO,
    HEAD_AXES,
    RHO,
    PhantomParams,
    generate_case,
    generate_cohort,
    sample_lesion_population,
)
from dualcad.volume import AffineTransform3D, connected_components, dilate, resample

SMALL = PhantomParams(dims=(64, 64, 16), spacing=(3.0, 3.0, 8.0))


def rho(center):
    return float(np.sqrt(np.sum((np.asarray(center) / np.asarray(HEAD_AXES)) ** 2)))


@pytest.fixture(scope="module")
def default_case():
    return generate_case(5, return_truth=True)


def test_same_seed_bit_identical():
    a, b = generate_case(11, SMALL), generate_case(11, SMALL)
    for tp in ("diagnosis", "prediag"):
        for seq in getattr(a, tp):
            assert getattr(a, tp)[seq].data.tobytes() == getattr(b, tp)[seq].data.tobytes()
    assert a.mask.data.tobytes() == b.mask.data.tobytes()
    assert a.lesions == b.lesions
    assert np.array_equal(a.misalignment.matrix, b.misalignment.matrix)
    c = generate_case(12, SMALL)
    assert c.diagnosis["ceT1w"].data.tobytes() != a.diagnosis["ceT1w"].data.tobytes()


def test_population_deterministic_and_matches_cohort():
    p1 = sample_lesion_population(4, SMALL, 3)
    assert p1 == sample_lesion_population(4, SMALL, 3)
    cohort = generate_cohort(4, SMALL, 3)
    assert [c.lesions for c in cohort] == p1


def test_population_statistics():
    pop = sample_lesion_population(0, PhantomParams(), 400)
    d = np.array([les.diameter for case in pop for les in case])
    assert d.size >= 1000
    q25, med, q75 = np.percentile(d, [25, 50, 75])
    assert abs(med - 4.2) <= 0.3
    assert abs(q25 - 3.0) <= 0.5 and abs(q75 - 7.1) <= 0.5
    assert np.median([len(case) for case in pop]) == 3
    assert min(len(case) for case in pop) >= 1


def test_no_extracerebral_fraction():
    pop = sample_lesion_population(1, PhantomParams(extracerebral_fraction=0.0), 100)
    assert {les.compartment for case in pop for les in case} == {"parenchymal"}


def test_compartment_placement():
    pop = sample_lesion_population(2, PhantomParams(extracerebral_fraction=1.0), 100)
    lesions = [les for case in pop for les in case]
    assert "parenchymal" not in {les.compartment for les in lesions}
    for les in lesions:
        assert rho(les.center) >= RHO["brain"] - 1e-9
        assert rho(les.center) == pytest.approx(COMPARTMENT_RHO[les.compartment])
    inside = sample_lesion_population(3, PhantomParams(extracerebral_fraction=0.0), 50)
    assert all(rho(les.center) < RHO["brain"] for case in inside for les in case)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"max_diameter": 80.0},
        {"max_translation_mm": 12.0},
        {"max_rotation_deg": 15.0},
        {"count_lambda": -1.0},
        {"diameter_q25": 5.0},
        {"enhancement_contrast": 0.9},
    ],
)
def test_invalid_params(kwargs):
    with pytest.raises(ParameterError):
        PhantomParams(**kwargs)


def test_population_needs_cases():
    with pytest.raises(ParameterError):
        sample_lesion_population(0, SMALL, 0)


def test_zero_lesions_differs_by_noise_only():
    params = PhantomParams(count_min=0, count_lambda=0.0)
    case = generate_case(3, params)
    assert case.mask.data.sum() == 0 and case.lesions == []
    pre = resample(case.prediag["ceT1w"], case.grid, case.misalignment, interp="cubic-bspline")
    diff = case.diagnosis["ceT1w"].data.astype(np.float64) - pre.data
    assert diff.std() < 3 * params.noise_sd


def test_component_count_equals_lesions():
    for seed in range(4):
        case = generate_case(seed)
        assert connected_components(case.mask.data, 26)[1] == len(case.lesions)


def test_enhancement_over_background(default_case):
    case, truth = default_case
    params = PhantomParams()
    ce = case.diagnosis["ceT1w"].data
    background = ce[(truth.brain_mask == 1) & (case.mask.data == 0)].mean()
    labels, k = connected_components(case.mask.data)
    assert k == len(case.lesions) > 0
    for i in range(1, k + 1):
        assert ce[labels == i].mean() >= params.enhancement_contrast * background


def test_lesions_new_at_diagnosis(default_case):
    case, truth = default_case
    noise = PhantomParams().noise_sd
    pre = resample(case.prediag["ceT1w"], case.grid, case.misalignment, interp="cubic-bspline").data
    labels, k = connected_components(case.mask.data)
    for i in range(1, k + 1):
        m = labels == i
        assert abs(pre[m].mean() - truth.clean_ce[m].mean()) < 2 * noise


def test_vessels_persist(default_case):
    case, truth = default_case
    grid = case.grid
    pre_idx = np.argwhere(truth.vessel_masks["prediag"] == 1)
    assert len(pre_idx) > 0
    world = pre_idx @ (grid.voxel_to_world[:3, :3]).T + grid.voxel_to_world[:3, 3]
    anat = case.misalignment.inverse().apply(world)
    w2v = grid.world_to_voxel
    idx = np.round(anat @ w2v[:3, :3].T + w2v[:3, 3]).astype(int)
    ok = np.all((idx >= 0) & (idx < np.array(grid.dims)), axis=1)
    near = dilate(truth.vessel_masks["diagnosis"], 1.75)  # covers the 26-neighbourhood
    assert near[tuple(idx[ok].T)].all()


def test_artifacts_independent_per_timepoint(default_case):
    _, truth = default_case
    a, b = truth.artifacts["diagnosis"], truth.artifacts["prediag"]
    if a and b:
        assert not np.allclose(a[0][0], b[0][0])


def test_misalignment_within_ranges():
    params = PhantomParams()
    for seed in range(10):
        case = generate_case(seed, SMALL)
        lin = case.misalignment.linear
        sv = np.linalg.svd(lin, compute_uv=False)
        assert np.all(np.abs(sv - 1) <= params.max_scale + 1e-9)
        u, _, vt = np.linalg.svd(lin)
        rot = u @ vt
        angle = np.degrees(np.arccos(np.clip((np.trace(rot) - 1) / 2, -1, 1)))
        assert angle <= np.sqrt(3) * params.max_rotation_deg
        shift = case.misalignment.apply(case.grid.center) - case.grid.center
        assert np.all(np.abs(shift) <= params.max_translation_mm + 1e-9)


def test_explicit_misalignment():
    t = AffineTransform3D.from_rotation((0, 0, 3), (1, 2, 0), center=SMALL.grid().center)
    case = generate_case(0, SMALL, misalignment=t)
    assert np.allclose(case.misalignment.matrix, t.matrix)


def test_cohort_patient_grouping():
    cohort = generate_cohort(0, SMALL, 5, cases_per_patient=2)
    assert [c.patient_id for c in cohort] == ["pat0000", "pat0000", "pat0001", "pat0001", "pat0002"]
    assert len({c.case_id for c in cohort}) == 5
