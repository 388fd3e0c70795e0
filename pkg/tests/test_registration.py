import csv

import numpy as np
import pytest

from dualcad.case import Case
from dualcad.errors import InputError, InsufficientOverlapError, ParameterError
from dualcad.phantom import PhantomParams, generate_case
from dualcad.registration import (
    AffineRegistration,
    RegistrationOptions,
    align_case,
    bspline3,
    bspline3_deriv,
    displacement_error,
    mattes_mi,
    mattes_mi_gradient,
    params_from_transform,
    register_affine,
    transform_from_params,
)
from dualcad.volume import AffineTransform3D, Grid, Volume, zscore_normalize

BOX = RegistrationOptions(parzen="box")
P64 = PhantomParams(dims=(64, 64, 64), spacing=(3.0, 3.0, 3.0))
P48 = PhantomParams(dims=(48, 48, 48), spacing=(4.0, 4.0, 4.0))


def vol(data, spacing=(1.0, 1.0, 1.0)):
    return Volume.from_array(np.asarray(data, dtype=np.float64), spacing)


def polar_rotation(m):
    u, _, vt = np.linalg.svd(m)
    return u @ vt


def rotation_angle_deg(a, b):
    r = polar_rotation(a) @ polar_rotation(b).T
    return np.degrees(np.arccos(np.clip((np.trace(r) - 1) / 2, -1, 1)))


class TestWindows:
    def test_partition_of_unity(self):
        c = np.random.default_rng(0).uniform(2, 20, 100)
        total = sum(bspline3(c - j) for j in range(0, 24))
        assert np.allclose(total, 1.0)

    def test_derivative(self):
        u = np.linspace(-2.5, 2.5, 101)
        h = 1e-6
        assert np.allclose(bspline3_deriv(u), (bspline3(u + h) - bspline3(u - h)) / (2 * h), atol=1e-6)


class TestMetric:
    def test_constant_moving_is_zero(self):
        rng = np.random.default_rng(0)
        f = vol(rng.random((8, 8, 8)))
        assert mattes_mi(f, vol(np.full((8, 8, 8), 3.0))) == 0.0
        assert mattes_mi(vol(np.full((8, 8, 8), 3.0)), f) == 0.0

    def test_binary_half_half_is_ln2(self):
        a = np.zeros((8, 8, 8))
        a[:4] = 1
        assert mattes_mi(vol(a), vol(a), opts=BOX) == pytest.approx(np.log(2), abs=1e-12)

    def test_relabeling_preserving_bins(self):
        rng = np.random.default_rng(1)
        fixed = vol(rng.random((10, 10, 10)))
        levels = rng.integers(0, 4, (10, 10, 10)).astype(float)
        # 0..3 sit in bins 0, 10, 21, 31; nudges below keep every value in its bin
        relabeled = np.choose(levels.astype(int), [0.0, 1.02, 2.03, 3.0])
        assert mattes_mi(fixed, vol(levels), opts=BOX) == pytest.approx(mattes_mi(fixed, vol(relabeled), opts=BOX), abs=1e-12)
        # swapping two interior levels permutes histogram columns
        swapped = np.choose(levels.astype(int), [0.0, 2.0, 1.0, 3.0])
        assert mattes_mi(fixed, vol(levels), opts=BOX) == pytest.approx(mattes_mi(fixed, vol(swapped), opts=BOX), abs=1e-12)

    def test_symmetry_with_box_windows(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            a = vol(rng.normal(size=(9, 9, 9)))
            b = vol(a.data + rng.normal(scale=0.5, size=(9, 9, 9)))
            assert abs(mattes_mi(a, b, opts=BOX) - mattes_mi(b, a, opts=BOX)) < 1e-6

    def test_self_beats_shuffled(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            data = rng.gamma(2.0, size=(10, 10, 10))
            shuffled = rng.permutation(data.ravel()).reshape(data.shape)
            assert mattes_mi(vol(data), vol(data)) >= mattes_mi(vol(data), vol(shuffled))

    def test_non_negative(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            assert mattes_mi(vol(rng.random((8, 8, 8))), vol(rng.random((8, 8, 8)))) >= 0

    def test_insufficient_overlap(self):
        a = vol(np.random.default_rng(5).random((8, 8, 8)))
        far = AffineTransform3D(np.eye(3), (100.0, 0, 0))
        with pytest.raises(InsufficientOverlapError):
            mattes_mi(a, a, far)

    def test_analytic_gradient_matches_finite_differences(self):
        case = generate_case(0, P48)
        f, m = case.diagnosis["ceT1w"], case.prediag["ceT1w"]
        mu = params_from_transform(f.grid, case.misalignment) + 0.7
        mi, grad = mattes_mi_gradient(f, m, transform_from_params(f.grid, mu))
        num = np.zeros(12)
        for i in range(12):
            e = np.zeros(12)
            e[i] = 1e-3
            num[i] = (mattes_mi(f, m, transform_from_params(f.grid, mu + e)) - mattes_mi(f, m, transform_from_params(f.grid, mu - e))) / 2e-3
        assert np.linalg.norm(grad - num) / np.linalg.norm(num) < 1e-3


class TestOptions:
    @pytest.mark.parametrize(
        "kwargs",
        [{"histogram_bins": 4}, {"sample_fraction": 0.0}, {"relaxation_factor": 1.0}, {"min_step": 2.0}, {"parameter_scales": (1.0,) * 3}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ParameterError):
            RegistrationOptions(**kwargs)


class TestRegister:
    def test_identity(self):
        case = generate_case(1, P48)
        f = case.diagnosis["ceT1w"]
        t, trace = register_affine(f, f)
        assert displacement_error(t, AffineTransform3D.identity(), f.grid) < 0.1

    def test_translation(self):
        center = P64.grid().center
        truth = AffineTransform3D.from_rotation((0, 0, 0), (3.2, -1.7, 0.9), center=center)
        case = generate_case(2, P64, misalignment=truth)
        t, trace = register_affine(case.diagnosis["ceT1w"], case.prediag["ceT1w"])
        assert displacement_error(t, truth, case.grid) < 0.5

    def test_rotation(self):
        center = P64.grid().center
        truth = AffineTransform3D.from_rotation((0, 0, 5), center=center)
        case = generate_case(3, P64, misalignment=truth)
        t, trace = register_affine(case.diagnosis["ceT1w"], case.prediag["ceT1w"])
        assert rotation_angle_deg(t.linear, truth.linear) < 1.0
        assert displacement_error(t, truth, case.grid) < 0.5

    def test_trace_and_determinism(self, tmp_path):
        case = generate_case(4, P48)
        f, m = case.diagnosis["ceT1w"], case.prediag["ceT1w"]
        opts = RegistrationOptions(max_iterations=40)
        t1, trace = register_affine(f, m, opts)
        t2, _ = register_affine(f, m, opts)
        assert np.array_equal(t1.matrix, t2.matrix)
        for lvl in range(opts.pyramid_levels):
            rows = trace.level(lvl)
            assert 1 <= len(rows) <= opts.max_iterations
            best = np.maximum.accumulate([r["metric"] for r in rows])
            assert np.all(np.diff(best) >= 0) and np.all(np.isfinite(best))
        assert set(trace.reasons) <= {"min_step", "max_iter"}
        trace.to_csv(tmp_path / "trace.csv")
        with open(tmp_path / "trace.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(trace) and {"iteration", "step", "metric"} <= set(rows[0])

    def test_subsampling_is_seeded(self):
        case = generate_case(4, P48)
        f, m = case.diagnosis["ceT1w"], case.prediag["ceT1w"]
        opts = RegistrationOptions(sample_fraction=0.3, max_iterations=20, seed=7)
        assert np.array_equal(register_affine(f, m, opts)[0].matrix, register_affine(f, m, opts)[0].matrix)

    def test_estimator(self):
        case = generate_case(6, P48)
        f, m = case.diagnosis["ceT1w"], case.prediag["ceT1w"]
        est = AffineRegistration(max_iterations=60)
        assert est.get_params()["histogram_bins"] == 32
        out = est.fit(f, m).transform(m)
        assert out.grid.same_as(f.grid)
        assert est.score(f, m) > mattes_mi(f, m)


class TestAlignCase:
    def test_single_transform_for_all_sequences(self):
        case = generate_case(7, P64)
        aligned = align_case(case)
        assert aligned.aligned
        assert displacement_error(aligned.registration, case.misalignment, case.grid) < 0.5
        for seq, v in aligned.prediag.items():
            assert v.grid.same_as(case.grid), seq

    def test_already_aligned_passes_through(self):
        case = generate_case(8, P48, misalignment=AffineTransform3D.identity())
        case = case.replace(prediag={k: v for k, v in case.diagnosis.items()})
        aligned = align_case(case)
        for seq in case.prediag:
            a = zscore_normalize(aligned.prediag[seq]).data
            b = zscore_normalize(case.prediag[seq]).data
            assert np.max(np.abs(a - b)) < 1e-3

    def test_missing_sequence_carried_as_missing(self):
        case = generate_case(9, P48)
        case = case.replace(prediag={k: v for k, v in case.prediag.items() if k != "T2w"})
        aligned = align_case(case, transform=case.misalignment)
        assert set(aligned.prediag) == {"ceT1w", "T1w", "FLAIR"}

    def test_missing_ceT1w(self):
        case = generate_case(9, P48)
        case = case.replace(prediag={k: v for k, v in case.prediag.items() if k != "ceT1w"})
        with pytest.raises(InputError):
            align_case(case)

    def test_known_transform_skips_optimisation(self):
        case = generate_case(10, P48)
        aligned = align_case(case, transform=case.misalignment)
        assert aligned.registration is case.misalignment
        assert aligned.registration_trace is None
