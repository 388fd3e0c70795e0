"""Affine registration maximising Mattes mutual information.

The metric uses a joint histogram with a box window on the fixed axis and a
cubic B-spline Parzen window on the moving axis, which makes it smooth in
the transform parameters and gives a closed-form gradient. Optimisation is
regular-step gradient ascent over a Gaussian pyramid.

Parameters are twelve numbers about the fixed-image centre ``c``::

    T(x) = c + (I + A / R) (x - c) + t

with ``A`` the 3x3 linear perturbation scaled by the fixed-image radius
``R`` (mm) and ``t`` the translation in mm. One unit in any parameter then
moves the image corners by roughly one millimetre.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import InputError, InsufficientOverlapError, ParameterError, RegistrationError
from .volume import AffineTransform3D, Grid, Volume, resample

N_PARAMS = 12


@dataclass
class RegistrationOptions:
    histogram_bins: int = 32
    sample_fraction: float = 1.0
    pyramid_levels: int = 3
    initial_step: float = 1.0
    relaxation_factor: float = 0.5
    min_step: float = 1e-4
    max_iterations: int = 200  # per pyramid level
    # multiplies the radius-based scaling of the linear entries; translations stay in mm
    linear_scale: float = 1.0
    # per-parameter scales (12 values); None estimates them from the fixed image per level
    parameter_scales: tuple | None = None
    parzen: str = "bspline"  # moving-axis window: "bspline" or "box"
    seed: int = 0  # only used when sample_fraction < 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.histogram_bins < 8:
            raise ParameterError("histogram_bins must be at least 8")
        if not 0 < self.sample_fraction <= 1:
            raise ParameterError("sample_fraction must lie in (0, 1]")
        if self.pyramid_levels < 1:
            raise ParameterError("pyramid_levels must be at least 1")
        if not 0 < self.relaxation_factor < 1:
            raise ParameterError("relaxation_factor must lie in (0, 1)")
        if not 0 < self.min_step < self.initial_step:
            raise ParameterError("need 0 < min_step < initial_step")
        if self.max_iterations < 1:
            raise ParameterError("max_iterations must be at least 1")
        if self.linear_scale <= 0:
            raise ParameterError("linear_scale must be positive")
        if self.parameter_scales is not None and (
            len(self.parameter_scales) != N_PARAMS or min(self.parameter_scales) <= 0
        ):
            raise ParameterError(f"parameter_scales needs {N_PARAMS} positive values")
        if self.parzen not in ("bspline", "box"):
            raise ParameterError("parzen must be 'bspline' or 'box'")

    def to_dict(self):
        return asdict(self)


@dataclass
class RegistrationTrace:
    """Per-iteration record of every pyramid level (coarse to fine)."""

    rows: list = field(default_factory=list)  # dicts: level, iteration, step, metric, params
    reasons: list = field(default_factory=list)  # convergence reason per level

    @property
    def convergence_reason(self):
        return self.reasons[-1] if self.reasons else None

    def level(self, lvl):
        return [r for r in self.rows if r["level"] == lvl]

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "iteration", "step", "metric"] + [f"p{i}" for i in range(N_PARAMS)])
            for r in self.rows:
                w.writerow([r["level"], r["iteration"], repr(r["step"]), repr(r["metric"])] + [repr(float(p)) for p in r["params"]])


# -- Parzen windows -------------------------------------------------------

def bspline3(u):
    u = np.abs(u)
    out = np.where(u < 1, 2.0 / 3.0 - u**2 + 0.5 * u**3, 0.0)
    return np.where((u >= 1) & (u < 2), (2.0 - u) ** 3 / 6.0, out)


def bspline3_deriv(u):
    a = np.abs(u)
    s = np.sign(u)
    out = np.where(a < 1, -2.0 * a + 1.5 * a**2, 0.0)
    out = np.where((a >= 1) & (a < 2), -0.5 * (2.0 - a) ** 2, out)
    return s * out


def _box_bins(values, lo, hi, bins):
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.intp)
    return np.clip(idx, 0, bins - 1)


def _parzen_coord(values, lo, hi, bins):
    """Continuous bin coordinate keeping the cubic support inside [0, bins)."""
    return 2.0 + (values - lo) / (hi - lo) * (bins - 5)


# -- interpolation ---------------------------------------------------------

def _trilinear(data, idx):
    """Values and index-space gradients at fractional indices ``idx`` (N, 3).

    Indices are clamped to the volume, so the image is extended by its edge
    values and the metric stays continuous when samples leave the field of
    view. ``inside`` flags the samples that did not need clamping.
    """
    dims = np.array(data.shape)
    inside = np.all((idx >= 0) & (idx <= dims - 1), axis=1)
    p = np.clip(idx, 0, dims - 1)
    clamped = p != idx
    base = np.minimum(np.floor(p).astype(np.intp), np.maximum(dims - 2, 0))
    fr = p - base
    flat = data.ravel()
    sy, sz = dims[1] * dims[2], dims[2]
    off = base[:, 0] * sy + base[:, 1] * sz + base[:, 2]
    if dims[2] > 1:
        dz = 1
    else:
        dz, fr[:, 2] = 0, 0.0
    fx, fy, fz = fr[:, 0], fr[:, 1], fr[:, 2]
    c = [np.take(flat, off + d) for d in (0, dz, sz, sz + dz, sy, sy + dz, sy + sz, sy + sz + dz)]
    # lerp along z, then y, then x; derivatives come from the same intermediates
    z00 = c[0] + fz * (c[1] - c[0])
    z01 = c[2] + fz * (c[3] - c[2])
    z10 = c[4] + fz * (c[5] - c[4])
    z11 = c[6] + fz * (c[7] - c[6])
    y0 = z00 + fy * (z01 - z00)
    y1 = z10 + fy * (z11 - z10)
    val = y0 + fx * (y1 - y0)
    gx = y1 - y0
    gy = (z01 - z00) + fx * ((z11 - z10) - (z01 - z00))
    d00, d01, d10, d11 = c[1] - c[0], c[3] - c[2], c[5] - c[4], c[7] - c[6]
    e0 = d00 + fy * (d01 - d00)
    gz = e0 + fx * (d10 + fy * (d11 - d10) - e0)
    grad = np.stack([gx, gy, gz], axis=1)
    grad[clamped] = 0.0
    return val, grad, inside


# -- parametrisation -------------------------------------------------------

@dataclass(frozen=True)
class _Frame:
    center: np.ndarray
    radius: float

    def transform(self, mu):
        lin = np.eye(3) + mu[:9].reshape(3, 3) / self.radius
        return AffineTransform3D(lin, self.center + mu[9:] - lin @ self.center)

    def params(self, xform):
        a = (xform.linear - np.eye(3)) * self.radius
        t = xform.apply(self.center) - self.center
        return np.concatenate([a.ravel(), t])


def _frame(grid, opts):
    radius = float(np.linalg.norm(grid.extent_mm) / 2) * opts.linear_scale
    return _Frame(np.asarray(grid.center, float), radius)


# -- metric ------------------------------------------------------------------

class _MetricContext:
    """Fixed samples plus moving data at one pyramid level."""

    def __init__(self, fixed, moving, opts, rng=None):
        self.opts = opts
        self.bins = opts.histogram_bins
        pts = fixed.grid.world_points().reshape(-1, 3)
        fvals = fixed.data.astype(np.float64).ravel()
        if opts.sample_fraction < 1:
            rng = rng if rng is not None else np.random.default_rng(opts.seed)
            n = max(2, int(round(opts.sample_fraction * fvals.size)))
            keep = np.sort(rng.choice(fvals.size, n, replace=False))
            pts, fvals = pts[keep], fvals[keep]
        self.points = pts
        self.fvals = fvals
        self.flo, self.fhi = float(fvals.min()), float(fvals.max())
        self.mdata = moving.data.astype(np.float64)
        self.mlo, self.mhi = float(self.mdata.min()), float(self.mdata.max())
        self.w2v = moving.grid.world_to_voxel
        if self.fhi > self.flo:
            self.fbin = _box_bins(fvals, self.flo, self.fhi, self.bins)

    def degenerate(self):
        return not (self.fhi > self.flo and self.mhi > self.mlo)

    def evaluate(self, xform, frame=None, gradient=False):
        """MI in nats; with ``gradient`` also dMI/dmu for ``frame`` parameters."""
        m = self.w2v @ xform.matrix
        idx = self.points @ m[:3, :3].T + m[:3, 3]
        mval, mgrad, inside = _trilinear(self.mdata, idx)
        n_inside = int(inside.sum())
        if n_inside < 2:
            raise InsufficientOverlapError(f"only {n_inside} fixed samples map inside the moving image")
        n = mval.size
        if self.degenerate():
            return (0.0, np.zeros(N_PARAMS)) if gradient else 0.0
        b = self.bins
        fb = self.fbin
        if self.opts.parzen == "box":
            mb = _box_bins(mval, self.mlo, self.mhi, b)
            joint = np.bincount(fb * b + mb, minlength=b * b).reshape(b, b) / n
            mi = _mi(joint)
            return (mi, np.zeros(N_PARAMS)) if gradient else mi
        cm = _parzen_coord(mval, self.mlo, self.mhi, b)
        fl = np.floor(cm)
        t = cm - fl
        cell = fb * b + fl.astype(np.intp) - 1  # flat index of the first of four bins
        t2, t3 = t * t, t * t * t
        # cubic B-spline weights of the four bins touched by each sample
        w = ((1 - t) ** 3 / 6, (3 * t3 - 6 * t2 + 4) / 6, (-3 * t3 + 3 * t2 + 3 * t + 1) / 6, t3 / 6)
        joint = np.zeros(b * b)
        for k in range(4):
            joint += np.bincount(cell + k, weights=w[k], minlength=b * b)
        joint = joint.reshape(b, b) / n
        mi = _mi(joint)
        if not gradient:
            return mi
        pm = joint.sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            log_ratio = np.where(joint > 0, np.log(joint / pm[None, :]), 0.0).ravel()
        dw = (-0.5 * (1 - t) ** 2, 1.5 * t2 - 2 * t, -1.5 * t2 + t + 0.5, 0.5 * t2)
        a = dw[0] * log_ratio[cell]
        for k in range(1, 4):
            a += dw[k] * log_ratio[cell + k]
        # dc/dy: bin scale times world-space gradient of the moving image
        g = (mgrad @ self.w2v[:3, :3]) * ((b - 5) / (self.mhi - self.mlo))
        ag = g * a[:, None]
        rel = (self.points - frame.center) / frame.radius
        dlin = ag.T @ rel  # (3, 3): d/dA[i, k]
        grad = np.concatenate([dlin.ravel(), ag.sum(axis=0)]) / n
        return mi, grad


def _mi(joint):
    pf = joint.sum(axis=1)
    pm = joint.sum(axis=0)
    nz = joint > 0
    outer = np.outer(pf, pm)
    return float(max(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])), 0.0))


def _check_volume(vol, name):
    if not isinstance(vol, Volume):
        raise InputError(f"{name} must be a Volume")


def mattes_mi(fixed, moving, xform=None, opts=None):
    """Mattes mutual information (nats) of ``fixed`` against ``moving`` sampled at ``xform(x)``."""
    _check_volume(fixed, "fixed")
    _check_volume(moving, "moving")
    opts = opts or RegistrationOptions()
    xform = xform or AffineTransform3D.identity()
    return _MetricContext(fixed, moving, opts).evaluate(xform)


def mattes_mi_gradient(fixed, moving, xform=None, opts=None):
    """``(mi, dmi/dmu)`` for the centred, radius-scaled parameters of ``xform``."""
    opts = opts or RegistrationOptions()
    xform = xform or AffineTransform3D.identity()
    frame = _frame(fixed.grid, opts)
    return _MetricContext(fixed, moving, opts).evaluate(xform, frame, gradient=True)


def transform_from_params(fixed_grid, mu, opts=None):
    return _frame(fixed_grid, opts or RegistrationOptions()).transform(np.asarray(mu, float))


def params_from_transform(fixed_grid, xform, opts=None):
    return _frame(fixed_grid, opts or RegistrationOptions()).params(xform)


# -- pyramid -------------------------------------------------------------------

def _shrink_factors(grid, level_factor):
    """Per-axis integer shrink keeping coarse voxels roughly isotropic."""
    sp = np.array(grid.spacing)
    f = np.maximum(1, np.round(level_factor * sp.min() / sp)).astype(int)
    return np.minimum(f, np.maximum(1, np.array(grid.dims) // 4))


def pyramid_level(vol, factors):
    factors = np.asarray(factors, int)
    if np.all(factors == 1):
        return vol
    sigma = 0.5 * factors * (factors > 1)
    smooth = ndimage.gaussian_filter(vol.data.astype(np.float64), sigma, mode="nearest")
    dims = np.maximum(np.array(vol.dims) // factors, 1)
    sp = np.array(vol.spacing) * factors
    origin = np.asarray(vol.origin) + vol.direction @ ((factors - 1) / 2.0 * np.array(vol.spacing))
    grid = Grid(tuple(dims), tuple(sp), origin, vol.direction)
    return resample(Volume(smooth, vol.grid), grid, interp="trilinear", mode="nearest")


# -- optimiser ---------------------------------------------------------------

def estimate_scales(fixed, frame):
    """Scales equalising the curvature of every parameter.

    Each parameter is weighted by the squared physical shift it causes,
    averaged with the squared fixed-image gradient, so parameters that move
    edges as much as a 1 mm translation get scale 1.
    """
    g = np.stack(np.gradient(fixed.data.astype(np.float64)), axis=-1).reshape(-1, 3)
    g = g @ fixed.grid.world_to_voxel[:3, :3]
    g2 = g**2  # (N, 3): squared world gradient per component
    rel2 = ((fixed.grid.world_points().reshape(-1, 3) - frame.center) / frame.radius) ** 2
    h_lin = g2.T @ rel2  # [i, k]: sum of (d_i f)^2 (x_k - c_k)^2 / R^2
    h_t = g2.sum(axis=0)
    ref = h_t.mean()
    if not ref > 0:
        return np.ones(N_PARAMS)
    h = np.concatenate([h_lin.ravel(), h_t])
    return np.sqrt(np.maximum(h / ref, 1e-6))


def _ascend(ctx, frame, mu, opts, step, level, trace, scales):
    """Regular-step ascent in scaled coordinates ``nu = mu * scales``."""
    best_mu, best_mi = mu.copy(), -np.inf
    prev_grad = None
    reason = "max_iter"
    for it in range(opts.max_iterations):
        mi, grad_mu = ctx.evaluate(frame.transform(mu), frame, gradient=True)
        if not np.isfinite(mi) or not np.all(np.isfinite(grad_mu)):
            raise RegistrationError(f"non-finite metric at level {level}, iteration {it}")
        grad = grad_mu / scales
        if mi > best_mi:
            best_mi, best_mu = mi, mu.copy()
        if prev_grad is not None and float(grad @ prev_grad) < 0:
            step *= opts.relaxation_factor
        trace.rows.append({"level": level, "iteration": it, "step": step, "metric": mi, "params": mu.copy()})
        norm = float(np.linalg.norm(grad))
        if step < opts.min_step or norm == 0.0:
            reason = "min_step"
            break
        mu = mu + step * grad / norm / scales
        prev_grad = grad
    trace.reasons.append(reason)
    return best_mu, best_mi


def register_affine(fixed, moving, opts=None, initial=None):
    """Affine ``T`` mapping fixed world points onto moving world points.

    Returns ``(transform, trace)``; the transform is the best-MI point seen at
    the finest level.
    """
    _check_volume(fixed, "fixed")
    _check_volume(moving, "moving")
    opts = opts or RegistrationOptions()
    frame = _frame(fixed.grid, opts)
    mu = frame.params(initial) if initial is not None else np.zeros(N_PARAMS)
    trace = RegistrationTrace()
    rng = np.random.default_rng(opts.seed)
    candidates = [mu]
    for level in range(opts.pyramid_levels):
        shrink = 2 ** (opts.pyramid_levels - 1 - level)
        f_lvl = pyramid_level(fixed, _shrink_factors(fixed.grid, shrink))
        m_lvl = pyramid_level(moving, _shrink_factors(moving.grid, shrink))
        ctx = _MetricContext(f_lvl, m_lvl, opts, rng)
        try:
            ctx.evaluate(frame.transform(mu))
        except InsufficientOverlapError as exc:
            raise RegistrationError(f"insufficient overlap at pyramid level {level}: {exc}") from exc
        if opts.parameter_scales is not None:
            scales = np.asarray(opts.parameter_scales, float)
        else:
            scales = estimate_scales(f_lvl, frame)
        mu, best = _ascend(ctx, frame, mu, opts, opts.initial_step * shrink, level, trace, scales)
        candidates.append(mu)
    # the start and every level's result compete at full resolution
    for cand in candidates[:-1]:
        if ctx.evaluate(frame.transform(cand)) > best:
            mu, best = cand, ctx.evaluate(frame.transform(cand))
    return frame.transform(mu), trace


def displacement_error(estimate, truth, grid, units="voxel"):
    """Mean distance between two transforms over the voxel centres of ``grid``.

    ``units="voxel"`` measures in the index space of ``grid``; ``"mm"`` in world units.
    """
    pts = grid.world_points().reshape(-1, 3)
    d = estimate.apply(pts) - truth.apply(pts)
    if units == "voxel":
        d = d @ np.linalg.inv(grid.direction @ np.diag(grid.spacing)).T
    return float(np.mean(np.linalg.norm(d, axis=1)))


def align_case(case, opts=None, transform=None):
    """Register prediag ceT1w onto diagnosis ceT1w and carry every prediag sequence over.

    All prediag volumes are resampled onto the diagnosis ceT1w grid with cubic
    B-spline interpolation using the single transform found for ceT1w. Pass
    ``transform`` to skip the optimisation.
    """
    pre_ce = case.prediag.get("ceT1w")
    if pre_ce is None:
        raise InputError(f"case {case.case_id}: prediag ceT1w is required for alignment")
    fixed = case.diagnosis["ceT1w"]
    trace = None
    if transform is None:
        transform, trace = register_affine(fixed, pre_ce, opts)
    aligned = {seq: resample(vol, fixed.grid, transform, interp="cubic-bspline") for seq, vol in case.prediag.items()}
    out = case.replace(prediag=aligned, aligned=True, registration=transform)
    out.registration_trace = trace
    return out


class AffineRegistration(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``fit(fixed, moving)`` then ``transform(moving)`` onto the fixed grid."""

    def __init__(self, histogram_bins=32, sample_fraction=1.0, pyramid_levels=3, initial_step=1.0,
                 relaxation_factor=0.5, min_step=1e-4, max_iterations=200, interp="cubic-bspline", seed=0):
        self.histogram_bins = histogram_bins
        self.sample_fraction = sample_fraction
        self.pyramid_levels = pyramid_levels
        self.initial_step = initial_step
        self.relaxation_factor = relaxation_factor
        self.min_step = min_step
        self.max_iterations = max_iterations
        self.interp = interp
        self.seed = seed

    def _options(self):
        return RegistrationOptions(
            histogram_bins=self.histogram_bins, sample_fraction=self.sample_fraction,
            pyramid_levels=self.pyramid_levels, initial_step=self.initial_step,
            relaxation_factor=self.relaxation_factor, min_step=self.min_step,
            max_iterations=self.max_iterations, seed=self.seed,
        )

    def fit(self, fixed, moving):
        self.transform_, self.trace_ = register_affine(fixed, moving, self._options())
        self.fixed_grid_ = fixed.grid
        return self

    def transform(self, moving):
        if not hasattr(self, "transform_"):
            raise RegistrationError("AffineRegistration is not fitted yet")
        return resample(moving, self.fixed_grid_, self.transform_, interp=self.interp)

    def score(self, fixed, moving):
        return mattes_mi(fixed, moving, getattr(self, "transform_", None), self._options())
