"""Seeded synthetic head phantoms with paired time points.

The anatomy is a set of nested soft-edged ellipsoids (scalp, skull, CSF,
brain with grey/white matter and two ventricles). Each case gets new
enhancing lesions at diagnosis only, curved enhancing vessels present at
both time points and bright artifact blobs drawn independently per time
point. The pre-diagnosis scan samples the same anatomy through a random
affine, so it has to be registered before use.

Coordinates: the anatomical frame equals the diagnosis world frame. The
stored ``misalignment`` maps diagnosis world points to prediag world
points, which is exactly the transform registration should recover.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import norm

from .case import COMPARTMENTS, SEQUENCES, Case, LesionSpec
from .errors import ParameterError
from .volume import AffineTransform3D, Grid, Volume

# (ceT1w, T1w, T2w, FLAIR) base intensity per tissue
TISSUE = {
    "air": (0.0, 0.0, 0.0, 0.0),
    "scalp": (800.0, 780.0, 500.0, 520.0),
    "skull": (120.0, 110.0, 80.0, 60.0),
    "csf": (150.0, 140.0, 1000.0, 120.0),
    "gm": (470.0, 450.0, 600.0, 520.0),
    "wm": (560.0, 540.0, 450.0, 430.0),
}
BRAIN_REF = tuple((g + w) / 2 for g, w in zip(TISSUE["gm"], TISSUE["wm"]))
VESSEL_NATIVE = {"T2w": 150.0, "FLAIR": 150.0}  # flow voids; T1w keeps the tissue value

HEAD_AXES = (70.0, 85.0, 52.0)  # mm, outer scalp surface
# normalised radii of the outer surface of each layer
RHO = {"scalp": 1.0, "skull": 0.95, "csf": 0.88, "brain": 0.85}
COMPARTMENT_RHO = {"dural": 0.875, "leptomeningeal": 0.855, "osseous": 0.915, "subcutaneous": 0.975}
WM_AXES = (36.0, 46.0, 27.0)
SULCUS_RHO = 0.68  # inner edge of the cortical band
VENTRICLES = (((-9.0, 6.0, 4.0), (5.0, 16.0, 8.0)), ((9.0, 6.0, 4.0), (5.0, 16.0, 8.0)))

_Z75 = norm.ppf(0.75)
_STREAMS = {"lesions": 0, "vessels": 1, "artifacts": 2, "misalignment": 3, "noise": 4, "texture": 5}


@dataclass
class PhantomParams:
    dims: tuple = (128, 128, 32)
    spacing: tuple = (1.5, 1.5, 4.0)
    # lesions per case = count_min + Poisson(count_lambda)
    count_min: int = 1
    count_lambda: float = 2.0
    diameter_median: float = 4.2
    diameter_q25: float = 3.0
    diameter_q75: float = 7.1
    max_diameter: float = 30.0
    extracerebral_fraction: float = 26 / 494
    # relative frequency of dural, leptomeningeal, osseous, subcutaneous
    extracerebral_weights: tuple = (16.0, 8.0, 1.0, 1.0)
    vessel_count: int = 6
    vessel_radius_mm: tuple = (0.8, 1.5)
    vessel_length_mm: tuple = (4.0, 16.0)
    artifact_rate: float = 1.5
    artifact_sigma_mm: tuple = (1.0, 2.0)
    enhancement_contrast: float = 2.0
    enhancement_jitter: tuple = (1.1, 1.5)
    max_translation_mm: float = 5.0
    max_rotation_deg: float = 5.0
    max_scale: float = 0.02
    noise_sd: float = 15.0
    edge_mm: float = 1.5
    lesion_edge_mm: float = 0.5
    # smooth multiplicative tissue texture shared by both time points
    texture_amplitude: float = 0.08
    texture_waves: int = 24
    texture_wavelength_mm: tuple = (12.0, 40.0)
    sulcus_threshold: float = 0.8  # higher leaves fewer sulci

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.validate()

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ParameterError(f"phantom dims must be three counts >= 2, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ParameterError(f"phantom spacing must be positive, got {self.spacing}")
        if self.count_min < 0 or self.count_lambda < 0 or self.vessel_count < 0 or self.artifact_rate < 0:
            raise ParameterError("lesion, vessel and artifact counts must be non-negative")
        if not 0 < self.diameter_q25 < self.diameter_median < self.diameter_q75:
            raise ParameterError("diameter quartiles must satisfy 0 < q25 < median < q75")
        if self.max_diameter <= self.diameter_q75:
            raise ParameterError("max_diameter must exceed the upper diameter quartile")
        brain_min = RHO["brain"] * min(HEAD_AXES)
        if self.max_diameter / 2 > 0.6 * brain_min:
            raise ParameterError(f"max_diameter {self.max_diameter} mm does not fit inside the brain ({2 * brain_min:.0f} mm)")
        if not 0 <= self.extracerebral_fraction <= 1:
            raise ParameterError("extracerebral_fraction must lie in [0, 1]")
        if len(self.extracerebral_weights) != 4 or min(self.extracerebral_weights) < 0 or sum(self.extracerebral_weights) <= 0:
            raise ParameterError("extracerebral_weights needs four non-negative weights")
        if not 0 <= self.max_translation_mm <= 10 or not 0 <= self.max_rotation_deg <= 10:
            raise ParameterError("misalignment ranges are bounded by 10 mm and 10 degrees")
        if not 0 <= self.max_scale < 0.5:
            raise ParameterError("max_scale must lie in [0, 0.5)")
        if self.enhancement_contrast <= 1:
            raise ParameterError("enhancement_contrast must exceed 1")
        if self.noise_sd < 0 or self.edge_mm <= 0 or self.lesion_edge_mm <= 0:
            raise ParameterError("noise SD must be >= 0 and edge widths > 0")
        if not 0 <= self.texture_amplitude < 0.5 or self.texture_waves < 0:
            raise ParameterError("texture_amplitude must lie in [0, 0.5) and texture_waves >= 0")
        for name in ("vessel_radius_mm", "vessel_length_mm", "artifact_sigma_mm", "enhancement_jitter", "texture_wavelength_mm"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ParameterError(f"{name} must be an increasing positive range")

    def grid(self):
        origin = -(np.array(self.dims) - 1) / 2.0 * np.array(self.spacing)
        return Grid(self.dims, self.spacing, origin)

    @property
    def sigma_lo(self):
        return np.log(self.diameter_median / self.diameter_q25) / _Z75

    @property
    def sigma_hi(self):
        return np.log(self.diameter_q75 / self.diameter_median) / _Z75

    def to_dict(self):
        return asdict(self)


@dataclass
class PhantomTruth:
    """Construction-side information kept for tests and diagnostics."""

    misalignment: AffineTransform3D
    vessel_masks: dict  # timepoint -> uint8 array of voxels touched by a vessel
    artifact_masks: dict  # timepoint -> uint8 array within 2 sigma of a blob
    brain_mask: np.ndarray  # diagnosis grid
    clean_ce: np.ndarray  # diagnosis ceT1w without lesions, artifacts and noise
    vessels: list = field(default_factory=list)  # (centreline points, radius, ce level)
    artifacts: dict = field(default_factory=dict)


def _rng(seed, key):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


def _rho(points, axes, center=(0.0, 0.0, 0.0)):
    return np.sqrt(np.sum(((points - np.asarray(center)) / np.asarray(axes)) ** 2, axis=-1))


def _inside(rho, threshold, width):
    """Soft indicator of ``rho < threshold`` with a tanh edge ``width`` (rho units)."""
    return 0.5 * (1.0 + np.tanh((threshold - rho) / width))


def _voxel_diag(params):
    return float(np.linalg.norm(params.spacing))


# -- lesion population ---------------------------------------------------

def _sample_diameter(rng, params):
    z = rng.standard_normal()
    sigma = params.sigma_lo if z < 0 else params.sigma_hi
    return float(min(params.diameter_median * np.exp(sigma * z), params.max_diameter))


def _sample_compartment(rng, params):
    if rng.random() >= params.extracerebral_fraction:
        return "parenchymal"
    w = np.asarray(params.extracerebral_weights, float)
    return COMPARTMENTS[1 + int(rng.choice(4, p=w / w.sum()))]


def _in_ventricle(p, margin):
    for c, ax in VENTRICLES:
        if _rho(p, np.asarray(ax) + margin, c) < 1.0:
            return True
    return False


def _sample_center(rng, compartment, radius, params):
    axes = np.asarray(HEAD_AXES)
    zmax = params.grid().extent_mm[2] / 2 - radius - max(params.spacing)
    for _ in range(1000):
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        if compartment == "parenchymal":
            rho_max = RHO["brain"] - (radius + params.edge_mm) / (RHO["brain"] * axes.min())
            if rho_max <= 0.05:
                break
            p = axes * u * rho_max * rng.random() ** (1 / 3)
            if _in_ventricle(p, radius + 1.0):
                continue
        else:
            p = axes * u * COMPARTMENT_RHO[compartment]
        if abs(p[2]) <= zmax:
            return p
    raise ParameterError(f"cannot place a {2 * radius:.1f} mm {compartment} lesion inside the phantom grid")


def _extent(radius, params):
    # farthest mask voxel from the centre: the forced nearest voxel may sit half a diagonal away
    return max(radius, _voxel_diag(params) / 2)


def _sample_case_lesions(rng, params):
    n = params.count_min + int(rng.poisson(params.count_lambda)) if params.count_lambda > 0 else params.count_min
    lo, hi = params.enhancement_jitter
    lesions = []
    diag = _voxel_diag(params)
    for _ in range(n):
        d = _sample_diameter(rng, params)
        comp = _sample_compartment(rng, params)
        for _attempt in range(200):
            c = _sample_center(rng, comp, d / 2, params)
            ok = all(
                np.linalg.norm(c - np.asarray(o.center)) > _extent(d / 2, params) + _extent(o.diameter / 2, params) + diag
                for o in lesions
            )
            if ok:
                break
        else:
            raise ParameterError("lesions too crowded to place without touching")
        enh = params.enhancement_contrast * rng.uniform(lo, hi)
        offsets = {
            "T1w": 1.15 + rng.uniform(-0.03, 0.03),
            "T2w": 1.25 + rng.uniform(-0.05, 0.05),
            "FLAIR": 1.35 + rng.uniform(-0.05, 0.05),
        }
        lesions.append(LesionSpec(tuple(c), d, comp, float(enh), offsets))
    return lesions


def sample_lesion_population(seed, params=None, n_cases=1):
    """Per-case lesion lists, identical to the lesions of ``generate_cohort(seed, params, n_cases)``."""
    params = params or PhantomParams()
    if n_cases < 1:
        raise ParameterError("n_cases must be at least 1")
    return [_sample_case_lesions(_rng(seed, (i, _STREAMS["lesions"])), params) for i in range(n_cases)]


# -- confounders -----------------------------------------------------------

def _sample_vessels(rng, params, lesions):
    """Quadratic Bezier centrelines inside the brain, clear of every lesion."""
    axes = np.asarray(HEAD_AXES) * (RHO["brain"] - 0.08)
    zmax = params.grid().extent_mm[2] / 2 - max(params.spacing)
    diag = _voxel_diag(params)
    vessels = []
    t = np.linspace(0, 1, 64)[:, None]
    for _ in range(params.vessel_count):
        for _attempt in range(200):
            u = rng.standard_normal(3)
            start = axes * u / np.linalg.norm(u) * rng.random() ** (1 / 3)
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            length = rng.uniform(*params.vessel_length_mm)
            end = start + direction * length
            bend = rng.standard_normal(3) * length * 0.25
            ctrl = (start + end) / 2 + bend
            pts = (1 - t) ** 2 * start + 2 * (1 - t) * t * ctrl + t**2 * end
            radius = rng.uniform(*params.vessel_radius_mm)
            level = params.enhancement_contrast * rng.uniform(*params.enhancement_jitter) * BRAIN_REF[0]
            if np.any(_rho(pts, axes) > 1.0) or np.any(np.abs(pts[:, 2]) > zmax):
                continue
            clear = all(
                np.min(np.linalg.norm(pts - np.asarray(les.center), axis=1))
                > _extent(les.diameter / 2, params) + radius + 2 * diag
                for les in lesions
            )
            if clear:
                vessels.append((pts, float(radius), float(level)))
                break
    return vessels


def _sample_artifacts(rng, params, lesions):
    axes = np.asarray(HEAD_AXES) * (RHO["brain"] - 0.05)
    zmax = params.grid().extent_mm[2] / 2
    diag = _voxel_diag(params)
    blobs = []
    for _ in range(int(rng.poisson(params.artifact_rate))):
        for _attempt in range(200):
            u = rng.standard_normal(3)
            c = axes * u / np.linalg.norm(u) * rng.random() ** (1 / 3)
            sigma = rng.uniform(*params.artifact_sigma_mm)
            amp = (params.enhancement_contrast * rng.uniform(*params.enhancement_jitter) - 1.0) * BRAIN_REF[0]
            if abs(c[2]) > zmax:
                continue
            if all(np.linalg.norm(c - np.asarray(les.center)) > _extent(les.diameter / 2, params) + 3 * sigma + diag for les in lesions):
                blobs.append((c, float(sigma), float(amp)))
                break
    return blobs


def _sample_misalignment(rng, params, grid):
    angles = rng.uniform(-params.max_rotation_deg, params.max_rotation_deg, 3)
    trans = rng.uniform(-params.max_translation_mm, params.max_translation_mm, 3)
    scale = 1.0 + rng.uniform(-params.max_scale, params.max_scale, 3)
    return AffineTransform3D.from_rotation(angles, trans, scale, center=grid.center)


def _sample_texture(rng, params):
    """Plane waves (wave vector, phase) of a smooth random tissue modulation."""
    waves = []
    for _ in range(params.texture_waves):
        u = rng.standard_normal(3)
        k = u / np.linalg.norm(u) * 2 * np.pi / rng.uniform(*params.texture_wavelength_mm)
        waves.append((k, rng.uniform(0, 2 * np.pi)))
    return waves


def _wave_field(points, waves):
    """Sum of plane waves scaled to unit variance."""
    field = np.zeros(points.shape[:-1])
    for k, phase in waves:
        field += np.cos(points @ k + phase)
    return field / np.sqrt(len(waves) / 2)


def _texture(field, params):
    # about 95% of the modulation lies within +-amplitude
    return 1.0 + params.texture_amplitude * field / 2


def _sulci(field, rho, params):
    """CSF-filled clefts where the texture field is high inside the cortical band."""
    band = _inside(rho, RHO["brain"], 0.01) * (1 - _inside(rho, SULCUS_RHO, 0.02))
    return band * _inside(-field, -params.sulcus_threshold, 0.25)


# -- rendering ---------------------------------------------------------------

def _anatomy(points, params, vessels, waves=()):
    """Noise-free, lesion-free images at anatomical ``points``; also the brain fraction."""
    w = params.edge_mm / min(HEAD_AXES)
    rho = _rho(points, HEAD_AXES)
    head = _inside(rho, RHO["scalp"], w)
    skull = _inside(rho, RHO["skull"], w)
    csf = _inside(rho, RHO["csf"], w)
    brain = _inside(rho, RHO["brain"], w)
    wm = _inside(_rho(points, WM_AXES, (0.0, 3.0, 2.0)), 1.0, params.edge_mm / min(WM_AXES))
    vent = np.zeros_like(rho)
    for c, ax in VENTRICLES:
        vent = np.maximum(vent, _inside(_rho(points, ax, c), 1.0, params.edge_mm / min(ax)))

    if vessels:
        centre = np.concatenate([v[0] for v in vessels])
        owner = np.concatenate([np.full(len(v[0]), i) for i, v in enumerate(vessels)])
        radii = np.array([v[1] for v in vessels])
        levels = np.array([v[2] for v in vessels])
        reach = radii.max() + 3 * params.edge_mm
        dist, idx = cKDTree(centre).query(points.reshape(-1, 3), distance_upper_bound=reach)
        hit = np.isfinite(dist)
        vmix = np.zeros(dist.shape)
        vlevel = np.zeros(dist.shape)
        k = owner[idx[hit]]
        vmix[hit] = _inside(dist[hit], radii[k], params.edge_mm / 3)
        vlevel[hit] = levels[k]
        vmix = vmix.reshape(rho.shape)
        vlevel = vlevel.reshape(rho.shape)
    else:
        vmix = vlevel = np.zeros_like(rho)

    if waves:
        field = _wave_field(points, waves)
        tex = _texture(field, params)
        sulci = _sulci(field, _rho(points, HEAD_AXES), params)
    else:
        tex, sulci = 1.0, 0.0
    images = {}
    for s, seq in enumerate(SEQUENCES):
        tissue = TISSUE["gm"][s] * (1 - wm) + TISSUE["wm"][s] * wm
        tissue = tissue * (1 - vent) + TISSUE["csf"][s] * vent
        tissue = tissue * (1 - sulci) + TISSUE["csf"][s] * sulci
        img = (
            TISSUE["scalp"][s] * (head - skull)
            + TISSUE["skull"][s] * (skull - csf)
            + TISSUE["csf"][s] * (csf - brain)
            + tissue * brain
        ) * tex
        if seq == "ceT1w":
            img = img * (1 - vmix) + vlevel * vmix
        elif seq in VESSEL_NATIVE:
            img = img * (1 - vmix) + VESSEL_NATIVE[seq] * vmix
        images[seq] = img
    return images, brain


def _vessel_mask(points, params, vessels):
    """Voxels whose centre lies within a vessel radius plus half a voxel diagonal."""
    if not vessels:
        return np.zeros(points.shape[:3], np.uint8)
    out = np.zeros(points.shape[:3], bool)
    flat = points.reshape(-1, 3)
    half = _voxel_diag(params) / 2
    for pts, radius, _ in vessels:
        d, _ = cKDTree(pts).query(flat, distance_upper_bound=radius + half + 1e-9)
        out |= (d <= radius + half).reshape(out.shape)
    return out.astype(np.uint8)


def _add_artifacts(img, points, blobs):
    mask = np.zeros(img.shape, bool)
    for c, sigma, amp in blobs:
        d2 = np.sum((points - c) ** 2, axis=-1)
        img = img + amp * np.exp(-d2 / (2 * sigma**2))
        mask |= d2 <= (2 * sigma) ** 2
    return img, mask.astype(np.uint8)


def lesion_mask(grid, lesions):
    """Ground truth: voxel centres within each lesion radius, plus the voxel nearest each centre."""
    points = grid.world_points()
    mask = np.zeros(grid.dims, np.uint8)
    w2v = grid.world_to_voxel
    for les in lesions:
        c = np.asarray(les.center)
        mask[np.sum((points - c) ** 2, axis=-1) <= (les.diameter / 2) ** 2] = 1
        idx = np.round(w2v[:3, :3] @ c + w2v[:3, 3]).astype(int)
        if np.all(idx >= 0) and np.all(idx < np.array(grid.dims)):
            mask[tuple(idx)] = 1
    return mask


def _paint_lesions(images, points, grid, lesions, params):
    """Blend each lesion in: level 1 on its mask voxels, Gaussian falloff outside."""
    for les in lesions:
        single = lesion_mask(grid, [les]).astype(bool)
        d = np.sqrt(np.sum((points - np.asarray(les.center)) ** 2, axis=-1))
        excess = np.maximum(d - les.diameter / 2, 0.0)
        p = np.exp(-(excess**2) / (2 * params.lesion_edge_mm**2))
        p[excess > 4 * params.lesion_edge_mm] = 0.0
        p[single] = 1.0
        for s, seq in enumerate(SEQUENCES):
            level = BRAIN_REF[s] * (les.enhancement if seq == "ceT1w" else les.offsets.get(seq, 1.0))
            images[seq] = images[seq] * (1 - p) + level * p
    return images


def generate_case(seed, params=None, case_index=None, case_id=None, patient_id=None, return_truth=False,
                  misalignment=None):
    """Render one paired-time-point case.

    With ``case_index`` the case draws from the same streams as entry
    ``case_index`` of :func:`generate_cohort`. ``misalignment`` replaces the
    randomly drawn diagnosis-to-prediag transform.
    """
    params = params or PhantomParams()
    key = () if case_index is None else (int(case_index),)
    grid = params.grid()
    streams = {name: _rng(seed, key + (i,)) for name, i in _STREAMS.items()}
    lesions = _sample_case_lesions(streams["lesions"], params)
    vessels = _sample_vessels(streams["vessels"], params, lesions)
    blobs = {tp: _sample_artifacts(streams["artifacts"], params, lesions) for tp in ("diagnosis", "prediag")}
    mis = _sample_misalignment(streams["misalignment"], params, grid)
    if misalignment is not None:
        mis = misalignment
    waves = _sample_texture(streams["texture"], params)

    points = {"diagnosis": grid.world_points()}
    # prediag voxel at world y shows the anatomy at mis^-1(y)
    points["prediag"] = mis.inverse().apply(points["diagnosis"])

    volumes, vessel_masks, artifact_masks = {}, {}, {}
    clean_ce = brain_mask = None
    for tp in ("diagnosis", "prediag"):
        images, brain = _anatomy(points[tp], params, vessels, waves)
        if tp == "diagnosis":
            clean_ce = images["ceT1w"].astype(np.float32)
            brain_mask = (brain > 0.5).astype(np.uint8)
            images = _paint_lesions(images, points[tp], grid, lesions, params)
        images["ceT1w"], artifact_masks[tp] = _add_artifacts(images["ceT1w"], points[tp], blobs[tp])
        vessel_masks[tp] = _vessel_mask(points[tp], params, vessels)
        noise = streams["noise"]
        volumes[tp] = {
            seq: Volume((images[seq] + noise.normal(0.0, params.noise_sd, grid.dims)).astype(np.float32), grid)
            for seq in SEQUENCES
        }

    if case_id is None:
        case_id = f"case{case_index:04d}" if case_index is not None else f"case_s{seed}"
    case = Case(
        case_id=case_id,
        patient_id=patient_id or case_id.replace("case", "pat", 1),
        diagnosis=volumes["diagnosis"],
        prediag=volumes["prediag"],
        mask=Volume(lesion_mask(grid, lesions), grid),
        lesions=lesions,
        misalignment=mis,
        aligned=False,
    )
    if not return_truth:
        return case
    truth = PhantomTruth(mis, vessel_masks, artifact_masks, brain_mask, clean_ce, vessels, blobs)
    return case, truth


def generate_cohort(seed, params=None, n_cases=1, cases_per_patient=1):
    """``n_cases`` independent cases; consecutive runs of ``cases_per_patient`` share a patient id."""
    if n_cases < 1 or cases_per_patient < 1:
        raise ParameterError("n_cases and cases_per_patient must be at least 1")
    return [
        generate_case(seed, params, case_index=i, patient_id=f"pat{i // cases_per_patient:04d}")
        for i in range(n_cases)
    ]
