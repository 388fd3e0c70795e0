"""Paired-time-point case records and their on-disk layout."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InputError
from .io import load_volume, save_volume
from .volume import AffineTransform3D

SEQUENCES = ("ceT1w", "T1w", "T2w", "FLAIR")
TIMEPOINTS = ("prediag", "diagnosis")
COMPARTMENTS = ("parenchymal", "dural", "leptomeningeal", "osseous", "subcutaneous")


@dataclass
class LesionSpec:
    center: tuple  # world mm, anatomical frame of the diagnosis scan
    diameter: float  # mm
    compartment: str = "parenchymal"
    enhancement: float = 2.0  # ceT1w core intensity as a multiple of brain background
    offsets: dict = field(default_factory=dict)  # per-sequence intensity multipliers

    def __post_init__(self):
        if not self.diameter > 0:
            raise InputError(f"lesion diameter must be positive, got {self.diameter}")
        if self.compartment not in COMPARTMENTS:
            raise InputError(f"unknown compartment {self.compartment!r}")
        self.center = tuple(float(c) for c in self.center)


@dataclass
class Case:
    case_id: str
    patient_id: str
    diagnosis: dict
    prediag: dict = field(default_factory=dict)
    mask: object = None
    lesions: list = field(default_factory=list)
    misalignment: AffineTransform3D | None = None  # true diagnosis-to-prediag transform, phantoms only
    aligned: bool = False
    registration: AffineTransform3D | None = None  # transform used to align prediag

    def __post_init__(self):
        if "ceT1w" not in self.diagnosis:
            raise InputError(f"case {self.case_id}: diagnosis ceT1w is required")

    @property
    def grid(self):
        """The diagnosis ceT1w grid that every output lives on."""
        return self.diagnosis["ceT1w"].grid

    def volume(self, timepoint, sequence):
        seqs = self.diagnosis if timepoint == "diagnosis" else self.prediag
        return seqs.get(sequence)

    def replace(self, **changes):
        return replace(self, **changes)


def save_case(case, directory, fmt="native"):
    """Write one case as ``<timepoint>_<sequence>`` volumes, ``mask`` and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = ".nii" if fmt == "nifti" else ".vol.json"
    files = {}
    for tp in TIMEPOINTS:
        for seq, vol in getattr(case, tp).items():
            name = f"{tp}_{seq}{ext}"
            vol_out = vol
            if fmt == "nifti":
                vol_out = vol.with_data(vol.data.astype(np.float32))
            save_volume(vol_out, directory / name)
            files[f"{tp}/{seq}"] = name
    if case.mask is not None:
        mask = case.mask
        if fmt == "nifti":
            mask = mask.with_data(mask.data.astype(np.float32))
        save_volume(mask, directory / f"mask{ext}")
        files["mask"] = f"mask{ext}"
    manifest = {
        "case_id": case.case_id,
        "patient_id": case.patient_id,
        "aligned": case.aligned,
        "files": files,
        "lesions": [asdict(les) for les in case.lesions],
        "misalignment": case.misalignment.to_dict() if case.misalignment is not None else None,
        "registration": case.registration.to_dict() if case.registration is not None else None,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def load_case(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    seqs = {tp: {} for tp in TIMEPOINTS}
    mask = None
    for key, name in manifest["files"].items():
        vol = load_volume(directory / name)
        if key == "mask":
            mask = vol.with_data(vol.data.astype(np.uint8))
        else:
            tp, seq = key.split("/")
            seqs[tp][seq] = vol
    mis = manifest.get("misalignment")
    reg = manifest.get("registration")
    return Case(
        case_id=manifest["case_id"],
        patient_id=manifest["patient_id"],
        diagnosis=seqs["diagnosis"],
        prediag=seqs["prediag"],
        mask=mask,
        lesions=[LesionSpec(**les) for les in manifest.get("lesions", [])],
        misalignment=AffineTransform3D.from_dict(mis) if mis else None,
        aligned=manifest.get("aligned", False),
        registration=AffineTransform3D.from_dict(reg) if reg else None,
    )


def load_cases(root):
    """Load every case directory below ``root`` in sorted order."""
    root = Path(root)
    dirs = sorted(p.parent for p in root.glob("*/manifest.json"))
    if not dirs:
        raise InputError(f"no cases found under {root}")
    return [load_case(d) for d in dirs]
