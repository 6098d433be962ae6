"""Synthetic longitudinal cohort generator.

Each subject is a smooth ellipsoid ROI over a flat background, imaged at
two timepoints.  A per-subject atrophy rate drawn from its class
distribution shrinks (or expands, for negative rates) the ellipsoid
between t1 and t2; a configurable fraction of one rate-period is already
expressed at baseline so that baseline geometry carries a subtle class
signal, as it does in real cohorts.  Generation is fully deterministic
per (seed, subject).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .classify import DISEASE_LABEL, NC_LABEL
from .errors import DataError, InvalidInputError
from .seeding import substream
from .volumes import Volume, read_volume, write_volume

MANIFEST_VERSION = 1
MIN_SEMI_AXIS = 2.0


@dataclass
class CohortSpec:
    n_per_class: int = 30
    dims: tuple = (32, 32, 32)  # (nx, ny, nz)
    spacing: tuple = (1.0, 1.0, 1.0)
    roi_center: tuple = (16.0, 16.0, 16.0)  # (x, y, z) voxels
    roi_semi_axes: tuple = (9.0, 7.5, 6.0)  # (ax, ay, az) voxels
    nc_rate_mean: float = 0.01
    nc_rate_std: float = 0.035
    disease_rate_mean: float = 0.10
    disease_rate_std: float = 0.035
    baseline_atrophy_frac: float = 1.0  # rate-periods already expressed at t1
    bg_intensity: float = 0.1
    roi_intensity: float = 0.8
    boundary_width: float = 1.0  # voxels
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n_per_class < 1:
            raise InvalidInputError("n_per_class must be at least 1")
        if self.noise_std < 0:
            raise InvalidInputError("noise_std must be non-negative")
        if min(self.roi_semi_axes) < MIN_SEMI_AXIS:
            raise InvalidInputError("roi semi-axes must be at least 2 voxels")
        worst = max(self.nc_rate_mean, self.disease_rate_mean)
        t2_axes = [a * (1.0 - self.baseline_atrophy_frac * worst) * (1.0 - worst)
                   for a in self.roi_semi_axes]
        if min(t2_axes) < MIN_SEMI_AXIS:
            raise InvalidInputError(
                f"mean rates shrink semi-axes below {MIN_SEMI_AXIS} voxels at t2"
            )

    def max_valid_rate(self) -> float:
        # largest r with min_axis * (1 - frac*r) * (1 - r) >= MIN_SEMI_AXIS
        lo, hi = 0.0, 0.999
        a = min(self.roi_semi_axes)
        for _ in range(60):
            mid = (lo + hi) / 2.0
            if a * (1.0 - self.baseline_atrophy_frac * mid) * (1.0 - mid) >= MIN_SEMI_AXIS:
                lo = mid
            else:
                hi = mid
        return lo


@dataclass
class SubjectRecord:
    subject_id: int
    label: int  # NC_LABEL or DISEASE_LABEL
    t1: Volume
    t2: Volume
    label_map: Volume
    rate: float


@dataclass
class Cohort:
    spec: CohortSpec
    subjects: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.subjects)


def _grid_radius(dims, center, axes) -> np.ndarray:
    nx, ny, nz = dims
    cx, cy, cz = center
    zz = (np.arange(nz, dtype=np.float64) - cz)[:, None, None]
    yy = (np.arange(ny, dtype=np.float64) - cy)[None, :, None]
    xx = (np.arange(nx, dtype=np.float64) - cx)[None, None, :]
    ax, ay, az = axes
    return np.sqrt((xx / ax) ** 2 + (yy / ay) ** 2 + (zz / az) ** 2)


def ellipsoid_volume(spec: CohortSpec, axes) -> np.ndarray:
    """Smooth ellipsoid intensity field, sigmoid boundary of ~1 voxel width."""
    r = _grid_radius(spec.dims, spec.roi_center, axes)
    mean_axis = float(np.cbrt(axes[0] * axes[1] * axes[2]))
    dist = (1.0 - r) * mean_axis  # approx signed distance to boundary, voxels
    profile = 1.0 / (1.0 + np.exp(-dist / spec.boundary_width))
    return spec.bg_intensity + (spec.roi_intensity - spec.bg_intensity) * profile


def _quantize(data: np.ndarray) -> np.ndarray:
    # generation works in f64 but matches the on-disk f32 container exactly
    return data.astype("<f4").astype(np.float64)


def generate_subject(spec: CohortSpec, subject_id: int, label: int) -> SubjectRecord:
    rng = substream(spec.seed, "synth", subject_id)
    if label == DISEASE_LABEL:
        rate = rng.normal(spec.disease_rate_mean, spec.disease_rate_std)
    else:
        rate = rng.normal(spec.nc_rate_mean, spec.nc_rate_std)
    rate = float(np.clip(rate, -0.5, spec.max_valid_rate()))
    t1_axes = tuple(a * (1.0 - spec.baseline_atrophy_frac * rate) for a in spec.roi_semi_axes)
    t2_axes = tuple(a * (1.0 - rate) for a in t1_axes)
    if min(t2_axes) < MIN_SEMI_AXIS:
        raise InvalidInputError(f"subject {subject_id}: invalid geometry {t2_axes}")
    t1_data = ellipsoid_volume(spec, t1_axes)
    t2_data = ellipsoid_volume(spec, t2_axes)
    shape = t1_data.shape
    t1_data = np.clip(t1_data + rng.normal(0.0, spec.noise_std, shape), 0.0, 1.0)
    t2_data = np.clip(t2_data + rng.normal(0.0, spec.noise_std, shape), 0.0, 1.0)
    mask = (_grid_radius(spec.dims, spec.roi_center, t1_axes) <= 1.0).astype(np.float64)
    return SubjectRecord(
        subject_id=subject_id,
        label=label,
        t1=Volume(spec.dims, spec.spacing, _quantize(t1_data), kind="intensity"),
        t2=Volume(spec.dims, spec.spacing, _quantize(t2_data), kind="intensity"),
        label_map=Volume(spec.dims, spec.spacing, mask, kind="label"),
        rate=rate,
    )


def generate_cohort(spec: CohortSpec) -> Cohort:
    """NC subjects first (ids 0..n-1), then disease (ids n..2n-1)."""
    subjects = []
    for sid in range(spec.n_per_class):
        subjects.append(generate_subject(spec, sid, NC_LABEL))
    for sid in range(spec.n_per_class, 2 * spec.n_per_class):
        subjects.append(generate_subject(spec, sid, DISEASE_LABEL))
    return Cohort(spec=spec, subjects=subjects)


def write_cohort(cohort: Cohort, outdir) -> Path:
    """Write volumes plus a manifest; returns the manifest path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in cohort.subjects:
        stem = f"sub{rec.subject_id:03d}"
        write_volume(rec.t1, outdir / f"{stem}_t1")
        write_volume(rec.t2, outdir / f"{stem}_t2")
        write_volume(rec.label_map, outdir / f"{stem}_lab")
        entries.append(
            {
                "id": rec.subject_id,
                "class": rec.label,
                "t1_path": f"{stem}_t1.json",
                "t2_path": f"{stem}_t2.json",
                "label_path": f"{stem}_lab.json",
            }
        )
    manifest = {
        "format_version": MANIFEST_VERSION,
        "spec": asdict(cohort.spec),
        "subjects": entries,
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def load_cohort(manifest_path) -> Cohort:
    """Load a cohort written by :func:`write_cohort`."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if "subjects" not in manifest:
        raise DataError(f"manifest {manifest_path} has no subjects list")
    spec_dict = manifest.get("spec", {})
    for key in ("dims", "spacing", "roi_center", "roi_semi_axes"):
        if key in spec_dict:
            spec_dict[key] = tuple(spec_dict[key])
    spec = CohortSpec(**spec_dict) if spec_dict else CohortSpec()
    base = manifest_path.parent
    subjects = []
    for entry in manifest["subjects"]:
        try:
            subjects.append(
                SubjectRecord(
                    subject_id=int(entry["id"]),
                    label=int(entry["class"]),
                    t1=read_volume(base / entry["t1_path"]),
                    t2=read_volume(base / entry["t2_path"]),
                    label_map=_as_label(read_volume(base / entry["label_path"])),
                    rate=float(entry.get("rate", np.nan)),
                )
            )
        except KeyError as exc:
            raise DataError(f"manifest entry missing field {exc}") from exc
    return Cohort(spec=spec, subjects=subjects)


def _as_label(vol: Volume) -> Volume:
    if vol.kind != "label":
        vol = Volume(vol.dims, vol.spacing, vol.data, kind="label")
    return vol
