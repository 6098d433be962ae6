"""Volumes, label maps, landmark detection, and patch extraction.

Conventions: a volume of dims (nx, ny, nz) stores its scalar data in a
numpy array of shape (nz, ny, nx); raveling that array in C order gives
the on-disk row-major-zyx layout (x fastest).  Coordinates are (x, y, z)
voxel indices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidInputError

VOLUME_KINDS = ("intensity", "label", "edge", "density")
FORMAT_VERSION = 1

# separable 3x3x3 Sobel: smoothing on two axes, central difference on the third
_SMOOTH = np.array([1.0, 2.0, 1.0])
_DERIV = np.array([-1.0, 0.0, 1.0])


@dataclass
class Volume:
    """3D scalar grid with voxel dims, physical spacing, and a kind tag."""

    dims: tuple  # (nx, ny, nz)
    spacing: tuple  # (sx, sy, sz) mm per voxel
    data: np.ndarray  # shape (nz, ny, nx)
    kind: str = "intensity"

    def __post_init__(self):
        nx, ny, nz = (int(d) for d in self.dims)
        self.dims = (nx, ny, nz)
        self.spacing = tuple(float(s) for s in self.spacing)
        arr = np.asarray(self.data)
        if arr.ndim == 1:
            if arr.size != nx * ny * nz:
                raise InvalidInputError(
                    f"flat data length {arr.size} != nx*ny*nz = {nx * ny * nz}"
                )
            arr = arr.reshape(nz, ny, nx)
        elif arr.shape != (nz, ny, nx):
            raise InvalidInputError(f"data shape {arr.shape} != (nz, ny, nx) = {(nz, ny, nx)}")
        if self.kind not in VOLUME_KINDS:
            raise InvalidInputError(f"unknown volume kind {self.kind!r}")
        if self.kind in ("intensity", "density") and not np.all(np.isfinite(arr)):
            raise InvalidInputError(f"{self.kind} volume contains non-finite values")
        if self.kind == "density" and (arr.min() < 0.0 or arr.max() > 1.0):
            raise InvalidInputError("density volume outside [0, 1]")
        self.data = arr

    @property
    def shape_zyx(self) -> tuple:
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    def check_labels(self, label_set) -> None:
        """Verify a label volume only contains values from ``label_set``."""
        present = np.unique(self.data)
        bad = [v for v in present if float(v) not in {float(l) for l in label_set}]
        if bad:
            raise InvalidInputError(f"label volume contains undeclared labels {bad}")


@dataclass
class Landmark:
    """A patch-seeding voxel on the averaged ROI boundary."""

    index: int
    coord: tuple  # (x, y, z)
    roi: str
    density: float


@dataclass
class Patch:
    """Flattened cubic intensity block seeded at a landmark."""

    landmark_id: int
    subject_id: int
    timepoint: str  # "t1" or "t2"
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise InvalidInputError("patch values must be a flat vector")

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.values
        return self.values.astype(dtype)

    def __len__(self):
        return self.values.size


def _stencil_pass(a: np.ndarray, axis: int, kernel: np.ndarray) -> np.ndarray:
    """Correlate with a length-3 kernel along one axis; borders left zero."""
    out = np.zeros_like(a)
    lo = [slice(None)] * a.ndim
    mid = [slice(None)] * a.ndim
    hi = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    lo[axis] = slice(0, -2)
    mid[axis] = slice(1, -1)
    hi[axis] = slice(2, None)
    dst[axis] = slice(1, -1)
    out[tuple(dst)] = (
        kernel[0] * a[tuple(lo)] + kernel[1] * a[tuple(mid)] + kernel[2] * a[tuple(hi)]
    )
    return out


def _zero_border(a: np.ndarray, axes) -> None:
    for ax in axes:
        sl = [slice(None)] * a.ndim
        sl[ax] = 0
        a[tuple(sl)] = 0.0
        sl[ax] = -1
        a[tuple(sl)] = 0.0


def sobel_edge_map(label: Volume, label_id=None, mode: str = "3d") -> Volume:
    """Binary boundary map of the target ROI in a label volume.

    The ROI mask (``label_id`` if given, else any nonzero label) is run
    through the Sobel operator; voxels with nonzero gradient magnitude
    become 1.  Border voxels where the stencil leaves the grid are 0.
    ``mode`` selects the full 3D operator (default) or a 2D per-slice
    variant.
    """
    if label.kind != "label":
        raise InvalidInputError(f"expected a label volume, got kind={label.kind!r}")
    if min(label.dims) < 3:
        raise InvalidInputError(f"dims {label.dims} too small for a 3x3x3 stencil")
    if mode not in ("3d", "2d"):
        raise InvalidInputError(f"unknown sobel mode {mode!r}")

    if label_id is None:
        mask = (label.data != 0).astype(np.float64)
    else:
        mask = (label.data == float(label_id)).astype(np.float64)

    # axes of the (z, y, x) array: 0=z, 1=y, 2=x
    if mode == "3d":
        sq = np.zeros_like(mask)
        for deriv_axis in (0, 1, 2):
            g = mask
            for ax in (0, 1, 2):
                g = _stencil_pass(g, ax, _DERIV if ax == deriv_axis else _SMOOTH)
            sq += g * g
        mag = np.sqrt(sq)
        _zero_border(mag, (0, 1, 2))
    else:
        gx = _stencil_pass(_stencil_pass(mask, 2, _DERIV), 1, _SMOOTH)
        gy = _stencil_pass(_stencil_pass(mask, 2, _SMOOTH), 1, _DERIV)
        mag = np.sqrt(gx * gx + gy * gy)
        _zero_border(mag, (1, 2))

    edge = (mag > 0.0).astype(np.float64)
    return Volume(label.dims, label.spacing, edge, kind="edge")


def edge_density_map(edges) -> Volume:
    """Voxel-wise mean of binary edge volumes."""
    edges = list(edges)
    if not edges:
        raise InvalidInputError("edge_density_map needs at least one edge volume")
    dims = edges[0].dims
    for e in edges:
        if e.kind != "edge":
            raise InvalidInputError(f"expected edge volumes, got kind={e.kind!r}")
        if e.dims != dims:
            raise InvalidInputError(f"mismatched dims {e.dims} vs {dims}")
    acc = np.zeros(edges[0].shape_zyx, dtype=np.float64)
    for e in edges:
        acc += e.data
    acc /= len(edges)
    return Volume(dims, edges[0].spacing, acc, kind="density")


def auto_threshold(density: Volume) -> float:
    """Mean minus std of the nonzero density values (background excluded)."""
    vals = density.data[density.data > 0.0]
    if vals.size == 0:
        return 0.0
    return float(vals.mean() - vals.std())


def select_landmarks(density: Volume, threshold=None, margin: int = 0, roi: str = "") -> list:
    """All voxels with density above threshold and full patch support.

    Ordered lexicographically by (z, y, x) for deterministic indexing.
    ``threshold=None`` computes mean - std of the nonzero densities.
    """
    if density.kind != "density":
        raise InvalidInputError(f"expected a density volume, got kind={density.kind!r}")
    if threshold is None:
        threshold = auto_threshold(density)
    threshold = float(threshold)
    if not 0.0 <= threshold <= 1.0:
        raise InvalidInputError(f"threshold {threshold} outside [0, 1]")
    margin = int(margin)

    nz, ny, nx = density.shape_zyx
    mask = density.data > threshold
    if margin > 0:
        support = np.zeros_like(mask)
        if nz > 2 * margin and ny > 2 * margin and nx > 2 * margin:
            support[margin : nz - margin, margin : ny - margin, margin : nx - margin] = True
        mask &= support

    coords_zyx = np.argwhere(mask)  # already sorted by (z, y, x)
    out = []
    for i, (z, y, x) in enumerate(coords_zyx):
        out.append(
            Landmark(
                index=i,
                coord=(int(x), int(y), int(z)),
                roi=roi,
                density=float(density.data[z, y, x]),
            )
        )
    return out


def extract_patch(vol: Volume, lm: Landmark, patch_side: int, subject_id: int = -1,
                  timepoint: str = "t1") -> Patch:
    """Cube of side ``patch_side`` centered on the landmark, flattened z-outer/x-inner."""
    if patch_side % 2 != 1 or patch_side < 1:
        raise InvalidInputError(f"patch_side must be odd and positive, got {patch_side}")
    h = patch_side // 2
    x, y, z = lm.coord
    nz, ny, nx = vol.shape_zyx
    if not (h <= x < nx - h and h <= y < ny - h and h <= z < nz - h):
        raise InvalidInputError(
            f"patch of side {patch_side} at {lm.coord} leaves volume bounds {vol.dims}"
        )
    block = vol.data[z - h : z + h + 1, y - h : y + h + 1, x - h : x + h + 1]
    return Patch(
        landmark_id=lm.index,
        subject_id=subject_id,
        timepoint=timepoint,
        values=np.ascontiguousarray(block, dtype=np.float64).ravel(),
    )


def write_volume(vol: Volume, base: str) -> tuple:
    """Write ``<base>.json`` header and sibling ``<base>.raw`` (little-endian f32)."""
    base = Path(base)
    header = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "dtype": "f32",
        "order": "row-major-zyx",
        "kind": vol.kind,
    }
    json_path = base.with_suffix(".json")
    raw_path = base.with_suffix(".raw")
    json_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    raw_path.write_bytes(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())
    return json_path, raw_path


def read_volume(json_path) -> Volume:
    """Load a volume written by :func:`write_volume`."""
    json_path = Path(json_path)
    try:
        header = json.loads(json_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read volume header {json_path}: {exc}") from exc
    for key in ("dims", "spacing", "dtype", "order", "kind"):
        if key not in header:
            raise DataError(f"volume header {json_path} missing field {key!r}")
    if header["dtype"] != "f32" or header["order"] != "row-major-zyx":
        raise DataError(f"unsupported volume encoding in {json_path}")
    raw_path = json_path.with_suffix(".raw")
    try:
        buf = raw_path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read volume data {raw_path}: {exc}") from exc
    nx, ny, nz = header["dims"]
    data = np.frombuffer(buf, dtype="<f4")
    if data.size != nx * ny * nz:
        raise DataError(
            f"{raw_path}: expected {nx * ny * nz} voxels, found {data.size}"
        )
    return Volume(
        dims=tuple(header["dims"]),
        spacing=tuple(header["spacing"]),
        data=data.astype(np.float64).reshape(nz, ny, nx),
        kind=header["kind"],
    )
