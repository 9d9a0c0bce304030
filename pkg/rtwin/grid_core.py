"""
    Voxel-grid data model and sparse OpenKBP-style CSV input/output.

    Dense grids are stored as numpy arrays of shape (nx, ny, nz). The linear
    voxel index used on disk is x-fastest: index = i + nx * (j + ny * k),
    which is numpy's Fortran order for that array shape.
"""

import logging
import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd
import yaml

from rtwin.errors import (
    EmptyMaskError,
    GridIndexError,
    MissingFileError,
    MissingReferenceDoseError,
    ShapeMismatchError,
    ValidationError,
)
from rtwin.settings.config import (
    CT_FILE,
    DOSE_FILE,
    FEASIBLE_MASK_FILE,
    OAR_ROI_NAMES,
    PATIENT_META_FILE,
    PRESCRIPTION_GY,
    RESERVED_FILE_NAMES,
    TARGET_ROI_NAMES,
    VOXEL_DIMENSIONS_FILE,
)

logger = logging.getLogger(__name__)

ORDER = "F"


class Role(str, Enum):
    TARGET = "target"
    OAR = "oar"


@dataclass(frozen=True)
class GridShape:
    nx: int
    ny: int
    nz: int
    voxel_dims: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        counts = (self.nx, self.ny, self.nz)
        if any(int(n) != n or n < 1 for n in counts):
            raise ValidationError(f"Voxel counts must be positive integers, got {counts}")
        dims = tuple(float(d) for d in self.voxel_dims)
        if len(dims) != 3 or not all(np.isfinite(d) and d > 0 for d in dims):
            raise ValidationError(f"Voxel dimensions must be three positive numbers, got {self.voxel_dims}")
        if self.nx * self.ny * self.nz > np.iinfo(np.int64).max:
            raise ValidationError("Grid is too large to index")
        object.__setattr__(self, "voxel_dims", dims)

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def n_voxels(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def voxel_volume_cc(self) -> float:
        return float(np.prod(self.voxel_dims)) / 1000.0

    def flatten(self, i: int, j: int, k: int) -> int:
        if not (0 <= i < self.nx and 0 <= j < self.ny and 0 <= k < self.nz):
            raise GridIndexError(f"Voxel ({i}, {j}, {k}) is outside {self.dims}")
        return i + self.nx * (j + self.ny * k)

    def unflatten(self, index: int) -> tuple[int, int, int]:
        if not 0 <= index < self.n_voxels:
            raise GridIndexError(f"Voxel index {index} is outside [0, {self.n_voxels})")
        i = index % self.nx
        j = (index // self.nx) % self.ny
        k = index // (self.nx * self.ny)
        return (i, j, k)

    def same_layout(self, other: "GridShape") -> bool:
        return self.dims == other.dims


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class ScalarGrid:
    """One scalar per voxel (HU for CT, Gy for dose)."""

    shape: GridShape
    values: np.ndarray
    unit: str = "Gy"

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.size != self.shape.n_voxels:
            raise ShapeMismatchError(
                f"Grid has {values.size} values but shape {self.shape.dims} needs {self.shape.n_voxels}"
            )
        values = values.reshape(self.shape.dims, order=ORDER) if values.ndim != 3 else values
        if values.shape != self.shape.dims:
            raise ShapeMismatchError(f"Array shape {values.shape} does not match {self.shape.dims}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("Grid values must be finite")
        if self.unit == "Gy" and np.any(values < 0):
            raise ValidationError("Dose grids must be non-negative")
        object.__setattr__(self, "values", _frozen(values))

    @classmethod
    def zeros(cls, shape: GridShape, unit: str = "Gy") -> "ScalarGrid":
        return cls(shape, np.zeros(shape.dims), unit)

    def flat(self) -> np.ndarray:
        return self.values.ravel(order=ORDER)

    def with_values(self, values: np.ndarray) -> "ScalarGrid":
        return ScalarGrid(self.shape, values, self.unit)

    def __eq__(self, other):
        if not isinstance(other, ScalarGrid):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.unit == other.unit
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True)
class MaskGrid:
    """Boolean voxel membership."""

    shape: GridShape
    membership: np.ndarray

    def __post_init__(self):
        membership = np.array(self.membership, dtype=bool)
        if membership.size != self.shape.n_voxels:
            raise ShapeMismatchError(
                f"Mask has {membership.size} voxels but shape {self.shape.dims} needs {self.shape.n_voxels}"
            )
        if membership.ndim != 3:
            membership = membership.reshape(self.shape.dims, order=ORDER)
        if membership.shape != self.shape.dims:
            raise ShapeMismatchError(f"Array shape {membership.shape} does not match {self.shape.dims}")
        object.__setattr__(self, "membership", _frozen(membership))

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.membership))

    def is_empty(self) -> bool:
        return self.count == 0

    def flat(self) -> np.ndarray:
        return self.membership.ravel(order=ORDER)

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.flat())

    def __eq__(self, other):
        if not isinstance(other, MaskGrid):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.membership, other.membership)

    __hash__ = None


@dataclass(frozen=True)
class PatientRecord:
    """
    CT, named ROI masks with roles, feasible dose mask and an optional
    reference dose, all on one grid. Immutable once built.
    """

    id: str
    ct: ScalarGrid
    rois: dict[str, MaskGrid]
    roles: dict[str, Role]
    feasible: MaskGrid
    reference_dose: ScalarGrid | None = None
    prescription: float = PRESCRIPTION_GY
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        shape = self.ct.shape
        grids = [self.feasible, *self.rois.values()]
        if self.reference_dose is not None:
            grids.append(self.reference_dose)
        for grid in grids:
            _check_shapes(shape, grid.shape)
        if set(self.rois) != set(self.roles):
            raise ValidationError("Every ROI needs exactly one role")
        if self.feasible.is_empty():
            raise EmptyMaskError(f"Patient {self.id}: feasible dose mask is empty")
        if not np.isfinite(self.prescription) or self.prescription <= 0:
            raise ValidationError(f"Prescription must be positive, got {self.prescription}")
        object.__setattr__(self, "rois", dict(self.rois))
        object.__setattr__(self, "roles", {name: Role(role) for name, role in self.roles.items()})

    @property
    def shape(self) -> GridShape:
        return self.ct.shape

    def targets(self) -> dict[str, MaskGrid]:
        return {name: mask for name, mask in self.rois.items() if self.roles[name] is Role.TARGET}

    def oars(self) -> dict[str, MaskGrid]:
        return {name: mask for name, mask in self.rois.items() if self.roles[name] is Role.OAR}

    def roi_union(self, role: Role | None = None) -> MaskGrid:
        members = np.zeros(self.shape.dims, dtype=bool)
        for name, mask in self.rois.items():
            if role is None or self.roles[name] is role:
                members |= mask.membership
        return MaskGrid(self.shape, members)

    def target_union(self) -> MaskGrid:
        union = self.roi_union(Role.TARGET)
        if union.is_empty():
            raise EmptyMaskError(f"Patient {self.id} has no target ROI")
        return union

    def replace(self, **changes) -> "PatientRecord":
        fields = {
            "id": self.id,
            "ct": self.ct,
            "rois": self.rois,
            "roles": self.roles,
            "feasible": self.feasible,
            "reference_dose": self.reference_dose,
            "prescription": self.prescription,
            "meta": self.meta,
        }
        fields.update(changes)
        return PatientRecord(**fields)

    def require_reference(self) -> ScalarGrid:
        if self.reference_dose is None:
            raise MissingReferenceDoseError(f"Patient {self.id} has no reference dose")
        return self.reference_dose


def _check_shapes(a: GridShape, b: GridShape):
    if not a.same_layout(b):
        raise ShapeMismatchError(f"Grid shapes differ: {a.dims} vs {b.dims}")


def assign_role(name: str, target_names=None, oar_names=None) -> Role:
    """
    fn: assign_role
    Description: Looks an ROI name up in the configured role lists
    Args:
        name (str): ROI name (file stem)
    return:
        Role: target or OAR; unknown names fall back to OAR with a warning
    """
    target_names = TARGET_ROI_NAMES if target_names is None else target_names
    oar_names = OAR_ROI_NAMES if oar_names is None else oar_names
    if name in target_names:
        return Role.TARGET
    if name not in oar_names:
        logger.warning(f"ROI '{name}' has no configured role, treating it as an organ-at-risk")
    return Role.OAR


def masked_region(grid: ScalarGrid, mask: MaskGrid) -> list[tuple[int, float]]:
    """Voxels inside the mask as (linear index, value), ascending by index."""
    _check_shapes(grid.shape, mask.shape)
    indices = mask.indices()
    values = grid.flat()[indices]
    return [(int(i), float(v)) for i, v in zip(indices, values, strict=True)]


def masked_values(grid: ScalarGrid, mask: MaskGrid) -> np.ndarray:
    _check_shapes(grid.shape, mask.shape)
    return grid.flat()[mask.indices()]


# ---- Sparse CSV (header ",data", rows "index,value") ----


def read_sparse_csv(
    path: str, n_voxels: int, as_mask: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """
    fn: read_sparse_csv
    Description: Reads one OpenKBP sparse vector file
    Args:
        path (str): CSV file with header ",data"
        n_voxels (int): number of voxels of the target grid
        as_mask (bool): rows may omit the value; membership is implied
    return:
        tuple: (int64 indices, float64 values) in file order
    """
    frame = pd.read_csv(path, index_col=0, float_precision="round_trip")
    indices = frame.index.to_numpy()
    if frame.shape[1] == 0:
        values = np.ones(len(indices))
    else:
        values = frame.iloc[:, 0].to_numpy(dtype=np.float64)
        if as_mask:
            values = np.where(np.isnan(values), 1.0, values)
    if len(indices) == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    if not np.issubdtype(indices.dtype, np.integer):
        raise GridIndexError(f"{path}: voxel indices must be integers")
    indices = indices.astype(np.int64)
    if indices.min() < 0 or indices.max() >= n_voxels:
        raise GridIndexError(f"{path}: voxel index out of range [0, {n_voxels})")
    if pd.Index(indices).has_duplicates:
        raise GridIndexError(f"{path}: duplicate voxel index")
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{path}: non-finite value")
    return indices, values


def write_sparse_csv(path: str, flat_values: np.ndarray, as_mask: bool = False):
    indices = np.flatnonzero(flat_values)
    if as_mask:
        data = np.ones(len(indices), dtype=np.int64)
    else:
        data = flat_values[indices].astype(np.float64)
    frame = pd.DataFrame({"data": data}, index=pd.Index(indices, name=""))
    frame.to_csv(path)


def _dense(shape: GridShape, indices: np.ndarray, values: np.ndarray) -> np.ndarray:
    flat = np.zeros(shape.n_voxels)
    flat[indices] = values
    return flat.reshape(shape.dims, order=ORDER)


def load_voxel_dimensions(path: str) -> tuple[float, float, float]:
    values = np.loadtxt(path, delimiter=",", ndmin=1).ravel()
    if values.size != 3 or not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise ValidationError(f"{path}: expected three positive voxel dimensions")
    return tuple(float(v) for v in values)


def save_voxel_dimensions(path: str, voxel_dims: tuple[float, float, float]):
    with open(path, "w") as handle:
        handle.write("\n".join(repr(float(d)) for d in voxel_dims) + "\n")


def load_patient(
    dir_path: str,
    shape: GridShape,
    target_names=None,
    oar_names=None,
    prescription: float | None = None,
) -> PatientRecord:
    """
    fn: load_patient
    Description: Rebuilds a PatientRecord from a directory of sparse CSV files
    Args:
        dir_path (str): patient directory
        shape (GridShape): grid the sparse indices refer to
        target_names (list, optional): ROI names tagged as targets
        oar_names (list, optional): ROI names tagged as organs-at-risk
        prescription (float, optional): overrides the stored prescription
    return:
        PatientRecord: dense record; absent voxels are 0 / outside
    """
    if not os.path.isdir(dir_path):
        raise MissingFileError(f"Patient directory {dir_path} does not exist")
    for mandatory, label in ((CT_FILE, "CT"), (FEASIBLE_MASK_FILE, "feasible mask")):
        if not os.path.exists(os.path.join(dir_path, mandatory)):
            raise MissingFileError(f"{dir_path}: missing {label} ({mandatory})")

    dims_path = os.path.join(dir_path, VOXEL_DIMENSIONS_FILE)
    if os.path.exists(dims_path):
        voxel_dims = load_voxel_dimensions(dims_path)
        if not np.allclose(voxel_dims, shape.voxel_dims):
            logger.info(f"{dir_path}: using stored voxel dimensions {voxel_dims}")
        shape = GridShape(shape.nx, shape.ny, shape.nz, voxel_dims)

    def read_grid(filename, as_mask=False):
        indices, values = read_sparse_csv(
            os.path.join(dir_path, filename), shape.n_voxels, as_mask=as_mask
        )
        return _dense(shape, indices, values)

    meta = {}
    meta_path = os.path.join(dir_path, PATIENT_META_FILE)
    if os.path.exists(meta_path):
        with open(meta_path) as stream:
            meta = yaml.safe_load(stream) or {}

    ct = ScalarGrid(shape, read_grid(CT_FILE), unit="HU")
    feasible = MaskGrid(shape, read_grid(FEASIBLE_MASK_FILE, as_mask=True) != 0)
    dose_path = os.path.join(dir_path, DOSE_FILE)
    reference = ScalarGrid(shape, read_grid(DOSE_FILE)) if os.path.exists(dose_path) else None

    stored_roles = meta.get("roles", {})
    rois, roles = {}, {}
    for filename in sorted(os.listdir(dir_path)):
        stem, extension = os.path.splitext(filename)
        if extension != ".csv" or filename in RESERVED_FILE_NAMES:
            continue
        rois[stem] = MaskGrid(shape, read_grid(filename, as_mask=True) != 0)
        if stem in stored_roles:
            roles[stem] = Role(stored_roles[stem])
        else:
            roles[stem] = assign_role(stem, target_names, oar_names)

    if prescription is None:
        prescription = float(meta.get("prescription", PRESCRIPTION_GY))
    return PatientRecord(
        id=str(meta.get("id", os.path.basename(os.path.normpath(dir_path)))),
        ct=ct,
        rois=rois,
        roles=roles,
        feasible=feasible,
        reference_dose=reference,
        prescription=prescription,
        meta={key: value for key, value in meta.items() if key not in ("id", "prescription", "roles")},
    )


def save_patient(record: PatientRecord, dir_path: str):
    """Writes the record as sparse CSV files, ascending voxel index order."""
    os.makedirs(dir_path, exist_ok=True)
    write_sparse_csv(os.path.join(dir_path, CT_FILE), record.ct.flat())
    write_sparse_csv(os.path.join(dir_path, FEASIBLE_MASK_FILE), record.feasible.flat(), as_mask=True)
    if record.reference_dose is not None:
        write_sparse_csv(os.path.join(dir_path, DOSE_FILE), record.reference_dose.flat())
    for name, mask in record.rois.items():
        write_sparse_csv(os.path.join(dir_path, f"{name}.csv"), mask.flat(), as_mask=True)
    save_voxel_dimensions(os.path.join(dir_path, VOXEL_DIMENSIONS_FILE), record.shape.voxel_dims)
    meta = {
        "id": record.id,
        "prescription": float(record.prescription),
        "roles": {name: role.value for name, role in record.roles.items()},
    }
    meta.update({key: value for key, value in record.meta.items() if key not in meta})
    with open(os.path.join(dir_path, PATIENT_META_FILE), "w") as stream:
        yaml.safe_dump(meta, stream, sort_keys=False)


def save_dose(dose: ScalarGrid, path: str):
    write_sparse_csv(path, dose.flat())


def load_dose(path: str, shape: GridShape) -> ScalarGrid:
    indices, values = read_sparse_csv(path, shape.n_voxels)
    return ScalarGrid(shape, _dense(shape, indices, values))


def load_cohort(dir_path: str, shape: GridShape, **kwargs) -> list[PatientRecord]:
    """Loads every patient sub-directory of dir_path in sorted order."""
    if not os.path.isdir(dir_path):
        raise MissingFileError(f"Cohort directory {dir_path} does not exist")
    patients = [
        load_patient(os.path.join(dir_path, name), shape, **kwargs)
        for name in sorted(os.listdir(dir_path))
        if os.path.isdir(os.path.join(dir_path, name))
    ]
    if not patients:
        raise MissingFileError(f"Cohort directory {dir_path} holds no patients")
    return patients
