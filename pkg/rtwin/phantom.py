"""
    Synthetic phantoms: spherical target and organs-at-risk on a small grid,
    an analytic Gaussian-falloff ground-truth dose, and rigid anatomical
    shifts for the adaptive scenario.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from tqdm import tqdm

from rtwin.errors import EmptyMaskError, ValidationError
from rtwin.geometry import (
    dilate,
    gaussian_falloff,
    sphere,
    translate,
    voxel_shift,
)
from rtwin.grid_core import GridShape, MaskGrid, PatientRecord, Role, ScalarGrid
from rtwin.settings.config import (
    BAR_FORMAT,
    DESK_SHAPE,
    FEASIBLE_MARGIN_MM,
    KERNEL_WIDTH_MM,
    OAR_HU,
    PRESCRIPTION_GY,
    TARGET_HU,
    VOXEL_DIMS_MM,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OarSpec:
    name: str
    center: tuple[float, float, float]
    radius: float
    hu: float = OAR_HU


@dataclass(frozen=True)
class PhantomSpec:
    """
    Geometry of a spherical phantom. Centres and radii are in mm, measured
    from the centre of voxel (0, 0, 0).
    """

    shape: GridShape
    target_center: tuple[float, float, float]
    target_radius: float
    oar_specs: tuple[OarSpec, ...] = ()
    prescription: float = PRESCRIPTION_GY
    rng_seed: int = 0
    margin: float = FEASIBLE_MARGIN_MM
    kernel_width: float = KERNEL_WIDTH_MM
    target_name: str = "PTV"
    ct_noise_hu: float = 0.0
    id: str = "phantom"

    def __post_init__(self):
        object.__setattr__(self, "oar_specs", tuple(self.oar_specs))
        if self.prescription <= 0:
            raise ValidationError("Prescription must be positive")
        if self.kernel_width <= 0:
            raise ValidationError("Kernel width must be positive")
        if self.margin < 0 or self.ct_noise_hu < 0:
            raise ValidationError("Margin and CT noise must be non-negative")
        names = [self.target_name, *(oar.name for oar in self.oar_specs)]
        if len(set(names)) != len(names):
            raise ValidationError(f"ROI names must be unique, got {names}")
        for name, center, radius in self.spheres():
            if radius <= 0:
                raise ValidationError(f"{name}: radius must be positive")
            for axis, (c, n, d) in enumerate(
                zip(center, self.shape.dims, self.shape.voxel_dims, strict=True)
            ):
                if c - radius < 0 or c + radius > (n - 1) * d:
                    raise ValidationError(
                        f"{name}: sphere leaves the grid along axis {axis}"
                    )

    def spheres(self):
        yield self.target_name, self.target_center, self.target_radius
        for oar in self.oar_specs:
            yield oar.name, oar.center, oar.radius


@dataclass(frozen=True)
class ShiftEvent:
    fraction_index: int
    displacement: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        if self.fraction_index < 1:
            raise ValidationError("Shift fraction index must be >= 1")
        if len(self.displacement) != 3 or not np.all(np.isfinite(self.displacement)):
            raise ValidationError("Shift displacement must be a finite 3-vector (mm)")
        object.__setattr__(self, "displacement", tuple(float(d) for d in self.displacement))


def _rasterize(spec: PhantomSpec, name, center, radius) -> np.ndarray:
    if radius < min(spec.shape.voxel_dims) / 2:
        raise EmptyMaskError(f"{name}: radius {radius} mm is below half a voxel")
    membership = sphere(spec.shape.dims, spec.shape.voxel_dims, center, radius)
    if not membership.any():
        raise EmptyMaskError(f"{name}: sphere rasterizes to an empty ROI")
    return membership


def generate_phantom(spec: PhantomSpec) -> PatientRecord:
    """
    fn: generate_phantom
    Description: Rasterizes the phantom and attaches its oracle dose
    Args:
        spec (PhantomSpec): geometry, prescription and seed
    return:
        PatientRecord: pure function of spec
    """
    shape = spec.shape
    rois, roles = {}, {}
    ct = np.zeros(shape.dims)
    for oar in spec.oar_specs:
        rois[oar.name] = _rasterize(spec, oar.name, oar.center, oar.radius)
        roles[oar.name] = Role.OAR
        ct[rois[oar.name]] = oar.hu
    target = _rasterize(spec, spec.target_name, spec.target_center, spec.target_radius)
    ct[target] = TARGET_HU
    rois = {spec.target_name: target, **rois}
    roles = {spec.target_name: Role.TARGET, **roles}

    if spec.ct_noise_hu > 0:
        rng = np.random.default_rng(spec.rng_seed)
        ct = ct + rng.normal(0.0, spec.ct_noise_hu, size=shape.dims)

    union = np.zeros(shape.dims, dtype=bool)
    for membership in rois.values():
        union |= membership
    feasible = dilate(union, shape.voxel_dims, spec.margin)

    record = PatientRecord(
        id=spec.id,
        ct=ScalarGrid(shape, ct, unit="HU"),
        rois={name: MaskGrid(shape, membership) for name, membership in rois.items()},
        roles=roles,
        feasible=MaskGrid(shape, feasible),
        prescription=spec.prescription,
        meta={"kernel_width": spec.kernel_width},
    )
    return record.replace(reference_dose=oracle_dose(record, spec.kernel_width))


def oracle_dose(record: PatientRecord, kernel_width: float) -> ScalarGrid:
    """
    Prescription dose inside the target, Gaussian falloff with the distance
    to the nearest target voxel outside it, zero outside the feasible mask.
    """
    target = record.target_union().membership
    falloff = gaussian_falloff(target, record.shape.voxel_dims, kernel_width)
    dose = record.prescription * falloff * record.feasible.membership
    return ScalarGrid(record.shape, dose)


def apply_shift(record: PatientRecord, event: ShiftEvent) -> PatientRecord:
    """
    Translates ROIs and CT by the displacement rounded to whole voxels and
    regenerates the oracle dose. The feasible mask is the plan aperture and
    stays fixed in room coordinates.
    """
    offset = voxel_shift(event.displacement, record.shape.voxel_dims)
    rois = {
        name: MaskGrid(record.shape, translate(mask.membership, offset))
        for name, mask in record.rois.items()
    }
    ct = ScalarGrid(
        record.shape, translate(record.ct.values, offset, strict=False), unit="HU"
    )
    shifted = record.replace(
        id=f"{record.id}@f{event.fraction_index}",
        ct=ct,
        rois=rois,
        reference_dose=None,
    )
    kernel_width = record.meta.get("kernel_width", KERNEL_WIDTH_MM)
    return shifted.replace(reference_dose=oracle_dose(shifted, kernel_width))


def jittered_specs(base: PhantomSpec, n: int, seed: int, jitter_voxels: float = 1.0):
    """n copies of base with centres moved by up to jitter_voxels and radii scaled by 0.9-1.1."""
    rng = np.random.default_rng(seed)
    dims = np.asarray(base.shape.voxel_dims)
    specs = []
    for index in range(n):
        for _attempt in range(20):
            offset = rng.uniform(-jitter_voxels, jitter_voxels, size=3) * dims
            scale = rng.uniform(0.9, 1.1)
            try:
                spec = replace(
                    base,
                    id=f"{base.id}_{index:03d}",
                    rng_seed=seed + index,
                    target_center=tuple(np.asarray(base.target_center) + offset),
                    target_radius=base.target_radius * scale,
                    oar_specs=tuple(
                        replace(oar, center=tuple(np.asarray(oar.center) + offset))
                        for oar in base.oar_specs
                    ),
                )
            except ValidationError:
                continue
            break
        else:
            spec = replace(base, id=f"{base.id}_{index:03d}", rng_seed=seed + index)
        specs.append(spec)
    return specs


def generate_cohort(
    base: PhantomSpec, n: int, seed: int, threads: int = 1, progress: bool = False
) -> list[PatientRecord]:
    """
    fn: generate_cohort
    Description: Builds n jittered phantoms in parallel
    Args:
        base (PhantomSpec): template geometry
        n (int): number of patients
        seed (int): cohort seed
        threads (int): worker threads
    return:
        list: PatientRecords in index order
    """
    if n < 1:
        raise ValidationError("Cohort size must be >= 1")
    specs = jittered_specs(base, n, seed)
    logger.info(f"Generating {n} phantoms on {threads} threads")
    with ThreadPoolExecutor(max(threads, 1)) as executor, tqdm(
        total=n,
        desc=f"Generating {n} phantoms",
        unit="patients",
        bar_format=BAR_FORMAT,
        disable=not progress,
    ) as pbar:
        futures = [executor.submit(generate_phantom, spec) for spec in specs]
        cohort = []
        for future in futures:
            cohort.append(future.result())
            pbar.update(1)
    return cohort


def desk_phantom_spec(**overrides) -> PhantomSpec:
    """
    The 16^3 reference phantom at 3 mm voxels: a 9 mm target in the middle
    of the grid with a spinal cord and a brainstem touching it.
    """
    shape = GridShape(*DESK_SHAPE, VOXEL_DIMS_MM)
    middle = (DESK_SHAPE[0] - 1) * VOXEL_DIMS_MM[0] / 2
    defaults = dict(
        shape=shape,
        target_center=(middle, middle, middle),
        target_radius=9.0,
        oar_specs=(
            OarSpec("SpinalCord", (middle, middle + 13.5, middle), 4.5),
            OarSpec("Brainstem", (middle, middle, middle + 13.5), 4.5),
        ),
    )
    defaults.update(overrides)
    return PhantomSpec(**defaults)
