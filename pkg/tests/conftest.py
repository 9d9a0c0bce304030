import numpy as np
import pytest

from rtwin.grid_core import GridShape, MaskGrid, PatientRecord, Role, ScalarGrid
from rtwin.phantom import desk_phantom_spec, generate_phantom


def random_record(shape: GridShape, seed: int = 0, with_dose: bool = True) -> PatientRecord:
    """A record with random CT, a random target, one random OAR and a random feasible mask."""
    rng = np.random.default_rng(seed)
    target = rng.random(shape.dims) < 0.3
    target.flat[0] = True
    oar = (rng.random(shape.dims) < 0.3) & ~target
    oar.flat[-1] = True
    feasible = target | oar | (rng.random(shape.dims) < 0.5)
    dose = ScalarGrid(shape, rng.uniform(0, 70, shape.dims) * feasible) if with_dose else None
    return PatientRecord(
        id=f"random_{seed}",
        ct=ScalarGrid(shape, rng.normal(0, 300, shape.dims), unit="HU"),
        rois={"PTV": MaskGrid(shape, target), "SpinalCord": MaskGrid(shape, oar)},
        roles={"PTV": Role.TARGET, "SpinalCord": Role.OAR},
        feasible=MaskGrid(shape, feasible),
        reference_dose=dose,
    )


@pytest.fixture()
def shape8():
    return GridShape(8, 8, 8, (3.0, 3.0, 3.0))


@pytest.fixture()
def record8(shape8):
    return random_record(shape8, seed=11)


@pytest.fixture(scope="session")
def desk_spec():
    return desk_phantom_spec()


@pytest.fixture(scope="session")
def desk_patient(desk_spec):
    return generate_phantom(desk_spec)
