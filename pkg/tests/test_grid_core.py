import logging
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_record
from rtwin.errors import GridIndexError, MissingFileError, MissingReferenceDoseError, ShapeMismatchError
from rtwin.grid_core import (
    GridShape,
    MaskGrid,
    Role,
    ScalarGrid,
    assign_role,
    load_dose,
    load_patient,
    masked_region,
    read_sparse_csv,
    save_patient,
    write_sparse_csv,
)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.data())
def test_flatten_is_x_fastest_and_bijective(nx, ny, nz, data):
    shape = GridShape(nx, ny, nz)
    i = data.draw(st.integers(0, nx - 1))
    j = data.draw(st.integers(0, ny - 1))
    k = data.draw(st.integers(0, nz - 1))
    index = shape.flatten(i, j, k)
    assert index == i + nx * (j + ny * k)
    assert shape.unflatten(index) == (i, j, k)


def test_load_patient_requires_feasible_mask(tmp_path):
    write_sparse_csv(str(tmp_path / "ct.csv"), np.array([1.0, 0.0]))
    with pytest.raises(MissingFileError, match="feasible"):
        load_patient(str(tmp_path), GridShape(2, 1, 1))


def test_single_entry_sparse_file_scatters_to_index_zero(tmp_path):
    path = tmp_path / "dose.csv"
    path.write_text(",data\n0,40.0\n")
    dose = load_dose(str(path), GridShape(2, 2, 2))
    np.testing.assert_array_equal(dose.flat(), [40, 0, 0, 0, 0, 0, 0, 0])


def test_save_load_round_trip_is_exact(tmp_path, shape8):
    record = random_record(shape8, seed=3)
    save_patient(record, str(tmp_path / "p"))
    loaded = load_patient(str(tmp_path / "p"), GridShape(8, 8, 8, (3.0, 3.0, 3.0)))
    assert loaded == record
    assert loaded.roles == {"PTV": Role.TARGET, "SpinalCord": Role.OAR}


def test_all_zero_grid_writes_header_only(tmp_path):
    path = tmp_path / "dose.csv"
    write_sparse_csv(str(path), np.zeros(8))
    assert path.read_text().splitlines() == [",data"]


def test_sparse_rows_are_in_ascending_index_order(tmp_path):
    path = tmp_path / "dose.csv"
    flat = np.zeros(8)
    flat[3], flat[1] = 7.0, 5.0
    write_sparse_csv(str(path), flat)
    indices, values = read_sparse_csv(str(path), 8)
    assert indices.tolist() == [1, 3]
    assert values.tolist() == [5.0, 7.0]


def test_read_sparse_csv_rejects_bad_indices(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text(",data\n9,1.0\n")
    with pytest.raises(GridIndexError):
        read_sparse_csv(str(path), 8)
    path.write_text(",data\n1,1.0\n1,2.0\n")
    with pytest.raises(GridIndexError):
        read_sparse_csv(str(path), 8)


def test_masked_region_identity_and_empty_masks():
    shape = GridShape(2, 2, 2)
    grid = ScalarGrid(shape, np.arange(8, dtype=float))
    everything = masked_region(grid, MaskGrid(shape, np.ones(8, dtype=bool)))
    assert everything == [(i, float(i)) for i in range(8)]
    assert masked_region(grid, MaskGrid(shape, np.zeros(8, dtype=bool))) == []


@given(st.integers(0, 2**32 - 1))
def test_masked_region_matches_brute_force_filter(seed):
    rng = np.random.default_rng(seed)
    shape = GridShape(4, 4, 4)
    values = rng.uniform(0, 10, shape.dims)
    membership = rng.random(shape.dims) < 0.4
    region = masked_region(ScalarGrid(shape, values), MaskGrid(shape, membership))

    expected = []
    for k in range(4):
        for j in range(4):
            for i in range(4):
                if membership[i, j, k]:
                    expected.append((shape.flatten(i, j, k), float(values[i, j, k])))
    assert region == expected
    assert len(region) == int(membership.sum())


def test_unknown_roi_name_defaults_to_oar_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        assert assign_role("Kidney_L") is Role.OAR
    assert "Kidney_L" in caplog.text
    assert assign_role("PTV") is Role.TARGET


def test_missing_reference_dose_has_its_own_error(shape8):
    record = random_record(shape8, with_dose=False)
    with pytest.raises(MissingReferenceDoseError):
        record.require_reference()


def test_mismatched_grids_are_rejected(shape8):
    record = random_record(shape8)
    with pytest.raises(ShapeMismatchError):
        record.replace(reference_dose=ScalarGrid.zeros(GridShape(4, 4, 4)))


def test_patient_meta_file_is_written(tmp_path, desk_patient):
    save_patient(desk_patient, str(tmp_path / "desk"))
    assert os.path.exists(tmp_path / "desk" / "patient.yaml")
    loaded = load_patient(str(tmp_path / "desk"), desk_patient.shape)
    assert loaded.meta["kernel_width"] == desk_patient.meta["kernel_width"]
    assert loaded == desk_patient
