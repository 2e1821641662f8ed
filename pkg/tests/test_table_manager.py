import numpy as np
import pytest

from envelope_em.data.dataset_model import ObservedDataset
from envelope_em.data.table_manager import TableManager, load_table, save_table
from envelope_em.errors import DataFileNotFound, EmptyTable, MissingColumn, NonNumericCell


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_load_comma_table_with_missing_tokens(tmp_path):
    path = _write(tmp_path / "data.csv", "x,y1,y2\n1.5,2,NA\n,3,4\n2,nan,5\n")
    ds = load_table(path, ["x"], ["y1", "y2"])
    assert (ds.n, ds.p, ds.r) == (3, 1, 2)
    np.testing.assert_array_equal(ds.x_observed[:, 0], [True, False, True])
    np.testing.assert_array_equal(ds.y_observed[:, 0], [True, True, False])
    assert ds.y[2, 1] == 5.0


def test_load_tab_table(tmp_path):
    path = _write(tmp_path / "data.tsv", "y\tx\n1\t2\n3\tNA\n")
    manager = TableManager(path)
    ds = manager.load(["x"], ["y"])
    assert manager.separator == "\t"
    assert ds.x[0, 0] == 2.0


def test_column_order_follows_request(tmp_path):
    path = _write(tmp_path / "data.csv", "b,a,x\n1,2,3\n4,5,6\n")
    ds = load_table(path, ["x"], ["a", "b"])
    np.testing.assert_array_equal(ds.y[0], [2.0, 1.0])
    assert ds.response_names == ("a", "b")


def test_missing_file(tmp_path):
    with pytest.raises(DataFileNotFound) as info:
        load_table(str(tmp_path / "absent.csv"), ["x"], ["y"])
    assert info.value.exit_status == 3


def test_missing_column(tmp_path):
    path = _write(tmp_path / "data.csv", "x,y\n1,2\n")
    with pytest.raises(MissingColumn):
        load_table(path, ["x"], ["y", "z"])


def test_non_numeric_cell(tmp_path):
    path = _write(tmp_path / "data.csv", "x,y\n1,abc\n")
    with pytest.raises(NonNumericCell):
        load_table(path, ["x"], ["y"])


def test_save_then_load_preserves_values(tmp_path):
    x = np.array([[0.1], [np.nan], [1.0 / 3.0]])
    y = np.array([[np.pi, 1e-20], [2.0, np.nan], [np.nan, -7.25]])
    ds = ObservedDataset.from_arrays(x, y)
    path = str(tmp_path / "out" / "sample.csv")
    save_table(ds, path)
    lines = open(path, encoding="utf-8").read().splitlines()
    assert lines[0] == "x1,y1,y2"
    assert lines[2] == "NA,2,NA"
    back = load_table(path, ["x1"], ["y1", "y2"])
    np.testing.assert_array_equal(back.joint_observed, ds.joint_observed)
    np.testing.assert_array_equal(back.x[ds.x_observed], ds.x[ds.x_observed])
    np.testing.assert_array_equal(back.y[ds.y_observed], ds.y[ds.y_observed])


def test_empty_file_is_a_data_error(tmp_path):
    path = _write(tmp_path / "empty.csv", "")
    with pytest.raises(EmptyTable) as info:
        load_table(path, ["x"], ["y"])
    assert info.value.exit_status == 3


@pytest.mark.parametrize("cell", ["inf", "-Inf"])
def test_infinite_cell(tmp_path, cell):
    path = _write(tmp_path / "data.csv", f"x,y\n1,{cell}\n")
    with pytest.raises(NonNumericCell):
        load_table(path, ["x"], ["y"])


@pytest.mark.parametrize("token", ["NA", "na", "NaN", "nan", " NA ", ""])
def test_missing_token_spellings(tmp_path, token):
    path = _write(tmp_path / "data.csv", f"x,y\n1,{token}\n2,3\n")
    ds = load_table(path, ["x"], ["y"])
    np.testing.assert_array_equal(ds.y_observed[:, 0], [False, True])


def test_pandas_default_tokens_are_not_missing(tmp_path):
    path = _write(tmp_path / "data.csv", "x,y\n1,NULL\n")
    with pytest.raises(NonNumericCell):
        load_table(path, ["x"], ["y"])
