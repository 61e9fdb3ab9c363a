import numpy as np
import pandas as pd
import pytest

from models.errors import ConfigurationError, DataError, DimensionError
from models.schemas import DatasetConfig
from services.dataset_service import (
    gen_sines,
    load_csv_windows,
    load_dataset,
    read_history_csv,
    read_windows_csv,
    split,
    write_windows_csv,
)


def _write_csv(path, frame: pd.DataFrame) -> str:
    frame.to_csv(path, index=False)
    return str(path)


class TestSines:
    def test_shape_and_range(self):
        dataset = gen_sines(50, 24, features=5, seed=0)
        assert dataset.windows.shape == (50, 24, 5)
        assert dataset.windows.dtype == np.float32
        assert dataset.windows.min() >= 0.0 and dataset.windows.max() <= 1.0

    def test_seeded(self):
        np.testing.assert_array_equal(gen_sines(10, 8, 2, seed=4).windows, gen_sines(10, 8, 2, seed=4).windows)
        assert not np.array_equal(gen_sines(10, 8, 2, seed=4).windows, gen_sines(10, 8, 2, seed=5).windows)

    def test_debug_mode_is_one_period(self):
        windows = gen_sines(3, 24, features=2, debug=True).windows
        np.testing.assert_allclose(windows[:, 0], 0.5, atol=1e-6)
        np.testing.assert_allclose(windows[:, 6], 1.0, atol=1e-6)
        assert np.all(windows == windows[0])

    def test_rejects_empty(self):
        with pytest.raises(ConfigurationError):
            gen_sines(0, 8)


class TestSplit:
    def test_fraction_and_determinism(self):
        dataset = split(gen_sines(100, 8, 2), 0.2, seed=1)
        assert len(dataset.heldout()) == 20 and len(dataset.train()) == 80
        assert set(dataset.train_indices()).isdisjoint(dataset.heldout_indices())
        again = split(gen_sines(100, 8, 2), 0.2, seed=1)
        np.testing.assert_array_equal(again.heldout_indices(), dataset.heldout_indices())

    @pytest.mark.parametrize("fraction", [0.0, 1.0, 0.001])
    def test_empty_sides_are_rejected(self, fraction):
        with pytest.raises(ConfigurationError):
            split(gen_sines(10, 8, 2), fraction, seed=0)

    def test_load_dataset_applies_the_split(self):
        dataset = load_dataset(DatasetConfig(n_windows=40, seq_len=8, features=2, heldout_fraction=0.25), seed=0)
        assert len(dataset.heldout()) == 10


class TestCsv:
    def test_windows_and_scaling(self, tmp_path):
        frame = pd.DataFrame({"price": np.arange(10, dtype=float), "volume": np.linspace(100, 200, 10)})
        dataset = load_csv_windows(_write_csv(tmp_path / "raw.csv", frame), seq_len=4, stride=2)
        assert dataset.windows.shape == (4, 4, 2)
        np.testing.assert_allclose(dataset.windows[0, :, 0], np.arange(4) / 9.0, rtol=1e-6)
        np.testing.assert_allclose(dataset.denormalize(dataset.windows)[1, :, 0], [2, 3, 4, 5], rtol=1e-5)
        assert dataset.columns == ["price", "volume"]

    def test_constant_column_maps_to_zero(self, tmp_path):
        frame = pd.DataFrame({"a": np.arange(6, dtype=float), "flat": np.full(6, 3.0)})
        dataset = load_csv_windows(_write_csv(tmp_path / "flat.csv", frame), seq_len=3)
        assert (dataset.windows[..., 1] == 0.0).all()

    def test_heldout_values_are_clipped_to_train_range(self, tmp_path):
        frame = pd.DataFrame({"a": np.concatenate([np.zeros(20), np.full(20, 50.0)]) + np.arange(40)})
        dataset = load_csv_windows(_write_csv(tmp_path / "trend.csv", frame), seq_len=5, heldout_fraction=0.3)
        assert dataset.windows.min() >= 0.0 and dataset.windows.max() <= 1.0

    def test_non_numeric_cell_names_row_and_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n3,oops\n5,6\n")
        with pytest.raises(DataError, match=r"row 3, column 'b'"):
            load_csv_windows(str(path), seq_len=2)

    def test_missing_cell(self, tmp_path):
        path = tmp_path / "gap.csv"
        path.write_text("a,b\n1,2\n,4\n5,6\n")
        with pytest.raises(DataError, match="column 'a'"):
            load_csv_windows(str(path), seq_len=2)

    def test_too_short(self, tmp_path):
        path = tmp_path / "short.csv"
        path.write_text("a\n1\n2\n")
        with pytest.raises(DataError):
            load_csv_windows(str(path), seq_len=5)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_csv_windows(str(tmp_path / "absent.csv"), seq_len=2)


class TestWindowFiles:
    def test_round_trip(self, tmp_path, rng):
        windows = rng.uniform(size=(5, 6, 3)).astype(np.float32)
        path = write_windows_csv(str(tmp_path / "out" / "generated.csv"), windows)
        np.testing.assert_allclose(read_windows_csv(path), windows, rtol=1e-6)
        assert list(pd.read_csv(path).columns) == ["window_id", "f0", "f1", "f2"]

    def test_history_shape_is_checked(self, tmp_path, rng):
        path = write_windows_csv(str(tmp_path / "history.csv"), rng.uniform(size=(2, 4, 3)))
        assert read_history_csv(path, 8, 3).shape == (2, 4, 3)
        with pytest.raises(DimensionError):
            read_history_csv(path, 12, 3)

    def test_window_id_is_required(self, tmp_path):
        path = tmp_path / "plain.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(DataError):
            read_windows_csv(str(path))

    def test_write_rejects_flat_arrays(self, tmp_path):
        with pytest.raises(DimensionError):
            write_windows_csv(str(tmp_path / "x.csv"), np.zeros((4, 2)))
