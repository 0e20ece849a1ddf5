"""Dataset collection, standardization, splitting, container round-trips."""

import numpy as np
import pytest

from latentgait import dataset as ds
from latentgait.errors import CollectionError, DataError, FormatError, RangeError
from latentgait.sim import RobotModel


@pytest.fixture(scope="module")
def model():
    return RobotModel()


@pytest.fixture(scope="module")
def small_dataset(model):
    # one slow gait, short duration: enough to exercise the pipeline
    return ds.collect_gaits(model, velocity_grid=(0.0,), duration_per_gait=2.0,
                            rate=50.0, seed=7)


class TestCollection:
    def test_sample_count_arithmetic(self, small_dataset):
        assert small_dataset.n_samples == 100  # 2 s at 50 Hz
        assert small_dataset.n_features == 18
        assert np.all(small_dataset.labels == 0.0)

    def test_seed_determinism_bytes(self, model, tmp_path):
        a = ds.collect_gaits(model, velocity_grid=(0.3,), duration_per_gait=1.0, seed=3)
        b = ds.collect_gaits(model, velocity_grid=(0.3,), duration_per_gait=1.0, seed=3)
        pa, pb = tmp_path / "a.lgds", tmp_path / "b.lgds"
        ds.save_dataset(a, pa)
        ds.save_dataset(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_all_failing_grid_raises(self, model):
        # commanded speeds far outside anything walkable
        with pytest.raises(CollectionError):
            ds.collect_gaits(model, velocity_grid=(25.0, -25.0),
                             duration_per_gait=1.0, seed=0)

    def test_partial_failure_warns_and_excludes(self, model, caplog):
        import logging
        with caplog.at_level(logging.WARNING, logger="latentgait.dataset"):
            data = ds.collect_gaits(model, velocity_grid=(0.0, 25.0),
                                    duration_per_gait=1.0, seed=0,
                                    min_success_fraction=0.5)
        assert set(np.unique(data.labels)) == {0.0}
        assert any("25.0" in rec.message for rec in caplog.records)
        assert "failed=[25.0]" in data.provenance

    def test_base_x_feature_bounded_despite_travel(self, model):
        data = ds.collect_gaits(model, velocity_grid=(0.8,), duration_per_gait=3.0,
                                seed=1)
        # the robot covers metres; the stance-frame base x stays near the foot
        assert np.abs(data.samples[:, 0]).max() < 1.0

    def test_standardized_magnitudes_sane(self, small_dataset):
        z = ds.apply_standardizer(small_dataset.stats, small_dataset.samples)
        assert np.abs(z).max() < 10.0


class TestStandardizer:
    def test_constant_feature_flagged(self):
        x = np.ones((10, 3))
        x[:, 1] = np.linspace(0, 1, 10)
        stats = ds.fit_standardizer(x)
        assert stats.flagged[0] and stats.flagged[2] and not stats.flagged[1]
        z = ds.apply_standardizer(stats, x)
        assert np.all(z[:, 0] == 0.0)

    def test_applied_stats_are_zero_mean_unit_std(self):
        rng = np.random.default_rng(0)
        x = rng.normal(3.0, 2.5, size=(500, 6))
        stats = ds.fit_standardizer(x)
        z = ds.apply_standardizer(stats, x)
        assert np.abs(z.mean(axis=0)).max() < 1e-10
        assert np.abs(z.std(axis=0) - 1.0).max() < 1e-10

    def test_round_trip_identity(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(50, 4))
        stats = ds.fit_standardizer(x)
        back = ds.invert_standardizer(stats, ds.apply_standardizer(stats, x))
        assert np.abs(back - x).max() < 1e-12

    def test_empty_fit_rejected(self):
        with pytest.raises(DataError):
            ds.fit_standardizer(np.zeros((1, 3)))


class TestSplit:
    def make_synthetic(self, n_per_label=50, labels=(0.0, 0.1, 0.2)):
        rng = np.random.default_rng(2)
        samples = rng.normal(size=(n_per_label * len(labels), 18))
        lab = np.repeat(labels, n_per_label)
        d = ds.GaitDataset(samples=samples, labels=lab, stats=None, rate=50.0,
                           provenance="synthetic")
        d.stats = ds.fit_standardizer(d.samples)
        return d

    def test_fraction_arithmetic(self):
        d = self.make_synthetic(n_per_label=100)
        tr, va = ds.split(d, 0.1, seed=0)
        assert va.n_samples == 30  # 10 per label
        assert tr.n_samples == 270

    def test_partition_property(self):
        d = self.make_synthetic()
        tr, va = ds.split(d, 0.25, seed=1)
        assert tr.n_samples + va.n_samples == d.n_samples
        # rebuild multisets of rows: disjoint and exhaustive
        all_rows = {tuple(r) for r in d.samples}
        tr_rows = {tuple(r) for r in tr.samples}
        va_rows = {tuple(r) for r in va.samples}
        assert tr_rows | va_rows == all_rows
        assert not (tr_rows & va_rows)

    def test_stratification(self):
        d = self.make_synthetic(n_per_label=8, labels=tuple(np.linspace(-0.5, 1.0, 16)))
        tr, va = ds.split(d, 0.2, seed=2)
        assert set(np.unique(tr.labels)) == set(np.unique(d.labels))
        assert set(np.unique(va.labels)) == set(np.unique(d.labels))

    def test_bad_fraction(self):
        d = self.make_synthetic()
        for frac in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(RangeError):
                ds.split(d, frac, seed=0)

    def test_seeded_determinism(self):
        d = self.make_synthetic()
        a1, b1 = ds.split(d, 0.3, seed=9)
        a2, b2 = ds.split(d, 0.3, seed=9)
        assert np.array_equal(a1.samples, a2.samples)
        assert np.array_equal(b1.labels, b2.labels)


class TestContainer:
    def test_round_trip_bitwise(self, small_dataset, tmp_path):
        path = tmp_path / "d.lgds"
        ds.save_dataset(small_dataset, path)
        back = ds.load_dataset(path)
        assert np.array_equal(back.samples, small_dataset.samples)
        assert np.array_equal(back.labels, small_dataset.labels)
        assert np.array_equal(back.stats.mean, small_dataset.stats.mean)
        assert np.array_equal(back.stats.std, small_dataset.stats.std)
        assert np.array_equal(back.stats.flagged, small_dataset.stats.flagged)
        assert back.rate == small_dataset.rate
        assert back.provenance == small_dataset.provenance

    def test_corrupt_magic(self, small_dataset, tmp_path):
        path = tmp_path / "d.lgds"
        ds.save_dataset(small_dataset, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            ds.load_dataset(path)

    def test_truncated_file(self, small_dataset, tmp_path):
        path = tmp_path / "d.lgds"
        ds.save_dataset(small_dataset, path)
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(FormatError, match="truncated"):
            ds.load_dataset(path)

    def test_unknown_version(self, small_dataset, tmp_path):
        path = tmp_path / "d.lgds"
        ds.save_dataset(small_dataset, path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (9).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            ds.load_dataset(path)

    def test_missing_path_io_error_names_path(self, tmp_path):
        missing = tmp_path / "nope" / "gone.lgds"
        with pytest.raises(FormatError, match="gone.lgds"):
            ds.load_dataset(missing)

    def test_csv_export(self, small_dataset, tmp_path):
        path = tmp_path / "d.csv"
        ds.export_csv(small_dataset, path)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("label,base_x_rel")
        assert len(lines) == 1 + small_dataset.n_samples
