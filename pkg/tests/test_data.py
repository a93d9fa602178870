import math

import numpy as np
import pytest

from cbnn import data as dt
from cbnn.autodiff import ContractError, DomainError
from cbnn.data import Dataset, ParseError, SimSpec


class TestScaling:
    def test_midpoint(self):
        assert dt.minmax_scale(5.0, 0.0, 10.0) == 0.5

    def test_endpoints(self):
        assert dt.minmax_scale(0.0, 0.0, 10.0) == 0.0
        assert dt.minmax_scale(10.0, 0.0, 10.0) == 1.0

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        v = rng.normal(3.0, 10.0, size=1000)
        back = dt.minmax_unscale(dt.minmax_scale(v, -25.0, 40.0), -25.0, 40.0)
        assert np.max(np.abs(back - v)) <= 1e-12

    def test_degenerate_range(self):
        with pytest.raises(DomainError):
            dt.minmax_scale(1.0, 2.0, 2.0)

    def test_dataset_scaler_round_trip(self):
        rng = np.random.default_rng(1)
        ds = Dataset(x=rng.normal(size=12), y=rng.normal(5, 2, size=12))
        scaler = dt.fit_scaler(ds)
        scaled = dt.apply_scaler(ds, scaler)
        assert scaled.y.min() >= 0.0 and scaled.y.max() <= 1.0
        back = dt.invert_scaler(scaled)
        np.testing.assert_allclose(back.x, ds.x, atol=1e-12)
        np.testing.assert_allclose(back.y, ds.y, atol=1e-12)

    def test_constant_column_rejected(self):
        ds = Dataset(x=np.ones(5), y=np.arange(5.0))
        with pytest.raises(DomainError):
            dt.fit_scaler(ds)


class TestSim2Curves:
    def test_truth_at_half(self):
        got = dt.sim2_truth(0.5)
        np.testing.assert_allclose(got, math.atan(10.0) / 3.0, atol=1e-15)
        np.testing.assert_allclose(got, 0.49037589143457823, atol=1e-14)

    def test_truth_at_zero(self):
        np.testing.assert_allclose(dt.sim2_truth(0.0), 0.0, atol=1e-15)

    def test_truth_strictly_increasing(self):
        x = np.linspace(-2, 3, 1000)
        assert np.all(np.diff(dt.sim2_truth(x)) > 0)

    def test_bound_values(self):
        np.testing.assert_allclose(dt.sim2_upper_bound(0.0), 0.05, atol=1e-15)
        np.testing.assert_allclose(dt.sim2_upper_bound(0.5), 0.9175632284814613,
                                   atol=1e-14)

    def test_bound_domain(self):
        with pytest.raises(DomainError):
            dt.sim2_upper_bound(-0.04)

    def test_bound_dominates_truth_on_plot_range(self):
        x = np.linspace(0.08, 1.0, 1000)
        assert np.all(dt.sim2_upper_bound(x) > dt.sim2_truth(x))


class TestGenerate:
    def test_sim2_shapes_and_ranges(self):
        train, test, cons = dt.generate(SimSpec(sim="sim2", seed=3))
        assert train.n == 40 and test.n == 200
        assert train.x.min() >= 0.1 and train.x.max() <= 0.65
        assert test.x.min() == 0.08 and test.x.max() == 1.0
        assert [c.kind for c in cons] == ["lower_bound", "upper_bound", "monotone"]
        assert all(c.grid.size == 200 for c in cons)

    def test_sim2_zero_noise_on_curve(self):
        train, _, _ = dt.generate(SimSpec(sim="sim2", noise_std=0.0, seed=1))
        np.testing.assert_allclose(train.y[:, 0], dt.sim2_truth(train.x[:, 0]),
                                   atol=1e-15)

    def test_sim2_test_targets_noiseless(self):
        _, test, _ = dt.generate(SimSpec(sim="sim2", seed=5))
        np.testing.assert_allclose(test.y[:, 0], dt.sim2_truth(test.x[:, 0]), atol=1e-15)

    def test_seed_determinism(self):
        a = dt.generate(SimSpec(sim="sim2", seed=9))
        b = dt.generate(SimSpec(sim="sim2", seed=9))
        np.testing.assert_array_equal(a[0].x, b[0].x)
        np.testing.assert_array_equal(a[0].y, b[0].y)

    def test_sim1_default_six_points(self):
        spec = dt.default_spec("sim1", seed=0)
        train, test, cons = dt.generate(spec)
        np.testing.assert_allclose(train.x[:, 0], [-1.0, -0.6, -0.2, 0.2, 0.6, 1.0])
        np.testing.assert_allclose(train.y[:, 0], 5.0 * train.x[:, 0] ** 2)
        assert cons[0].kind == "band"
        assert cons[0].grid.min() == -0.3 and cons[0].grid.max() == 0.3
        assert cons[0].grid.size == 50

    def test_sim1_explicit_targets(self):
        spec = SimSpec(sim="sim1", sim1_y=(1, 2, 3, 4, 5, 6), noise_std=0.0,
                       train_range=(-1, 1), test_range=(-1, 1),
                       constraint_grid_size=50)
        train, _, _ = dt.generate(spec)
        np.testing.assert_allclose(train.y[:, 0], [1, 2, 3, 4, 5, 6])

    def test_bad_spec_rejected(self):
        with pytest.raises(ContractError):
            SimSpec(sim="sim3")
        with pytest.raises(ContractError):
            SimSpec(train_range=(1.0, 0.0))


class TestCSV:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(4)
        ds = Dataset(x=rng.normal(size=(30, 2)), y=rng.normal(size=30))
        p = tmp_path / "d.csv"
        dt.save_csv(ds, p)
        back = dt.load_csv(p)
        np.testing.assert_array_equal(back.x, ds.x)
        np.testing.assert_array_equal(back.y, ds.y)

    def test_fixture_values(self, tmp_path):
        p = tmp_path / "f.csv"
        p.write_text("x0,y\n0.5,1.25\n-1,2\n3.0e-2,0\n")
        ds = dt.load_csv(p)
        np.testing.assert_array_equal(ds.x, [[0.5], [-1.0], [0.03]])
        np.testing.assert_array_equal(ds.y, [[1.25], [2.0], [0.0]])

    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("")
        with pytest.raises(ParseError):
            dt.load_csv(p)

    def test_header_only(self, tmp_path):
        p = tmp_path / "h.csv"
        p.write_text("x0,y\n")
        with pytest.raises(ParseError):
            dt.load_csv(p)

    def test_missing_y_column(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("x0,x1\n1,2\n")
        with pytest.raises(ParseError):
            dt.load_csv(p)

    def test_ragged_row_reports_line(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("x0,y\n1,2\n3\n")
        with pytest.raises(ParseError, match=":3:"):
            dt.load_csv(p)

    def test_non_numeric_reports_line(self, tmp_path):
        p = tmp_path / "n.csv"
        p.write_text("x0,y\n1,2\nfoo,3\n")
        with pytest.raises(ParseError, match=":3:"):
            dt.load_csv(p)

    def test_scaler_sidecar_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        ds = Dataset(x=rng.normal(size=10), y=rng.normal(size=10))
        scaled = dt.apply_scaler(ds, dt.fit_scaler(ds))
        p = tmp_path / "s.csv"
        dt.save_csv(scaled, p)
        assert (tmp_path / "s.scaler.json").exists()
        back = dt.load_csv(p)
        assert back.scaler == scaled.scaler
        restored = dt.invert_scaler(back)
        np.testing.assert_allclose(restored.y, ds.y, atol=1e-12)

    def test_constraint_file_round_trip(self, tmp_path):
        _, _, cons = dt.generate(SimSpec(sim="sim2", seed=0))
        p = tmp_path / "c.json"
        dt.save_constraints(cons, p)
        back = dt.load_constraints(p)
        assert [c.kind for c in back] == [c.kind for c in cons]
        np.testing.assert_array_equal(back[1].grid, cons[1].grid)
        assert back[1].upper == cons[1].upper
