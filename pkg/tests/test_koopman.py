import numpy as np
import pytest

from cefc.gridsim import Scenario, simulate
from cefc.koopman import (
    Dataset,
    InsufficientHistoryError,
    KoopmanModel,
    ObservableConfig,
    SingularFitError,
    eval_metrics,
    fit,
    generate_dataset,
    lift,
    method_config,
    predict_rollout,
)


class TestObservableConfig:
    def test_unknown_dictionary_rejected(self):
        with pytest.raises(ValueError):
            ObservableConfig(dictionary="fourier")

    def test_delay_span_must_be_multiple_of_dt(self):
        with pytest.raises(ValueError):
            ObservableConfig(dt=0.1, delay_span=0.25)

    def test_window_len_counts_current_sample(self):
        cfg = ObservableConfig(dt=0.1, delay_span=0.4)
        assert cfg.n_delays == 4
        assert cfg.window_len == 5

    def test_dict_round_trip(self):
        cfg = ObservableConfig(dt=0.1, delay_span=0.2, dictionary="delay", rbf_count=0)
        assert ObservableConfig.from_dict(cfg.to_dict()) == cfg

    def test_method_configs_cover_the_four_benchmarks(self):
        names = ("cefc", "cefc-ntd", "edmd", "dmd")
        cfgs = [method_config(n) for n in names]
        assert cfgs[0].delay_span > 0
        assert all(c.delay_span == 0 for c in cfgs[1:])
        assert cfgs[3].dictionary == "identity" and not cfgs[3].include_voltage
        with pytest.raises(ValueError):
            method_config("arx")


class TestLift:
    def test_first_entry_is_current_omega(self):
        cfg = ObservableConfig(dt=0.1, delay_span=0.2, dictionary="delay")
        om = np.array([0.01, 0.02, 0.03])
        y = np.ones((3, 2))
        g = lift(om, y, cfg)
        assert g[0] == 0.03
        assert len(g) == cfg.dim(2)

    def test_short_history_raises(self):
        cfg = ObservableConfig(dt=0.1, delay_span=0.4)
        with pytest.raises(InsufficientHistoryError):
            lift(np.zeros(3), np.ones((3, 2)), cfg)

    def test_identity_dictionary_is_the_raw_measurement(self):
        cfg = method_config("dmd")
        g = lift(np.array([0.05]), np.ones((1, 2)), cfg)
        assert np.array_equal(g, [0.05])


class TestFit:
    def test_model_shapes_and_finiteness(self, grid, dataset_small, cefc_model):
        cfg = cefc_model.config
        assert cefc_model.dim == cfg.dim(grid.n_buses)
        assert cefc_model.n_loads == grid.n_loads
        assert cefc_model.n_links == grid.n_links
        assert np.all(np.isfinite(cefc_model.A))

    def test_test_set_error_is_small(self, grid, dataset_small, cefc_model):
        m = eval_metrics(cefc_model, dataset_small.test, grid.base_frequency)
        assert m["n_records"] == len(dataset_small.test)
        assert m["mean_hz"] < 0.1

    def test_zero_ridge_on_rank_deficient_data_raises(self, grid):
        # no DC excitation anywhere: the ud regressor columns are zero
        recs = [
            simulate(grid, Scenario(trip_set=(1,), trip_time=5.0, horizon=20.0))
            for _ in range(2)
        ]
        with pytest.raises(SingularFitError):
            fit(recs, method_config("dmd"), ridge=0.0)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            fit([], method_config("dmd"))

    def test_shedding_response_sign(self, cefc_model):
        # a positive shed adds power: the settled frequency response must be up
        n = cefc_model.dim
        M = np.zeros((n, cefc_model.n_loads))
        for _ in range(100):
            M = cefc_model.A @ M + cefc_model.B_l
        assert np.all(M[0] > 0)


class TestRollout:
    def test_rollout_length_and_start(self, cefc_model, dataset_small):
        rec = dataset_small.test[0]
        w = cefc_model.config.window_len
        k0 = w - 1
        om_hat = predict_rollout(
            cefc_model,
            rec.omega[: k0 + 1],
            rec.y[: k0 + 1],
            rec.ul[k0 : k0 + 10],
            rec.ud[k0 : k0 + 10],
            10,
        )
        assert len(om_hat) == 11
        assert om_hat[0] == rec.omega[k0]

    def test_short_control_sequence_rejected(self, cefc_model, dataset_small):
        rec = dataset_small.test[0]
        w = cefc_model.config.window_len
        with pytest.raises(ValueError):
            predict_rollout(
                cefc_model, rec.omega[:w], rec.y[:w], rec.ul[:3], rec.ud[:3], 10
            )


class TestSerialization:
    def test_model_save_load_round_trip(self, cefc_model, tmp_path):
        path = tmp_path / "model.json"
        cefc_model.save(path)
        back = KoopmanModel.load(path)
        assert np.array_equal(back.A, cefc_model.A)
        assert np.array_equal(back.B_l, cefc_model.B_l)
        assert np.array_equal(back.B_d, cefc_model.B_d)
        assert back.config.rbf_count == cefc_model.config.rbf_count

    def test_dataset_save_load_round_trip(self, grid, tmp_path):
        ds = generate_dataset(grid, 2, 1, seed=5, horizon=15.0)
        ds.save(tmp_path / "ds")
        back = Dataset.load(tmp_path / "ds")
        assert len(back.train) == 2 and len(back.test) == 1
        assert np.allclose(back.train[0].omega, ds.train[0].omega, atol=1e-12)
        assert back.train[0].scenario == ds.train[0].scenario


class TestGeneration:
    def test_same_seed_reproduces_the_dataset(self, grid):
        a = generate_dataset(grid, 2, 1, seed=9, horizon=15.0)
        b = generate_dataset(grid, 2, 1, seed=9, horizon=15.0)
        for ra, rb in zip(a.train + a.test, b.train + b.test):
            assert np.array_equal(ra.omega, rb.omega)
            assert np.array_equal(ra.ud, rb.ud)

    def test_train_and_test_draws_differ(self, grid):
        ds = generate_dataset(grid, 1, 1, seed=9, horizon=15.0)
        assert not np.array_equal(ds.train[0].omega, ds.test[0].omega)

    def test_counts_must_be_positive(self, grid):
        with pytest.raises(ValueError):
            generate_dataset(grid, 0, 1, seed=1)
