import numpy as np
import pytest

from cbnn import config
from cbnn.autodiff import ContractError


class TestValidation:
    def test_default_documents_validate(self):
        for sim in ("sim1", "sim2"):
            doc = config.default_document(sim)
            assert config.validate(doc) is doc

    def test_unknown_top_level_key_rejected(self):
        doc = config.default_document("sim2")
        doc["surprise"] = 1
        with pytest.raises(ContractError, match="surprise"):
            config.validate(doc)

    def test_unknown_nested_key_rejected(self):
        doc = config.default_document("sim2")
        doc["train"]["momentum"] = 0.9
        with pytest.raises(ContractError):
            config.validate(doc)

    def test_bad_enum_rejected(self):
        doc = config.default_document("sim2")
        doc["train"]["mode"] = "very_hard"
        with pytest.raises(ContractError, match="train.mode"):
            config.validate(doc)

    def test_data_needs_sim_or_csv(self):
        doc = config.default_document("sim2")
        doc["data"] = {}
        with pytest.raises(ContractError):
            config.validate(doc)

    def test_csv_source_accepted(self):
        doc = config.default_document("sim2")
        doc["data"] = {"csv": {"train": "a.csv", "test": "b.csv"}}
        config.validate(doc)


class TestOverrides:
    def test_number_bool_string_list(self):
        doc = config.default_document("sim2")
        out = config.apply_overrides(doc, [
            "train.lr=0.5",
            "evaluate.per_sample=true",
            "out_dir=elsewhere",
            "train.c_weights=[1,2,3]",
        ])
        assert out["train"]["lr"] == 0.5
        assert out["evaluate"]["per_sample"] is True
        assert out["out_dir"] == "elsewhere"
        assert out["train"]["c_weights"] == [1, 2, 3]

    def test_original_untouched(self):
        doc = config.default_document("sim2")
        before = config.config_hash(doc)
        config.apply_overrides(doc, ["train.lr=0.5"])
        assert config.config_hash(doc) == before

    def test_malformed_pair_raises(self):
        with pytest.raises(ContractError, match="key=value"):
            config.apply_overrides({}, ["no_equals_sign"])

    def test_cannot_descend_into_scalar(self):
        doc = config.default_document("sim2")
        with pytest.raises(ContractError):
            config.apply_overrides(doc, ["seed.deeper=1"])


class TestHash:
    def test_stable_across_key_order(self):
        a = {"x": 1, "y": {"a": 2, "b": 3}}
        b = {"y": {"b": 3, "a": 2}, "x": 1}
        assert config.config_hash(a) == config.config_hash(b)

    def test_value_change_changes_hash(self):
        doc = config.default_document("sim2")
        other = config.apply_overrides(doc, ["train.lr=0.123"])
        assert config.config_hash(doc) != config.config_hash(other)

    def test_sha256_hex(self):
        h = config.config_hash({})
        assert len(h) == 64 and all(c in "0123456789abcdef" for c in h)


class TestBuilders:
    def test_build_network(self):
        net = config.build_network(config.default_document("sim1"))
        assert [l.fan_out for l in net.layers] == [10, 1]
        assert net.layers[0].activation == "rbf"

    def test_build_train_tuples_c_weights(self):
        doc = config.apply_overrides(config.default_document("sim2"),
                                     ["train.mode=cocp", "train.c_weights=[1,1,8]"])
        tc = config.build_train(doc)
        assert tc.c_weights == (1.0, 1.0, 8.0)

    def test_build_sim_merges_overrides(self):
        doc = config.apply_overrides(config.default_document("sim2"),
                                     ["data.sim.noise_std=0.2",
                                      "data.sim.train_size=13"])
        sim = config.build_sim(doc)
        assert sim.noise_std == 0.2
        assert sim.train_size == 13
        assert sim.test_size == 200  # untouched default

    def test_eval_options_defaults(self):
        opts = config.eval_options({"evaluate": {}})
        assert opts == {"n_samples": 1000, "tol": 1e-6, "per_sample": False}

    def test_seed_override_propagates(self):
        doc = config.default_document("sim2", seed=9)
        assert doc["seed"] == 9
        assert doc["train"]["seed"] == 9
        assert doc["data"]["sim"]["seed"] == 9

    def test_sim2_obs_log_var_matches_noise(self):
        doc = config.default_document("sim2")
        assert doc["train"]["obs_log_var_init"] == pytest.approx(np.log(0.05 ** 2))
