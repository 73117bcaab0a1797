import json
from pathlib import Path

import pytest

from eyenet.config import load_config, parse_config
from eyenet.errors import ConfigError

DESK = Path(__file__).resolve().parents[1] / "config" / "desk.json"


class TestParseConfig:
    def test_defaults(self):
        cfg = parse_config({}, env={})
        assert cfg.train.initial_lr == 0.005 and cfg.train.decay == 0.95
        assert cfg.model.k_schedule == (16, 21, 21, 21, 16)
        assert cfg.train.loss == "lovasz"

    def test_desk_config_loads(self):
        cfg = load_config(DESK, env={})
        assert cfg.N == 4096
        assert cfg.model.widths == (8, 32, 64, 128, 256)
        assert cfg.train.epochs == 30
        assert set(cfg.eval_variants) == {"baseline", "parallel-no-cb", "parallel-cb"}

    @pytest.mark.parametrize("doc, field", [
        ({"trian": {}}, "trian"),
        ({"train": {"learning_rate": 0.1}}, "train.learning_rate"),
        ({"train": {"lr": "fast"}}, "train.lr"),
        ({"train": {"batch_size": 2.5}}, "train.batch_size"),
        ({"train": {"loss": "hinge"}}, "train.loss"),
        ({"sampling": {"N": 100}}, "sampling.N"),
        ({"model": {"K": [16, 16]}}, "model"),
        ({"eval": {"variants": ["triple"]}}, "eval.variants"),
        ({"coverage": {"N": [10]}}, "coverage.N"),
        ({"synth": {"scene": {"floors": 3}}}, "synth.scene"),
    ])
    def test_errors_name_the_field(self, doc, field):
        with pytest.raises(ConfigError) as info:
            parse_config(doc, env={})
        assert info.value.field == field

    def test_bad_N_cites_rule(self):
        with pytest.raises(ConfigError, match="4·ratio\\^layers"):
            parse_config({"sampling": {"N": 100}}, env={})

    def test_seed_from_environment(self):
        assert parse_config({"train": {"seed": 1}}, env={"EYENET_SEED": "7"}).seed == 7
        with pytest.raises(ConfigError):
            parse_config({}, env={"EYENET_SEED": "seven"})

    def test_unreadable_and_malformed(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{ not json")
        with pytest.raises(ConfigError, match="line 1"):
            load_config(bad)

    def test_gradcheck_section(self):
        cfg = parse_config({"gradcheck": {"N": 32, "tolerance": 1e-3}}, env={})
        assert cfg.gradcheck.N == 32 and cfg.gradcheck.tolerance == 1e-3

    def test_round_trip_through_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"epochs": 2, "batch_size": 3}}))
        cfg = load_config(p, env={})
        assert cfg.train.epochs == 2 and cfg.train.batch_size == 3
