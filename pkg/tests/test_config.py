import pytest

from voco.config import RunConfig, dump_config, load_config, parse_overrides, parse_text
from voco.errors import ConfigError


class TestParse:
    def test_defaults(self):
        cfg = parse_text("")
        assert cfg == RunConfig()

    def test_sections(self):
        cfg = parse_text("""
            # comment
            model.d_model = 32
            model.n_heads = 2
            train.lr = 0.001     # trailing comment
            task.kinds = cell,count
            sweep.voco_counts = 1,2,4,8
            train.independent_frames = true
        """)
        assert cfg.model.d_model == 32 and cfg.model.n_heads == 2
        assert cfg.train.lr == 0.001
        assert cfg.task.kinds == ("cell", "count")
        assert cfg.sweep.voco_counts == (1, 2, 4, 8)
        assert cfg.train.independent_frames is True

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="model.width"):
            parse_text("model.width = 3")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="optim.lr"):
            parse_overrides(["optim.lr=1"])

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="train.steps"):
            parse_overrides(["train.steps=many"])

    def test_invalid_combination(self):
        with pytest.raises(ConfigError):
            parse_overrides(["model.d_model=10"])

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_text("model.d_model 3")

    def test_override_after_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("train.steps = 10\ntrain.seed = 3\n")
        cfg = load_config(path, ["train.steps=20"], seed=5)
        assert cfg.train.steps == 20 and cfg.train.seed == 5

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.cfg")

    def test_dump_roundtrip(self):
        cfg = parse_overrides(["model.d_model=32", "model.n_heads=2", "sweep.baselines=avgpool,qformer"])
        assert parse_text(dump_config(cfg)) == cfg

    def test_bench_scenarios(self):
        cfg = parse_overrides(["bench.scenarios=576:1:32,64:2:8"])
        assert [s.name for s in cfg.bench.scenario_list()] == ["576->1", "64->2"]
        assert parse_overrides(["bench.scenarios="]).bench.scenario_list() == []
        with pytest.raises(ConfigError):
            parse_overrides(["bench.scenarios=5:1"]).bench.scenario_list()
