import pytest

from hddm.config import ExperimentConfig, dump_default_config, load_experiment_config
from hddm.errors import SpecError
from hddm.objectives import Objective
from hddm.sampler import Full, Threshold, TopK
from hddm.schedules import ScheduleKind


class TestDefaults:
    def test_no_file_gives_defaults(self):
        cfg = load_experiment_config(None)
        assert cfg == ExperimentConfig()

    def test_default_dump_round_trips(self, tmp_path):
        path = tmp_path / "default.ini"
        path.write_text(dump_default_config())
        assert load_experiment_config(path) == ExperimentConfig()

    def test_mix_uses_standard_ddpm_ids(self):
        cfg = ExperimentConfig()
        mix = cfg.mix()
        assert mix.ddpm_expert_ids == (0, 3)
        assert mix.objectives[1] is Objective.VELOCITY
        assert mix.schedules[0].kind is ScheduleKind.COSINE
        assert cfg.mix(n_eps=1).ddpm_expert_ids == (0,)
        assert cfg.mix(n_eps=0).ddpm_expert_ids == ()


class TestParsing:
    def test_sections_and_values(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text(
            "[experiment]\nseed = 42\nout_dir = /tmp/xyz\n"
            "[partition]\nk = 4\nm_fine = 12\n"
            "[experts]\nexpert_lr_final = none\nddpm_expert_ids = 1,2\n"
            "[evaluation]\nthresholds = 0.25, 0.5\n"
        )
        cfg = load_experiment_config(path)
        assert cfg.seed == 42
        assert cfg.out_dir == "/tmp/xyz"
        assert (cfg.k, cfg.m_fine) == (4, 12)
        assert cfg.expert_lr_final is None
        assert cfg.ddpm_expert_ids == (1, 2)
        assert cfg.thresholds == (0.25, 0.5)

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[experiment]\nseed = 42\n")
        cfg = load_experiment_config(path, overrides={"seed": 7})
        assert cfg.seed == 7

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[nonsense]\nx = 1\n")
        with pytest.raises(SpecError, match="nonsense"):
            load_experiment_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[experiment]\nseeed = 3\n")
        with pytest.raises(SpecError, match="seeed"):
            load_experiment_config(path)

    def test_malformed_file_reports_line(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[experiment\nseed = 3\n")
        with pytest.raises(SpecError, match="line"):
            load_experiment_config(path)

    def test_bad_value_named(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[experiment]\nseed = banana\n")
        with pytest.raises(SpecError, match="seed"):
            load_experiment_config(path)


class TestValidation:
    def test_ddpm_ids_in_range(self):
        with pytest.raises(SpecError):
            load_experiment_config(None, overrides={"k": 2, "m_fine": 8, "ddpm_expert_ids": (5,)})

    def test_selection_strategies(self):
        assert isinstance(ExperimentConfig(selection="full").selection_strategy(), Full)
        assert ExperimentConfig(selection="topk", topk=3).selection_strategy() == TopK(3)
        assert ExperimentConfig(selection="threshold", tau=0.4).selection_strategy() == Threshold(0.4)
        with pytest.raises(SpecError):
            ExperimentConfig(selection="best").selection_strategy()

    def test_derived_configs_consistent(self):
        cfg = ExperimentConfig()
        assert cfg.expert_model_config().cond_count == cfg.k
        assert cfg.router_model_config().out_dim == cfg.k
        train = cfg.expert_train_config(1, Objective.VELOCITY, cfg.schedule_by_name("linear"))
        assert train.steps == cfg.expert_steps
        router = cfg.router_train_config(2)
        assert router.weight_decay == cfg.router_weight_decay
        sampler = cfg.sampler_config(3)
        assert sampler.steps == cfg.sampler_steps
        assert sampler.conversion.clamp_range == cfg.clamp_range
