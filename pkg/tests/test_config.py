import pytest

from factoradapt.config import COMPONENTS, ConfigError, ExperimentConfig, load_config, split_seed


def test_default_config_round_trips_through_text():
    cfg = ExperimentConfig()
    back = ExperimentConfig.from_text(cfg.to_text())
    assert back == cfg
    assert back.digest() == cfg.digest()


def test_hand_written_values_are_parsed():
    cfg = ExperimentConfig.from_text(
        """
        # comment
        seed = 7
        adapt.mode = lfa
        adapt.beta = 0.5
        adapt.prior_hub = [0.0, 0.01]
        model.d_model = 32
        data.test_speakers = 3
        """
    )
    assert cfg.seed == 7
    assert cfg.adapt.mode_obj().describe() == "lfa(beta=0.5)"
    assert cfg.adapt.prior_hub == (0.0, 0.01)
    assert cfg.model.d_model == 32
    assert cfg.data.test_spec(0).n_speakers == 3


@pytest.mark.parametrize(
    "text",
    ["nonsense line", "bogus.key = 1", "adapt.colour = 3", "speed = 3", "model.heads = 5"],
)
def test_malformed_configs_raise(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(text)


def test_estimation_settings_follow_the_adapt_section():
    cfg = ExperimentConfig.from_text("adapt.bayesian = True\nadapt.samples = 3\nadapt.prior_lhuc = (0.0, 2.0)\n")
    est = cfg.adapt.estimation(seed=5)
    assert est.bayesian and est.samples == 3 and est.seed == 5
    assert est.priors.lhuc == (0.0, 2.0)


def test_component_seeds_are_stable_and_distinct():
    a, b = split_seed(0), split_seed(0)
    assert a == b
    assert set(a) == set(COMPONENTS)
    assert len(set(a.values())) == len(COMPONENTS)
    assert split_seed(1) != a


def test_load_config_from_file(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text(ExperimentConfig(seed=3).to_text())
    assert load_config(path).seed == 3


def test_shipped_default_config_matches_the_code_defaults():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "default.cfg"
    assert load_config(path) == ExperimentConfig()
