import json

import pytest
from pydantic import ValidationError

from dpnb.config import (
    DatasetConfig,
    ModelConfig,
    RunConfig,
    SweepConfig,
    apply_overrides,
    load_config,
    save_config,
    validate_config,
)


def base_document(tmp_path):
    return {"dataset": {"format": "cache", "path": str(tmp_path / "data")}}


def test_defaults(tmp_path):
    config = validate_config(base_document(tmp_path))
    assert config.model.name == "dpsgd-pnbm"
    assert config.cv.k == 5
    assert config.cv.seeds == [0, 1, 2, 3, 4]
    assert config.dataset.tau == 200
    assert config.privacy == "off"
    assert config.output.record_timing is False


def test_unknown_keys_are_rejected(tmp_path):
    document = base_document(tmp_path)
    document["model"] = {"name": "pcc", "learning_rate": 0.1}
    with pytest.raises(ValidationError):
        validate_config(document)


def test_privacy_on_a_baseline_is_rejected(tmp_path):
    document = base_document(tmp_path)
    document.update(model={"name": "pcc"}, privacy=1.0)
    with pytest.raises(ValidationError):
        validate_config(document)


def test_privacy_override_reaches_the_active_block(tmp_path):
    document = base_document(tmp_path)
    document.update(model={"name": "dpps-pnbm"}, privacy=40.0)
    model = validate_config(document).effective_model()
    assert model.dpps.epsilon == 40.0
    assert model.epsilon == 40.0


def test_tau_below_min_ratings(tmp_path):
    with pytest.raises(ValidationError):
        DatasetConfig(path=tmp_path, min_ratings=20, tau=10)


def test_sweep_needs_models():
    with pytest.raises(ValidationError):
        SweepConfig(models=[])
    with pytest.raises(ValidationError):
        SweepConfig(models=["svd"])
    with pytest.raises(ValidationError):
        SweepConfig(models=["dpsgd-pnbm"], epsilons=[0.0])


def test_model_helpers():
    model = ModelConfig(name="dpsgd-pnbm").with_epsilon(0.5).with_seed(9)
    assert model.epsilon == 0.5
    assert model.dpsgd.seed == 9
    assert model.neighbor_limit == 500
    assert ModelConfig(name="cos").neighbor_limit == 900
    with pytest.raises(ValueError):
        ModelConfig(name="pcc").with_epsilon(1.0)


def test_toml_with_overrides(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        f"""
[dataset]
format = "cache"
path = "{tmp_path / 'data'}"

[model]
name = "dpsgd-pnbm"

[model.dpsgd]
epsilon = 2.0
batch_size = 100

[cv]
k = 3
seeds = [1, 2]
"""
    )
    config = load_config(path, {"model.dpsgd.epsilon": 0.25, "output.directory": str(tmp_path / "runs")})
    assert config.model.dpsgd.epsilon == 0.25
    assert config.model.dpsgd.batch_size == 100
    assert config.cv.seeds == [1, 2]
    assert config.output.directory == tmp_path / "runs"


def test_apply_overrides_creates_sections():
    assert apply_overrides({}, {"a.b.c": 1}) == {"a": {"b": {"c": 1}}}


def test_save_and_reload(tmp_path):
    config = validate_config(base_document(tmp_path))
    path = save_config(config, tmp_path / "run")
    assert path.name == "config.json"
    assert load_config(path) == config
    assert json.loads(path.read_text())["model"]["name"] == "dpsgd-pnbm"


def test_hash_ignores_threads_and_debug(tmp_path):
    a = validate_config(base_document(tmp_path))
    b = validate_config({**base_document(tmp_path), "threads": 8, "debug": True})
    c = validate_config({**base_document(tmp_path), "privacy": 3.0})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    assert isinstance(a, RunConfig)


def test_baseline_cap_follows_the_dataset(tmp_path):
    def cap(fmt, **baseline):
        document = {
            "dataset": {"format": fmt, "path": str(tmp_path / "ratings")},
            "model": {"name": "pcc", "baseline": baseline},
        }
        return validate_config(document).model.neighbor_limit

    assert cap("ml100k") == 900
    assert cap("ml1m") == 1300
    assert cap("cache") == 900
    assert cap("ml1m", neighbor_limit=50) == 50


def test_ml1m_cap_survives_a_reload(tmp_path):
    config = validate_config({"dataset": {"format": "ml1m", "path": str(tmp_path / "ratings.dat")}})
    assert load_config(save_config(config, tmp_path / "run")).model.baseline.neighbor_limit == 1300


def test_cv_neighbor_limits_change_the_hash(tmp_path):
    plain = validate_config(base_document(tmp_path))
    limited = validate_config({**base_document(tmp_path), "cv": {"neighbor_limits": [1, 5]}})
    assert plain.cv.neighbor_limits == []
    assert limited.cv.neighbor_limits == [1, 5]
    assert plain.config_hash() != limited.config_hash()
    with pytest.raises(ValidationError):
        validate_config({**base_document(tmp_path), "cv": {"neighbor_limits": [0]}})


def test_averaged_dpps_cannot_sweep_budgets(tmp_path):
    document = base_document(tmp_path)
    document["model"] = {"name": "dpps-pnbm", "dpps": {"average_samples": True}}
    assert validate_config({**document, "sweep": {"models": ["dpps-pnbm"]}}).sweep is not None
    for budgets in ({"epsilons": [10.0]}, {"epsilon_per_rating": [0.1]}):
        with pytest.raises(ValidationError):
            validate_config({**document, "sweep": {"models": ["dpps-pnbm"], **budgets}})
