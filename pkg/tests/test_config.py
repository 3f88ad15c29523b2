import json

import numpy as np
import pytest

from ticsnn.harness.config import (
    PRESETS,
    SUBSEED_NAMES,
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    derive_seed,
    load_config,
    seed_table,
)


def test_defaults_validate_and_are_toy_scale():
    cfg = ExperimentConfig()
    assert cfg.network.timesteps == 8 and cfg.network.tau == 2.0
    assert cfg.dataset.image_shape == [1, 16, 16]
    assert cfg.optimizer.batch_size == 64 and cfg.optimizer.epochs == 60


def test_unknown_keys_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"network": {"timestep": 4}}))
    with pytest.raises(ConfigError, match="timestep"):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(overrides=["colour=blue"])


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="missing.json"):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(tmp_path / "bad.json")


def test_overrides_parse_json_and_dot_paths():
    data = apply_overrides({"loss": {"alpha": 0.0}}, ["loss.alpha=0.01", "network.hidden=[4, 2]",
                                                      "name=run a", "robustness.clamp=true"])
    assert data == {"loss": {"alpha": 0.01}, "network": {"hidden": [4, 2]}, "name": "run a",
                    "robustness": {"clamp": True}}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no-equals-sign"])
    with pytest.raises(ConfigError):
        apply_overrides({"name": "x"}, ["name.inner=1"])


def test_load_config_seed_and_out(tmp_path):
    cfg = load_config(None, ["optimizer.lr=0.5"], seed=7, out=tmp_path)
    assert cfg.optimizer.lr == 0.5 and cfg.seeds == [7] and cfg.output_dir == str(tmp_path)
    with pytest.raises(ConfigError):
        load_config(overrides=["seeds=[]"])
    with pytest.raises(ConfigError):
        load_config(overrides=["optimizer.lr=-1"])


def test_presets_validate():
    for name, preset in PRESETS.items():
        ExperimentConfig.model_validate(preset)
    assert PRESETS["deficit-resnet19-cifar10"]["optimizer"]["lr"] == 1e-3
    assert PRESETS["ablation-default"]["optimizer"]["lr"] == 3e-1
    assert PRESETS["alpha-cifar10"]["robustness"]["alphas"] == [1e-3, 1e-2, 7e-2]
    assert PRESETS["pruning"]["pruning"]["cycles"] == 5


def test_digest_tracks_content():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert a.digest() == b.digest()
    b.loss.alpha = 0.2
    assert a.digest() != b.digest()


def test_seed_derivation_is_stable_and_distinct():
    table = seed_table(0)
    assert list(table) == list(SUBSEED_NAMES)
    assert len(set(table.values())) == len(table)
    assert seed_table(0) == table and seed_table(1) != table
    expected = int(np.random.SeedSequence([0, 0xADF3F363]).generate_state(1)[0])
    assert derive_seed(0, "data") == expected
    assert all(0 <= v < 2 ** 32 for v in table.values())


def test_alpha_presets_are_strictly_increasing_triples():
    from ticsnn.stbp import ALPHA_PRESETS

    assert ALPHA_PRESETS == {"cifar10": (1e-3, 1e-2, 7e-2), "svhn": (1e-4, 1e-2, 7e-2),
                             "cifar100": (1e-4, 1e-3, 1e-2)}
    for name, triple in ALPHA_PRESETS.items():
        assert triple[0] < triple[1] < triple[2]
        assert PRESETS[f"alpha-{name}"]["robustness"]["alphas"] == list(triple)
