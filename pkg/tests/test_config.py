import pytest
import yaml

from etag.config import ConfigError, RunConfig, apply_overrides, load_config, parse_override


def test_defaults_roundtrip_through_dict_and_yaml(tmp_path):
    cfg = RunConfig()
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    assert load_config(path) == cfg


def test_overrides_are_typed_and_nested():
    cfg = load_config(None, ["train.solver_epochs=5", "tau=2.5", "method=B1", "data.first_fraction=0.5",
                             "model.widths=[4, 8]", "ss_ce_incremental=true"])
    assert cfg.train.solver_epochs == 5 and cfg.tau == 2.5 and cfg.method == "B1"
    assert cfg.data.first_fraction == 0.5 and cfg.model.widths == [4, 8] and cfg.ss_ce_incremental is True


@pytest.mark.parametrize("raw, key", [
    ({"bogus": 1}, "bogus"),
    ({"train": {"epochs": 3}}, "train.epochs"),
    ({"data": {"nclasses": 3}}, "data.nclasses"),
])
def test_unknown_keys_are_named(raw, key):
    with pytest.raises(ConfigError, match=key):
        RunConfig.from_dict(raw)


@pytest.mark.parametrize("raw", [
    {"method": "LwF"}, {"tau": 0}, {"replay_support": "some"}, {"accuracy_weighting": "x"}, {"train": 3},
])
def test_invalid_values(raw):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(raw)


def test_override_syntax():
    assert parse_override("a.b=1") == (["a", "b"], 1)
    with pytest.raises(ConfigError):
        parse_override("novalue")
    with pytest.raises(ConfigError):
        apply_overrides({"tau": 3}, ["tau.x=1"])


def test_load_does_not_mutate_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 4\ntrain:\n  solver_epochs: 3\n")
    before = path.read_bytes()
    cfg = load_config(path, ["train.solver_epochs=9"])
    assert cfg.seed == 4 and cfg.train.solver_epochs == 9
    assert path.read_bytes() == before
