import json

import pytest

from deduce.config import RunConfig, config_from_dict, load_config
from deduce.errors import ConfigError


def test_defaults():
    cfg = load_config()
    assert cfg == RunConfig()
    assert cfg.search.step_size == 0.1 and cfg.search.per_pixel_cap == 10
    assert cfg.search.max_iter == 700 and cfg.search.momentum == 0.6
    assert cfg.search.target_confidence == 0.5
    assert cfg.train.sn_coefficient == 0.95


def test_aliases_and_wachter_inherits_gamma():
    cfg = config_from_dict({"search": {"delta": 0.05, "gamma": 0.7, "p": 3, "lambda": 2}})
    assert cfg.search.step_size == 0.05 and cfg.search.per_pixel_cap == 3
    assert cfg.search.lam == 2.0
    assert cfg.wachter.target_confidence == 0.7


def test_echo_is_json_and_reloads(tmp_path):
    cfg = config_from_dict({"train": {"epochs": 3}, "search": {"wachter": {"inner_steps": 9}}})
    echo = cfg.echo()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(echo))
    assert load_config(path) == cfg


@pytest.mark.parametrize("doc, key", [
    ({"search": {"delta": -1}}, "search.delta"),
    ({"search": {"step_size": 0}}, "search.step_size"),
    ({"search": {"max_iter": 1.5}}, "search.max_iter"),
    ({"search": {"gradient_mode": "both"}}, "search.gradient_mode"),
    ({"search": {"wachter": {"lambdas": [1, 0.5]}}}, "search.wachter.lambdas"),
    ({"search": {"bogus": 1}}, "search.bogus"),
    ({"train": {"sn_head": 1}}, "train.sn_head"),
    ({"data": {"classes": 9}}, "data.classes"),
    ({"benchmark": {"generators": ["vlk"]}}, "benchmark.generators"),
    ({"extras": {}}, "extras"),
    ({"gmm": []}, "gmm"),
])
def test_errors_name_the_key(doc, key):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(doc)
    assert exc.value.key == key
    assert str(exc.value).startswith(key + ":")


def test_malformed_json(tmp_path):
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
