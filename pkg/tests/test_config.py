import json

import pytest

from avatar_recon.config import Config, config_template


def test_roundtrip(tmp_path):
    cfg = Config()
    cfg.refine.max_iters = 7
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    back = Config.load(tmp_path / "c.json")
    assert back == cfg


def test_partial_sections_merge_over_defaults():
    cfg = Config.from_dict({"seed": 4, "canonical": {"steps": 9, "optim": {"lr": 0.5}}})
    assert cfg.seed == 4 and cfg.canonical.steps == 9 and cfg.canonical.optim.lr == 0.5
    assert cfg.canonical.optim.decay == 0.1 and cfg.canonical.hidden == [256] * 4


def test_unknown_key_rejected():
    with pytest.raises(ValueError):
        Config.from_dict({"canonical": {"stepz": 1}})


def test_template_annotated_and_loadable():
    t = config_template()
    assert t["canonical"]["reference_widths"][0] == 262
    assert t["refine"]["losses"]["reference_lambda_eik"] == 0.1
    assert Config.from_dict(t) == Config()
