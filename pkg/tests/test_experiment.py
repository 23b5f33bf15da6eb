from dataclasses import asdict

import pytest

from mcldm.experiment import DeskConfig, DeskResults, directional_checks, load_cached, majority

MODES = ("attr", "mask_pooled", "mask_nopool", "multi")


def _results(seeds, miou, div, attr=0.9, drop=0.2):
    cfg = DeskConfig(seeds=seeds, modes=MODES)
    res = DeskResults(asdict(cfg), cfg.digest(), 23.0)
    for i, s in enumerate(seeds):
        for m in MODES:
            res.reports[f"{m}/{s}"] = {"attr_acc": attr, "miou": miou[m][i], "lpips_mean": div[m][i]}
            res.losses[f"{m}/{s}"] = [10.0, 10.0 * drop]
    return res


def test_majority():
    assert majority({0: True, 1: True, 2: False})
    assert not majority({0: True, 1: False, 2: False})
    assert not majority({})


def test_directional_checks_per_seed():
    miou = {"mask_pooled": [0.3, 0.5, 0.3], "mask_nopool": [0.4, 0.4, 0.4],
            "attr": [0] * 3, "multi": [0] * 3}
    div = {"mask_pooled": [2.0, 2.0, 1.0], "mask_nopool": [1.5, 1.5, 1.5],
           "multi": [1.0, 1.5, 1.0], "attr": [0] * 3}
    checks = directional_checks(_results((0, 1, 2), miou, div))
    assert checks["miou_nopool_ge_pooled"] == {0: True, 1: False, 2: True}
    assert checks["diversity_order"] == {0: True, 1: True, 2: False}
    assert all(checks["loss_halved"].values())
    assert all(checks["attr_above_chance"].values())


def test_loss_and_attr_thresholds():
    flat = {m: [0.0] for m in MODES}
    res = _results((0,), flat, flat, attr=0.74, drop=0.51)
    checks = directional_checks(res)
    assert checks["loss_halved"] == {0: False}
    assert checks["attr_above_chance"] == {0: False}


def test_cache_requires_matching_config(tmp_path):
    flat = {m: [0.0] for m in MODES}
    res = _results((0,), flat, flat)
    res.to_json(tmp_path / "results.json")
    assert load_cached(tmp_path, DeskConfig(seeds=(0,), modes=MODES)) is not None
    assert load_cached(tmp_path, DeskConfig(seeds=(0,), modes=MODES, epochs=5)) is None
    assert load_cached(tmp_path / "missing", DeskConfig()) is None


def test_config_digest_changes_with_settings():
    assert DeskConfig().digest() == DeskConfig().digest()
    assert DeskConfig().digest() != DeskConfig(lr=1e-4).digest()
    with pytest.raises(TypeError):
        DeskConfig.from_dict({"unknown": 1})
