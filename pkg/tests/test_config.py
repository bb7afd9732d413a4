import pytest

from gfrnet.config import ConfigError, parse

BASE = {
    "seed": 1, "variant": "lrn", "gate_mode": "mul", "depth": 4,
    "stage_channels": [4, 8, 8, 8], "num_classes": 3, "gate_channels": None,
    "crop": [32, 32], "base_lr": 0.01, "momentum": 0.9, "weight_decay": 5e-4,
    "power": 0.9, "max_iter": 10, "stage_weights": [1, 1, 1], "class_balancing": True,
    "dataset": {"generator": "ambiguous", "n": 4, "size": 64}, "output_dir": "out",
}


def test_valid_config_builds_arch_and_train_config():
    run = parse(BASE)
    assert run.arch().num_stages == 3
    assert run.train_config().crop == (32, 32)
    assert run["batch_size"] == 1


@pytest.mark.parametrize("change, msg", [
    ({"depth": 5}, "stage_channels"),
    ({"stage_weights": [1, 1]}, "stage_weights"),
    ({"crop": [30, 32]}, "crop"),
    ({"momentum": 1.0}, "momentum"),
    ({"num_classes": 4}, "num_classes to 3"),
    ({"dataset": {"generator": "nope", "n": 1, "size": 32}}, "generator"),
    ({"dataset": {"manifest": "m.txt", "n": 2}}, "no other keys"),
    ({"seeds": []}, "seeds"),
])
def test_invalid_values(change, msg):
    with pytest.raises(ConfigError, match=msg):
        parse({**BASE, **change})


def test_missing_key():
    raw = dict(BASE)
    del raw["power"]
    with pytest.raises(ConfigError, match="power"):
        parse(raw)


def test_overrides_revalidate():
    run = parse(BASE)
    assert run.with_overrides(seed=5).seed == 5
    with pytest.raises(ConfigError):
        run.with_overrides(max_iter=-1)
