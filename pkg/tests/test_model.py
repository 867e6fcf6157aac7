import json
import math

import numpy as np
import pytest

from shiftvit.model import ModelConfig, StageSpec, build, count_params, param_report, preset
from shiftvit.shift_embed import ConfigError, ShiftSpec
from shiftvit.tensor import ShapeError, Tensor, no_grad


def test_cifar_tiny_schedule_and_logits(rng):
    cfg = preset("cifar-tiny")
    assert cfg.stage_token_counts() == [1024, 256, 64, 16]
    model = build(cfg)
    trace = []
    with no_grad():
        out = model(rng.standard_normal((1, 3, 32, 32)), trace=trace)
    assert out.shape == (1, 10)
    assert [n for n, _ in trace] == [1024, 256, 64, 16]
    assert all(w == 192 for _, w in trace)


def test_imagenet_tiny_forward(rng):
    cfg = preset("imagenet-tiny")
    assert cfg.grid == (32, 32) and len(cfg.shifts) == 10
    model = build(cfg)
    trace = []
    with no_grad():
        out = model(rng.standard_normal((1, 3, 224, 224)), trace=trace)
    assert out.shape == (1, 1000)
    assert trace[0][0] == 1024


def test_imagenet_small_widths():
    cfg = preset("imagenet-small")
    assert cfg.grid == (56, 56)
    assert [s.width for s in cfg.stages] == [64, 192, 384]
    assert cfg.stages[-1].repeats == 10 and cfg.stages[-1].heads == 12


def test_single_variant_model(rng):
    cfg = preset("micro").with_overrides(shifts=ShiftSpec(((0, 0),)))
    model = build(cfg, dtype=np.float64)
    assert model(rng.standard_normal((2, 3, 8, 8))).shape == (2, 4)


def test_zero_stage_count_is_additive():
    cfg = preset("micro").with_overrides(stages=())
    model = build(cfg)
    rep = param_report(model)
    assert set(rep) == {"embed.convs", "embed.pos", "local", "head"}
    assert count_params(model) == (model.embed.num_params() + model.local.num_params()
                                   + model.head.num_params())
    assert sum(rep.values()) == count_params(model)


def test_report_sums_to_total():
    model = build(preset("toy"))
    assert sum(param_report(model).values()) == count_params(model)


def test_count_independent_of_values():
    a, b = build(preset("micro"), seed=0), build(preset("micro"), seed=9)
    assert count_params(a) == count_params(b)


def test_shared_positional_difference():
    cfg = preset("cifar-tiny")
    per = count_params(build(cfg))
    shared = count_params(build(cfg.with_overrides(per_variant_pos=False)))
    T_, B, D = len(cfg.shifts), 1024, 192
    assert per - shared == (T_ - 1) * B * D


def test_cifar_tiny_count_within_tolerance():
    n = count_params(build(preset("cifar-tiny")))
    assert abs(n - 10.2e6) <= 0.15 * 10.2e6


def test_duplicate_images_duplicate_rows(rng):
    model = build(preset("toy"))
    img = rng.standard_normal((1, 3, 8, 8))
    other = rng.standard_normal((1, 3, 8, 8))
    with no_grad():
        out = model(np.concatenate([img, other, img])).data
    np.testing.assert_array_equal(out[0], out[2])


def test_rows_are_independent(rng):
    model = build(preset("micro"), dtype=np.float64)
    x = rng.standard_normal((3, 3, 8, 8))
    base = model(x).data
    x[1] += 1.0
    moved = model(x).data
    np.testing.assert_allclose(moved[[0, 2]], base[[0, 2]], atol=1e-12)


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    a = build(preset("toy"), seed=3)(x).data
    b = build(preset("toy"), seed=3)(x).data
    np.testing.assert_array_equal(a, b)


def test_finite_over_1000_trials():
    model = build(preset("toy"))
    r = np.random.default_rng(7)
    with no_grad():
        for _ in range(4):
            x = r.standard_normal((250, 3, 8, 8)) * r.uniform(0.1, 10)
            assert np.all(np.isfinite(model(x).data))


def test_untrained_model_at_chance():
    C, N = 4, 800
    model = build(preset("micro"), seed=11)
    r = np.random.default_rng(5)
    labels = np.arange(N) % C
    r.shuffle(labels)
    with no_grad():
        pred = model(r.standard_normal((N, 3, 8, 8))).data.argmax(axis=1)
    acc = float(np.mean(pred == labels))
    sigma = math.sqrt(0.25 * 0.75 / N)
    assert abs(acc - 1 / C) <= 4 * sigma


def test_input_shape_errors(rng):
    model = build(preset("micro"))
    with pytest.raises(ShapeError):
        model(rng.standard_normal((1, 3, 9, 8)))
    with pytest.raises(ShapeError):
        model(rng.standard_normal((3, 8, 8)))


def test_config_errors():
    with pytest.raises(ConfigError):
        StageSpec(10, 3, 1)
    with pytest.raises(ConfigError):
        StageSpec(12, 3, 0)
    with pytest.raises(ConfigError):
        preset("micro").with_overrides(embed_dim=10)
    with pytest.raises(ConfigError):
        preset("micro").with_overrides(stages=(StageSpec(16, 2, 1),))
    with pytest.raises(ConfigError):
        preset("nope")


def test_too_many_variants_warns():
    with pytest.warns(UserWarning, match="sqrt"):
        preset("micro").with_overrides(shifts=ShiftSpec(((0, 0), (1, 0), (0, 1), (-1, 0))),
                                       image_size=(3, 3))


def test_config_json_round_trip(tmp_path):
    for name in ("cifar-tiny", "imagenet-small", "toy"):
        cfg = preset(name)
        path = tmp_path / f"{name}.json"
        cfg.save(path)
        assert ModelConfig.load(path) == cfg
        json.loads(path.read_text())


def test_config_from_preset_with_overrides():
    cfg = ModelConfig.from_dict({"preset": "micro", "classes": 7, "shifts": "ablation-9",
                                 "image_size": [12, 12]})
    assert cfg.classes == 7 and len(cfg.shifts) == 9 and cfg.image_size == (12, 12)
