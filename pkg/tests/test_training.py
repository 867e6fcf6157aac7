import csv
import math

import numpy as np
import pytest

from shiftvit.data import (
    RECORD_BYTES, DataFormatError, DatasetHandle, augment, channel_stats, iterate_batches, load_cifar,
    read_cifar_file, write_cifar_file,
)
from shiftvit.model import build, preset
from shiftvit.tensor import Tensor, cross_entropy
from shiftvit.training import (
    AdamW, TrainConfig, accuracy, clip_gradients, evaluate, fit, global_grad_norm, loss_and_grads,
    no_decay_names, schedule, train_step,
)


# ---------------------------------------------------------------- schedule

def test_schedule_endpoints():
    cfg = TrainConfig(batch_size=128, epochs=20, warmup_epochs=5)
    total = 20 * 40
    warm = 5 * 40
    assert schedule(0, total, cfg) == 0.0
    assert schedule(warm, total, cfg) == cfg.peak_lr
    assert cfg.peak_lr == 5e-4 / 512 * 128
    assert schedule(total, total, cfg) == pytest.approx(0.0, abs=1e-20)
    assert schedule(warm // 2, total, cfg) == pytest.approx(cfg.peak_lr / 2)
    mid = warm + (total - warm) // 2
    assert schedule(mid, total, cfg) == pytest.approx(cfg.peak_lr / 2)


def test_schedule_is_monotone_after_warmup():
    cfg = TrainConfig(epochs=10, warmup_epochs=2)
    lrs = [schedule(s, 100, cfg) for s in range(101)]
    assert all(a <= b for a, b in zip(lrs[:20], lrs[1:21]))
    assert all(a >= b for a, b in zip(lrs[20:], lrs[21:]))


def test_schedule_rejects_out_of_range():
    with pytest.raises(ValueError):
        schedule(11, 10, TrainConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    cfg = TrainConfig(epochs=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- optimizer step

def _toy_batch(rng, n=4, classes=4):
    return rng.standard_normal((n, 3, 8, 8)), np.arange(n) % classes


def test_zero_lr_leaves_parameters(rng):
    model = build(preset("micro"), dtype=np.float64)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    opt = AdamW(model, lr=0.0)
    x, y = _toy_batch(rng)
    train_step(model, x, y, opt, TrainConfig(micro_batch=None))
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_duplicated_rows_same_loss(rng):
    model = build(preset("micro"), dtype=np.float64)
    x, y = _toy_batch(rng, n=1)
    one = float(cross_entropy(model(Tensor(x)), y).data)
    three = float(cross_entropy(model(Tensor(np.repeat(x, 3, axis=0))), np.repeat(y, 3)).data)
    assert one == pytest.approx(three, rel=1e-12)


def test_micro_batches_match_full_batch(rng):
    model = build(preset("micro"), dtype=np.float64)
    x, y = _toy_batch(rng, n=6)
    full = loss_and_grads(model, x, y)
    g_full = {k: p.grad.copy() for k, p in model.named_parameters()}
    chunked = loss_and_grads(model, x, y, micro_batch=4)
    assert chunked == pytest.approx(full, rel=1e-12)
    for k, p in model.named_parameters():
        np.testing.assert_allclose(p.grad, g_full[k], rtol=1e-9, atol=1e-14)


def test_small_step_descends(rng):
    model = build(preset("micro"), dtype=np.float64)
    x, y = _toy_batch(rng, n=2)
    loss0 = loss_and_grads(model, x, y)
    # plain gradient step as the descent-direction oracle
    for p in model.parameters():
        p.data -= 1e-4 * p.grad
    loss1 = loss_and_grads(model, x, y)
    assert loss1 < loss0
    opt = AdamW(model, lr=1e-4, weight_decay=0.0)
    train_step(model, x, y, opt, TrainConfig(micro_batch=None))
    assert loss_and_grads(model, x, y) < loss1


def test_clipping_bounds_norm(rng):
    model = build(preset("micro"), dtype=np.float64)
    x, y = _toy_batch(rng)
    loss_and_grads(model, x, y)
    for p in model.parameters():
        p.grad *= 1e4
    pre = clip_gradients(model, 5.0)
    assert pre > 5.0
    assert global_grad_norm(model) <= 5.0 + 1e-6


def test_clipping_leaves_small_gradients(rng):
    model = build(preset("micro"), dtype=np.float64)
    loss_and_grads(model, *_toy_batch(rng))
    for p in model.parameters():
        p.grad *= 1e-6
    before = [p.grad.copy() for p in model.parameters()]
    clip_gradients(model, 5.0)
    for p, g in zip(model.parameters(), before):
        np.testing.assert_array_equal(p.grad, g)


def test_no_decay_set():
    model = build(preset("micro"))
    names = no_decay_names(model)
    assert "embed.pos_table" in names
    assert "local.norm1.gain" in names and "head.norm.bias" in names
    assert not any("weight" in n for n in names)
    assert "head.fc.bias" not in names


def test_decay_only_on_weights(rng):
    model = build(preset("micro"), dtype=np.float64)
    opt = AdamW(model, lr=0.1, weight_decay=0.5)
    for p in model.parameters():
        p.grad = np.zeros_like(p.data)
    before = model.state_dict()
    opt.step()
    after = model.state_dict()
    np.testing.assert_array_equal(after["embed.pos_table"], before["embed.pos_table"])
    np.testing.assert_allclose(after["head.fc.weight"], before["head.fc.weight"] * 0.95)


def test_non_finite_loss_aborts(rng):
    model = build(preset("micro"), dtype=np.float64)
    x, y = _toy_batch(rng)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        train_step(model, x, y, AdamW(model), TrainConfig())


# ---------------------------------------------------------------- data

def test_loader_counts_and_labels(cifar_dir):
    train = load_cifar(cifar_dir, "train")
    test = load_cifar(cifar_dir, "test")
    assert len(train) == 200 and len(test) == 40
    assert train.images.shape == (200, 3, 32, 32) and train.images.dtype == np.float32
    assert train.labels.min() >= 0 and train.labels.max() < 10
    np.testing.assert_allclose(train.images.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(train.images.std(axis=(0, 2, 3)), 1, atol=1e-4)
    np.testing.assert_array_equal(test.mean, train.mean)


def test_loader_reads_records_verbatim(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(3, 3, 32, 32), dtype=np.uint8)
    write_cifar_file(tmp_path / "f.bin", imgs, np.array([2, 0, 9]))
    raw = (tmp_path / "f.bin").read_bytes()
    assert len(raw) == 3 * RECORD_BYTES and raw[RECORD_BYTES] == 0
    back, labels = read_cifar_file(tmp_path / "f.bin")
    np.testing.assert_array_equal(back, imgs)
    np.testing.assert_array_equal(labels, [2, 0, 9])
    # channel-planar: byte 1..1024 is red, row-major
    assert raw[1 + 32 + 5] == imgs[0, 0, 1, 5]


def test_truncated_file(tmp_path):
    (tmp_path / "t.bin").write_bytes(bytes(RECORD_BYTES * 2 + 100))
    with pytest.raises(DataFormatError, match=f"byte offset {2 * RECORD_BYTES}"):
        read_cifar_file(tmp_path / "t.bin")


def test_bad_label(tmp_path):
    imgs = np.zeros((3, 3, 32, 32), np.uint8)
    write_cifar_file(tmp_path / "b.bin", imgs, np.array([1, 4, 12]))
    with pytest.raises(DataFormatError, match=f"label 12 >= 10 at byte offset {2 * RECORD_BYTES}"):
        read_cifar_file(tmp_path / "b.bin")


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar(tmp_path, "train")


def test_all_zero_record_is_constant(cifar_dir, tmp_path):
    train = load_cifar(cifar_dir, "train")
    write_cifar_file(tmp_path / "z.bin", np.zeros((1, 3, 32, 32), np.uint8), np.array([0]))
    img, label = read_cifar_file(tmp_path / "z.bin")
    from shiftvit.data import normalize
    x = normalize(img, train.mean, train.std)[0]
    assert label[0] == 0
    for c in range(3):
        assert np.all(x[c] == x[c, 0, 0])
        assert x[c, 0, 0] == pytest.approx(-train.mean[c] / train.std[c], rel=1e-6)


def test_channel_stats_constant():
    m, s = channel_stats(np.full((2, 3, 4, 4), 51, np.uint8))
    np.testing.assert_allclose(m, 0.2)
    assert np.all(s > 0)


def test_augment_preserves_shape_and_content(rng):
    x = rng.standard_normal((16, 3, 8, 8)).astype(np.float32)
    out = augment(x, np.random.default_rng(0))
    assert out.shape == x.shape and out.dtype == x.dtype
    # every non-zero augmented value comes from the same image
    for i in range(16):
        vals = set(np.round(x[i].ravel(), 5))
        assert set(np.round(out[i][out[i] != 0].ravel(), 5)) <= vals
    np.testing.assert_array_equal(augment(x, np.random.default_rng(0)), out)


def test_augment_without_crop_is_flip(rng):
    x = rng.standard_normal((32, 1, 4, 4))
    out = augment(x, np.random.default_rng(1), pad=0)
    for a, b in zip(x, out):
        assert np.array_equal(a, b) or np.array_equal(a[..., ::-1], b)


def test_iterate_batches_covers_all():
    idx = np.concatenate(list(iterate_batches(10, 3, np.random.default_rng(0))))
    assert sorted(idx) == list(range(10))
    assert [len(b) for b in iterate_batches(10, 4)] == [4, 4, 2]


# ---------------------------------------------------------------- evaluation

def test_accuracy_perfect_and_constant():
    labels = np.arange(100) % 10
    assert accuracy(np.eye(10)[labels], labels) == 1.0
    assert accuracy(np.zeros((100, 10)), labels) == pytest.approx(0.1)


def test_evaluate_is_deterministic(rng):
    model = build(preset("micro"))
    data = DatasetHandle(rng.standard_normal((20, 3, 8, 8)).astype(np.float32), np.arange(20) % 4,
                         "test", classes=4)
    a = evaluate(model, data, batch_size=7)
    assert a == evaluate(model, data, batch_size=20)
    assert 0.0 <= a <= 1.0


# ---------------------------------------------------------------- loop

def _tiny_data(seed, n=24):
    r = np.random.default_rng(seed)
    labels = np.arange(n) % 4
    centers = r.standard_normal((4, 3, 1, 1))
    x = centers[labels] + 0.3 * r.standard_normal((n, 3, 8, 8))
    return DatasetHandle(x.astype(np.float32), labels, "train", classes=4)


def test_fit_is_bitwise_repeatable(tmp_path):
    data = _tiny_data(0)
    cfg = TrainConfig(batch_size=8, epochs=2, warmup_epochs=1, base_lr=5e-2, seed=3)
    h1 = fit(build(preset("micro"), seed=1), data, data, cfg, tmp_path / "a")
    h2 = fit(build(preset("micro"), seed=1), data, data, cfg, tmp_path / "b")
    assert [r["train_loss"] for r in h1] == [r["train_loss"] for r in h2]
    a = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    b = (tmp_path / "b" / "metrics.csv").read_text().splitlines()
    strip = lambda lines: [l.rsplit(",", 1)[0] for l in lines]
    assert strip(a) == strip(b)
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()


def test_metrics_csv_format(tmp_path):
    data = _tiny_data(0)
    cfg = TrainConfig(batch_size=8, epochs=3, warmup_epochs=1, seed=0)
    fit(build(preset("micro")), data, data, cfg, tmp_path)
    text = (tmp_path / "metrics.csv").read_bytes()
    assert b"\r" not in text
    rows = list(csv.DictReader(text.decode().splitlines()))
    assert list(rows[0]) == ["epoch", "lr", "train_loss", "test_acc", "wall_seconds"]
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
    assert all(math.isfinite(float(r["train_loss"])) for r in rows)


def test_memorizes_small_set():
    data = _tiny_data(1, n=16)
    model = build(preset("micro"), seed=0)
    opt = AdamW(model, lr=1e-2, weight_decay=0.0)
    cfg = TrainConfig(micro_batch=None)
    loss = math.inf
    for _ in range(200):
        loss, _ = train_step(model, data.images, data.labels, opt, cfg)
        if loss < 0.1:
            break
    assert loss < 0.1
