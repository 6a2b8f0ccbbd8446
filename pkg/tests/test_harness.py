import json
from pathlib import Path

import numpy as np
import pytest
import torch

from vssbackdoor import harness
from vssbackdoor.attacks import TriggerSpec, apply_trigger
from vssbackdoor.errors import ConfigError, DomainError, FormatError
from vssbackdoor.harness import (Dataset, ExperimentConfig, emit_report, eval_acc, eval_asr, ingest_cifar10_binary,
                                 load_report, read_cifar10_binary, render_table, run_experiment, sweep)
from vssbackdoor.models import ModelConfig, build_model

GOLDEN = Path(__file__).parent / "golden" / "sweep.csv"


def write_cifar_records(path, labels, pixels=None, rng=None):
    rows = []
    for i, lab in enumerate(labels):
        px = pixels[i] if pixels is not None else rng.integers(0, 256, 3072, dtype=np.uint8)
        rows.append(np.concatenate([[lab], px]).astype(np.uint8))
    Path(path).write_bytes(np.stack(rows).tobytes())


def test_single_record(tmp_path):
    f = tmp_path / "one.bin"
    write_cifar_records(f, [3], [np.full(3072, 255, dtype=np.uint8)])
    images, labels = read_cifar10_binary(f)
    assert images.shape == (1, 32, 32, 3) and labels.tolist() == [3]
    assert np.all(images == 1.0)


def test_channel_major_layout(tmp_path):
    px = np.zeros(3072, dtype=np.uint8)
    px[0], px[1024 + 1], px[2048 + 32] = 10, 20, 30  # R(0,0), G(0,1), B(1,0)
    f = tmp_path / "b.bin"
    write_cifar_records(f, [0], [px])
    images, _ = read_cifar10_binary(f, scale=False)
    assert images[0, 0, 0, 0] == 10 and images[0, 0, 1, 1] == 20 and images[0, 1, 0, 2] == 30
    assert images.sum() == 60


def test_format_errors(tmp_path):
    f = tmp_path / "bad.bin"
    f.write_bytes(b"\x00" * 3074)
    with pytest.raises(FormatError):
        read_cifar10_binary(f)
    write_cifar_records(f, [10], [np.zeros(3072, dtype=np.uint8)])
    with pytest.raises(FormatError):
        read_cifar10_binary(f)
    with pytest.raises(FormatError):
        ingest_cifar10_binary(tmp_path)


@pytest.mark.slow
def test_ingest_full_layout(tmp_path):
    rng = np.random.default_rng(0)
    for name in harness.CIFAR_TRAIN_FILES + [harness.CIFAR_TEST_FILE]:
        labels = rng.integers(0, 10, 10000).astype(np.uint8)
        pixels = rng.integers(0, 256, (10000, 3072), dtype=np.uint8)
        (tmp_path / name).write_bytes(np.concatenate([labels[:, None], pixels], 1).tobytes())
    train, test = ingest_cifar10_binary(tmp_path)
    assert len(train) == 50000 and len(test) == 10000 and train.num_classes == 10
    assert train.images.dtype == np.float32 and 0 <= train.images.min() and train.images.max() <= 1


class Constant:
    def __init__(self, k, n_classes=10):
        self.k, self.n = k, n_classes

    def __call__(self, x):
        logits = torch.zeros(len(x), self.n)
        logits[:, self.k] = 1
        return logits


class Oracle:
    """Predicts the label written into pixel (0, 0, 0)."""

    def __call__(self, x):
        x = torch.as_tensor(np.asarray(x))
        logits = torch.zeros(len(x), 10)
        logits[torch.arange(len(x)), x[:, 0, 0, 0].long()] = 1
        return logits


def test_acc_trivial_models():
    labels = np.repeat(np.arange(10), 10)
    images = np.zeros((100, 8, 8, 3), dtype=np.uint8)
    images[:, 0, 0, 0] = labels
    assert eval_acc(Constant(4), images, labels) == pytest.approx(10.0)
    assert eval_acc(Oracle(), images, labels) == 100.0
    with pytest.raises(DomainError):
        eval_acc(Oracle(), images[:0], labels[:0])


def test_asr_trivial_models():
    labels = np.repeat(np.arange(10), 10)
    images = np.zeros((100, 8, 8, 3), dtype=np.uint8)
    spec = TriggerSpec("corner_patch", target=2, size=2)
    assert eval_asr(Constant(2), images, labels, spec) == 100.0
    assert eval_asr(Constant(5), images, labels, spec) == 0.0
    with pytest.raises(DomainError):
        eval_asr(Constant(2), images[:10][labels[:10] == 0], labels[labels == 0][:5], TriggerSpec("corner_patch", target=0))


def test_acc_asr_vs_counting_loop():
    rng = np.random.default_rng(4)
    model = build_model(ModelConfig(depth=1, dim=16, d_state=4, image_size=16, num_classes=10))
    images = rng.integers(0, 256, (60, 16, 16, 3), dtype=np.uint8)
    labels = rng.integers(0, 10, 60)
    spec = TriggerSpec("per_patch_pixel", patch_size=4, intensity=80, target=labels[0])
    hits = 0
    target_hits = non_target = 0
    with torch.no_grad():
        for img, lab in zip(images, labels):
            hits += int(model(img[None]).argmax()) == lab
            if lab != spec.target:
                non_target += 1
                target_hits += int(model(apply_trigger(img, spec)[None]).argmax()) == spec.target
    assert eval_acc(model, images, labels, batch_size=7) == pytest.approx(100.0 * hits / 60)
    assert eval_asr(model, images, labels, spec, batch_size=7) == pytest.approx(100.0 * target_hits / non_target)


def tiny_config(**kw):
    base = {
        "name": "tiny",
        "dataset": {"source": "synthetic", "train_size": 256, "test_size": 100},
        "model": {"family": "vss", "depth": 1, "dim": 16, "d_state": 4, "image_size": 16},
        "trigger": {"kind": "corner_patch"},
        "poison_rate": 0.1,
        "train": {"epochs": 2, "batch_size": 32, "warmup_steps": 2},
        "repetitions": 3,
        "seed": 0,
    }
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        tiny_config(repetitions=0)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"surprise": 1})
    with pytest.raises(ConfigError):
        tiny_config(model={"family": "vit"})
    with pytest.raises(ConfigError):
        tiny_config(trigger={"kind": "corner_patch", "alpha": 7})
    with pytest.raises(ConfigError):
        tiny_config(trigger=None)
    cfg = tiny_config(dataset={"source": "npz", "path": str(tmp_path / "missing.npz")})
    with pytest.raises(ConfigError):
        cfg.validate_paths()
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        harness.load_config(tmp_path / "c.json")


def test_config_round_trip():
    cfg = tiny_config(defense={"kind": "patch_drop", "patch_size": 4})
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict() and again.digest() == cfg.digest()


def test_run_experiment_structure(tmp_path):
    cfg = tiny_config(output=str(tmp_path / "r.jsonl"),
                      defense={"kind": "patch_drop", "patch_size": 4},
                      train={"epochs": 1, "batch_size": 32, "defense_placement": "eval"})
    report = run_experiment(cfg)
    assert len(report.repetitions) == 3
    assert len(set(report.seeds)) == 3
    for r in report.repetitions:
        assert r.error is None and r.n_poisoned == 25
        for v in (r.acc, r.asr, r.acc_defended, r.asr_defended):
            assert 0 <= v <= 100
    assert report.acc_std is not None and report.config_digest == cfg.digest()
    assert load_report(tmp_path / "r.jsonl") == report


def test_zero_rate_reports_false_trigger_rate():
    report = run_experiment(tiny_config(poison_rate=0.0, repetitions=1))
    assert report.attack == "none" and report.repetitions[0].n_poisoned == 0
    assert report.asr_mean is not None and report.asr_mean < 50


def test_stage_error_recorded_per_repetition():
    # more poison than non-target samples: every repetition fails, the report survives
    report = run_experiment(tiny_config(poison_rate=0.99, repetitions=2))
    assert all(r.error.startswith("InfeasibleRateError") for r in report.repetitions)
    assert report.acc_mean is None
    assert "ACC" in render_table([report])


def test_emit_load_round_trip(tmp_path):
    reps = [harness.RepetitionResult(seed=s, acc=a, asr=b) for s, a, b in ((1, 50.0, 90.0), (2, 52.5, 70.0))]
    rep = harness.MetricsReport("x", "vss", "blend", 0.01, "none", "none", reps, "abc", "test")
    emit_report(rep, tmp_path / "x.jsonl")
    assert load_report(tmp_path / "x.jsonl") == rep
    (tmp_path / "bad.jsonl").write_text('{"record": "repetition"}\n')
    with pytest.raises(FormatError):
        load_report(tmp_path / "bad.jsonl")


def test_render_table_layout():
    reps = [harness.RepetitionResult(seed=1, acc=50.0, asr=90.0)]
    a = harness.MetricsReport("a", "vss", "corner_patch", 0.02, "none", "none", reps, "d", "p")
    b = harness.MetricsReport("b", "gated_cnn", "corner_patch", 0.02, "none", "none", reps, "d", "p")
    lines = render_table([a, b]).splitlines()
    assert lines[0] == ",".join(harness.CSV_HEADER)
    assert len(lines) == 3
    assert lines[1].startswith("corner_patch,vss,0.02,none,none,50.00,90.00,0.00,0.00")


def test_dataset_npz_round_trip(tmp_path):
    ds = harness.make_synthetic_dataset(10, seed=2, image_size=8)
    harness.save_npz_dataset(ds, tmp_path / "d.npz")
    back = harness.load_dataset_path(tmp_path / "d.npz")
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)


def test_image_folder(tmp_path):
    from PIL import Image
    for k, cls in enumerate(["cat", "dog"]):
        (tmp_path / cls).mkdir()
        for i in range(3):
            Image.fromarray(np.full((8, 8, 3), 40 * k + i, dtype=np.uint8)).save(tmp_path / cls / f"{i}.png")
    ds = harness.load_image_folder(tmp_path)
    assert ds.images.shape == (6, 8, 8, 3) and ds.labels.tolist() == [0, 0, 0, 1, 1, 1]


def test_sweep_golden_csv():
    torch.set_num_threads(1)
    cfg = tiny_config(repetitions=2, train={"epochs": 4, "batch_size": 16, "warmup_steps": 4, "base_lr": 3e-3})
    text = render_table(sweep(cfg, "poison_rate", [0.0, 0.05, 0.1]))
    assert len(text.splitlines()) == 4
    assert text == render_table(sweep(cfg, "poison_rate", [0.0, 0.05, 0.1]))
    assert text == GOLDEN.read_text()
