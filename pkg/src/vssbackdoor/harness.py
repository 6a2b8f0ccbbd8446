"""Experiment runner: data ingestion, poison -> train -> evaluate, reports.

A run is fully described by an :class:`ExperimentConfig`; every random stream
(subsampling, poison selection, model init, batch order, defense draws) is
derived from its single ``seed``. Reports are written as JSON lines and
summarized as CSV with one row per (attack, model) cell.
"""

import csv
import hashlib
import io
import json
import os
import statistics
import subprocess
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import __version__, kernels
from .attacks import TriggerSpec, poison_dataset, select_poison_indices
from .defenses import DefenseSpec
from .errors import ConfigError, FormatError, VssBackdoorError
from .metrics import eval_acc, eval_asr
from .models import ModelConfig, build_model
from .seeding import derive_seed
from .training import TrainConfig, train

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, C), uint8 or float in [0, 1]
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __len__(self):
        return int(self.labels.size)

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name)


# ---------------------------------------------------------------- ingestion

def read_cifar10_binary(path, scale=True):
    """Parse one CIFAR-10 binary batch: 1 label byte + 3072 channel-major pixel bytes per record."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: size {raw.size} is not a positive multiple of {CIFAR_RECORD}")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label {labels.max()} out of range 0..9")
    images = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    images = np.ascontiguousarray(images)
    if scale:
        images = images.astype(np.float32) / 255.0
    return images, labels


def ingest_cifar10_binary(path, scale=True):
    """Load the canonical train (5 x 10,000) and test (10,000) batches from a directory."""
    root = Path(path)
    parts = []
    for name in CIFAR_TRAIN_FILES + [CIFAR_TEST_FILE]:
        f = root / name
        if not f.is_file():
            raise FormatError(f"missing CIFAR-10 batch file {f}")
        images, labels = read_cifar10_binary(f, scale)
        if labels.size != 10000:
            raise FormatError(f"{f}: {labels.size} records, expected 10000")
        parts.append((images, labels))
    train = Dataset(np.concatenate([p[0] for p in parts[:5]]), np.concatenate([p[1] for p in parts[:5]]), 10, "cifar10")
    test = Dataset(parts[5][0], parts[5][1], 10, "cifar10")
    return train, test


def load_npz_dataset(path, split=None):
    try:
        with np.load(path, allow_pickle=False) as npz:
            prefix = f"{split}_" if split and f"{split}_images" in npz.files else ""
            images, labels = npz[prefix + "images"], npz[prefix + "labels"].astype(np.int64)
            num_classes = int(npz["num_classes"]) if "num_classes" in npz.files else int(labels.max()) + 1
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read dataset {path}: {exc}") from exc
    if images.ndim != 4 or len(images) != len(labels):
        raise FormatError(f"{path}: images must be (n, H, W, C) with one label each")
    return Dataset(images, labels, num_classes, Path(path).stem)


def save_npz_dataset(ds: Dataset, path):
    with open(path, "wb") as fh:
        np.savez(fh, images=ds.images, labels=ds.labels, num_classes=np.int64(ds.num_classes))


def load_image_folder(path, image_size=None):
    """``root/<class_name>/*.png|jpg``; classes are sorted by name."""
    from PIL import Image

    root = Path(path)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise FormatError(f"{root} has no class sub-directories")
    images, labels = [], []
    for k, cls in enumerate(classes):
        for f in sorted((root / cls).iterdir()):
            if f.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            img = Image.open(f).convert("RGB")
            if image_size:
                img = img.resize((image_size, image_size))
            images.append(np.asarray(img, dtype=np.uint8))
            labels.append(k)
    if not images:
        raise FormatError(f"{root} contains no images")
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), len(classes), root.name)


def make_synthetic_dataset(n, num_classes=10, image_size=32, channels=3, seed=0, noise=0.15):
    """Learnable stand-in data: each class is a fixed smooth colour field plus pixel noise."""
    rng = np.random.default_rng(derive_seed(seed, "synthetic"))
    proto_rng = np.random.default_rng(12345)
    coarse = proto_rng.random((num_classes, 4, 4, channels))
    reps = image_size // 4
    protos = np.kron(coarse, np.ones((1, reps, reps, 1)))[:, :image_size, :image_size]
    labels = rng.integers(0, num_classes, size=n)
    images = protos[labels] + noise * rng.standard_normal((n, image_size, image_size, channels))
    images = np.rint(np.clip(images, 0, 1) * 255).astype(np.uint8)
    return Dataset(images, labels.astype(np.int64), num_classes, "synthetic")


def load_dataset_path(path, split="train"):
    """Guess the format from ``path``: CIFAR-10 binary directory, ``.npz`` file or image folder."""
    p = Path(path)
    if not p.exists():
        raise FormatError(f"{p} does not exist")
    if p.is_file():
        if p.suffix == ".bin":
            images, labels = read_cifar10_binary(p, scale=False)
            return Dataset(images, labels, 10, p.stem)
        return load_npz_dataset(p, split)
    if (p / CIFAR_TEST_FILE).is_file():
        train_ds, test_ds = ingest_cifar10_binary(p, scale=False)
        return train_ds if split == "train" else test_ds
    return load_image_folder(p)


# ---------------------------------------------------------------- config

@dataclass
class DatasetConfig:
    source: str = "synthetic"  # cifar10 | npz | imagefolder | synthetic
    path: Optional[str] = None
    train_size: Optional[int] = None
    test_size: Optional[int] = None
    image_size: Optional[int] = None

    def __post_init__(self):
        if self.source not in ("cifar10", "npz", "imagefolder", "synthetic"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.source != "synthetic" and not self.path:
            raise ConfigError(f"dataset source {self.source} needs a path")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trigger: Optional[TriggerSpec] = None
    poison_rate: float = 0.0
    defense: Optional[DefenseSpec] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    repetitions: int = 3
    seed: int = 0
    output: Optional[str] = None

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ConfigError("poison_rate must lie in [0, 1]")
        if self.poison_rate > 0 and self.trigger is None:
            raise ConfigError("poison_rate > 0 needs a trigger")

    def validate_paths(self):
        if self.dataset.path and not os.path.exists(self.dataset.path):
            raise ConfigError(f"dataset path {self.dataset.path} does not exist")

    def to_dict(self):
        return {
            "name": self.name,
            "dataset": asdict(self.dataset),
            "model": self.model.to_dict(),
            "trigger": None if self.trigger is None else self.trigger.to_dict(),
            "poison_rate": self.poison_rate,
            "defense": None if self.defense is None else self.defense.to_dict(),
            "train": self.train.to_dict(),
            "repetitions": self.repetitions,
            "seed": self.seed,
            "output": self.output,
        }

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            kw = dict(d)
            kw["dataset"] = DatasetConfig(**d.get("dataset", {}))
            kw["model"] = ModelConfig(**d.get("model", {}))
            kw["train"] = TrainConfig(**d.get("train", {}))
            kw["trigger"] = TriggerSpec.from_dict(d["trigger"]) if d.get("trigger") else None
            kw["defense"] = DefenseSpec(**d["defense"]) if d.get("defense") else None
            return cls(**kw)
        except (TypeError, VssBackdoorError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def load_data(dc: DatasetConfig, seed=0, num_classes=10, image_size=32, channels=3):
    """Return ``(train, test)`` honouring the configured subsample sizes."""
    if dc.source == "cifar10":
        train_ds, test_ds = ingest_cifar10_binary(dc.path, scale=False)
    elif dc.source == "npz":
        train_ds, test_ds = load_npz_dataset(dc.path, "train"), load_npz_dataset(dc.path, "test")
    elif dc.source == "imagefolder":
        full = load_image_folder(dc.path, dc.image_size)
        perm = np.random.default_rng(derive_seed(seed, "split")).permutation(len(full))
        cut = int(round(0.8 * len(full)))
        train_ds, test_ds = full.subset(np.sort(perm[:cut])), full.subset(np.sort(perm[cut:]))
    else:
        n_train = dc.train_size or 2000
        n_test = dc.test_size or 500
        train_ds = make_synthetic_dataset(n_train, num_classes, image_size, channels, seed=derive_seed(seed, "train"))
        test_ds = make_synthetic_dataset(n_test, num_classes, image_size, channels, seed=derive_seed(seed, "test"))
    return _subsample(train_ds, dc.train_size, seed, "train"), _subsample(test_ds, dc.test_size, seed, "test")


def _subsample(ds, size, seed, key):
    if size is None or size >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng(derive_seed(seed, "subsample", key)).choice(len(ds), size, replace=False))
    return ds.subset(idx)


# ---------------------------------------------------------------- reports

@dataclass
class RepetitionResult:
    seed: int
    acc: Optional[float] = None
    asr: Optional[float] = None
    acc_defended: Optional[float] = None
    asr_defended: Optional[float] = None
    n_poisoned: int = 0
    error: Optional[str] = None


def _mean(values):
    values = [v for v in values if v is not None]
    return statistics.fmean(values) if values else None


def _std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None
    return statistics.stdev(values) if len(values) > 1 else 0.0


@dataclass
class MetricsReport:
    name: str
    model: str
    attack: str
    poison_rate: float
    defense: str
    placement: str
    repetitions: List[RepetitionResult]
    config_digest: str
    provenance: str

    def _col(self, attr):
        return [getattr(r, attr) for r in self.repetitions if r.error is None]

    @property
    def acc_mean(self):
        return _mean(self._col("acc"))

    @property
    def acc_std(self):
        return _std(self._col("acc"))

    @property
    def asr_mean(self):
        return _mean(self._col("asr"))

    @property
    def asr_std(self):
        return _std(self._col("asr"))

    @property
    def acc_defended_mean(self):
        return _mean(self._col("acc_defended"))

    @property
    def asr_defended_mean(self):
        return _mean(self._col("asr_defended"))

    @property
    def seeds(self):
        return [r.seed for r in self.repetitions]


def provenance_string():
    rev = "nogit"
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0:
            rev = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"vssbackdoor {__version__} git:{rev} scan:{kernels.BACKEND}"


def emit_report(report: MetricsReport, path):
    """One ``report`` header line followed by one ``repetition`` line each."""
    head = {k: v for k, v in asdict(report).items() if k != "repetitions"}
    head.update(record="report", acc_mean=report.acc_mean, acc_std=report.acc_std,
                asr_mean=report.asr_mean, asr_std=report.asr_std)
    lines = [json.dumps(head, sort_keys=True)]
    lines += [json.dumps({"record": "repetition", **asdict(r)}, sort_keys=True) for r in report.repetitions]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_report(path) -> MetricsReport:
    try:
        records = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        head = records[0]
        if head.get("record") != "report":
            raise FormatError(f"{path} does not start with a report record")
        reps = [RepetitionResult(**{k: v for k, v in r.items() if k != "record"}) for r in records[1:]]
        keys = {f.name for f in fields(MetricsReport)} - {"repetitions"}
        return MetricsReport(repetitions=reps, **{k: head[k] for k in keys})
    except (OSError, IndexError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot parse report {path}: {exc}") from exc


CSV_HEADER = ["attack", "model", "poison_rate", "defense", "placement", "ACC", "ASR",
              "ACC_std", "ASR_std", "ACC_defended", "ASR_defended", "repetitions"]


def _fmt(v):
    return "" if v is None else f"{v:.2f}"


def render_table(reports, path=None):
    """CSV summary, one row per report; returns the text and writes it if ``path`` is given."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in reports:
        writer.writerow([r.attack, r.model, f"{r.poison_rate:g}", r.defense, r.placement,
                         _fmt(r.acc_mean), _fmt(r.asr_mean), _fmt(r.acc_std), _fmt(r.asr_std),
                         _fmt(r.acc_defended_mean), _fmt(r.asr_defended_mean),
                         sum(1 for x in r.repetitions if x.error is None)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# ---------------------------------------------------------------- experiments

def fit_repetition(cfg: ExperimentConfig, rep: int, train_ds: Dataset, log_path=None):
    """Poison (if configured), build and train one fresh model; returns ``(model, n_poisoned, defense)``."""
    seed = derive_seed(cfg.seed, "repetition", rep)
    images, labels = train_ds.images, train_ds.labels
    n_poisoned = 0
    if cfg.trigger is not None and cfg.poison_rate > 0:
        plan = select_poison_indices(labels, cfg.poison_rate, cfg.trigger.target, derive_seed(seed, "poison"))
        poisoned = poison_dataset(images, labels, cfg.trigger, plan)
        images, labels = poisoned.images, poisoned.labels
        n_poisoned = int(plan.indices.size)
    model = build_model(replace(cfg.model, seed=derive_seed(seed, "init")))
    defense = None if cfg.defense is None else replace(cfg.defense, seed=derive_seed(seed, "defense"))
    train(model, images, labels, replace(cfg.train, seed=derive_seed(seed, "train")), defense=defense,
          log_path=log_path)
    return model, n_poisoned, defense


def run_repetition(cfg: ExperimentConfig, rep: int, train_ds: Dataset, test_ds: Dataset) -> RepetitionResult:
    result = RepetitionResult(seed=derive_seed(cfg.seed, "repetition", rep))
    try:
        model, result.n_poisoned, defense = fit_repetition(cfg, rep, train_ds)
        result.acc = eval_acc(model, test_ds.images, test_ds.labels)
        if cfg.trigger is not None:
            result.asr = eval_asr(model, test_ds.images, test_ds.labels, cfg.trigger)
        if defense is not None and defense.kind != "none" and cfg.train.defense_placement in ("eval", "both"):
            result.acc_defended = eval_acc(model, test_ds.images, test_ds.labels, defense)
            if cfg.trigger is not None:
                result.asr_defended = eval_asr(model, test_ds.images, test_ds.labels, cfg.trigger, defense)
    except VssBackdoorError as exc:
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def run_experiment(cfg: ExperimentConfig, data=None) -> MetricsReport:
    """Poison, train and evaluate ``cfg.repetitions`` fresh models.

    ``data`` may pass a pre-loaded ``(train, test)`` pair to share across a sweep.
    """
    if data is None:
        cfg.validate_paths()
        data = load_data(cfg.dataset, cfg.seed, cfg.model.num_classes, cfg.model.image_size, cfg.model.channels)
    train_ds, test_ds = data
    reps = [run_repetition(cfg, r, train_ds, test_ds) for r in range(cfg.repetitions)]
    report = MetricsReport(
        name=cfg.name,
        model=cfg.model.family,
        attack="none" if cfg.trigger is None or cfg.poison_rate == 0 else cfg.trigger.kind,
        poison_rate=cfg.poison_rate,
        defense="none" if cfg.defense is None else cfg.defense.kind,
        placement=cfg.train.defense_placement,
        repetitions=reps,
        config_digest=cfg.digest(),
        provenance=provenance_string(),
    )
    if cfg.output:
        Path(cfg.output).parent.mkdir(parents=True, exist_ok=True)
        emit_report(report, cfg.output)
    return report


def with_value(cfg: ExperimentConfig, dotted, value):
    """Copy of ``cfg`` with a (possibly nested) field replaced, e.g. ``"trigger.intensity"``."""
    head, _, rest = dotted.partition(".")
    if not rest:
        return replace(cfg, **{head: value})
    return replace(cfg, **{head: _replace_nested(getattr(cfg, head), rest, value)})


def _replace_nested(obj, dotted, value):
    head, _, rest = dotted.partition(".")
    if not rest:
        return replace(obj, **{head: value})
    return replace(obj, **{head: _replace_nested(getattr(obj, head), rest, value)})


def sweep(cfg: ExperimentConfig, dotted, values, data=None):
    """Run one independent experiment per value of ``dotted``."""
    if data is None:
        cfg.validate_paths()
        data = load_data(cfg.dataset, cfg.seed, cfg.model.num_classes, cfg.model.image_size, cfg.model.channels)
    reports = []
    for v in values:
        sub = with_value(cfg, dotted, v)
        sub = replace(sub, name=f"{cfg.name}[{dotted}={v}]", output=None)
        reports.append(run_experiment(sub, data))
    return reports


def set_single_thread():
    """Single-worker mode: results are bitwise reproducible only with one intra-op thread."""
    torch.set_num_threads(1)
