"""Experimental protocol: datasets, bandwidth and swap sweeps, spectrum reports.

A sweep crafts the adversarial set once against the unfiltered model, then
low-pass filters (or frequency-merges) adversarial and natural images at
each scale B/M, where M is the image height. The last row of every sweep is
the all-pass sentinel ``ALL_PASS`` (written as ``inf``), which evaluates the
untouched images so the endpoint identities hold exactly.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import spectral
from .attacks import AdvResult, AttackConfig, run_attack
from .models import ModelParams, predict

ALL_PASS = math.inf
DEFAULT_SCALES = tuple(round(0.05 * k, 2) for k in range(21))
CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CONTAINER_MAGIC = "FREQLENS-IMAGES"
SWEEP_KINDS = ("filter", "merge_adv", "merge_nat")


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "test"
    provenance: str = "synthetic"
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DatasetFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, n: int | None) -> "Dataset":
        """First ``n`` samples (all of them when n is None or too large)."""
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.split, self.provenance, self.num_classes)

    def with_images(self, images: np.ndarray) -> "Dataset":
        return Dataset(images, self.labels, self.split, self.provenance, self.num_classes)


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches and the matching image container
# ---------------------------------------------------------------------------


def _parse_records(blob: bytes, shape, num_classes: int, source: str):
    record = 1 + int(np.prod(shape))
    if len(blob) % record:
        raise DatasetFormatError(
            f"{source}: size {len(blob)} is not a multiple of the {record}-byte record"
        )
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, record)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise DatasetFormatError(f"{source}: label {labels.max()} outside [0, {num_classes})")
    images = raw[:, 1:].reshape(-1, *shape).astype(np.float64) / 255.0
    return images, labels


def load_cifar10(path, split: str = "test") -> Dataset:
    """Read CIFAR-10 binary batches.

    ``path`` is either one batch file or the ``cifar-10-batches-bin``
    directory; for a directory, ``split`` picks ``test_batch.bin`` or the five
    ``data_batch_*.bin`` files.
    """
    path = Path(path)
    if path.is_dir():
        names = ["test_batch.bin"] if split == "test" else [f"data_batch_{i}.bin" for i in range(1, 6)]
        files = [path / n for n in names]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise FileNotFoundError(f"missing CIFAR-10 batch files: {', '.join(missing)}")
    else:
        files = [path]
    parts = [_parse_records(f.read_bytes(), CIFAR_SHAPE, 10, str(f)) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, split, "cifar10", 10)


def write_image_container(path, images: np.ndarray, labels: np.ndarray, pixel: str = "u8",
                          num_classes: int = 10) -> Path:
    """CIFAR-style records behind a one-line header.

    Header: ``FREQLENS-IMAGES v1 pixel=<u8|f64> shape=CxHxW count=N classes=K``.
    Each record is one label byte followed by the channel planes in row-major
    order, as bytes (``u8``, rounded) or little-endian float64 (``f64``).
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    c, h, w = images.shape[1:]
    header = (f"{CONTAINER_MAGIC} v1 pixel={pixel} shape={c}x{h}x{w} "
              f"count={len(labels)} classes={num_classes}\n")
    buf = io.BytesIO()
    buf.write(header.encode("ascii"))
    flat = images.reshape(len(images), -1)
    if pixel == "u8":
        body = np.rint(np.clip(flat, 0, 1) * 255).astype(np.uint8)
        for lab, row in zip(labels, body):
            buf.write(bytes([int(lab)]))
            buf.write(row.tobytes())
    elif pixel == "f64":
        for lab, row in zip(labels, flat):
            buf.write(bytes([int(lab)]))
            buf.write(row.astype("<f8").tobytes())
    else:
        raise ValueError(f"pixel must be 'u8' or 'f64', got {pixel!r}")
    path = Path(path)
    path.write_bytes(buf.getvalue())
    return path


def read_image_container(path, split: str = "test", provenance: str = "adversarial") -> Dataset:
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    header = blob[:nl].decode("ascii", errors="replace").split() if nl > 0 else []
    if not header or header[0] != CONTAINER_MAGIC:
        raise DatasetFormatError(f"{path}: missing {CONTAINER_MAGIC} header")
    fields = dict(tok.split("=", 1) for tok in header[2:])
    shape = tuple(int(s) for s in fields["shape"].split("x"))
    classes = int(fields.get("classes", 10))
    body = blob[nl + 1 :]
    pixels = int(np.prod(shape))
    if fields["pixel"] == "u8":
        images, labels = _parse_records(body, shape, classes, str(path))
    elif fields["pixel"] == "f64":
        record = 1 + 8 * pixels
        if len(body) % record:
            raise DatasetFormatError(f"{path}: truncated f64 container")
        n = len(body) // record
        labels = np.array([body[i * record] for i in range(n)], dtype=np.int64)
        images = np.stack([
            np.frombuffer(body, dtype="<f8", count=pixels, offset=i * record + 1) for i in range(n)
        ]).reshape(n, *shape) if n else np.zeros((0, *shape))
    else:
        raise DatasetFormatError(f"{path}: unknown pixel encoding {fields['pixel']!r}")
    if len(labels) != int(fields["count"]):
        raise DatasetFormatError(f"{path}: header count {fields['count']} but {len(labels)} records")
    return Dataset(images, labels, split, provenance, classes)


# ---------------------------------------------------------------------------
# Synthetic desk dataset
# ---------------------------------------------------------------------------

# blob centers (fractions of H, W) per class modulo 4
_BLOB_CENTERS = ((0.28, 0.28), (0.28, 0.72), (0.72, 0.28), (0.72, 0.72))
BLOB_AMP = 0.3
BLOB_RELIABILITY = 0.8
TEXTURE_AMP = 0.04
TEXTURE_FREQ = 6.5  # cycles per image side
NOISE_STD = 0.03
BACKGROUND_AMP = 0.08


def synth_dataset(seed, n: int, num_classes: int = 4, shape=(3, 16, 16), split: str = "train") -> Dataset:
    """Class-conditional images built from two kinds of evidence.

    * a bright low-frequency Gaussian blob sitting in the class's quadrant
      for 80% of samples (a random quadrant otherwise): large amplitude,
      hard to erase with a small perturbation, but not fully reliable;
    * a faint oriented sinusoid at 6.5 cycles per side, always class-correct:
      perfectly predictive but cheap to overwrite.

    Both ride on a smooth random background plus Gaussian pixel noise. Past
    four classes the blob quadrants repeat and only the texture orientation
    tells those classes apart.
    Labels are assigned round-robin, so class counts differ by at most one.
    """
    if n < num_classes:
        raise ValueError(f"need n >= num_classes, got n={n}, num_classes={num_classes}")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % num_classes
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    angles = np.pi * np.arange(num_classes) / num_classes
    phases = np.pi * np.arange(num_classes) / num_classes
    images = np.empty((n, c, h, w))
    for i, y in enumerate(labels):
        img = np.full((c, h, w), 0.5)
        for ch in range(c):
            for _ in range(3):
                ku, kv = rng.integers(-2, 3, size=2)
                img[ch] += BACKGROUND_AMP / 3 * np.cos(2 * np.pi * (ku * yy + kv * xx) + rng.uniform(0, 2 * np.pi))
        q = y if rng.random() < BLOB_RELIABILITY else rng.integers(num_classes)
        cy, cx = _BLOB_CENTERS[q % 4]
        cy = cy * h + rng.normal(0, 0.8)
        cx = cx * w + rng.normal(0, 0.8)
        sigma = 0.15 * h
        img += BLOB_AMP * np.exp(-((yy * h - cy) ** 2 + (xx * w - cx) ** 2) / (2 * sigma**2))
        a = angles[y]
        img += TEXTURE_AMP * np.cos(2 * np.pi * TEXTURE_FREQ * (np.cos(a) * yy + np.sin(a) * xx) + phases[y])
        img += rng.normal(0, NOISE_STD, size=(c, h, w))
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, split, "synthetic", num_classes)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    scale: float
    acc_adv: float
    acc_nat: float

    @property
    def gap(self) -> float:
        return self.acc_nat - self.acc_adv


@dataclass
class SweepResult:
    kind: str
    rows: list[SweepRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def row(self, scale: float) -> SweepRow:
        for r in self.rows:
            if r.scale == scale:
                return r
        raise KeyError(scale)

    @property
    def all_pass(self) -> SweepRow:
        return self.rows[-1]

    def to_csv(self) -> str:
        out = io.StringIO()
        for key in sorted(self.metadata):
            out.write(f"# {key}={self.metadata[key]}\n")
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(["scale", "acc_adv", "acc_nat", "gap"])
        for r in self.rows:
            wr.writerow([_fmt_scale(r.scale), repr(r.acc_adv), repr(r.acc_nat), repr(r.gap)])
        return out.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(), newline="\n")
        return path

    @classmethod
    def read_csv(cls, path) -> "SweepResult":
        meta, rows = {}, []
        with open(path) as fh:
            lines = fh.read().splitlines()
        body = []
        for line in lines:
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            else:
                body.append(line)
        for rec in csv.DictReader(body):
            rows.append(SweepRow(float(rec["scale"]), float(rec["acc_adv"]), float(rec["acc_nat"])))
        return cls(meta.get("kind", "filter"), rows, meta)


def _fmt_scale(s: float) -> str:
    return "inf" if math.isinf(s) else repr(float(s))


def _check_scales(scales) -> list[float]:
    scales = [float(s) for s in scales]
    if not scales:
        raise ValueError("scales must be non-empty")
    scales = sorted(s for s in scales if not math.isinf(s))
    if any(s < 0 for s in scales):
        raise ValueError("scales must be >= 0")
    if len(set(scales)) != len(scales):
        raise ValueError("scales must be distinct")
    return scales + [ALL_PASS]


def _accuracy(params: ModelParams, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(params, images) == labels))


def generate_adversarial(params: ModelParams, dataset: Dataset, attack_cfg: AttackConfig) -> AdvResult:
    return run_attack(params, dataset.images, dataset.labels, attack_cfg)


def _metadata(kind, params, dataset, attack_cfg, extra=None) -> dict:
    meta = {
        "kind": kind,
        "model": f"{params.arch}:{'x'.join(map(str, params.input_shape))}:{params.num_classes}",
        "attack": json.dumps(attack_cfg.to_dict(), sort_keys=True),
        "dataset": f"{dataset.provenance}/{dataset.split}/n={len(dataset)}",
        "scale_unit": "B/M with M=image height",
    }
    meta.update(extra or {})
    return meta


def bandwidth_sweep(params: ModelParams, dataset: Dataset, attack_cfg: AttackConfig,
                    scales=DEFAULT_SCALES, adv: np.ndarray | None = None,
                    metadata: dict | None = None) -> SweepResult:
    """Accuracy on low-pass filtered adversarial and natural images per scale.

    Pass ``adv`` to reuse an adversarial set already crafted for ``dataset``.
    Filtered images are clamped to [0, 1] before classification.
    """
    grid = _check_scales(scales)
    if adv is None:
        adv = generate_adversarial(params, dataset, attack_cfg).adversarial
    nat, y = dataset.images, dataset.labels
    m = dataset.shape[-2]
    rows = []
    for s in grid:
        if math.isinf(s):
            fa, fn = adv, nat
        else:
            mask = spectral.lowpass_mask(*dataset.shape[-2:], s * m)
            fa = spectral.apply_lowpass(adv, mask, clamp=True)
            fn = spectral.apply_lowpass(nat, mask, clamp=True)
        rows.append(SweepRow(s, _accuracy(params, fa, y), _accuracy(params, fn, y)))
    return SweepResult("filter", rows, _metadata("filter", params, dataset, attack_cfg, metadata))


def swap_sweep(params: ModelParams, dataset: Dataset, attack_cfg: AttackConfig,
               scales=DEFAULT_SCALES, adv: np.ndarray | None = None,
               metadata: dict | None = None) -> tuple[SweepResult, SweepResult]:
    """Accuracy on frequency-merged images per scale.

    merge_adv keeps adversarial bins inside the band and natural bins outside;
    merge_nat does the opposite. In each table the merged accuracy fills the
    column of its in-band source (``acc_adv`` for merge_adv, ``acc_nat`` for
    merge_nat) and the other column holds the matching unmerged reference
    (clean accuracy for merge_adv, robust accuracy for merge_nat). Both tables
    therefore start with gap 0 and end with gap = clean - robust.
    """
    grid = _check_scales(scales)
    if adv is None:
        adv = generate_adversarial(params, dataset, attack_cfg).adversarial
    nat, y = dataset.images, dataset.labels
    clean = _accuracy(params, nat, y)
    robust = _accuracy(params, adv, y)
    m = dataset.shape[-2]
    adv_rows, nat_rows = [], []
    for s in grid:
        if math.isinf(s):
            madv, mnat = adv, nat
        else:
            mask = spectral.lowpass_mask(*dataset.shape[-2:], s * m)
            madv = spectral.merge_frequencies(adv, nat, mask, clamp=True)
            mnat = spectral.merge_frequencies(nat, adv, mask, clamp=True)
        adv_rows.append(SweepRow(s, _accuracy(params, madv, y), clean))
        nat_rows.append(SweepRow(s, robust, _accuracy(params, mnat, y)))
    return (
        SweepResult("merge_adv", adv_rows, _metadata("merge_adv", params, dataset, attack_cfg, metadata)),
        SweepResult("merge_nat", nat_rows, _metadata("merge_nat", params, dataset, attack_cfg, metadata)),
    )


# ---------------------------------------------------------------------------
# Spectrum statistics
# ---------------------------------------------------------------------------


@dataclass
class SpectrumReport:
    natural: np.ndarray
    diff_std: np.ndarray
    diff_adv: np.ndarray | None
    annulus_std: list[float]
    annulus_adv: list[float] | None
    sample_n: int

    def summary(self) -> dict:
        return {
            "annulus_means_std": self.annulus_std,
            "annulus_means_adv": self.annulus_adv,
            "annulus_edges": "4 equal-width bands over [0, M/2]; last band includes corners",
            "sample_n": self.sample_n,
        }

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"natural_csv": out / "spectrum_nat.csv"}
        spectral.write_grid_csv(paths["natural_csv"], self.natural)
        maps = {"std": self.diff_std, "adv": self.diff_adv}
        for tag, grid in maps.items():
            if grid is None:
                continue
            paths[f"diff_{tag}_csv"] = out / f"spectrum_diff_{tag}.csv"
            paths[f"diff_{tag}_pfm"] = out / f"spectrum_diff_{tag}.pfm"
            spectral.write_grid_csv(paths[f"diff_{tag}_csv"], grid)
            spectral.write_pfm(paths[f"diff_{tag}_pfm"], grid)
        paths["summary"] = out / "spectrum_summary.json"
        paths["summary"].write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return paths


def spectrum_report(params_std: ModelParams, params_adv: ModelParams | None, dataset: Dataset,
                    attack_cfg: AttackConfig, sample_n: int = 200,
                    adv_std: np.ndarray | None = None,
                    adv_adv: np.ndarray | None = None) -> SpectrumReport:
    """Log-amplitude difference maps of adversarial vs natural images.

    Uses the first ``sample_n`` images. ``params_adv`` may be None, in which
    case only the standard-model map is produced. Precomputed adversarial
    sets for the same subset can be supplied to skip re-attacking.
    """
    if sample_n > len(dataset):
        raise ValueError(f"sample_n={sample_n} exceeds dataset size {len(dataset)}")
    sub = dataset.subset(sample_n)
    if adv_std is None:
        adv_std = generate_adversarial(params_std, sub, attack_cfg).adversarial
    nat_map = spectral.mean_log_amplitude(sub.images)
    diff_std = spectral.mean_log_amplitude(adv_std) - nat_map
    diff_adv = None
    if params_adv is not None:
        if adv_adv is None:
            adv_adv = generate_adversarial(params_adv, sub, attack_cfg).adversarial
        diff_adv = spectral.mean_log_amplitude(adv_adv) - nat_map
    return SpectrumReport(
        nat_map,
        diff_std,
        diff_adv,
        spectral.annulus_means(diff_std),
        spectral.annulus_means(diff_adv) if diff_adv is not None else None,
        len(sub),
    )
