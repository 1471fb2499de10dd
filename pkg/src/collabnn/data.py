"""Synthetic datasets, the CLDS/CLTS binary formats, and metrics files.

CLDS dataset layout (little-endian):
  magic "CLDS" | version u16 | m u32 | n u32 | C u32 | H u32 | W u32
  | n labels as u16 | n*C*H*W pixels as f32, row-major

CLTS tensor layout (little-endian), used by the loss-evaluation command:
  magic "CLTS" | version u16 | ndim u32 | ndim extents u32 | values f64, row-major
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import STREAM_DATA_TEMPLATE, STREAM_DATA_TEST, STREAM_DATA_TRAIN, substream
from .train import RunMetrics

DATASET_MAGIC = b"CLDS"
TENSOR_MAGIC = b"CLTS"
FORMAT_VERSION = 1

CSV_COLUMNS = (
    "epoch",
    "lr",
    "train_loss_total",
    "loss_hard",
    "loss_out",
    "loss_mid",
    "loss_pull_push",
    "loss_kernel",
    "train_err",
    "test_err",
    "corrupted",
)


class FormatError(Exception):
    """A binary file does not match its declared layout."""


@dataclass
class Dataset:
    images: np.ndarray  # n,C,H,W float32 in [0,1]
    labels: np.ndarray  # n int64 in [0,m)
    m: int

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise FormatError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.m):
            raise FormatError(f"labels out of range [0, {self.m})")

    @property
    def n(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class SyntheticSpec:
    m: int = 4
    per_class_train: int = 200
    per_class_test: int = 50
    channels: int = 1
    height: int = 16
    width: int = 16
    signal: float = 1.0
    noise_sigma: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.m < 2:
            raise FormatError(f"need at least 2 classes, got {self.m}")
        for name in ("per_class_train", "per_class_test", "channels", "height", "width"):
            if getattr(self, name) < 1:
                raise FormatError(f"{name} must be >= 1")
        if not (np.isfinite(self.signal) and np.isfinite(self.noise_sigma)):
            raise FormatError("signal and noise_sigma must be finite")


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Per-class random templates plus Gaussian pixel noise, clamped to [0,1].

    Train and test samples come from disjoint random streams; everything is
    deterministic given the generator seed.
    """
    spec.validate()
    shape = (spec.channels, spec.height, spec.width)
    template_rng = substream(spec.seed, STREAM_DATA_TEMPLATE)
    templates = template_rng.random((spec.m,) + shape)

    def draw(per_class: int, stream: int) -> Dataset:
        rng = substream(spec.seed, stream)
        images = np.empty((spec.m * per_class,) + shape, dtype=np.float32)
        labels = np.empty(spec.m * per_class, dtype=np.int64)
        row = 0
        for cls in range(spec.m):
            base = templates[cls] * spec.signal
            for _ in range(per_class):
                noisy = base + rng.normal(0.0, spec.noise_sigma, size=shape)
                images[row] = np.clip(noisy, 0.0, 1.0).astype(np.float32)
                labels[row] = cls
                row += 1
        return Dataset(images=images, labels=labels, m=spec.m)

    return draw(spec.per_class_train, STREAM_DATA_TRAIN), draw(spec.per_class_test, STREAM_DATA_TEST)


# -- CLDS dataset files ---------------------------------------------------------


def save_dataset(path, ds: Dataset) -> None:
    header = DATASET_MAGIC + struct.pack(
        "<HIIIII",
        FORMAT_VERSION,
        ds.m,
        ds.n,
        ds.images.shape[1],
        ds.images.shape[2],
        ds.images.shape[3],
    )
    labels = ds.labels.astype("<u2").tobytes()
    pixels = ds.images.astype("<f4").tobytes()
    Path(path).write_bytes(header + labels + pixels)


def _take(buf: bytes, offset: int, count: int, what: str) -> tuple[bytes, int]:
    if offset + count > len(buf):
        raise FormatError(
            f"truncated file: needed {count} bytes for {what} at offset {offset}, "
            f"have {len(buf) - offset}"
        )
    return buf[offset : offset + count], offset + count


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    magic, offset = _take(buf, 0, 4, "magic")
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0, expected {DATASET_MAGIC!r}")
    raw, offset = _take(buf, offset, struct.calcsize("<HIIIII"), "header")
    version, m, n, c, h, w = struct.unpack("<HIIIII", raw)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    raw, offset = _take(buf, offset, 2 * n, "labels")
    labels = np.frombuffer(raw, dtype="<u2").astype(np.int64)
    if labels.size and labels.max() >= m:
        bad = int(np.argmax(labels >= m))
        raise FormatError(
            f"label {labels[bad]} out of range [0, {m}) at offset {26 + 2 * bad}"
        )
    raw, offset = _take(buf, offset, 4 * n * c * h * w, "pixels")
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes at offset {offset}")
    images = np.frombuffer(raw, dtype="<f4").reshape(n, c, h, w).copy()
    return Dataset(images=images, labels=labels, m=m)


# -- CLTS tensor files ------------------------------------------------------------


def save_tensor(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64)
    header = TENSOR_MAGIC + struct.pack("<HI", FORMAT_VERSION, values.ndim)
    header += struct.pack(f"<{values.ndim}I", *values.shape)
    Path(path).write_bytes(header + values.astype("<f8").tobytes())


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, offset = _take(buf, 0, 4, "magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0, expected {TENSOR_MAGIC!r}")
    raw, offset = _take(buf, offset, struct.calcsize("<HI"), "header")
    version, ndim = struct.unpack("<HI", raw)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    if ndim > 8:
        raise FormatError(f"implausible ndim {ndim} at offset 6")
    raw, offset = _take(buf, offset, 4 * ndim, "extents")
    shape = struct.unpack(f"<{ndim}I", raw)
    count = 1
    for extent in shape:
        count *= extent
    raw, offset = _take(buf, offset, 8 * count, "values")
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes at offset {offset}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


# -- metrics files ------------------------------------------------------------------


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def write_metrics(out_dir, metrics: RunMetrics, config_echo: dict) -> tuple[Path, Path]:
    """Write metrics.csv (one row per epoch) and summary.json; returns their paths.

    The files are bitwise deterministic for a given run; wall time is kept
    out of them and reported on the console instead.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    lines = [",".join(CSV_COLUMNS)]
    for r in metrics.records:
        terms = r.loss_terms
        lines.append(
            ",".join(
                [
                    str(r.epoch),
                    _fmt(r.lr),
                    _fmt(r.loss_total),
                    _fmt(terms.get("hard", 0.0)),
                    _fmt(terms.get("out", 0.0)),
                    _fmt(terms.get("mid", 0.0)),
                    _fmt(terms.get("pull_push", 0.0)),
                    _fmt(terms.get("kernel", 0.0)),
                    _fmt(r.train_error),
                    _fmt(r.test_error),
                    str(r.corrupted),
                ]
            )
        )
    csv_path.write_text("\n".join(lines) + "\n")

    summary = {
        "config": config_echo,
        "initial_test_error": metrics.initial_test_error,
        "best_test_error": metrics.best_test_error,
        "epochs_recorded": len(metrics.records),
    }
    json_path = out_dir / "summary.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
