"""Datasets: synthetic open-set benchmark, manifest I/O, batch sampling.

A dataset is an immutable tuple of samples. Three tuples travel together:
labeled source, labeled target, unlabeled target. Unlabeled samples may
carry ``hidden_labels`` (ground truth retained for evaluation only); the
batch assembly path strips them so training code never sees them.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .labels import (
    SOURCE,
    TARGET,
    LabelSpaceError,
    LabelTopology,
    LabelVector,
    build_topology,
    decode_labels,
    encode_labels,
)

SYNTH_SOURCE_LABELS = ("A", "B", "C")
SYNTH_TARGET_LABELS = ("A", "D")


class DataError(ValueError):
    """Invalid dataset specification, manifest row, or sampling request."""


@dataclass(frozen=True)
class Sample:
    """One image with its domain tag and (optionally masked-out) labels."""

    image: np.ndarray  # (H, W, C) float64 in [0, 1]
    domain: str
    labeled: bool
    labels: LabelVector | None = None
    hidden_labels: LabelVector | None = None

    def __post_init__(self):
        if self.labeled and self.labels is None:
            raise DataError("labeled sample without labels")
        if not self.labeled and self.labels is not None:
            raise DataError("unlabeled sample must not expose labels")
        if self.image.ndim != 3:
            raise DataError(f"image must be (H, W, C), got shape {self.image.shape}")
        lo, hi = float(self.image.min()), float(self.image.max())
        if lo < 0.0 or hi > 1.0:
            raise DataError(f"pixel values outside [0, 1]: min={lo}, max={hi}")

    def eval_labels(self) -> LabelVector:
        """Ground truth for evaluation: visible labels or the hidden ones."""
        lv = self.labels if self.labeled else self.hidden_labels
        if lv is None:
            raise DataError("sample carries no ground truth, not even hidden")
        return lv


Datasets = tuple[tuple[Sample, ...], tuple[Sample, ...], tuple[Sample, ...]]


@dataclass(frozen=True)
class Batch:
    """One minibatch: the three sample groups the loss terms average over."""

    source: tuple[Sample, ...]
    target_labeled: tuple[Sample, ...]
    target_unlabeled: tuple[Sample, ...]


@dataclass(frozen=True)
class SyntheticSpec:
    """Procedural benchmark: glyph images under a configurable domain shift.

    Source labels are {A, B, C}, target labels {A, D}, so "A" is the one
    common label and "D" exists only in the target. Target images pass
    through gamma adjustment, additive Gaussian noise and a corner vignette;
    source images are clean.
    """

    canvas_size: int = 32
    n_source: int = 400
    n_target_labeled: int = 60
    n_target_unlabeled: int = 140
    gamma: float = 2.2
    noise_sigma: float = 0.10
    vignette: float = 0.5
    multilabel_prob: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_source, self.n_target_labeled, self.n_target_unlabeled) <= 0:
            raise DataError("all three sample counts must be positive")
        if self.canvas_size < 8:
            raise DataError("canvas_size must be at least 8")
        if self.gamma <= 0:
            raise DataError("gamma must be positive")
        if self.noise_sigma < 0 or self.vignette < 0:
            raise DataError("noise_sigma and vignette must be non-negative")
        if not 0.0 <= self.multilabel_prob <= 1.0:
            raise DataError("multilabel_prob must lie in [0, 1]")


def _disc(xx, yy, cx, cy, radius, intensity):
    # 1-pixel soft edge keeps glyph boundaries sub-pixel smooth
    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    return intensity * np.clip(radius + 0.5 - dist, 0.0, 1.0)


def _render_glyph(label: str, size: int, rng: np.random.Generator) -> np.ndarray:
    xx, yy = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64))
    c = size / 2.0
    jit = lambda scale: rng.uniform(-scale, scale)
    intensity = rng.uniform(0.55, 1.0)
    img = np.zeros((size, size), dtype=np.float64)
    if label == "A":  # centered filled disc
        r = size * rng.uniform(0.16, 0.24)
        img = _disc(xx, yy, c + jit(size * 0.06), c + jit(size * 0.06), r, intensity)
    elif label == "B":  # horizontal bar
        y0 = c + jit(size * 0.15)
        half = size * rng.uniform(0.05, 0.08)
        margin = size * 0.12
        band = np.clip(half + 0.5 - np.abs(yy - y0), 0.0, 1.0)
        band *= (xx >= margin) & (xx <= size - margin)
        img = intensity * band
    elif label == "C":  # ring
        r = size * rng.uniform(0.26, 0.34)
        width = size * rng.uniform(0.04, 0.06)
        dist = np.sqrt((xx - c - jit(size * 0.04)) ** 2 + (yy - c - jit(size * 0.04)) ** 2)
        img = intensity * np.clip(width + 0.5 - np.abs(dist - r), 0.0, 1.0)
    elif label == "D":  # two small discs in opposite corners
        r = size * rng.uniform(0.07, 0.11)
        q = size * 0.25
        img = np.maximum(
            _disc(xx, yy, q + jit(size * 0.05), q + jit(size * 0.05), r, intensity),
            _disc(xx, yy, size - q + jit(size * 0.05), size - q + jit(size * 0.05), r, intensity),
        )
    else:
        raise DataError(f"no glyph defined for label {label!r}")
    return np.clip(img, 0.0, 1.0)


def _apply_shift(img: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    out = np.power(img, spec.gamma)
    if spec.noise_sigma > 0:
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    out = np.clip(out, 0.0, 1.0)
    size = out.shape[0]
    xx, yy = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64))
    c = (size - 1) / 2.0
    r2 = ((xx - c) ** 2 + (yy - c) ** 2) / (2 * c**2)
    factor = np.clip(1.0 - spec.vignette * r2, 0.0, 1.0)
    return out * factor


def _draw_label_names(domain_labels, spec: SyntheticSpec, rng: np.random.Generator) -> list[str]:
    primary = domain_labels[rng.integers(0, len(domain_labels))]
    names = [primary]
    if len(domain_labels) > 1 and rng.uniform() < spec.multilabel_prob:
        rest = [l for l in domain_labels if l != primary]
        names.append(rest[rng.integers(0, len(rest))])
    return names


def _synth_sample(domain, labeled, spec, topology, rng) -> Sample:
    names = _draw_label_names(topology.domain_labels(domain), spec, rng)
    img = np.zeros((spec.canvas_size, spec.canvas_size), dtype=np.float64)
    for name in names:
        img = np.maximum(img, _render_glyph(name, spec.canvas_size, rng))
    if domain == TARGET:
        img = _apply_shift(img, spec, rng)
    vec = encode_labels(names, domain, topology)
    img = img[:, :, np.newaxis]
    if labeled:
        return Sample(image=img, domain=domain, labeled=True, labels=vec)
    return Sample(image=img, domain=domain, labeled=False, hidden_labels=vec)


def generate_synthetic(spec: SyntheticSpec):
    """Generate the benchmark datasets; bit-deterministic for a given seed.

    Returns (source, target_labeled, target_unlabeled, topology).
    """
    spec.validate()
    topology = build_topology(SYNTH_SOURCE_LABELS, SYNTH_TARGET_LABELS)
    rng = np.random.default_rng(spec.seed)
    source = tuple(_synth_sample(SOURCE, True, spec, topology, rng) for _ in range(spec.n_source))
    target_labeled = tuple(
        _synth_sample(TARGET, True, spec, topology, rng) for _ in range(spec.n_target_labeled)
    )
    target_unlabeled = tuple(
        _synth_sample(TARGET, False, spec, topology, rng) for _ in range(spec.n_target_unlabeled)
    )
    return source, target_labeled, target_unlabeled, topology


def split_labeled_unlabeled(samples, labeled_fraction: float = 0.4, seed: int = 0):
    """Split a labeled pool into a labeled part and a hidden-label part.

    Uniform shuffle with the given seed; the first ``labeled_fraction`` of
    the shuffled pool keeps its labels, the rest become unlabeled samples
    whose ground truth moves to ``hidden_labels``.
    """
    if not 0.0 < labeled_fraction < 1.0:
        raise DataError("labeled_fraction must lie strictly between 0 and 1")
    samples = list(samples)
    order = np.random.default_rng(seed).permutation(len(samples))
    n_labeled = int(round(labeled_fraction * len(samples)))
    labeled = tuple(samples[i] for i in order[:n_labeled])
    unlabeled = tuple(
        replace(samples[i], labeled=False, labels=None, hidden_labels=samples[i].labels)
        for i in order[n_labeled:]
    )
    return labeled, unlabeled


def sample_batch(datasets: Datasets, group_sizes, rng: np.random.Generator,
                 with_replacement: bool = True) -> Batch:
    """Draw the three groups independently and uniformly.

    Hidden labels are stripped from the unlabeled group here, so nothing
    downstream of batch assembly can touch them.
    """
    n_s, n_tl, n_tu = group_sizes
    if n_s == 0 and n_tl == 0 and n_tu == 0:
        raise DataError("at least one group size must be positive")

    def draw(pool, n):
        if n == 0:
            return ()
        if with_replacement:
            idx = rng.integers(0, len(pool), size=n)
        else:
            if n > len(pool):
                raise DataError(f"requested {n} samples without replacement from pool of {len(pool)}")
            idx = rng.choice(len(pool), size=n, replace=False)
        return tuple(pool[i] for i in idx)

    source, target_labeled, target_unlabeled = datasets
    return Batch(
        source=draw(source, n_s),
        target_labeled=draw(target_labeled, n_tl),
        target_unlabeled=tuple(
            replace(s, hidden_labels=None) for s in draw(target_unlabeled, n_tu)
        ),
    )


# ---------------------------------------------------------------------------
# Manifest format: CSV `path,domain,labeled,labels`, semicolon-separated
# label names, image paths relative to the manifest file.
# ---------------------------------------------------------------------------

MANIFEST_HEADER = ["path", "domain", "labeled", "labels"]


def _to_png_array(image: np.ndarray) -> np.ndarray:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    return arr[:, :, 0] if arr.shape[2] == 1 else arr


def write_manifest(out_dir, datasets: Datasets, topology: LabelTopology) -> Path:
    """Materialize datasets as PNG files plus a manifest CSV.

    Unlabeled samples keep their hidden labels in the labels column (with
    labeled=0) so a round trip stays evaluable; loaders treat those names
    as evaluation-only ground truth.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    counters = {}
    for group, tag in zip(datasets, ("src", "tgt_lab", "tgt_unlab")):
        for sample in group:
            i = counters.get(tag, 0)
            counters[tag] = i + 1
            rel = f"images/{tag}_{i:05d}.png"
            Image.fromarray(_to_png_array(sample.image)).save(out_dir / rel)
            if sample.labeled:
                names = decode_labels(sample.labels, topology)
            elif sample.hidden_labels is not None:
                names = decode_labels(sample.hidden_labels, topology)
            else:
                names = []
            rows.append([rel, sample.domain, str(int(sample.labeled)), ";".join(names)])
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return manifest


def _load_image(path: Path, canvas_size: int, channels: int) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("L" if channels == 1 else "RGB")
        if img.size != (canvas_size, canvas_size):
            img = img.resize((canvas_size, canvas_size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, np.newaxis]
    return arr


def load_manifest(path, topology: LabelTopology, canvas_size: int = 32, channels: int = 1):
    """Load a manifest CSV into the three datasets.

    Returns (source, target_labeled, target_unlabeled, topology). Errors
    name the offending manifest line.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    source, target_labeled, target_unlabeled = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DataError(f"manifest header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sample = _parse_row(row, path.parent, topology, canvas_size, channels)
            except (LabelSpaceError, DataError, OSError, ValueError) as exc:
                raise DataError(f"{path} line {lineno}: {exc}") from exc
            if sample.domain == SOURCE:
                source.append(sample)
            elif sample.labeled:
                target_labeled.append(sample)
            else:
                target_unlabeled.append(sample)
    return tuple(source), tuple(target_labeled), tuple(target_unlabeled), topology


def _parse_row(row, base_dir, topology, canvas_size, channels) -> Sample:
    if len(row) != 4:
        raise DataError(f"expected 4 fields, got {len(row)}")
    rel, domain, labeled_str, label_field = row
    if domain not in (SOURCE, TARGET):
        raise DataError(f"domain must be source or target, got {domain!r}")
    if labeled_str not in ("0", "1"):
        raise DataError(f"labeled must be 0 or 1, got {labeled_str!r}")
    labeled = labeled_str == "1"
    if domain == SOURCE and not labeled:
        raise DataError("source rows must be labeled")
    img_path = base_dir / rel
    if not img_path.exists():
        raise DataError(f"image file missing: {img_path}")
    image = _load_image(img_path, canvas_size, channels)
    names = [n for n in label_field.split(";") if n]
    vec = encode_labels(names, domain, topology) if names else None
    if labeled:
        if vec is None:
            vec = encode_labels([], domain, topology)
        return Sample(image=image, domain=domain, labeled=True, labels=vec)
    return Sample(image=image, domain=domain, labeled=False, hidden_labels=vec)
