"""Evaluation tooling: exact rank-based AUC-ROC, Proxy-A-Distance from a
linear max-margin domain classifier, Grad-CAM saliency maps, and feature
export for external 2-D projection tools.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .labels import TARGET, LabelTopology, decode_labels
from .networks import AdaptationModel


class EvaluationError(ValueError):
    """Invalid evaluation inputs."""


class UndefinedAucError(EvaluationError):
    """AUC is undefined: the inputs contain only one class."""


def auc_roc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative, ties
    counted one half. Rank-based (average ranks over ties), hence exact."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise EvaluationError("scores and labels must be 1-D of equal length")
    if not np.isin(labels, (0, 1)).all():
        raise EvaluationError("labels must be 0 or 1")
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("AUC undefined: need at least one positive and one negative")

    order = np.argsort(scores, kind="stable")
    s = scores[order]
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * ((i + 1) + (j + 1))  # average 1-based rank
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _forward_scores(model: AdaptationModel, samples, chunk: int = 64) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(samples), chunk):
            imgs = np.ascontiguousarray(
                np.stack([s.image for s in samples[i:i + chunk]]).transpose(0, 3, 1, 2)
            )
            out.append(model(torch.from_numpy(imgs)).y_hat.numpy())
    return np.concatenate(out, axis=0)


def per_label_auc(model: AdaptationModel, samples, topology: LabelTopology) -> dict:
    """AUC of each target-domain label's predicted probability against the
    ground truth (visible or hidden) over the target-domain samples.
    Labels where only one class is present map to None (undefined)."""
    samples = [s for s in samples if s.domain == TARGET]
    if not samples:
        raise EvaluationError("evaluation set contains no target-domain samples")
    scores = _forward_scores(model, samples)
    truth = np.stack([s.eval_labels().values for s in samples])
    result = {}
    for name in topology.target_labels:
        idx = topology.index[name]
        try:
            result[name] = auc_roc(scores[:, idx], truth[:, idx])
        except UndefinedAucError:
            result[name] = None
    return result


@dataclass
class EvalReport:
    auc_by_label: dict
    mean_target_auc: float | None
    pad: float | None = None

    def to_dict(self) -> dict:
        return {
            "auc_by_label": self.auc_by_label,
            "mean_target_auc": self.mean_target_auc,
            "pad": self.pad,
        }


def evaluate(model: AdaptationModel, samples, topology: LabelTopology) -> EvalReport:
    aucs = per_label_auc(model, samples, topology)
    defined = [v for v in aucs.values() if v is not None]
    mean = float(np.mean(defined)) if defined else None
    return EvalReport(auc_by_label=aucs, mean_target_auc=mean)


# ---------------------------------------------------------------------------
# Proxy-A-Distance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PadConfig:
    c_grid: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)
    split_fraction: float = 0.5  # held-out fraction
    epochs: int = 300
    step_size: float = 0.1
    seed: int = 0
    repeats: int = 1

    def validate(self) -> None:
        if not self.c_grid or min(self.c_grid) <= 0:
            raise EvaluationError("c_grid must be non-empty with positive entries")
        if not 0.0 < self.split_fraction < 1.0:
            raise EvaluationError("split_fraction must lie strictly in (0, 1)")
        if self.epochs < 1 or self.step_size <= 0 or self.repeats < 1:
            raise EvaluationError("epochs, step_size and repeats must be positive")


def pad_from_error(error: float) -> float:
    """Distance from a held-out domain-classification error: 2 (1 - 2 err)."""
    return 2.0 * (1.0 - 2.0 * error)


def _fit_hinge(X: np.ndarray, y_pm: np.ndarray, c: float, epochs: int, step_size: float):
    """Full-batch subgradient descent on mean hinge loss + ||w||^2 / (2C)."""
    w = np.zeros(X.shape[1])
    b = 0.0
    n = X.shape[0]
    for t in range(epochs):
        margin = y_pm * (X @ w + b)
        active = margin < 1.0
        gw = -(X[active] * y_pm[active, None]).sum(axis=0) / n + w / c
        gb = -y_pm[active].sum() / n
        lr = step_size / np.sqrt(t + 1.0)
        w -= lr * gw
        b -= lr * gb
    return w, b


def _pad_once(fs: np.ndarray, ft: np.ndarray, cfg: PadConfig, seed: int) -> tuple[float, dict]:
    X = np.concatenate([fs, ft], axis=0)
    y = np.concatenate([np.ones(fs.shape[0]), -np.ones(ft.shape[0])])
    rng = np.random.default_rng(seed)
    order = rng.permutation(X.shape[0])
    n_test = int(round(cfg.split_fraction * X.shape[0]))
    test_idx, train_idx = order[:n_test], order[n_test:]
    X_train, y_train = X[train_idx], y[train_idx]
    X_test, y_test = X[test_idx], y[test_idx]

    # standardize with train statistics; purely a conditioning aid for the
    # subgradient optimizer, the classifier family is unchanged
    mu = X_train.mean(axis=0)
    sd = np.maximum(X_train.std(axis=0), 1e-12)
    X_train = (X_train - mu) / sd
    X_test = (X_test - mu) / sd

    errors = {}
    for c in cfg.c_grid:
        w, b = _fit_hinge(X_train, y_train, c, cfg.epochs, cfg.step_size)
        pred01 = (X_test @ w + b >= 0.0).astype(np.float64)
        true01 = (y_test > 0).astype(np.float64)
        errors[c] = float(np.mean(np.abs(pred01 - true01)))
    eps = min(errors.values())
    return pad_from_error(eps), errors


def proxy_a_distance(features_source: np.ndarray, features_target: np.ndarray,
                     cfg: PadConfig | None = None) -> float:
    """Domain discrepancy 2 (1 - 2 min_C err_C) from linear max-margin
    domain classifiers trained per C on a shuffled split.

    With repeats > 1, distances from ``repeats`` different split seeds are
    averaged. No clamping: degenerate classifiers may yield negative values
    and these are reported as-is.
    """
    cfg = cfg or PadConfig()
    cfg.validate()
    fs = np.asarray(features_source, dtype=np.float64)
    ft = np.asarray(features_target, dtype=np.float64)
    if fs.size == 0 or ft.size == 0:
        raise EvaluationError("both feature matrices must be non-empty")
    if fs.ndim != 2 or ft.ndim != 2 or fs.shape[1] != ft.shape[1]:
        raise EvaluationError(
            f"feature matrices must be 2-D of equal width, got {fs.shape} vs {ft.shape}"
        )
    values = [
        _pad_once(fs, ft, cfg, cfg.seed + k)[0] for k in range(cfg.repeats)
    ]
    return float(np.mean(values))


def pad_report(features_source, features_target, cfg: PadConfig | None = None) -> dict:
    """proxy_a_distance plus the per-C held-out errors for each repeat."""
    cfg = cfg or PadConfig()
    cfg.validate()
    fs = np.asarray(features_source, dtype=np.float64)
    ft = np.asarray(features_target, dtype=np.float64)
    runs = []
    for k in range(cfg.repeats):
        d, errors = _pad_once(fs, ft, cfg, cfg.seed + k)
        runs.append({"seed": cfg.seed + k, "d_a": d, "errors_by_c": errors})
    return {"d_a": float(np.mean([r["d_a"] for r in runs])), "runs": runs}


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------


@dataclass
class SaliencyMap:
    """Non-negative saliency grid at conv-map resolution plus its bilinear
    upsampling to image resolution; both max-normalized when non-zero."""

    grid: np.ndarray
    overlay: np.ndarray
    label: str


def grad_cam(model: AdaptationModel, image: np.ndarray, label: str) -> SaliencyMap:
    """Saliency over the last conv map: channel weights are the spatial
    means of the label logit's gradient; map is the ReLU of the weighted
    channel sum."""
    if label not in model.label_names:
        raise EvaluationError(f"unknown label {label!r}; model knows {model.label_names}")
    idx = model.label_names.index(label)
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]
    trace = model(x)
    logit = trace.y_logit[0, idx]
    grads = torch.autograd.grad(logit, trace.conv_activations)[0]
    weights = grads.mean(dim=(2, 3))
    cam = torch.relu((weights[:, :, None, None] * trace.conv_activations).sum(dim=1))
    grid = cam[0].detach().numpy()
    if grid.max() > 0:
        grid = grid / grid.max()
    h, w = image.shape[0], image.shape[1]
    up = torch.nn.functional.interpolate(
        cam.detach()[None], size=(h, w), mode="bilinear", align_corners=False
    )[0, 0].numpy()
    if up.max() > 0:
        up = up / up.max()
    return SaliencyMap(grid=grid, overlay=up, label=label)


def saliency_centroid(grid: np.ndarray) -> tuple[float, float]:
    """Mass-weighted (row, col) centroid; the grid center if mass is zero."""
    total = grid.sum()
    if total == 0:
        return ((grid.shape[0] - 1) / 2.0, (grid.shape[1] - 1) / 2.0)
    rows, cols = np.meshgrid(np.arange(grid.shape[0]), np.arange(grid.shape[1]), indexing="ij")
    return (float((rows * grid).sum() / total), float((cols * grid).sum() / total))


def write_saliency(smap: SaliencyMap, image: np.ndarray, out_png,
                   image_path: str | None = None) -> Path:
    """Overlay PNG (salient regions in red over the grayscale image) plus a
    JSON sidecar next to it."""
    out_png = Path(out_png)
    gray = image[:, :, 0] if image.shape[2] == 1 else image.mean(axis=2)
    heat = smap.overlay
    rgb = np.stack([
        np.clip(0.5 * gray + 0.5 * heat, 0.0, 1.0),
        np.clip(0.5 * gray * (1.0 - heat) + 0.5 * gray, 0.0, 1.0),
        np.clip(0.5 * gray * (1.0 - heat) + 0.5 * gray, 0.0, 1.0),
    ], axis=2)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(out_png)
    sidecar = out_png.with_suffix(".json")
    with open(sidecar, "w") as fh:
        json.dump({
            "label": smap.label,
            "image_path": image_path,
            "map_shape": list(smap.grid.shape),
        }, fh, sort_keys=True)
        fh.write("\n")
    return out_png


# ---------------------------------------------------------------------------
# Feature export
# ---------------------------------------------------------------------------


def extract_features(model: AdaptationModel, samples, chunk: int = 64) -> np.ndarray:
    feats = []
    with torch.no_grad():
        for i in range(0, len(samples), chunk):
            imgs = np.ascontiguousarray(
                np.stack([s.image for s in samples[i:i + chunk]]).transpose(0, 3, 1, 2)
            )
            feats.append(model.features(torch.from_numpy(imgs)).numpy())
    return np.concatenate(feats, axis=0)


def export_features(model: AdaptationModel, samples, path, topology: LabelTopology) -> Path:
    """One CSV row per sample: domain, labeled flag, label names if known,
    then the feature vector at 17 significant digits (full float64)."""
    samples = list(samples)
    if not samples:
        raise EvaluationError("cannot export features of an empty dataset")
    feats = extract_features(model, samples)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = feats.shape[1]
    try:
        with open(path, "w", newline="") as fh:
            fh.write("domain,labeled,labels," + ",".join(f"f{i}" for i in range(dim)) + "\n")
            for sample, row in zip(samples, feats):
                lv = sample.labels if sample.labeled else sample.hidden_labels
                names = ";".join(decode_labels(lv, topology)) if lv is not None else ""
                vals = ",".join(f"{v:.17g}" for v in row)
                fh.write(f"{sample.domain},{int(sample.labeled)},{names},{vals}\n")
    except OSError as exc:
        raise EvaluationError(f"failed to write feature file {path}: {exc}") from exc
    return path


def read_feature_file(path):
    """Read a feature CSV back into (features, domains, labeled, label names)."""
    path = Path(path)
    domains, labeled, names, rows = [], [], [], []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split(",")
        if header[:3] != ["domain", "labeled", "labels"]:
            raise EvaluationError(f"{path}: not a feature file (header {header[:3]})")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            domains.append(parts[0])
            labeled.append(parts[1] == "1")
            names.append(parts[2])
            rows.append([float(v) for v in parts[3:]])
    return np.asarray(rows, dtype=np.float64), domains, labeled, names
