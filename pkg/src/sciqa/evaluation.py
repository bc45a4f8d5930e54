"""Correlation metrics, evaluation runners and feature-statistics reports."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy import optimize, stats

from .data.manifest import DatasetManifest
from .errors import UndefinedMetricError


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {gt.size}")
    return pred, gt


def _pearson(x, y):
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc)))
    return float(np.clip(np.dot(xc, yc) / denom, -1.0, 1.0))


def srcc(pred, gt) -> float:
    """Spearman rank correlation, ties given their average rank."""
    pred, gt = _pair(pred, gt)
    if pred.size < 2 or np.all(gt == gt[0]) or np.all(pred == pred[0]):
        raise UndefinedMetricError("SRCC needs >= 2 samples and non-constant inputs")
    return _pearson(stats.rankdata(pred), stats.rankdata(gt))


def plcc(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    if pred.size < 2 or np.all(gt == gt[0]) or np.all(pred == pred[0]):
        raise UndefinedMetricError("PLCC needs >= 2 samples and non-zero variance")
    return _pearson(pred, gt)


def rmse(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.sqrt(np.mean((pred - gt) ** 2)))


def logistic4(x, b1, b2, b3, b4):
    return (b1 - b2) / (1.0 + np.exp(-(x - b3) / np.abs(b4))) + b2


def logistic_fit(pred, gt) -> np.ndarray:
    """Map predictions through a monotone 4-parameter logistic fitted to gt."""
    pred, gt = _pair(pred, gt)
    p0 = [gt.max(), gt.min(), float(np.median(pred)), float(np.std(pred)) or 1.0]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", optimize.OptimizeWarning)
            params, _ = optimize.curve_fit(logistic4, pred, gt, p0=p0, maxfev=20000)
    except RuntimeError:
        return pred
    return logistic4(pred, *params)


def metric_triplet(pred, gt, logistic: bool = False) -> dict:
    mapped = logistic_fit(pred, gt) if logistic else pred
    out = {"rmse": rmse(mapped, gt), "count": int(len(gt))}
    for name, fn, x in (("srcc", srcc, pred), ("plcc", plcc, mapped)):
        try:
            out[name] = fn(x, gt)
        except UndefinedMetricError:
            out[name] = None
    return out


@dataclass
class Prediction:
    image: str
    distortion_type: str
    distortion_level: int
    predicted: float
    ground_truth: float


@dataclass
class EvalReport:
    dataset: str
    overall: dict
    per_type: dict
    predictions: list
    skipped: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "overall": self.overall,
            "per_type": self.per_type,
            "predictions": [p.__dict__ for p in self.predictions],
            "skipped": self.skipped,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "distortion_type", "distortion_level", "predicted", "ground_truth"])
        for p in self.predictions:
            w.writerow([p.image, p.distortion_type, p.distortion_level,
                        repr(p.predicted), repr(p.ground_truth)])
        return buf.getvalue()


def predict_manifest(model, manifest: DatasetManifest, include_pristine: bool = False):
    """Score every distorted record; unreadable images are skipped with a reason."""
    preds, skipped = [], []
    was_training = model.training
    model.eval()
    try:
        for rec in manifest.records:
            if rec.is_pristine and not include_pristine:
                continue
            try:
                image = manifest.load_image(rec)
                q = model.predict_quality(image)
            except (OSError, ValueError) as exc:
                skipped.append({"image": rec.image_path, "reason": f"{type(exc).__name__}: {exc}"})
                continue
            preds.append(Prediction(rec.image_path, rec.distortion_type, rec.distortion_level,
                                    q, float("nan") if rec.score is None else rec.score))
    finally:
        model.train(was_training)
    return preds, skipped


def evaluate_model(model, manifest: DatasetManifest, group_by_type: bool = True,
                   label: Optional[str] = None, logistic: bool = False) -> EvalReport:
    preds, skipped = predict_manifest(model, manifest)
    q = np.array([p.predicted for p in preds])
    g = np.array([p.ground_truth for p in preds])
    overall = metric_triplet(q, g, logistic) if preds else {"count": 0, "srcc": None, "plcc": None, "rmse": None}
    per_type = {}
    if group_by_type:
        for t in dict.fromkeys(p.distortion_type for p in preds):
            idx = [i for i, p in enumerate(preds) if p.distortion_type == t]
            per_type[t] = metric_triplet(q[idx], g[idx], logistic)
    return EvalReport(label or manifest.name, overall, per_type, preds, skipped)


def evaluate(checkpoint, manifest: DatasetManifest, group_by_type: bool = True,
             train_name: Optional[str] = None, logistic: bool = False) -> EvalReport:
    """Evaluate a checkpoint file (or loaded model); cross-dataset runs are labeled 'A→B'."""
    from .checkpoint import load_model

    model = load_model(checkpoint) if not isinstance(checkpoint, torch.nn.Module) else checkpoint
    label = f"{train_name}→{manifest.name}" if train_name and train_name != manifest.name else manifest.name
    return evaluate_model(model, manifest, group_by_type, label, logistic)


# --- feature statistics report -------------------------------------------


@dataclass
class HistogramBundle:
    dataset: str
    images: list  # per-image summaries
    histograms: dict  # quantity -> {"edges", "pristine", "distorted"}

    def to_json(self) -> str:
        return json.dumps({"dataset": self.dataset, "images": self.images,
                           "histograms": self.histograms}, sort_keys=True, indent=2)


def _histogram(pristine, distorted, bins: int):
    joint = np.concatenate([np.ravel(pristine), np.ravel(distorted)]) if len(pristine) + len(distorted) else np.zeros(1)
    edges = np.histogram_bin_edges(joint, bins=bins)
    return {
        "edges": edges.tolist(),
        "pristine": np.histogram(np.ravel(pristine), bins=edges)[0].tolist(),
        "distorted": np.histogram(np.ravel(distorted), bins=edges)[0].tolist(),
    }


def stats_report(checkpoint, manifest: DatasetManifest, bins: int = 40) -> HistogramBundle:
    """Distortion-feature statistics per image plus pristine-vs-distorted histograms."""
    from .checkpoint import load_model

    model = load_model(checkpoint) if not isinstance(checkpoint, torch.nn.Module) else checkpoint
    model.eval()
    images = []
    groups = {"mu": ([], []), "sigma": ([], []), "phi_sum": ([], [])}
    for rec in manifest.records:
        try:
            mu, sigma, phi = model.image_statistics(manifest.load_image(rec))
        except (OSError, ValueError):
            continue
        side = 0 if rec.is_pristine else 1
        groups["mu"][side].append(mu)
        groups["sigma"][side].append(sigma)
        groups["phi_sum"][side].append(float(phi.sum()))
        images.append({
            "image": rec.image_path, "distortion_type": rec.distortion_type,
            "distortion_level": rec.distortion_level, "pristine": rec.is_pristine,
            "mu_mean": float(mu.mean()), "sigma_mean": float(sigma.mean()),
            "phi_sum": float(phi.sum()),
        })
    hists = {k: _histogram(np.asarray(p, dtype=np.float64), np.asarray(d, dtype=np.float64), bins)
             for k, (p, d) in groups.items()}
    return HistogramBundle(manifest.name, images, hists)
