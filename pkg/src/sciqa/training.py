"""Training loop, per-batch objective and finite-difference gradient checks."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import save_model
from .data.manifest import DatasetManifest
from .data.patches import TripletBatch, sample_triplet_batch
from .errors import ConfigError, NumericError, SamplingError
from .evaluation import evaluate_model
from .losses import (
    HyperParams,
    LossBundle,
    classification_loss,
    kl_regularizers,
    mae_loss,
    total_loss,
    triplet_loss,
)
from .model import ModelConfig, QualityNet
from .stats import kl_to_standard_normal, median_bandwidths, mmd_gaussian, moments, normalize_distribution

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_triplets: int = 32
    patches_per_image: int = 16
    max_epochs: int = 200
    seed: int = 0
    eval_every: int = 1
    early_stop_patience: int = 20
    warmup_steps: int = 0
    hyper: HyperParams = field(default_factory=HyperParams)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for name in ("learning_rate", "batch_triplets", "patches_per_image", "max_epochs",
                     "eval_every", "early_stop_patience"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be non-negative")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.patches_per_image < 2:
            raise ConfigError("patches_per_image must be >= 2 for per-image std")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def batch_tensors(model: QualityNet, batch: TripletBatch) -> torch.Tensor:
    B, N = batch.size, batch.patches_per_image
    stacked = np.concatenate([batch.distorted, batch.reference, batch.auxiliary]).reshape(
        3 * B * N, *batch.distorted.shape[2:])
    return model.as_input(stacked)


def batch_loss(model: QualityNet, batch: TripletBatch, hyper: HyperParams = HyperParams(),
               gaussian_seed: int = 0, bandwidths=None):
    """Full objective over one triplet batch.

    Returns the LossBundle and a dict of intermediates (predictions, phi and
    attention of the distorted images, MMD bandwidths actually used).
    """
    B, N = batch.size, batch.patches_per_image
    fs, fd = model.features(batch_tensors(model, batch))
    D = fs.shape[-1]
    fs = fs.reshape(3, B, N, D)
    fd = fd.reshape(3, B, N, D)

    q, phi_dd, att = model.score_groups(fs[0], fd[0])
    mu_dd, sigma_dd = moments(fd[0], dim=-2)
    fdn = normalize_distribution(fd[0], mu_dd, sigma_dd).reshape(B * N, D)
    gen = torch.Generator().manual_seed(gaussian_seed)
    gaus = torch.randn(B * N, D, generator=gen, dtype=torch.float64).to(fdn.dtype)
    if bandwidths is None:
        bandwidths = median_bandwidths(fdn, gaus)

    sem = fs.mean(dim=2)
    scores = torch.as_tensor(batch.scores).to(q.dtype)
    labels = torch.as_tensor(batch.labels).repeat_interleave(N)
    phi_rd = kl_to_standard_normal(*moments(fd[1], dim=-2))
    phi_ad = kl_to_standard_normal(*moments(fd[2], dim=-2))
    reg_rd, reg_ad, reg_diff = kl_regularizers(phi_rd, phi_ad)

    bundle = total_loss({
        "mae": mae_loss(q, scores),
        "trip": triplet_loss(sem[1], sem[0], sem[2], hyper.alpha),
        "mmd": mmd_gaussian(fdn, gaus, bandwidths),
        "cls": classification_loss(model.classify_distortion(fd[0].reshape(B * N, D)), labels),
        "reg_rd": reg_rd, "reg_ad": reg_ad, "reg_diff": reg_diff,
    }, hyper)
    return bundle, {"pred": q, "phi": phi_dd, "attention": att, "bandwidths": bandwidths}


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999),
                             eps=1e-8, weight_decay=config.weight_decay)


def make_scheduler(optimizer: torch.optim.Optimizer, config: TrainConfig):
    """Linear warmup over ``warmup_steps`` steps, then constant."""
    w = config.warmup_steps
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: min(1.0, (step + 1) / w) if w else 1.0)


def epoch_chunks(n: int, B: int, seed: int, epoch: int) -> list[list[int]]:
    """Shuffle distorted indices into ceil(n / B) batches of exactly B distinct images."""
    rng = np.random.default_rng(_seed(seed, epoch, 1))
    order = rng.permutation(n).tolist()
    chunks = [order[i:i + B] for i in range(0, n, B)]
    last = chunks[-1]
    if len(last) < B:
        pool = [i for i in order if i not in set(last)]
        last.extend(rng.choice(pool, size=B - len(last), replace=False).tolist())
    return chunks


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_srcc: Optional[float] = None
    best_checkpoint: Optional[str] = None

    def epoch_mae(self) -> list[float]:
        return [e["train_mae"] for e in self.epochs]

    def summary(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_srcc": self.best_srcc,
                "best_checkpoint": self.best_checkpoint, "epochs": len(self.epochs),
                "steps": len(self.steps)}


class _JsonLines:
    def __init__(self, path: Optional[Path]):
        self.fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, record: dict) -> None:
        if self.fh:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def train(train_manifest: DatasetManifest, val_manifest: Optional[DatasetManifest],
          config: TrainConfig, out_dir=None,
          on_step: Optional[Callable[[int, LossBundle], None]] = None):
    """Optimize a fresh model; returns (model at best validation SRCC, TrainHistory).

    With ``out_dir`` the run writes ``train_log.jsonl``, ``best.ckpt`` and
    ``last.ckpt`` there.
    """
    distorted = train_manifest.distorted
    B, N = config.batch_triplets, config.patches_per_image
    if len(distorted) < B:
        raise SamplingError(f"{len(distorted)} distorted training images < batch size {B}")
    classes = config.model.class_names or train_manifest.distortion_types
    if len(classes) < 2:
        raise ConfigError("training needs at least two distortion types")
    model = QualityNet(replace(config.model, class_names=list(classes)), seed=config.seed)
    model.train()
    optimizer = make_optimizer(model, config)
    scheduler = make_scheduler(optimizer, config)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    logger = _JsonLines(out_dir / "train_log.jsonl" if out_dir else None)
    history = TrainHistory()
    best_state, stale, step = None, 0, 0
    try:
        for epoch in range(1, config.max_epochs + 1):
            maes = []
            for chunk in epoch_chunks(len(distorted), B, config.seed, epoch):
                batch = sample_triplet_batch(train_manifest, B, N, seed=_seed(config.seed, step, 2),
                                             indices=chunk, class_names=classes)
                optimizer.zero_grad(set_to_none=True)
                try:
                    bundle, _ = batch_loss(model, batch, config.hyper, gaussian_seed=_seed(config.seed, step, 3))
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch} step {step}: {exc}") from exc
                if not bundle.identity_holds():
                    raise NumericError(f"step {step}: loss bundle identity violated")
                bundle.total.backward()
                for name, p in model.named_parameters():
                    if p.grad is not None and not torch.isfinite(p.grad).all():
                        raise NumericError(f"epoch {epoch} step {step}: non-finite gradient in {name}")
                optimizer.step()
                scheduler.step()
                record = {"kind": "step", "epoch": epoch, "step": step, **bundle.as_dict()}
                history.steps.append(record)
                logger.write(record)
                if on_step:
                    on_step(step, bundle)
                maes.append(float(bundle.mae.detach()))
                step += 1
            erec = {"kind": "epoch", "epoch": epoch, "train_mae": float(np.mean(maes))}
            history.epochs.append(erec)
            logger.write(erec)
            log.info("epoch %d train MAE %.4f", epoch, erec["train_mae"])

            if val_manifest is None or epoch % config.eval_every:
                continue
            report = evaluate_model(model, val_manifest, group_by_type=False)
            vrec = {"kind": "eval", "epoch": epoch, **{k: report.overall[k] for k in ("srcc", "plcc", "rmse")}}
            history.evals.append(vrec)
            logger.write(vrec)
            val_srcc = report.overall["srcc"]
            if val_srcc is None:
                # constant predictions: nothing to rank yet, not a regression either
                log.warning("epoch %d: validation SRCC undefined", epoch)
                continue
            if history.best_srcc is None or val_srcc > history.best_srcc:
                history.best_srcc, history.best_epoch, stale = val_srcc, epoch, 0
                best_state = copy.deepcopy(model.state_dict())
                if out_dir:
                    save_model(model, out_dir / "best.ckpt")
                    history.best_checkpoint = str(out_dir / "best.ckpt")
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    log.info("early stop at epoch %d", epoch)
                    break
    finally:
        logger.close()

    if out_dir:
        save_model(model, out_dir / "last.ckpt")
        if history.best_checkpoint is None:
            history.best_checkpoint = str(out_dir / "last.ckpt")
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


# --- finite-difference gradient check -------------------------------------


@dataclass
class GradCheckReport:
    checked: list = field(default_factory=list)  # (name, index, analytic, numeric, rel_err)
    skipped: list = field(default_factory=list)  # (name, index, reason)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((c[4] for c in self.checked), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.checked) and self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {"max_rel_error": self.max_rel_error, "tolerance": self.tolerance,
                "passed": self.passed, "n_checked": len(self.checked), "n_skipped": len(self.skipped),
                "checked": [list(c) for c in self.checked], "skipped": [list(s) for s in self.skipped]}


class _ActivationPattern:
    """Records which side of every ReLU / max-pool kink the last forward pass was on."""

    def __init__(self, model: torch.nn.Module):
        self.current = []
        self.handles = []
        for mod in model.modules():
            if isinstance(mod, torch.nn.ReLU):
                self.handles.append(mod.register_forward_hook(self._relu))
            elif isinstance(mod, torch.nn.MaxPool2d):
                self.handles.append(mod.register_forward_hook(self._pool))

    def _relu(self, mod, inputs, output):
        self.current.append(inputs[0] > 0)

    def _pool(self, mod, inputs, output):
        _, idx = torch.nn.functional.max_pool2d(inputs[0], mod.kernel_size, mod.stride, return_indices=True)
        self.current.append(idx)

    def take(self) -> list:
        out, self.current = self.current, []
        return out

    def remove(self):
        for h in self.handles:
            h.remove()


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def gradient_check(model: QualityNet, batch: Optional[TripletBatch] = None,
                   hyper: HyperParams = HyperParams(), n_params: int = 200, seed: int = 0,
                   h_rel: float = 1e-5, tolerance: float = 1e-4,
                   loss_fn: Optional[Callable[[QualityNet], torch.Tensor]] = None,
                   params: Optional[Sequence[str]] = None) -> GradCheckReport:
    """Compare autograd gradients of the total loss with central differences in float64.

    ``params`` restricts probing to the named parameters. A probe is skipped
    and re-drawn when moving the parameter by +-h flips any ReLU or changes
    any max-pool winner, or when the difference quotient changes between
    steps h and h/2.
    """
    model = copy.deepcopy(model).double()
    if loss_fn is None:
        if batch is None:
            raise ValueError("need a batch or a loss_fn")
        gseed = _seed(seed, 4)
        _, info = batch_loss(model, batch, hyper, gaussian_seed=gseed)
        bw = info["bandwidths"]  # frozen so both routes see the same kernel

        def loss_fn(m):
            return batch_loss(m, batch, hyper, gaussian_seed=gseed, bandwidths=bw)[0].total

    named = [(n, p) for n, p in model.named_parameters() if params is None or n in set(params)]
    if not named:
        raise ValueError(f"no parameters match {params}")
    pattern = _ActivationPattern(model)
    try:
        model.zero_grad(set_to_none=True)
        base = loss_fn(model)
        base.backward()
        base_pattern = pattern.take()
        grads = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in named}
        scale = max(1.0, abs(float(base.detach())))

        def f_at(p, idx, value):
            flat = p.data.view(-1)
            old = flat[idx].item()
            flat[idx] = value
            with torch.no_grad():
                out = float(loss_fn(model))
            flat[idx] = old
            return out, pattern.take()

        rng = np.random.default_rng(seed)
        report = GradCheckReport(tolerance=tolerance)
        attempts, seen = 0, set()
        total = sum(p.numel() for _, p in named)
        target = min(n_params, total)
        while len(report.checked) < target and len(seen) < total and attempts < 20 * n_params:
            attempts += 1
            name, p = named[rng.integers(len(named))]
            idx = int(rng.integers(p.numel()))
            if (name, idx) in seen:
                continue
            seen.add((name, idx))
            theta = p.data.view(-1)[idx].item()
            h = h_rel * max(abs(theta), 1.0)
            (fp, pat_p), (fm, pat_m) = f_at(p, idx, theta + h), f_at(p, idx, theta - h)
            if not (_same_pattern(pat_p, base_pattern) and _same_pattern(pat_m, base_pattern)):
                report.skipped.append((name, idx, "kink: activation pattern changes within +-h"))
                continue
            c1 = (fp - fm) / (2 * h)
            c2 = (f_at(p, idx, theta + h / 2)[0] - f_at(p, idx, theta - h / 2)[0]) / h
            a = float(grads[name].view(-1)[idx])
            floor = 1e-8 * scale
            if abs(c1 - c2) > 0.1 * tolerance * max(abs(c1), abs(c2), floor):
                report.skipped.append((name, idx, "kink: difference quotient depends on step"))
                continue
            err = abs(a - c1) / max(abs(a), abs(c1), floor)
            report.checked.append((name, idx, a, c1, err))
    finally:
        pattern.remove()
    return report
