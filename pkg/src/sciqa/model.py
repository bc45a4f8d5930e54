"""Multi-scale feature generator, disentanglement heads and quality regressor.

Parameter namespace (checkpoint contract)::

    stages.{t}.conv{k}.weight / .bias      t = 0..4, k = 1..convs_per_stage[t]
    fuse.conv1.weight / .bias              3x3 conv on the 3x3 pooled map
    fuse.conv2.weight / .bias              1x1 conv
    semantic.fc1 / semantic.fc2            semantic head (two 1x1 convs, ReLU after each)
    distortion.fc1 / distortion.fc2        distortion head (ReLU, then linear output)
    attention.fc1 / attention.fc2          channel attention (ReLU, sigmoid)
    regressor.fc                           quality regressor (ReLU output)
    classifier.fc                          distortion-type logits
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data.patches import PATCH_SIZE, extract_patches
from .errors import ConfigError, NumericError
from .stats import kl_to_standard_normal, moments, safe_sqrt

SUPPORTED_FEATURE_DIMS = (256, 512, 1792, 2048)
POOL_CELLS = 3


@dataclass
class ModelConfig:
    stage_channels: tuple = (32, 64, 128, 256, 256)
    convs_per_stage: tuple = (2, 2, 2, 2, 2)
    feature_dim: int = 512
    num_classes: int = 7
    patch_size: int = PATCH_SIZE
    class_names: Optional[list] = None

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.convs_per_stage = tuple(int(c) for c in self.convs_per_stage)
        if self.class_names is not None:
            self.class_names = [str(c) for c in self.class_names]
            self.num_classes = len(self.class_names)
        if len(self.stage_channels) != 5 or len(self.convs_per_stage) != 5:
            raise ConfigError("stage_channels and convs_per_stage need five entries")
        if min(self.stage_channels) < 1 or min(self.convs_per_stage) < 1:
            raise ConfigError("stage widths and conv counts must be positive")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if self.num_classes < 2:
            raise ConfigError("need at least two distortion classes")
        if self.patch_size != PATCH_SIZE:
            raise ConfigError(f"patch_size is fixed at {PATCH_SIZE}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["convs_per_stage"] = list(self.convs_per_stage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def adaptive_windows(size: int, cells: int = POOL_CELLS) -> list[tuple[int, int]]:
    """Floor/ceil partition of ``size`` into ``cells`` (possibly overlapping) windows."""
    return [(math.floor(i * size / cells), math.ceil((i + 1) * size / cells)) for i in range(cells)]


def adaptive_mean_std_pool(x: torch.Tensor, cells: int = POOL_CELLS):
    """Adaptive mean and (population) std pooling of NCHW maps to cells x cells."""
    rows = adaptive_windows(x.shape[-2], cells)
    cols = adaptive_windows(x.shape[-1], cells)
    means, stds = [], []
    for r0, r1 in rows:
        for c0, c1 in cols:
            win = x[..., r0:r1, c0:c1]
            m = win.mean(dim=(-2, -1), keepdim=True)
            dev = win - m
            means.append(m)
            stds.append(safe_sqrt((dev * dev).mean(dim=(-2, -1), keepdim=True)))
    shape = x.shape[:-2] + (cells, cells)
    return torch.cat(means, -1).reshape(shape), torch.cat(stds, -1).reshape(shape)


def _head(d_in: int, d_out: int, last) -> nn.Sequential:
    return nn.Sequential(OrderedDict(
        fc1=nn.Linear(d_in, d_out), act1=nn.ReLU(), fc2=nn.Linear(d_out, d_out), act2=last,
    ))


class QualityNet(nn.Module):
    def __init__(self, config: ModelConfig = None, seed: int = 0):
        super().__init__()
        self.config = config = config or ModelConfig()
        stages = []
        c_in = 3
        for width, n_conv in zip(config.stage_channels, config.convs_per_stage):
            layers = OrderedDict()
            for k in range(1, n_conv + 1):
                layers[f"conv{k}"] = nn.Conv2d(c_in, width, 3, padding=1)
                layers[f"relu{k}"] = nn.ReLU()
                c_in = width
            layers["pool"] = nn.MaxPool2d(2)
            stages.append(nn.Sequential(layers))
        self.stages = nn.ModuleList(stages)

        D = config.feature_dim
        fused = 2 * sum(config.stage_channels)
        self.fuse = nn.Sequential(OrderedDict(
            conv1=nn.Conv2d(fused, D, 3, padding=1), relu1=nn.ReLU(),
            conv2=nn.Conv2d(D, D, 1), relu2=nn.ReLU(),
        ))
        self.semantic = _head(D, D, nn.ReLU())
        # signed output: the pristine target is a standard normal
        self.distortion = _head(D, D, nn.Identity())
        self.attention = _head(D, D, nn.Sigmoid())
        self.regressor = nn.Sequential(OrderedDict(fc=nn.Linear(D, 1), relu=nn.ReLU()))
        self.classifier = nn.Sequential(OrderedDict(fc=nn.Linear(D, config.num_classes)))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0) -> None:
        """Fan-in scaled zero-mean uniform weights, zero biases.

        The regressor is the exception: its inputs are non-negative, so its
        weights are drawn from [0, bound) to keep the output ReLU alive.
        """
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                    continue
                bound = math.sqrt(6.0 / p[0].numel())
                u = torch.rand(p.shape, generator=gen, dtype=torch.float64)
                p.copy_(u * bound if name.startswith("regressor.") else u * 2 * bound - bound)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def as_input(self, patches) -> torch.Tensor:
        """(P, 32, 32, 3) array or tensor -> NCHW tensor in the model dtype."""
        x = torch.as_tensor(np.asarray(patches) if not torch.is_tensor(patches) else patches)
        if x.ndim == 4 and x.shape[-1] == 3:
            x = x.permute(0, 3, 1, 2)
        return x.to(self.dtype).contiguous()

    # --- pipeline pieces -------------------------------------------------

    def multiscale_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        if not torch.isfinite(x).all():
            raise NumericError("non-finite values in input patches")
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps

    def pooled_quality_feature(self, maps: Sequence[torch.Tensor]) -> torch.Tensor:
        pooled = []
        for m in maps:
            mean, std = adaptive_mean_std_pool(m)
            pooled.append(torch.cat([mean, std], dim=1))
        fused = self.fuse(torch.cat(pooled, dim=1))
        return fused.mean(dim=(-2, -1))

    def disentangle(self, fqua: torch.Tensor):
        return self.semantic(fqua), self.distortion(fqua)

    def attention_weights(self, semantic: torch.Tensor) -> torch.Tensor:
        return self.attention(semantic)

    def classify_distortion(self, fd: torch.Tensor) -> torch.Tensor:
        return self.classifier(fd)

    def regress(self, attention: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
        return self.regressor(attention * phi).squeeze(-1)

    def features(self, x: torch.Tensor):
        """Patches -> (semantic, distortion) features, each (P, D)."""
        return self.disentangle(self.pooled_quality_feature(self.multiscale_features(x)))

    def score_groups(self, semantic: torch.Tensor, distortion: torch.Tensor):
        """Quality from grouped features of shape (..., N, D).

        Returns (score, phi, attention); the attention input is the mean
        semantic feature of each group.
        """
        if distortion.shape[-2] == 1:
            # a lone patch has no spread; sigma is clamped inside the KL
            mu, sigma = distortion.squeeze(-2), torch.zeros_like(distortion.squeeze(-2))
        else:
            mu, sigma = moments(distortion, dim=-2)
        phi = kl_to_standard_normal(mu, sigma)
        att = self.attention_weights(semantic.mean(dim=-2))
        return self.regress(att, phi), phi, att

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """Score one image given all of its patches (P, 3, 32, 32)."""
        fs, fd = self.features(patches)
        q, _, _ = self.score_groups(fs, fd)
        return q

    @torch.no_grad()
    def predict_quality(self, image) -> float:
        """Predicted DMOS-like score for a full image, using every non-overlapping patch."""
        patches = extract_patches(np.asarray(image), self.config.patch_size)
        return float(self(self.as_input(patches)))

    @torch.no_grad()
    def image_statistics(self, image):
        """(mu, sigma, phi) of the distortion features over all patches of an image."""
        patches = extract_patches(np.asarray(image), self.config.patch_size)
        _, fd = self.features(self.as_input(patches))
        mu, sigma = moments(fd, dim=-2)
        return mu.numpy(), sigma.numpy(), kl_to_standard_normal(mu, sigma).numpy()
