"""Whole-network gradient self-check on a small synthetic batch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import EyeNet, ModelConfig, NetworkInput, prepare_input
from .geometry import SpatialIndex, sample_human_vision_batch
from .pcio import RawPointCloud
from .training import lovasz_softmax_terms


@dataclass
class GradcheckConfig:
    N: int = 64
    widths: tuple[int, ...] = (4, 8, 8, 8, 8)
    k_schedule: tuple[int, ...] = (16, 16, 8, 8, 8)
    ratios: tuple[int, ...] = (2, 2, 2, 1, 1)
    num_classes: int = 3
    seed: int = 0
    eps: float = 1e-4
    tolerance: float = 1e-4
    bias_scale: float = 0.5
    variant: str = "parallel-cb"

    def model_config(self) -> ModelConfig:
        return ModelConfig(num_classes=self.num_classes, widths=self.widths, k_schedule=self.k_schedule,
                           ratios=self.ratios, variant=self.variant)


def toy_cloud(side: int = 30, spacing: float = 1.0, num_classes: int = 3, seed: int = 0) -> RawPointCloud:
    """Jittered square grid with gentle relief, labeled by quadrant."""
    rng = np.random.default_rng(seed)
    g = np.stack(np.meshgrid(np.arange(side), np.arange(side), indexing="ij"), -1).reshape(-1, 2) * spacing
    pos = np.c_[g + rng.normal(0, 0.15 * spacing, g.shape), rng.normal(0, 0.25 * spacing, len(g))]
    half = side * spacing / 2
    labels = ((pos[:, 0] > half).astype(int) + (pos[:, 1] > half)) % num_classes
    return RawPointCloud(pos, None, rng.uniform(size=len(g)), labels, num_classes)


def toy_problem(cfg: GradcheckConfig) -> tuple[EyeNet, NetworkInput]:
    """Model and input for the check, at a generic parameter point.

    Biases start at zero, which parks ReLU units of all-zero rows exactly on
    their kink; drawing them from a small uniform range moves the evaluation
    point off every kink.
    """
    cloud = toy_cloud(num_classes=cfg.num_classes, seed=cfg.seed)
    mcfg = cfg.model_config()
    model = EyeNet.create(mcfg, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    for name, p in model.registry.items():
        if name.endswith(".b"):
            p.data = rng.uniform(-cfg.bias_scale, cfg.bias_scale, p.shape)
    index = SpatialIndex(cloud.positions)
    center = int(index.knn(cloud.positions.mean(axis=0), 1)[0])
    batch = sample_human_vision_batch(cloud, index, center, cfg.N, np.random.default_rng([cfg.seed, 2]))
    return model, prepare_input(cloud, batch, mcfg, np.random.default_rng([cfg.seed, 3]))


def network_gradient_check(cfg: GradcheckConfig | None = None) -> dict[str, float]:
    """Max relative error per parameter tensor for Lovász loss over the full forward pass."""
    cfg = cfg or GradcheckConfig()
    model, inp = toy_problem(cfg)

    def terms():
        return lovasz_softmax_terms(T.softmax(model.forward(inp), axis=-1), inp.labels)

    return T.check_param_gradients(terms, model.registry, eps=cfg.eps)
