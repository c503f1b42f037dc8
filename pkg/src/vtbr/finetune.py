"""Re-ID transfer: PK batches, cross-entropy + batch-hard triplet loss, Adam with warmup."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from vtbr.errors import PreconditionError, SamplingError, TrainingDivergenceError
from vtbr.model import Backbone, ModelConfig, global_pool

log = logging.getLogger(__name__)

INIT_CHOICES = ("vtbr-checkpoint", "random", "external")


@dataclass
class FinetuneConfig:
    P: int = 16
    K: int = 4
    margin: float = 0.5
    steps: int = 200
    lr: float = 3.5e-4
    warmup_fraction: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    triplet: str = "batch_hard"
    seed: int = 0
    init: str = "vtbr-checkpoint"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.P < 2 or self.K < 2:
            raise ValueError("triplet mining needs P >= 2 identities and K >= 2 images each")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.triplet not in ("batch_hard", "all"):
            raise ValueError(f"unknown triplet variant {self.triplet!r}")
        if self.init not in INIT_CHOICES:
            raise ValueError(f"init must be one of {INIT_CHOICES}")

    @property
    def batch_size(self) -> int:
        return self.P * self.K

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class ReIDModel(nn.Module):
    def __init__(self, backbone: Backbone, num_classes: int):
        super().__init__()
        self.backbone = backbone
        self.classifier = nn.Linear(backbone.cfg.feature_dim, num_classes)
        nn.init.normal_(self.classifier.weight, std=0.001)
        nn.init.zeros_(self.classifier.bias)

    def forward(self, images):
        emb = global_pool(self.backbone(images))
        return self.classifier(emb), emb


def pk_sample(labels: Sequence[int], P: int, K: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """P distinct identities x K image indices each (with replacement when short)."""
    by_id: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        by_id.setdefault(int(lab), []).append(i)
    ids = sorted(by_id)
    if len(ids) < P:
        raise SamplingError(f"need {P} identities, dataset has {len(ids)}")
    chosen = [ids[i] for i in rng.choice(len(ids), size=P, replace=False)]
    batch = []
    for pid in chosen:
        pool = by_id[pid]
        picks = rng.choice(len(pool), size=K, replace=len(pool) < K)
        batch.extend((pool[j], pid) for j in picks)
    return batch


def pairwise_distances(x: torch.Tensor) -> torch.Tensor:
    diff = x[:, None, :] - x[None, :, :]
    return (diff * diff).sum(-1).clamp_min(1e-12).sqrt()


def _check_triplet_labels(labels: torch.Tensor):
    uniq, counts = torch.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise PreconditionError("triplet loss needs at least two distinct labels in the batch")
    if (counts < 2).any():
        raise PreconditionError(f"labels {uniq[counts < 2].tolist()} occur only once in the batch")


def triplet_hinge(d_ap, d_an, margin: float):
    """max(0, d_ap - d_an + margin)."""
    return F.relu(torch.as_tensor(d_ap) - torch.as_tensor(d_an) + margin)


def triplet_loss(embeddings: torch.Tensor, labels: torch.Tensor, margin: float, variant: str = "batch_hard") -> torch.Tensor:
    labels = torch.as_tensor(labels)
    _check_triplet_labels(labels)
    dist = pairwise_distances(embeddings)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos = same & ~eye
    neg = ~same
    if variant == "batch_hard":
        hardest_pos = dist.masked_fill(~pos, float("-inf")).max(dim=1).values
        hardest_neg = dist.masked_fill(~neg, float("inf")).min(dim=1).values
        return triplet_hinge(hardest_pos, hardest_neg, margin).mean()
    if variant == "all":
        valid = pos[:, :, None] & neg[:, None, :]
        losses = triplet_hinge(dist[:, :, None], dist[:, None, :], margin)
        return losses[valid].mean()
    raise ValueError(f"unknown triplet variant {variant!r}")


def reid_loss(logits, embeddings, labels, config: FinetuneConfig) -> torch.Tensor:
    return F.cross_entropy(logits, labels) + triplet_loss(embeddings, labels, config.margin, config.triplet)


def warmup_lr(step: int, config: FinetuneConfig) -> float:
    warm = max(1, int(round(config.warmup_fraction * config.steps)))
    return config.lr * min(1.0, (step + 1) / warm)


def fresh_backbone(model_cfg: ModelConfig, seed: int) -> Backbone:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Backbone(model_cfg)


def run_finetune(
    config: FinetuneConfig,
    images: np.ndarray,
    labels: Sequence[int],
    backbone: Backbone,
) -> tuple[ReIDModel, list[dict]]:
    """Fine-tune ``backbone`` (modified in place) with a fresh identity classifier."""
    classes = sorted(set(int(x) for x in labels))
    if len(classes) < 2:
        raise PreconditionError("triplet loss needs at least two training identities")
    if len(classes) < config.P:
        raise SamplingError(f"P={config.P} exceeds the {len(classes)} training identities")
    to_class = {c: i for i, c in enumerate(classes)}
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = ReIDModel(backbone, len(classes))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas, eps=config.eps,
                           weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    model.train()
    metrics = []
    for step in range(config.steps):
        batch = pk_sample(labels, config.P, config.K, rng)
        idx = [i for i, _ in batch]
        x = torch.from_numpy(images[idx])
        y = torch.tensor([to_class[pid] for _, pid in batch])
        lr = warmup_lr(step, config)
        for group in opt.param_groups:
            group["lr"] = lr
        logits, emb = model(x)
        ce = F.cross_entropy(logits, y)
        tri = triplet_loss(emb, y, config.margin, config.triplet)
        loss = ce + tri
        if not torch.isfinite(loss):
            raise TrainingDivergenceError(
                f"fine-tuning diverged at step {step}: ce={float(ce)}, triplet={float(tri)}, lr={lr}"
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        metrics.append({"step": step + 1, "loss": loss.item(), "ce": ce.item(), "triplet": tri.item(), "lr": lr})
        if (step + 1) % 50 == 0:
            log.info("finetune step %d loss %.4f", step + 1, loss.item())
    return model, metrics
