"""Joint captioning pretraining: SGD with momentum inside LookAhead.

The two learning rates (visual backbone vs. everything textual) follow the
same shape: linear warmup to the peak, then cosine decay to zero.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from vtbr.errors import ScheduleRangeError, TrainingDivergenceError
from vtbr.model import ModelConfig, VTBRModel, bicaption_loss, direction_nll, pad_batch, project, visual_forward

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    # raw values are the full-scale peaks; the effective peak is raw * lr_scale
    max_lr_visual: float = 0.2
    max_lr_textual: float = 1e-3
    reference_batch: int = 256
    lr_scale: float | None = None
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lookahead_alpha: float = 0.5
    lookahead_k: int = 5
    warmup_steps: int = 50
    total_steps: int = 600
    batch_size: int = 32
    seed: int = 0
    grad_clip: float | None = 10.0
    holdout_fraction: float = 0.1
    log_every: int = 50

    def __post_init__(self):
        positive = {
            "max_lr_visual": self.max_lr_visual,
            "max_lr_textual": self.max_lr_textual,
            "reference_batch": self.reference_batch,
            "momentum": self.momentum,
            "lookahead_k": self.lookahead_k,
            "batch_size": self.batch_size,
        }
        for name, v in positive.items():
            if v <= 0:
                raise ValueError(f"{name} must be positive, got {v}")
        if self.weight_decay < 0 or self.warmup_steps < 0 or self.total_steps < 0:
            raise ValueError("weight_decay, warmup_steps and total_steps must be non-negative")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be smaller than total_steps")
        if not 0.0 <= self.lookahead_alpha <= 1.0:
            raise ValueError("lookahead_alpha must lie in [0, 1]")

    @property
    def scale(self) -> float:
        if self.lr_scale is not None:
            return self.lr_scale
        return self.batch_size / self.reference_batch

    @property
    def peak_lrs(self) -> tuple[float, float]:
        return self.max_lr_visual * self.scale, self.max_lr_textual * self.scale

    def to_dict(self) -> dict:
        d = asdict(self)
        d["effective_max_lr_visual"], d["effective_max_lr_textual"] = self.peak_lrs
        return d


def lr_at_step(step: int, config: PretrainConfig) -> tuple[float, float]:
    if not 0 <= step <= config.total_steps:
        raise ScheduleRangeError(f"step {step} outside [0, {config.total_steps}]")
    peak_v, peak_t = config.peak_lrs
    w, total = config.warmup_steps, config.total_steps
    if step < w:
        factor = step / w
    elif total == w:
        factor = 1.0
    else:
        factor = 0.5 * (1.0 + math.cos(math.pi * (step - w) / (total - w)))
    return peak_v * factor, peak_t * factor


@torch.no_grad()
def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float, weight_decay: float):
    """v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v.  Updates in place."""
    for g in grads:
        if g is not None and not torch.isfinite(g).all():
            raise TrainingDivergenceError("non-finite gradient")
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            continue
        d = g + weight_decay * p if weight_decay else g
        v.mul_(momentum).add_(d)
        p.sub_(lr * v)
    return params, velocity


class LookAheadState:
    """Slow weights plus the inner-step counter."""

    def __init__(self, params: Sequence[torch.Tensor]):
        self.slow = [p.detach().clone() for p in params]
        self.counter = 0


@torch.no_grad()
def lookahead_update(state: LookAheadState, fast: Sequence[torch.Tensor], alpha: float, k: int):
    state.counter += 1
    if state.counter >= k:
        for s, f in zip(state.slow, fast):
            # lerp is exact at both ends: alpha=1 gives fast, alpha=0 keeps slow
            s.lerp_(f, alpha)
            f.copy_(s)
        state.counter = 0
    return state, fast


class ParamGroup:
    def __init__(self, params, lr_key: str, decay: bool):
        self.params = list(params)
        self.velocity = [torch.zeros_like(p) for p in self.params]
        self.lr_key = lr_key
        self.decay = decay


def no_decay(name: str, p: torch.Tensor) -> bool:
    # biases and normalisation gains/shifts are all 1-D
    return p.dim() <= 1


def build_groups(model: VTBRModel) -> list[ParamGroup]:
    buckets: dict[tuple[str, bool], list] = {}
    for name, p in model.named_parameters():
        key = ("visual" if name.startswith("visual.") else "textual", not no_decay(name, p))
        buckets.setdefault(key, []).append(p)
    return [ParamGroup(ps, lr_key, decay) for (lr_key, decay), ps in sorted(buckets.items())]


@dataclass
class CaptionPairs:
    """Images (N, 3, H, W) float32 and their encoded captions."""

    images: np.ndarray
    token_ids: list[list[int]]

    def __len__(self) -> int:
        return len(self.token_ids)

    def subset(self, idx) -> "CaptionPairs":
        idx = list(idx)
        return CaptionPairs(self.images[idx], [self.token_ids[i] for i in idx])


def split_holdout(pairs: CaptionPairs, fraction: float, seed: int) -> tuple[CaptionPairs, CaptionPairs]:
    n = len(pairs)
    n_hold = int(round(fraction * n)) if n > 1 else 0
    order = np.random.default_rng(seed).permutation(n)
    return pairs.subset(sorted(order[n_hold:])), pairs.subset(sorted(order[:n_hold]))


def init_model(cfg: ModelConfig, seed: int) -> VTBRModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return VTBRModel(cfg)


@torch.no_grad()
def holdout_perplexity(model: VTBRModel, pairs: CaptionPairs, batch_size: int = 128) -> float:
    """exp(mean per-token NLL) over both reading directions."""
    if len(pairs) == 0:
        return float("nan")
    was = model.training
    model.eval()
    total, count = 0.0, 0
    for i in range(0, len(pairs), batch_size):
        ids = pad_batch(pairs.token_ids[i:i + batch_size], model.cfg.max_len)
        mem = project(visual_forward(torch.from_numpy(pairs.images[i:i + batch_size]), model), model)
        for d in ("forward", "backward"):
            total += float(direction_nll(mem, ids, d, model, reduction="none").sum())
        count += 2 * int((ids[:, 1:] != 2).sum())
    model.train(was)
    return math.exp(total / count)


def _clip(params, max_norm: float):
    grads = [p.grad for p in params if p.grad is not None]
    norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
    if norm > max_norm:
        for g in grads:
            g.mul_(max_norm / (float(norm) + 1e-6))


def run_pretraining(
    model_cfg: ModelConfig,
    config: PretrainConfig,
    pairs: CaptionPairs,
    holdout: CaptionPairs | None = None,
    model: VTBRModel | None = None,
) -> tuple[VTBRModel, list[dict]]:
    """Train from scratch (or from ``model``); returns the model and per-step metrics.

    On a non-finite loss the parameters are restored to the last finite step
    and :class:`TrainingDivergenceError` is raised with ``.model`` attached.
    """
    if len(pairs) == 0:
        raise ValueError("pretraining corpus is empty")
    if model is None:
        model = init_model(model_cfg, config.seed)
    model.train()
    groups = build_groups(model)
    params = [p for g in groups for p in g.params]
    lookahead = LookAheadState(params)
    rng = np.random.default_rng(config.seed)
    metrics: list[dict] = []
    order = rng.permutation(len(pairs))
    cursor = 0
    bs = min(config.batch_size, len(pairs))

    for step in range(config.total_steps):
        if cursor + bs > len(order):
            order, cursor = rng.permutation(len(pairs)), 0
        idx = np.sort(order[cursor:cursor + bs])
        cursor += bs
        images = torch.from_numpy(pairs.images[idx])
        ids = pad_batch([pairs.token_ids[i] for i in idx], model_cfg.max_len)

        last_good = copy.deepcopy(model.state_dict())
        for p in params:
            p.grad = None
        out = model(images, ids)
        if not torch.isfinite(out.total):
            model.load_state_dict(last_good)
            err = TrainingDivergenceError(f"loss became non-finite at step {step}")
            err.model, err.step = model, step
            raise err
        out.total.backward()
        if config.grad_clip:
            _clip(params, config.grad_clip)

        lr_v, lr_t = lr_at_step(step, config)
        lrs = {"visual": lr_v, "textual": lr_t}
        try:
            for g in groups:
                sgd_momentum_step(
                    g.params, [p.grad for p in g.params], g.velocity,
                    lrs[g.lr_key], config.momentum, config.weight_decay if g.decay else 0.0,
                )
        except TrainingDivergenceError as exc:
            model.load_state_dict(last_good)
            exc.model, exc.step = model, step
            raise
        lookahead_update(lookahead, params, config.lookahead_alpha, config.lookahead_k)

        row = {
            "step": step + 1,
            "loss_fwd": out.forward.item(),
            "loss_bwd": out.backward.item(),
            "lr_visual": lr_v,
            "lr_textual": lr_t,
        }
        if holdout is not None and len(holdout) and (
            (step + 1) % config.log_every == 0 or step + 1 == config.total_steps
        ):
            row["ppl_holdout"] = holdout_perplexity(model, holdout)
            log.info("pretrain step %d loss %.4f ppl %.3f", step + 1, out.total.item(), row["ppl_holdout"])
        metrics.append(row)
    return model, metrics
