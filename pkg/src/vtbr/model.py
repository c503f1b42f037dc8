"""Visual backbone, projection and the two caption decoders.

The visual backbone is a small residual conv net whose last-stage output is
the spatial feature map. A linear projection turns each grid cell into an
H-dim memory slot. Two causal transformer decoders (one reading captions
left-to-right, the other right-to-left) cross-attend to that memory and share
the token embedding table, which also serves as the output layer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from vtbr.captions import PAD_ID
from vtbr.errors import CaptionLengthError, DimensionError

FORWARD = "forward"
BACKWARD = "backward"
PARAM_GROUPS = ("visual", "proj", "embed", "fwd", "bwd")


@dataclass
class ModelConfig:
    vocab_size: int
    image_height: int = 64
    image_width: int = 32
    stem_channels: int = 16
    stage_channels: tuple[int, ...] = (16, 32, 64)
    stage_strides: tuple[int, ...] = (2, 2, 1)
    hidden: int = 64
    layers: int = 1
    heads: int = 4
    ff_mult: int = 4
    max_len: int = 32

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.stage_strides = tuple(self.stage_strides)
        dims = [self.vocab_size, self.image_height, self.image_width, self.stem_channels,
                self.hidden, self.layers, self.heads, self.ff_mult, self.max_len, *self.stage_channels]
        if any(int(d) <= 0 for d in dims):
            raise ValueError("all model dimensions must be positive")
        if len(self.stage_channels) != len(self.stage_strides) or not self.stage_channels:
            raise ValueError("stage_channels and stage_strides must be non-empty and aligned")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        gh, gw = self.grid
        if gh < 1 or gw < 1:
            raise ValueError("image too small for the configured strides")

    @property
    def total_stride(self) -> int:
        return math.prod(self.stage_strides)

    @property
    def grid(self) -> tuple[int, int]:
        h, w = self.image_height, self.image_width
        for s in self.stage_strides:
            h, w = -(-h // s), -(-w // s)
        return h, w

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["stage_strides"] = list(self.stage_strides)
        return d


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Sequential(
            nn.Conv2d(3, cfg.stem_channels, 3, 1, 1, bias=False),
            nn.BatchNorm2d(cfg.stem_channels),
            nn.ReLU(),
        )
        blocks, cin = [], cfg.stem_channels
        for cout, stride in zip(cfg.stage_channels, cfg.stage_strides):
            blocks.append(BasicBlock(cin, cout, stride))
            cin = cout
        self.stages = nn.Sequential(*blocks)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, images):
        expected = (3, self.cfg.image_height, self.cfg.image_width)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise DimensionError(f"expected images of shape (B, {expected}), got {tuple(images.shape)}")
        return self.stages(self.stem(images))


class Projection(nn.Module):
    """Linear map from backbone channels to the decoder width, plus 2-D memory positions."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        gh, gw = cfg.grid
        self.linear = nn.Linear(cfg.feature_dim, cfg.hidden)
        self.row_pos = nn.Parameter(torch.zeros(gh, cfg.hidden))
        self.col_pos = nn.Parameter(torch.zeros(gw, cfg.hidden))
        nn.init.normal_(self.row_pos, std=0.02)
        nn.init.normal_(self.col_pos, std=0.02)

    def forward(self, features):
        b, c, gh, gw = features.shape
        return self.linear(features.flatten(2).transpose(1, 2))

    def positions(self):
        return (self.row_pos[:, None, :] + self.col_pos[None, :, :]).reshape(-1, self.row_pos.shape[1])


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context, mask=None):
        b, t, d = x.shape
        s = context.shape[1]
        hd = d // self.heads
        q = self.q(x).view(b, t, self.heads, hd).transpose(1, 2)
        k = self.k(context).view(b, s, self.heads, hd).transpose(1, 2)
        v = self.v(context).view(b, s, self.heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.out(out.transpose(1, 2).reshape(b, t, d))


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ff_mult: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim))

    def forward(self, x, memory, self_mask):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, self_mask)
        x = x + self.cross_attn(self.norm2(x), memory)
        return x + self.ff(self.norm3(x))


class CaptionDecoder(nn.Module):
    """One reading direction; token embeddings are passed in (shared)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.pos = nn.Embedding(cfg.max_len, cfg.hidden)
        self.emb_norm = nn.LayerNorm(cfg.hidden)
        self.layers = nn.ModuleList(DecoderLayer(cfg.hidden, cfg.heads, cfg.ff_mult) for _ in range(cfg.layers))
        self.final_norm = nn.LayerNorm(cfg.hidden)
        self.out_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        nn.init.normal_(self.pos.weight, std=0.02)

    def forward(self, tokens, memory, token_emb: nn.Embedding):
        b, t = tokens.shape
        positions = torch.arange(t, device=tokens.device)
        x = self.emb_norm(token_emb(tokens) + self.pos(positions)[None])
        causal = torch.ones(t, t, dtype=torch.bool, device=tokens.device).tril()
        keep = causal[None, None] & (tokens != PAD_ID)[:, None, None, :]
        for layer in self.layers:
            x = layer(x, memory, keep)
        return self.final_norm(x) @ token_emb.weight.t() + self.out_bias


def _init_textual(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class VTBRModel(nn.Module):
    """Backbone + projection + shared embeddings + forward/backward decoders."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.visual = Backbone(cfg)
        self.proj = Projection(cfg)
        self.embed = nn.Embedding(cfg.vocab_size, cfg.hidden)
        self.fwd = CaptionDecoder(cfg)
        self.bwd = CaptionDecoder(cfg)
        nn.init.normal_(self.embed.weight, std=0.02)
        _init_textual(self.proj)
        _init_textual(self.fwd)
        _init_textual(self.bwd)

    def group_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def named_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        out: dict[str, list] = {g: [] for g in PARAM_GROUPS}
        for name, p in self.named_parameters():
            out[self.group_of(name)].append((name, p))
        return out

    def forward(self, images, token_ids):
        memory = project(visual_forward(images, self), self)
        return bicaption_loss(memory, token_ids, self)


def visual_forward(images: torch.Tensor, model: VTBRModel) -> torch.Tensor:
    if images.dim() == 3:
        images = images[None]
    return model.visual(images)


def project(features: torch.Tensor, model: VTBRModel) -> torch.Tensor:
    return model.proj(features)


def global_pool(features: torch.Tensor) -> torch.Tensor:
    return features.mean(dim=(-2, -1))


def reverse_captions(token_ids: torch.Tensor) -> torch.Tensor:
    """Reverse each row's non-PAD prefix, leaving the padding at the end."""
    b, t = token_ids.shape
    lengths = (token_ids != PAD_ID).sum(dim=1, keepdim=True)
    pos = torch.arange(t, device=token_ids.device)[None].expand(b, t)
    idx = torch.where(pos < lengths, lengths - 1 - pos, pos)
    return token_ids.gather(1, idx)


def _check_ids(token_ids: torch.Tensor, model: VTBRModel):
    if token_ids.dim() != 2:
        raise DimensionError("token ids must be a (batch, length) tensor")
    if token_ids.shape[1] > model.cfg.max_len:
        raise CaptionLengthError(f"caption length {token_ids.shape[1]} exceeds max_len {model.cfg.max_len}")


def decode_direction(memory: torch.Tensor, token_ids: torch.Tensor, direction: str, model: VTBRModel) -> torch.Tensor:
    """Logits (B, T-1, V): row k predicts token k+1 of the caption read in ``direction``."""
    _check_ids(token_ids, model)
    if direction == FORWARD:
        decoder, ordered = model.fwd, token_ids
    elif direction == BACKWARD:
        decoder, ordered = model.bwd, reverse_captions(token_ids)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    memory = memory + model.proj.positions()[None]
    return decoder(ordered[:, :-1], memory, model.embed)


def direction_targets(token_ids: torch.Tensor, direction: str) -> torch.Tensor:
    ordered = token_ids if direction == FORWARD else reverse_captions(token_ids)
    return ordered[:, 1:]


def direction_nll(memory, token_ids, direction, model, reduction: str = "mean"):
    logits = decode_direction(memory, token_ids, direction, model)
    targets = direction_targets(token_ids, direction)
    nll = F.cross_entropy(logits.transpose(1, 2), targets, ignore_index=PAD_ID, reduction="none").sum(dim=1)
    if reduction == "none":
        return nll
    return nll.mean()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    forward: torch.Tensor
    backward: torch.Tensor
    tokens: int = field(default=0)


def bicaption_loss(memory: torch.Tensor, token_ids: torch.Tensor, model: VTBRModel) -> LossBreakdown:
    """Negative bidirectional caption log-likelihood, summed over positions, averaged over the batch."""
    fwd = direction_nll(memory, token_ids, FORWARD, model)
    bwd = direction_nll(memory, token_ids, BACKWARD, model)
    n_tokens = int((token_ids[:, 1:] != PAD_ID).sum())
    return LossBreakdown(fwd + bwd, fwd, bwd, n_tokens)


def zero_output_layer(model: VTBRModel):
    """Make both decoders emit all-zero logits (uniform next-token distribution)."""
    with torch.no_grad():
        for dec in (model.fwd, model.bwd):
            dec.final_norm.weight.zero_()
            dec.final_norm.bias.zero_()
            dec.out_bias.zero_()


def pad_batch(sequences, max_len: int | None = None) -> torch.Tensor:
    t = max(len(s) for s in sequences)
    if max_len is not None and t > max_len:
        raise CaptionLengthError(f"caption length {t} exceeds max_len {max_len}")
    out = torch.full((len(sequences), t), PAD_ID, dtype=torch.long)
    for i, s in enumerate(sequences):
        out[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out


def assert_finite(model: nn.Module):
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"non-finite values in parameter {name}")


@torch.no_grad()
def embed_images(backbone: Backbone, images, batch_size: int = 256) -> torch.Tensor:
    """Pooled retrieval embeddings in eval mode."""
    was_training = backbone.training
    backbone.eval()
    images = torch.as_tensor(images)
    outs = [global_pool(backbone(images[i:i + batch_size])) for i in range(0, len(images), batch_size)]
    backbone.train(was_training)
    if not outs:
        return torch.zeros(0, backbone.cfg.feature_dim)
    return torch.cat(outs)
