"""DETR-style localizer with anchor-box queries pre-matched to classes.

Each object query owns a learnable anchor box (stored in inverse-sigmoid
space and shared across images). Before decoding, every anchor is
classified once against the active class-name embeddings; the query's
content vector is conditioned on its pre-matched class embedding
through a small MLP. The decoder then iteratively refines boxes in
inverse-sigmoid space and emits a per-layer matchability logit: the
probability that this query realizes an instance of its pre-matched
class. Decoding runs exactly once per image, whatever the vocabulary
size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .backbone import ClassEmbeddingTable, FeatureMap
from .region_classifier import RegionClassifier


@dataclass
class LocalizerConfig:
    num_queries: int = 100
    d_model: int = 128
    nheads: int = 8
    dim_feedforward: int = 256
    encoder_layers: int = 3
    decoder_layers: int = 6
    conditioning_hidden: int = 128
    shared_heads: bool = False
    match_prior: float = 0.01  # initial matchability, sets the head bias

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


def initial_anchor_boxes(n: int) -> Tensor:
    """Jittered grid of anchor centers cycling through a few box sizes.

    Grid coverage guarantees every object starts near some anchor, which
    the pre-matching classifier needs to hand out usable labels early.
    """
    side = max(1, math.ceil(math.sqrt(n)))
    ys, xs = torch.meshgrid(
        (torch.arange(side) + 0.5) / side, (torch.arange(side) + 0.5) / side,
        indexing="ij",
    )
    centers = torch.stack([xs.flatten(), ys.flatten()], dim=1)[:n]
    jitter = (torch.rand(len(centers), 2) - 0.5) * (0.5 / side)
    centers = (centers + jitter).clamp(0.05, 0.95)
    sizes = torch.tensor([0.15, 0.25, 0.4])
    wh = sizes[torch.arange(len(centers)) % len(sizes)][:, None].repeat(1, 2)
    wh = wh * (0.8 + 0.4 * torch.rand(len(centers), 2))
    return torch.cat([centers, wh], dim=1)


def sine_embed(x: Tensor, num_feats: int, temperature: float = 20.0) -> Tensor:
    """Sinusoidal embedding of coordinates in [0, 1] -> [..., num_feats]."""
    half = num_feats // 2
    dim_t = temperature ** (torch.arange(half, dtype=x.dtype) / half)
    pos = x[..., None] * 2 * math.pi / dim_t
    return torch.cat([pos.sin(), pos.cos()], dim=-1)


def grid_position_embedding(h: int, w: int, d_model: int, dtype=torch.float32) -> Tensor:
    """2D sine embedding of cell centers, [h*w, d_model]."""
    ys = (torch.arange(h, dtype=dtype) + 0.5) / h
    xs = (torch.arange(w, dtype=dtype) + 0.5) / w
    ey = sine_embed(ys, d_model // 2)[:, None, :].expand(h, w, -1)
    ex = sine_embed(xs, d_model // 2)[None, :, :].expand(h, w, -1)
    return torch.cat([ey, ex], dim=-1).reshape(h * w, d_model)


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, nheads: int, dim_ff: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(d_model, nheads, batch_first=True)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, dim_ff), nn.ReLU(), nn.Linear(dim_ff, d_model)
        )
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, src: Tensor, pos: Tensor) -> Tensor:
        q = k = src + pos
        out, _ = self.attn(q, k, src, need_weights=False)
        src = self.norm1(src + out)
        return self.norm2(src + self.ff(src))


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, nheads: int, dim_ff: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d_model, nheads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d_model, nheads, batch_first=True)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, dim_ff), nn.ReLU(), nn.Linear(dim_ff, d_model)
        )

    def forward(self, x: Tensor, query_pos: Tensor, memory: Tensor, mem_pos: Tensor) -> Tensor:
        q = k = x + query_pos
        out, _ = self.self_attn(q, k, x, need_weights=False)
        x = self.norm1(x + out)
        out, _ = self.cross_attn(x + query_pos, memory + mem_pos, memory, need_weights=False)
        x = self.norm2(x + out)
        return self.norm3(x + self.ff(x))


def _box_head(d_model: int) -> nn.Sequential:
    head = nn.Sequential(
        nn.Linear(d_model, d_model), nn.ReLU(), nn.Linear(d_model, 4)
    )
    nn.init.zeros_(head[-1].weight)
    nn.init.zeros_(head[-1].bias)
    return head


@dataclass
class DecodeOutput:
    layer_boxes: list[Tensor]  # per decoder layer, [N, 4] normalized cxcywh
    layer_logits: list[Tensor]  # per decoder layer, [N] matchability logits

    def probs(self, layer: int = -1) -> Tensor:
        return torch.sigmoid(self.layer_logits[layer])


@dataclass
class ForwardResult:
    decode: DecodeOutput
    labels: Tensor | None  # [N] pre-matched class indices, None when disabled
    fm: FeatureMap


class Localizer(nn.Module):
    def __init__(self, config: LocalizerConfig, in_channels: int, embed_dim: int):
        super().__init__()
        self.config = config
        d = config.d_model
        self.input_proj = nn.Conv2d(in_channels, d, 1)
        self.encoder = nn.ModuleList(
            EncoderLayer(d, config.nheads, config.dim_feedforward)
            for _ in range(config.encoder_layers)
        )
        self.decoder = nn.ModuleList(
            DecoderLayer(d, config.nheads, config.dim_feedforward)
            for _ in range(config.decoder_layers)
        )
        self.anchor_mlp = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d))
        self.cond_mlp = nn.Sequential(
            nn.Linear(embed_dim, config.conditioning_hidden),
            nn.ReLU(),
            nn.Linear(config.conditioning_hidden, d),
        )
        n_heads = 1 if config.shared_heads else config.decoder_layers
        self.box_heads = nn.ModuleList(_box_head(d) for _ in range(n_heads))
        self.match_heads = nn.ModuleList(nn.Linear(d, 1) for _ in range(n_heads))
        prior_bias = -math.log((1 - config.match_prior) / config.match_prior)
        for head in self.match_heads:
            nn.init.constant_(head.bias, prior_bias)
        self.anchors = nn.Parameter(inverse_sigmoid(initial_anchor_boxes(config.num_queries)))
        self.decode_calls = 0

    def anchor_boxes(self) -> Tensor:
        return torch.sigmoid(self.anchors)

    def _head(self, kind: str, layer: int) -> nn.Module:
        heads = self.box_heads if kind == "box" else self.match_heads
        return heads[0] if self.config.shared_heads else heads[layer]

    def anchor_pos(self, boxes: Tensor) -> Tensor:
        d4 = self.config.d_model // 4
        emb = torch.cat([sine_embed(boxes[:, i], d4) for i in range(4)], dim=-1)
        return self.anchor_mlp(emb)

    def encode_memory(self, fm: FeatureMap) -> tuple[Tensor, Tensor]:
        proj = self.input_proj(fm.data[None])
        h, w = proj.shape[-2:]
        memory = proj.flatten(2).transpose(1, 2)  # [1, hw, d]
        pos = grid_position_embedding(h, w, self.config.d_model, dtype=proj.dtype)[None]
        for layer in self.encoder:
            memory = layer(memory, pos)
        return memory, pos

    def condition_queries(self, labels: Tensor, table: ClassEmbeddingTable) -> Tensor:
        """Content vectors from the (frozen) class embeddings of the labels."""
        emb = table.embeddings[labels].detach().to(self.anchors.dtype)
        return self.cond_mlp(emb)

    def decode(self, memory: Tensor, mem_pos: Tensor, content: Tensor) -> DecodeOutput:
        """Iteratively refine anchors; one invocation per image."""
        self.decode_calls += 1
        x = content[None]
        ref = self.anchors
        layer_boxes, layer_logits = [], []
        for li, layer in enumerate(self.decoder):
            qpos = self.anchor_pos(torch.sigmoid(ref))[None]
            x = layer(x, qpos, memory, mem_pos)
            delta = self._head("box", li)(x[0])
            new_ref = ref + delta
            layer_boxes.append(torch.sigmoid(new_ref))
            layer_logits.append(self._head("match", li)(x[0]).squeeze(-1))
            ref = new_ref.detach()
        return DecodeOutput(layer_boxes=layer_boxes, layer_logits=layer_logits)


def pre_match(
    classifier: RegionClassifier,
    fm: FeatureMap,
    anchor_boxes: Tensor,
    table: ClassEmbeddingTable,
    active_indices: list[int],
) -> Tensor:
    """Classify each anchor box against the active class embeddings.

    Returns one global class index per anchor (argmax cosine, lowest
    index on ties). Runs without gradients; conducted once per image
    per forward pass.
    """
    if len(active_indices) == 0:
        raise ValueError("active class set is empty")
    with torch.no_grad():
        emb = classifier.embed_regions(fm, anchor_boxes)
        v = nn.functional.normalize(emb, dim=-1)
        cos = v @ table.embeddings[list(active_indices)].to(v.dtype).t()
        # np.argmax picks the first maximum: lowest-index tie-break
        local = np.argmax(cos.numpy(), axis=1)
    return torch.tensor([active_indices[int(k)] for k in local], dtype=torch.long)


def forward_image(
    localizer: Localizer,
    classifier: RegionClassifier,
    table: ClassEmbeddingTable,
    image: Tensor,
    active_indices: list[int],
    conditioning: bool = True,
    fm: FeatureMap | None = None,
    labels: Tensor | None = None,
) -> ForwardResult:
    """Full per-image pass: encode, pre-match, condition, decode."""
    if len(active_indices) == 0:
        raise ValueError("active class set is empty")
    if fm is None:
        fm = classifier.encoder.encode_image_early(image)
    if conditioning:
        if labels is None:
            labels = pre_match(
                classifier, fm, localizer.anchor_boxes().detach(), table, active_indices
            )
        content = localizer.condition_queries(labels, table)
    else:
        labels = None
        content = torch.zeros(
            localizer.config.num_queries, localizer.config.d_model,
            dtype=localizer.anchors.dtype,
        )
    memory, mem_pos = localizer.encode_memory(fm)
    out = localizer.decode(memory, mem_pos, content)
    return ForwardResult(decode=out, labels=labels, fm=fm)


def similarity_label_groups(table: ClassEmbeddingTable, threshold: float = 0.7) -> dict[int, int]:
    """Union-find components of classes with embedding cosine above threshold.

    Used for the relaxed post-matching variant on large vocabularies;
    off by default.
    """
    K = len(table)
    parent = list(range(K))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    cos = (table.embeddings @ table.embeddings.t()).numpy()
    for i in range(K):
        for j in range(i + 1, K):
            if cos[i, j] > threshold:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    return {i: find(i) for i in range(K)}


def save_localizer(path, localizer: Localizer, extra: dict | None = None) -> None:
    from .checkpoint import save_checkpoint

    arrays = {f"localizer.{k}": v for k, v in localizer.state_dict().items()}
    cfg = localizer.config.to_dict()
    cfg["in_channels"] = localizer.input_proj.in_channels
    cfg["embed_dim"] = localizer.cond_mlp[0].in_features
    save_checkpoint(path, arrays, config=cfg, kind="localizer", extra=extra)


def load_localizer(path) -> Localizer:
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(path)
    if ckpt.manifest.get("kind") != "localizer":
        raise ValueError(f"{path} is not a localizer checkpoint")
    cfg = dict(ckpt.manifest["config"])
    in_channels = cfg.pop("in_channels")
    embed_dim = cfg.pop("embed_dim")
    loc = Localizer(LocalizerConfig(**cfg), in_channels, embed_dim)
    loc.load_state_dict(ckpt.namespace("localizer"))
    return loc
