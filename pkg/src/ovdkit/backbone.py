"""Frozen contrastive dual encoder.

A small stand-in for a large pretrained image/text model: the image
side splits into an early stage (three strided conv stages, stride 8
total) that produces the shared feature map, and a final stage plus
attention pooling that turn a pooled region into an embedding. The text
side is a bag-of-token embedder with a two-layer mixer over a closed
vocabulary. The pair is pretrained contrastively on single-object
crops of all classes, base and novel alike, then frozen for every
downstream training stage.

Note on the class split: the pretraining corpus deliberately covers
novel classes. That mirrors how a web-scale dual encoder already
"knows" concepts the detector never sees boxes for; it is not label
leakage into detector training, which only ever consumes base-class
annotations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .geometry import roi_align

DEFAULT_TEMPLATES = (
    "a photo of a {}",
    "an image of a {}",
    "a picture of a {}",
    "a drawing of a {}",
    "a rendering of a {}",
    "a cropped photo of a {}",
    "one {} on a plain background",
    "the {} in the scene",
)

# closed token set: class-name words plus every word the templates use
COLOR_TOKENS = ("red", "green", "blue", "yellow")
SHAPE_TOKENS = ("circle", "square", "triangle", "cross")
TEMPLATE_TOKENS = (
    "a", "an", "of", "photo", "image", "picture", "drawing", "rendering",
    "cropped", "one", "on", "plain", "background", "the", "in", "scene",
)
CLOSED_VOCAB = COLOR_TOKENS + SHAPE_TOKENS + TEMPLATE_TOKENS


@dataclass
class FeatureMap:
    """Spatial visual features: data [C, h, w] plus pixels per cell."""

    data: Tensor
    stride: int

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass
class BackboneConfig:
    channels: tuple[int, int, int] = (32, 48, 64)
    embed_dim: int = 64
    region_size: int = 7
    pool_heads: int = 4
    text_dim: int = 64
    # contrastive pretraining (pilot-run values)
    temperature: float = 0.07
    batch_size: int = 64
    epochs: int = 20
    lr: float = 2e-3
    weight_decay: float = 1e-4
    holdout_fraction: float = 0.1
    min_retrieval: float = 0.9
    seed: int = 0
    # pretraining corpus
    crops_per_class: int = 80
    crop_size: int = 56

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["channels"] = list(self.channels)
        return d


class PretrainError(RuntimeError):
    """Contrastive pretraining failed to reach the retrieval threshold."""


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="replicate"),
        nn.GroupNorm(8, cout),
        nn.ReLU(),
    )


class EarlyEncoder(nn.Module):
    """First three stages of the image encoder; total stride 8."""

    def __init__(self, channels: tuple[int, int, int]):
        super().__init__()
        c1, c2, c3 = channels
        self.stage1 = _conv_block(3, c1, 2)
        self.stage2 = nn.Sequential(_conv_block(c1, c2, 2), _conv_block(c2, c2, 1))
        self.stage3 = nn.Sequential(_conv_block(c2, c3, 2), _conv_block(c3, c3, 1))
        self.stride = 8

    def forward(self, images: Tensor) -> Tensor:
        # images: [B, 3, H, W] in [0, 1]
        return self.stage3(self.stage2(self.stage1(images)))


class FinalStage(nn.Module):
    """Last image-encoder block, applied to pooled region features.

    Stride 1 with replicate padding, so a spatially constant input maps
    to a spatially constant output.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.block = _conv_block(channels, channels, 1)

    def forward(self, regions: Tensor) -> Tensor:
        return self.block(regions)


class AttentionPool(nn.Module):
    """Mean-query attention over spatial tokens with learned positions."""

    def __init__(self, channels: int, embed_dim: int, size: int, heads: int):
        super().__init__()
        self.size = size
        self.pos = nn.Parameter(torch.randn(size * size, channels) * 0.05)
        self.query_pos = nn.Parameter(torch.zeros(channels))
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.out = nn.Linear(channels, embed_dim)

    def forward(self, regions: Tensor) -> Tensor:
        # regions: [B, C, S, S] -> [B, D]
        tokens = regions.flatten(2).transpose(1, 2)
        query = tokens.mean(dim=1, keepdim=True) + self.query_pos
        kv = tokens + self.pos
        pooled, _ = self.attn(query, kv, kv, need_weights=False)
        return self.out(pooled.squeeze(1))


class TextEmbedder(nn.Module):
    """Bag-of-token embeddings with a two-layer mixer, closed vocabulary."""

    def __init__(self, embed_dim: int, vocab: Sequence[str] = CLOSED_VOCAB):
        super().__init__()
        self.vocab = tuple(vocab)
        self.token_index = {tok: i for i, tok in enumerate(self.vocab)}
        self.tokens = nn.Embedding(len(self.vocab), embed_dim)
        self.mixer = nn.Sequential(
            nn.Linear(embed_dim, 2 * embed_dim),
            nn.GELU(),
            nn.Linear(2 * embed_dim, embed_dim),
        )

    def tokenize(self, text: str) -> Tensor:
        ids = []
        for word in text.lower().split():
            if word not in self.token_index:
                raise ValueError(f"unknown token {word!r}; closed vocabulary is {self.vocab}")
            ids.append(self.token_index[word])
        if not ids:
            raise ValueError("empty text")
        return torch.tensor(ids, dtype=torch.long)

    def forward(self, texts: Sequence[str]) -> Tensor:
        bags = torch.stack([self.tokens(self.tokenize(t)).mean(dim=0) for t in texts])
        return self.mixer(bags)


class DualEncoder(nn.Module):
    """The full frozen backbone: early stage, final stage, pool, text."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.early = EarlyEncoder(config.channels)
        self.final = FinalStage(config.channels[-1])
        self.pool = AttentionPool(
            config.channels[-1], config.embed_dim, config.region_size, config.pool_heads
        )
        self.text = TextEmbedder(config.text_dim)
        self.frozen = False

    def encode_image_early(self, image: Tensor) -> FeatureMap:
        """Encode one [3, H, W] image into the shared feature map."""
        data = self.early(image[None])[0]
        return FeatureMap(data=data, stride=self.early.stride)

    def encode_region_final(self, regions: Tensor) -> Tensor:
        """Run pooled region features [B, C, S, S] through the last block."""
        S = self.config.region_size
        expected = (self.config.channels[-1], S, S)
        if tuple(regions.shape[-3:]) != expected:
            raise ValueError(f"region feature shape {tuple(regions.shape)} != (*, {expected})")
        return self.final(regions)

    def attention_pool(self, regions: Tensor) -> Tensor:
        return self.pool(regions)

    def embed_crops(self, crops: Tensor) -> Tensor:
        """Embed whole crops [B, 3, H, W] through the full region path."""
        fmaps = self.early(crops)
        B, C, h, w = fmaps.shape
        full = torch.tensor([0.5, 0.5, 1.0, 1.0], dtype=crops.dtype)
        # one shared full-image box: fold the batch into channels for one
        # vectorized pooling call
        regions = roi_align(fmaps.reshape(B * C, h, w), full, self.config.region_size)
        regions = regions.reshape(B, C, self.config.region_size, self.config.region_size)
        return self.pool(self.final(regions))

    def embed_texts(self, texts: Sequence[str]) -> Tensor:
        return self.text(texts)

    def freeze(self) -> "DualEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def parameter_checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


@dataclass
class ClassEmbeddingTable:
    """Frozen unit-norm class-name embeddings, the open-vocabulary classifier."""

    names: list[str]
    embeddings: Tensor  # [K, D], unit L2 norm rows
    novel: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.novel:
            self.novel = [False] * len(self.names)
        base = {n for n, v in zip(self.names, self.novel) if not v}
        nov = {n for n, v in zip(self.names, self.novel) if v}
        if base & nov:
            raise ValueError(f"base and novel class sets overlap: {base & nov}")

    def __len__(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        return self.names.index(name)

    def base_indices(self) -> list[int]:
        return [i for i, v in enumerate(self.novel) if not v]

    def novel_indices(self) -> list[int]:
        return [i for i, v in enumerate(self.novel) if v]

    def restricted(self, indices: Sequence[int]) -> "ClassEmbeddingTable":
        return ClassEmbeddingTable(
            names=[self.names[i] for i in indices],
            embeddings=self.embeddings[list(indices)],
            novel=[self.novel[i] for i in indices],
        )


def embed_classes(
    encoder: DualEncoder,
    names: Sequence[str],
    templates: Sequence[str] = DEFAULT_TEMPLATES,
    novel: Sequence[bool] | None = None,
) -> ClassEmbeddingTable:
    """Average templated text embeddings per class name, renormalized."""
    if not names:
        raise ValueError("class name list is empty")
    with torch.no_grad():
        rows = []
        for name in names:
            embs = encoder.embed_texts([t.format(name) for t in templates])
            embs = nn.functional.normalize(embs, dim=-1)
            rows.append(nn.functional.normalize(embs.mean(dim=0), dim=0))
        table = torch.stack(rows)
    return ClassEmbeddingTable(
        names=list(names),
        embeddings=table,
        novel=list(novel) if novel is not None else [],
    )


def contrastive_loss(img_emb: Tensor, txt_emb: Tensor, temperature: float) -> Tensor:
    """Symmetric in-batch InfoNCE over aligned image/text pairs."""
    img = nn.functional.normalize(img_emb, dim=-1)
    txt = nn.functional.normalize(txt_emb, dim=-1)
    logits = img @ txt.t() / temperature
    target = torch.arange(len(img))
    return 0.5 * (
        nn.functional.cross_entropy(logits, target)
        + nn.functional.cross_entropy(logits.t(), target)
    )


def retrieval_top1(
    encoder: DualEncoder, crops: Tensor, labels: Tensor, table: ClassEmbeddingTable
) -> float:
    """Fraction of crops whose nearest class embedding is their own class."""
    with torch.no_grad():
        emb = nn.functional.normalize(encoder.embed_crops(crops), dim=-1)
        pred = (emb @ table.embeddings.t()).argmax(dim=1)
    return (pred == labels).float().mean().item()


def pretrain_dual_encoder(
    corpus: Sequence[tuple[Tensor, str]],
    config: BackboneConfig,
    templates: Sequence[str] = DEFAULT_TEMPLATES,
    log=print,
) -> DualEncoder:
    """Contrastively pretrain the dual encoder on crop/name pairs, then freeze.

    The corpus must cover every class the detector will ever be asked
    about. Aborts with PretrainError when held-out crop-to-name
    retrieval stays below config.min_retrieval.
    """
    names = sorted({name for _, name in corpus})
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    encoder = DualEncoder(config)

    order = rng.permutation(len(corpus))
    n_hold = max(1, int(len(corpus) * config.holdout_fraction))
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    hold_crops = torch.stack([corpus[i][0] for i in hold_idx])
    hold_labels = torch.tensor([names.index(corpus[i][1]) for i in hold_idx])

    params = [p for p in encoder.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    n_templates = len(templates)

    for epoch in range(config.epochs):
        perm = rng.permutation(train_idx)
        total, nb = 0.0, 0
        for start in range(0, len(perm), config.batch_size):
            batch = perm[start : start + config.batch_size]
            if len(batch) < 2:
                continue
            crops = torch.stack([corpus[i][0] for i in batch])
            texts = [
                templates[rng.integers(n_templates)].format(corpus[i][1]) for i in batch
            ]
            loss = contrastive_loss(
                encoder.embed_crops(crops), encoder.embed_texts(texts), config.temperature
            )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item()
            nb += 1
        log(f"pretrain epoch {epoch + 1}/{config.epochs}: loss {total / max(nb, 1):.4f}")

    encoder.freeze()
    table = embed_classes(encoder, names, templates)
    top1 = retrieval_top1(encoder, hold_crops, hold_labels, table)
    log(f"pretrain held-out retrieval top-1: {top1:.3f}")
    if top1 < config.min_retrieval:
        raise PretrainError(
            f"held-out crop-to-name retrieval top-1 {top1:.3f} "
            f"below threshold {config.min_retrieval}; "
            f"corpus size {len(corpus)}, classes {len(names)}, epochs {config.epochs}"
        )
    return encoder


def save_backbone(path, encoder: DualEncoder) -> None:
    from .checkpoint import save_checkpoint

    arrays = {f"backbone.{k}": v for k, v in encoder.state_dict().items()}
    save_checkpoint(
        path,
        arrays,
        config=encoder.config.to_dict(),
        frozen=set(arrays) if encoder.frozen else (),
        kind="backbone",
    )


def load_backbone(path) -> DualEncoder:
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(path)
    if ckpt.manifest.get("kind") != "backbone":
        raise ValueError(f"{path} is not a backbone checkpoint")
    cfg_dict = dict(ckpt.manifest["config"])
    cfg_dict["channels"] = tuple(cfg_dict["channels"])
    encoder = DualEncoder(BackboneConfig(**cfg_dict))
    encoder.load_state_dict(ckpt.namespace("backbone"))
    encoder.freeze()
    return encoder
