"""Region classification against class-name embeddings, with prompting.

A region is pooled from the shared feature map, pushed through the
final encoder block, shifted by a learnable additive prompt, attention
pooled, and scored against the frozen class-name embeddings by
temperature-scaled cosine softmax. The prompt is the only trainable
tensor in this module; it repairs the systematic gap between the
whole-crop features the encoder was pretrained on and pooled region
features from full scenes.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .backbone import ClassEmbeddingTable, DualEncoder, FeatureMap
from .data import DetectionDataset
from .geometry import roi_align
from .metrics import EvalReport, ap_101

logger = logging.getLogger(__name__)

MAX_PROMPT_PARAMS = 1_000_000


@dataclass
class ClassifierConfig:
    temperature: float = 0.01
    # Prompts are added to the final-stage output right before attention
    # pooling; the variant below injects them before the final block instead.
    prompt_before_final: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def new_prompt(encoder: DualEncoder) -> Tensor:
    """Zero-initialized prompt: training starts at the unprompted classifier."""
    S = encoder.config.region_size
    C = encoder.config.channels[-1]
    p = torch.zeros(C, S, S)
    assert p.numel() < MAX_PROMPT_PARAMS
    return p


class RegionClassifier:
    """Frozen encoder + prompt + temperature, the reusable classifier state."""

    def __init__(
        self,
        encoder: DualEncoder,
        prompt: Tensor | None = None,
        config: ClassifierConfig | None = None,
    ):
        self.encoder = encoder
        self.prompt = prompt if prompt is not None else new_prompt(encoder)
        if self.prompt.numel() >= MAX_PROMPT_PARAMS:
            raise ValueError("region prompt exceeds the parameter budget")
        self.config = config or ClassifierConfig()

    def pool_regions(self, fm: FeatureMap, boxes: Tensor) -> Tensor:
        """RoIAlign regions [N, C, S, S] from the shared feature map."""
        return roi_align(
            fm.data, boxes.to(fm.data.dtype), self.encoder.config.region_size
        )

    def embed_regions(
        self, fm: FeatureMap, boxes: Tensor, prompt: Tensor | None = None
    ) -> Tensor:
        """Pooled, prompted region embeddings [N, D]; differentiable in the prompt."""
        p = self.prompt if prompt is None else prompt
        regions = self.pool_regions(fm, boxes)
        if self.config.prompt_before_final:
            features = self.encoder.encode_region_final(regions + p)
        else:
            features = self.encoder.encode_region_final(regions) + p
        return self.encoder.attention_pool(features)

    def classify(
        self,
        embeddings: Tensor,
        table: ClassEmbeddingTable,
        class_indices: list[int] | None = None,
        temperature: float | None = None,
    ) -> Tensor:
        """Softmax over cosine/temperature, restricted to class_indices.

        Returns [N, K] probabilities over the restricted set, rows
        summing to one.
        """
        if class_indices is None:
            class_indices = list(range(len(table)))
        if len(class_indices) == 0:
            raise ValueError("classify-against set is empty")
        tau = self.config.temperature if temperature is None else temperature
        v = nn.functional.normalize(embeddings, dim=-1)
        cos = v @ table.embeddings[class_indices].to(v.dtype).t()
        return torch.softmax(cos / tau, dim=-1)


@dataclass
class PromptTrainConfig:
    epochs: int = 5
    lr: float = 1e-4
    lr_decay: float = 0.1
    decay_after_epoch: int = 4
    weight_decay: float = 1e-4
    batch_size: int = 32
    seed: int = 0


def _cached_region_features(
    classifier: RegionClassifier, dataset: DetectionDataset, base_only: bool
) -> tuple[Tensor, Tensor]:
    """Pool every ground-truth box once; the backbone below is frozen."""
    feats, labels = [], []
    base = set(dataset.vocab.base_indices())
    with torch.no_grad():
        for i, rec in enumerate(dataset.records):
            if len(rec.labels) == 0:
                continue
            keep = [j for j, l in enumerate(rec.labels) if not base_only or l in base]
            if not keep:
                continue
            fm = classifier.encoder.encode_image_early(dataset.image(i))
            feats.append(classifier.pool_regions(fm, rec.boxes[keep]))
            labels.extend(rec.labels[j] for j in keep)
    return torch.cat(feats), torch.tensor(labels, dtype=torch.long)


def train_region_prompts(
    dataset: DetectionDataset,
    encoder: DualEncoder,
    table: ClassEmbeddingTable,
    cfg: PromptTrainConfig | None = None,
    classifier_config: ClassifierConfig | None = None,
    log=logger.info,
) -> Tensor:
    """Learn the additive region prompt on base-class ground truths.

    Cross-entropy over the base classes at the shared inference
    temperature; every weight except the prompt stays frozen (checked
    by checksum).
    """
    cfg = cfg or PromptTrainConfig()
    classifier = RegionClassifier(encoder, config=classifier_config)
    before = encoder.parameter_checksum()
    base_indices = dataset.vocab.base_indices()
    base_pos = {c: k for k, c in enumerate(base_indices)}

    features, labels = _cached_region_features(classifier, dataset, base_only=True)
    targets = torch.tensor([base_pos[int(l)] for l in labels], dtype=torch.long)
    prompt = new_prompt(encoder).requires_grad_(True)
    opt = torch.optim.AdamW([prompt], lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    n = len(features)
    for epoch in range(cfg.epochs):
        if epoch == cfg.decay_after_epoch:
            for g in opt.param_groups:
                g["lr"] = cfg.lr * cfg.lr_decay
        perm = rng.permutation(n)
        total, nb = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            batch = features[idx]
            if classifier.config.prompt_before_final:
                feats = encoder.encode_region_final(batch + prompt)
            else:
                feats = encoder.encode_region_final(batch) + prompt
            emb = encoder.attention_pool(feats)
            probs_logits = (
                nn.functional.normalize(emb, dim=-1)
                @ table.embeddings[base_indices].t()
            ) / classifier.config.temperature
            loss = nn.functional.cross_entropy(probs_logits, targets[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item()
            nb += 1
        log(f"prompt epoch {epoch + 1}/{cfg.epochs}: loss {total / max(nb, 1):.4f}")
    if encoder.parameter_checksum() != before:
        raise AssertionError("prompt training touched frozen backbone weights")
    return prompt.detach()


def relabel_dataset(
    dataset: DetectionDataset, classifier: RegionClassifier
) -> DetectionDataset:
    """Replace every ground-truth label by the classifier's base-class argmax.

    Boxes and images are untouched; the original labels move into the
    provenance field. Idempotent for a fixed classifier; ties break to
    the lowest class index.
    """
    base_indices = dataset.vocab.base_indices()
    table = classifier_table(dataset, classifier)
    records = []
    with torch.no_grad():
        for i, rec in enumerate(dataset.records):
            new = copy.copy(rec)
            if len(rec.labels):
                fm = classifier.encoder.encode_image_early(dataset.image(i))
                emb = classifier.embed_regions(fm, rec.boxes)
                probs = classifier.classify(emb, table, base_indices)
                # np.argmax picks the first maximum: lowest-index tie-break
                winners = np.argmax(probs.numpy(), axis=1)
                new.labels = [base_indices[int(k)] for k in winners]
                new.original_labels = (
                    list(rec.original_labels) if rec.original_labels else list(rec.labels)
                )
            records.append(new)
    return DetectionDataset(dataset.vocab, records)


def classifier_table(dataset: DetectionDataset, classifier: RegionClassifier) -> ClassEmbeddingTable:
    """Class table for a dataset's vocabulary, cached on the encoder."""
    cached = getattr(classifier.encoder, "_table_cache", None)
    if cached is None or cached.names != dataset.vocab.names:
        from .backbone import embed_classes

        cached = embed_classes(
            classifier.encoder, dataset.vocab.names, novel=dataset.vocab.novel
        )
        classifier.encoder._table_cache = cached
    return cached


def eval_region_classification(
    dataset: DetectionDataset,
    classifier: RegionClassifier,
    table: ClassEmbeddingTable,
) -> EvalReport:
    """Classify the ground-truth boxes; report mAP per class group."""
    features, labels = _cached_region_features(classifier, dataset, base_only=False)
    with torch.no_grad():
        if classifier.config.prompt_before_final:
            feats = classifier.encoder.encode_region_final(features + classifier.prompt)
        else:
            feats = classifier.encoder.encode_region_final(features) + classifier.prompt
        emb = classifier.encoder.attention_pool(feats)
        probs = classifier.classify(emb, table).numpy()
    labels = labels.numpy()
    per_class = {}
    counts = {}
    for c, name in enumerate(table.names):
        pos = labels == c
        counts[name] = int(pos.sum())
        per_class[name] = ap_101(probs[:, c], pos, int(pos.sum()))
    return EvalReport(
        protocol="region-classification",
        per_class_ap=per_class,
        novel_classes=[n for n, v in zip(table.names, table.novel) if v],
        gt_counts=counts,
        prediction_count=len(labels),
    )


def save_prompt(path, prompt: Tensor, config: ClassifierConfig) -> None:
    from .checkpoint import save_checkpoint

    save_checkpoint(
        path,
        {"region_prompt.p": prompt},
        config={"temperature": config.temperature,
                "prompt_before_final": config.prompt_before_final},
        kind="region_prompt",
    )


def load_prompt(path) -> tuple[Tensor, ClassifierConfig]:
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(path)
    if ckpt.manifest.get("kind") != "region_prompt":
        raise ValueError(f"{path} is not a region prompt checkpoint")
    cfg = ClassifierConfig(**ckpt.manifest["config"])
    return ckpt.arrays["region_prompt.p"], cfg
