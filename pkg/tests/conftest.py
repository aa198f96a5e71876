import pytest
import torch

from ovdkit.backbone import BackboneConfig, embed_classes, pretrain_dual_encoder
from ovdkit.data import SyntheticConfig, generate_synthetic, make_pretrain_corpus


@pytest.fixture(scope="session")
def tiny_bench():
    cfg = SyntheticConfig(
        train_images=14, val_images=8, test_images=6, image_size=96, seed=3
    )
    return generate_synthetic(cfg)


@pytest.fixture(scope="session")
def tiny_encoder(tiny_bench):
    """A barely-trained (but structurally complete) frozen dual encoder."""
    corpus = make_pretrain_corpus(
        tiny_bench.train.vocab.names, crops_per_class=6, crop_size=48, seed=0
    )
    cfg = BackboneConfig(epochs=1, batch_size=64, min_retrieval=0.0, seed=0)
    return pretrain_dual_encoder(corpus, cfg, log=lambda *a: None)


@pytest.fixture(scope="session")
def tiny_table(tiny_encoder, tiny_bench):
    vocab = tiny_bench.train.vocab
    return embed_classes(tiny_encoder, vocab.names, novel=vocab.novel)


@pytest.fixture()
def sample_image(tiny_bench):
    return tiny_bench.train.image(0)
