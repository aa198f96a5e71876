import numpy as np
import pytest
import torch

from ovdkit.backbone import (
    BackboneConfig,
    DualEncoder,
    contrastive_loss,
    embed_classes,
    load_backbone,
    save_backbone,
)
from oracles import finite_difference_grad


class TestEncodeImageEarly:
    def test_deterministic(self, tiny_encoder, sample_image):
        a = tiny_encoder.encode_image_early(sample_image)
        b = tiny_encoder.encode_image_early(sample_image)
        assert torch.equal(a.data, b.data)

    def test_shape_and_stride(self, tiny_encoder, sample_image):
        fm = tiny_encoder.encode_image_early(sample_image)
        H, W = sample_image.shape[-2:]
        assert fm.stride == 8
        assert fm.data.shape == (64, H // 8, W // 8)

    def test_zero_image_finite(self, tiny_encoder):
        fm = tiny_encoder.encode_image_early(torch.zeros(3, 64, 64))
        assert torch.isfinite(fm.data).all()


class TestEncodeRegionFinal:
    def test_deterministic_and_finite(self, tiny_encoder):
        torch.manual_seed(0)
        rf = torch.randn(2, 64, 7, 7)
        a = tiny_encoder.encode_region_final(rf)
        assert torch.equal(a, tiny_encoder.encode_region_final(rf))
        assert torch.isfinite(a).all()

    def test_constant_input_spatially_constant(self, tiny_encoder):
        rf = torch.full((1, 64, 7, 7), 0.37)
        out = tiny_encoder.encode_region_final(rf)
        flat = out.flatten(2)
        assert torch.allclose(flat, flat[:, :, :1].expand_as(flat), atol=1e-6)

    def test_shape_mismatch_rejected(self, tiny_encoder):
        with pytest.raises(ValueError):
            tiny_encoder.encode_region_final(torch.randn(2, 64, 5, 5))


class TestAttentionPool:
    def test_output_dim(self, tiny_encoder):
        out = tiny_encoder.attention_pool(torch.randn(3, 64, 7, 7))
        assert out.shape == (3, 64)

    def test_positional_sensitivity(self, tiny_encoder):
        torch.manual_seed(1)
        rf = torch.randn(1, 64, 7, 7)
        perm = torch.randperm(49)
        shuffled = rf.flatten(2)[:, :, perm].reshape(1, 64, 7, 7)
        a = tiny_encoder.attention_pool(rf)
        b = tiny_encoder.attention_pool(shuffled)
        assert not torch.allclose(a, b, atol=1e-5)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(2)
        enc = DualEncoder(BackboneConfig()).double()
        rf = torch.randn(1, 64, 7, 7, dtype=torch.float64, requires_grad=True)
        proj = torch.randn(1, 64, dtype=torch.float64)
        (enc.attention_pool(rf) * proj).sum().backward()
        fd = finite_difference_grad(
            lambda x: (enc.attention_pool(torch.tensor(x)) * proj).sum().item(),
            rf.detach().numpy(),
            eps=1e-6,
        )
        rel = np.linalg.norm(rf.grad.numpy() - fd) / np.linalg.norm(fd)
        assert rel <= 1e-4


class TestTextSide:
    def test_unknown_token_rejected(self, tiny_encoder):
        with pytest.raises(ValueError, match="unknown token"):
            tiny_encoder.embed_texts(["a photo of a zebra"])

    def test_single_template_equals_normalized_embedding(self, tiny_encoder, tiny_bench):
        names = tiny_bench.train.vocab.names[:3]
        table = embed_classes(tiny_encoder, names, templates=("a photo of a {}",))
        direct = tiny_encoder.embed_texts([f"a photo of a {n}" for n in names])
        direct = torch.nn.functional.normalize(direct, dim=-1)
        assert torch.allclose(table.embeddings, direct, atol=1e-6)

    def test_duplicated_templates_no_change(self, tiny_encoder, tiny_bench):
        names = tiny_bench.train.vocab.names[:4]
        t = ("a photo of a {}", "an image of a {}")
        a = embed_classes(tiny_encoder, names, templates=t)
        b = embed_classes(tiny_encoder, names, templates=t + t)
        assert torch.allclose(a.embeddings, b.embeddings, atol=1e-6)

    def test_rows_unit_norm(self, tiny_table):
        norms = tiny_table.embeddings.norm(dim=1)
        assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6)

    def test_base_novel_disjoint(self, tiny_table):
        base = set(tiny_table.base_indices())
        novel = set(tiny_table.novel_indices())
        assert not base & novel
        assert base | novel == set(range(len(tiny_table)))

    def test_empty_names_rejected(self, tiny_encoder):
        with pytest.raises(ValueError):
            embed_classes(tiny_encoder, [])


class TestContrastive:
    def test_single_pair_loss_zero(self):
        img = torch.tensor([[1.0, 0.0, 0.0]])
        txt = torch.tensor([[1.0, 0.0, 0.0]])
        assert contrastive_loss(img, txt, 0.07).item() == pytest.approx(0.0, abs=1e-9)

    def test_identical_crops_cosine_one(self, tiny_encoder, tiny_bench):
        crop = tiny_bench.train.image(0)[:, :48, :48]
        emb = tiny_encoder.embed_crops(torch.stack([crop, crop]))
        emb = torch.nn.functional.normalize(emb, dim=-1)
        assert (emb[0] @ emb[1]).item() == pytest.approx(1.0, abs=1e-6)


class TestFreezeAndCheckpoint:
    def test_frozen_after_pretraining(self, tiny_encoder):
        assert tiny_encoder.frozen
        assert all(not p.requires_grad for p in tiny_encoder.parameters())

    def test_checkpoint_roundtrip(self, tiny_encoder, tiny_bench, tmp_path):
        path = tmp_path / "bb.ckpt"
        save_backbone(path, tiny_encoder)
        loaded = load_backbone(path)
        assert loaded.parameter_checksum() == tiny_encoder.parameter_checksum()
        # table order stable under reload
        names = tiny_bench.train.vocab.names
        t1 = embed_classes(tiny_encoder, names)
        t2 = embed_classes(loaded, names)
        assert t1.names == t2.names
        assert torch.allclose(t1.embeddings, t2.embeddings, atol=1e-7)

    def test_manifest_flags(self, tiny_encoder, tmp_path):
        from ovdkit.checkpoint import load_checkpoint

        path = tmp_path / "bb.ckpt"
        save_backbone(path, tiny_encoder)
        ckpt = load_checkpoint(path)
        assert ckpt.manifest["kind"] == "backbone"
        assert all(e["frozen"] for e in ckpt.manifest["entries"].values())
