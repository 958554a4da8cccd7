import struct

import numpy as np
import pytest
import torch

from ldguid.backbones import BackboneArchConfig
from ldguid.dataio import BitemporalSample, ChangeMask, ImagePlane, SynthConfig, generate_synthetic
from ldguid.de import DEArchConfig, init_de
from ldguid.errors import CorruptChecksum, EmptyDataset, MissingDE, NonFiniteLoss, VersionMismatch
from ldguid.trainer import (
    TrainConfig,
    backbone_from_checkpoint,
    de_from_checkpoint,
    load_checkpoint,
    load_optimizer_state,
    make_checkpoint,
    pretrain_de,
    save_checkpoint,
    train_segmenter,
)

SMALL_DE = DEArchConfig(in_channels=3, c_z=4, base_width=4, image_size=16)
SMALL_UNET = BackboneArchConfig(kind="unet", base_width=4, depth=2, image_size=16)


@pytest.fixture(scope="module")
def tiny():
    cfg = SynthConfig(image_size=16, n_samples=16, shape_size_range=(3, 6), seed=0)
    return generate_synthetic(cfg).samples


def _snapshot(params):
    return [p.detach().clone() for p in params]


def _same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.learning_rate, c.epochs, c.de_update_period_k, c.adversary_steps_per_main_step) == (1e-4, 200, 5, 1)

    @pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"epochs": 0}, {"de_update_period_k": 0},
                                        {"de_mode": "thaw"}, {"optimizer": "sgd"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestPretrain:
    def test_reconstruction_improves(self):
        data = generate_synthetic(SynthConfig(image_size=32, n_samples=64, seed=0)).samples
        arch = DEArchConfig(image_size=32)
        _, hist = pretrain_de(data, arch, TrainConfig(beta=0.5, learning_rate=1e-3, epochs=50))
        rec = hist.column("rec_loss")
        assert len(hist) == 50
        assert rec[-1] < rec[0]

    def test_partition_discipline(self, tiny):
        de = init_de(SMALL_DE, 0)
        bad = []
        state = {}

        def hook(event, info):
            main, adv = _snapshot(de.main_parameters()), _snapshot(de.adversary_parameters())
            if "main" in state:
                if event == "adversary_step" and not _same(state["main"], main):
                    bad.append(event)
                if event == "main_step" and not _same(state["adv"], adv):
                    bad.append(event)
            state["main"], state["adv"] = main, adv

        pretrain_de(tiny, SMALL_DE, TrainConfig(epochs=2, learning_rate=1e-3, adversary_steps_per_main_step=2),
                    hook=hook, de=de)
        assert state and not bad

    def test_deterministic(self, tiny):
        cfg = TrainConfig(epochs=3, learning_rate=1e-3, seed=4)
        _, h1 = pretrain_de(tiny, SMALL_DE, cfg)
        _, h2 = pretrain_de(tiny, SMALL_DE, cfg)
        for key in ("rec_loss", "adv_loss", "de_loss"):
            np.testing.assert_allclose(h1.column(key), h2.column(key), rtol=0, atol=1e-7)

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            pretrain_de([], SMALL_DE, TrainConfig(epochs=1))

    def test_non_finite_aborts_with_context(self, tiny):
        de = init_de(SMALL_DE, 0)
        with torch.no_grad():
            de.encoder.fuse.bias.fill_(float("nan"))
        with pytest.raises(NonFiniteLoss) as info:
            pretrain_de(tiny, SMALL_DE, TrainConfig(epochs=1), de=de)
        assert info.value.epoch == 0 and info.value.batch == 0


class TestSegmenter:
    def test_frozen_de_bit_identical(self, tiny):
        de = init_de(SMALL_DE, 0)
        before = {k: v.clone() for k, v in de.state_dict().items()}
        train_segmenter(tiny, SMALL_UNET, de, TrainConfig(epochs=2, learning_rate=1e-3))
        after = de.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_latent_stats_fitted_on_training_latents(self, tiny):
        de = init_de(SMALL_DE, 0)
        backbone, _, _ = train_segmenter(tiny, SMALL_UNET, de, TrainConfig(epochs=1))
        pre = torch.stack([torch.from_numpy(s.pre.data).permute(2, 0, 1) for s in tiny])
        post = torch.stack([torch.from_numpy(s.post.data).permute(2, 0, 1) for s in tiny])
        with torch.no_grad():
            z = de.encode(pre.float(), post.float())
        torch.testing.assert_close(backbone.z_mean, z.mean().expand(4))
        torch.testing.assert_close(backbone.z_std, z.std().expand(4))

    def test_two_tier_schedule(self, tiny):
        de = init_de(SMALL_DE, 0)
        events = []
        cfg = TrainConfig(de_mode="finetune", de_update_period_k=5, batch_size=4, epochs=25, learning_rate=1e-3)
        _, _, hist = train_segmenter(tiny, SMALL_UNET, de, cfg, hook=lambda e, i: events.append(e))
        assert events.count("main_step") == 100
        assert events.count("de_cycle") == 20 == hist.de_cycles

    @pytest.mark.parametrize("k", [1, 3, 7])
    def test_cycle_count_is_floor(self, tiny, k):
        de = init_de(SMALL_DE, 0)
        cfg = TrainConfig(de_mode="finetune", de_update_period_k=k, batch_size=4, epochs=3, learning_rate=1e-3)
        _, _, hist = train_segmenter(tiny, SMALL_UNET, de, cfg)
        assert hist.de_cycles == 12 // k

    def test_finetune_updates_de_only_on_cycles(self, tiny):
        de = init_de(SMALL_DE, 0)
        log = []
        prev = {"main": _snapshot(de.main_parameters()), "adv": _snapshot(de.adversary_parameters())}

        def hook(event, info):
            if event != "main_step":
                return
            main, adv = _snapshot(de.main_parameters()), _snapshot(de.adversary_parameters())
            log.append((info["step"], not _same(prev["main"], main), not _same(prev["adv"], adv)))
            prev["main"], prev["adv"] = main, adv

        cfg = TrainConfig(de_mode="finetune", de_update_period_k=3, batch_size=4, epochs=3, learning_rate=1e-3)
        train_segmenter(tiny, SMALL_UNET, de, cfg, hook=hook)
        for step, main_moved, adv_moved in log:
            assert main_moved == (step % 3 == 0)
            assert adv_moved == (step % 3 == 0)

    def test_missing_de(self, tiny):
        with pytest.raises(MissingDE):
            train_segmenter(tiny, SMALL_UNET, None, TrainConfig(de_mode="finetune", epochs=1))

    def test_trivial_dataset_learnable(self):
        rng = np.random.default_rng(0)
        samples = []
        for i in range(64):
            img = ImagePlane(rng.normal(size=(16, 16, 3)).astype(np.float32))
            samples.append(BitemporalSample(img, img, ChangeMask(np.zeros((16, 16), np.uint8)), str(i)))
        _, _, hist = train_segmenter(samples, SMALL_UNET, None, TrainConfig(epochs=20, learning_rate=1e-3))
        assert hist.column("seg_loss")[-1] < 0.01

    def test_deterministic_with_validation(self, tiny):
        de = init_de(SMALL_DE, 0)
        cfg = TrainConfig(epochs=2, learning_rate=1e-3, seed=3)
        _, _, h1 = train_segmenter(tiny[:8], SMALL_UNET, de, cfg, val_dataset=tiny[8:])
        _, _, h2 = train_segmenter(tiny[:8], SMALL_UNET, de, cfg, val_dataset=tiny[8:])
        np.testing.assert_allclose(h1.column("seg_loss"), h2.column("seg_loss"), rtol=0, atol=1e-7)
        assert h1.column("val_iou") == h2.column("val_iou")
        assert all(0 <= v <= 1 for v in h1.column("val_iou"))


class TestCheckpoint:
    def _trained(self, tiny):
        de = init_de(SMALL_DE, 1)
        backbone, _, _ = train_segmenter(tiny, SMALL_UNET, de, TrainConfig(epochs=1, learning_rate=1e-3))
        return de, backbone

    def test_roundtrip_bit_exact(self, tiny, tmp_path):
        de, backbone = self._trained(tiny)
        path = tmp_path / "c.ldgk"
        save_checkpoint(make_checkpoint(de, backbone, TrainConfig(), provenance={"epoch": 1}), path)
        c = load_checkpoint(path)
        for k, v in de.state_dict().items():
            assert torch.equal(de_from_checkpoint(c).state_dict()[k], v)
        restored = backbone_from_checkpoint(c)
        for k, v in backbone.state_dict().items():
            assert torch.equal(restored.state_dict()[k], v)
        assert c.meta["train_config"] == TrainConfig().to_dict()
        assert c.meta["provenance"] == {"epoch": 1}

    def test_optimizer_state_roundtrip(self, tmp_path):
        p = torch.nn.Parameter(torch.randn(4, 3))
        opt = torch.optim.Adam([p], lr=1e-3)
        p.sum().backward()
        opt.step()
        path = tmp_path / "o.ldgk"
        save_checkpoint(make_checkpoint(optimizers={"main": opt}), path)
        fresh = torch.optim.Adam([p], lr=1e-3)
        load_optimizer_state(fresh, load_checkpoint(path).tensors, "optim/main")
        for k in ("exp_avg", "exp_avg_sq", "step"):
            assert torch.equal(torch.as_tensor(fresh.state[p][k], dtype=torch.float32),
                               torch.as_tensor(opt.state[p][k], dtype=torch.float32))

    def test_header_layout(self, tmp_path):
        path = tmp_path / "h.ldgk"
        save_checkpoint(make_checkpoint(), path)
        raw = path.read_bytes()
        assert raw[:4] == b"LDGK"
        assert struct.unpack_from("<I", raw, 4) == (1,)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ldgk"
        save_checkpoint(make_checkpoint(), path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(CorruptChecksum):
            load_checkpoint(path)

    def test_version_99(self, tmp_path):
        path = tmp_path / "v.ldgk"
        save_checkpoint(make_checkpoint(), path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatch, match="99") as info:
            load_checkpoint(path)
        assert "1" in str(info.value).replace("99", "")

    def test_flipped_byte(self, tiny, tmp_path):
        de, _ = self._trained(tiny)
        path = tmp_path / "f.ldgk"
        save_checkpoint(make_checkpoint(de), path)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptChecksum):
            load_checkpoint(path)
