import json

import numpy as np
import pytest
import torch

from panodiff import autoencoder as ae
from panodiff import diffusion as df
from panodiff.outpaint import (ModelSet, OutpaintRequest, RotationLedger,
                               align_rotate, outpaint, outpaint_step,
                               prepare_latents, run_ledger, save_results)
from panodiff.synthdata import random_room, render_room


@pytest.fixture(scope="module")
def bundle():
    torch.manual_seed(0)
    return ae.AutoencoderBundle(rgb=ae.Autoencoder(3, width=16),
                                depth=ae.Autoencoder(1, width=16))


@pytest.fixture(scope="module")
def models(bundle):
    torch.manual_seed(1)
    denoiser = df.Denoiser(df.DenoiserConfig(in_channels=4, channels=16, n_blocks=1,
                                             time_dim=32))
    denoiser.eval()
    return ModelSet(bundle, denoiser, df.make_schedule(100), df.StepMap.evenly(100, 10))


@pytest.fixture(scope="module")
def pano():
    return render_room(random_room(21), 64)


def half_mask(h, w):
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[:, : w // 2] = 1
    return mask


class TestRequestValidation:
    def test_dims_must_divide(self, pano):
        with pytest.raises(ValueError):
            OutpaintRequest(rgb=np.zeros((30, 60, 3)), mask=np.ones((30, 60)))

    def test_mask_shape(self, pano):
        with pytest.raises(ValueError):
            OutpaintRequest(rgb=pano.rgb, mask=np.ones((8, 16)))

    def test_depth_mask_defaults_to_visible(self, pano):
        req = OutpaintRequest(rgb=pano.rgb, mask=half_mask(64, 128), depth=pano.depth)
        assert req.depth_mask.all()


class TestPrepareLatents:
    def test_no_depth_gives_unknown_depth_channel(self, pano, bundle):
        req = OutpaintRequest(rgb=pano.rgb, mask=half_mask(64, 128), seed=3)
        z0, lmask = prepare_latents(req, bundle)
        assert z0.shape == (16, 32, 4) and lmask.shape == (16, 32, 4)
        assert not lmask[:, :, 3].any()
        # the noise channel is standard-normal-ish, not an encoding
        assert abs(z0[:, :, 3].std() - 1.0) < 0.25

    def test_all_visible_with_depth_gives_full_mask(self, pano, bundle):
        req = OutpaintRequest(rgb=pano.rgb, mask=np.ones((64, 128), np.uint8),
                              depth=pano.depth)
        _, lmask = prepare_latents(req, bundle)
        assert lmask.all()

    def test_one_masked_block_blanks_one_cell(self, pano, bundle):
        mask = np.ones((64, 128), dtype=np.uint8)
        mask[8:12, 20:24] = 0  # one aligned 4x4 block
        req = OutpaintRequest(rgb=pano.rgb, mask=mask, depth=pano.depth)
        _, lmask = prepare_latents(req, bundle)
        rgb_mask = lmask[:, :, 0]
        assert rgb_mask[2, 5] == 0
        assert rgb_mask.sum() == 16 * 32 - 1
        assert np.array_equal(lmask[:, :, 0], lmask[:, :, 2])

    def test_rgb_channels_encode_masked_image(self, pano, bundle):
        mask = half_mask(64, 128)
        req = OutpaintRequest(rgb=pano.rgb, mask=mask, seed=0)
        z0, _ = prepare_latents(req, bundle)
        expected = ae.encode_normalized(bundle, pano.rgb * mask[:, :, None], "rgb").data
        assert np.array_equal(z0[:, :, :3], expected)

    def test_deterministic_noise_per_seed(self, pano, bundle):
        req = OutpaintRequest(rgb=pano.rgb, mask=half_mask(64, 128), seed=9)
        a, _ = prepare_latents(req, bundle)
        b, _ = prepare_latents(req, bundle)
        assert np.array_equal(a, b)


class TestOutpaintStep:
    def _setup(self, models, mask_value):
        gen = torch.Generator().manual_seed(0)
        z_t = torch.randn(1, 4, 16, 32, generator=gen)
        z0v = torch.randn(1, 4, 16, 32, generator=gen)
        lmask = torch.full((1, 4, 16, 32), float(mask_value))
        nv = torch.randn(1, 4, 16, 32, generator=gen)
        ns = torch.randn(1, 4, 16, 32, generator=gen)
        return z_t, z0v, lmask, nv, ns

    def test_all_ones_mask_is_forward_branch(self, models):
        z_t, z0v, lmask, nv, ns = self._setup(models, 1.0)
        t, t_prev = models.step_map.pairs()[3]
        out = outpaint_step(z_t, t, t_prev, z0v, lmask, models.denoiser,
                            models.schedule, models.step_map,
                            noise_visible=nv, noise_step=ns)
        want = df.q_sample(z0v, t_prev, nv, models.schedule)
        assert torch.equal(out, want)

    def test_all_zeros_mask_is_reverse_branch(self, models):
        z_t, z0v, lmask, nv, ns = self._setup(models, 0.0)
        t, t_prev = models.step_map.pairs()[3]
        i = models.step_map.S - 3
        out = outpaint_step(z_t, t, t_prev, z0v, lmask, models.denoiser,
                            models.schedule, models.step_map,
                            noise_visible=nv, noise_step=ns)
        with torch.no_grad():
            eps_hat = models.denoiser(z_t, t)
            want = df.ddpm_step(z_t, eps_hat, i, models.step_map.respaced(models.schedule), ns)
        assert torch.equal(out, want)

    def test_mixed_mask_blends_elementwise(self, models):
        gen = torch.Generator().manual_seed(4)
        z_t = torch.randn(1, 4, 2, 4, generator=gen)
        z0v = torch.randn(1, 4, 2, 4, generator=gen)
        lmask = (torch.rand(1, 4, 2, 4, generator=gen) > 0.5).float()
        nv = torch.randn(1, 4, 2, 4, generator=gen)
        ns = torch.randn(1, 4, 2, 4, generator=gen)
        torch.manual_seed(8)
        tiny = df.Denoiser(df.DenoiserConfig(in_channels=4, channels=16, n_blocks=1, time_dim=32))
        tiny.eval()
        t, t_prev = models.step_map.pairs()[0]
        out = outpaint_step(z_t, t, t_prev, z0v, lmask, tiny, models.schedule,
                            models.step_map, noise_visible=nv, noise_step=ns)
        with torch.no_grad():
            vis = df.q_sample(z0v, t_prev, nv, models.schedule)
            invis = df.ddpm_step(z_t, tiny(z_t, t), models.step_map.S,
                                 models.step_map.respaced(models.schedule), ns)
        want = lmask * vis + (1 - lmask) * invis
        assert torch.allclose(out, want, atol=0)

    def test_invalid_pair_rejected(self, models):
        z = torch.zeros(1, 4, 16, 32)
        with pytest.raises(ValueError):
            outpaint_step(z, 100, 37, z, z, models.denoiser, models.schedule,
                          models.step_map)

    def test_shape_mismatch_rejected(self, models):
        z = torch.zeros(1, 4, 16, 32)
        bad = torch.zeros(1, 4, 8, 16)
        t, t_prev = models.step_map.pairs()[0]
        with pytest.raises(ValueError):
            outpaint_step(z, t, t_prev, bad, z, models.denoiser, models.schedule,
                          models.step_map)


class TestAlignRotate:
    def test_quarter_turn_shift(self):
        z = torch.arange(32.0).reshape(1, 1, 1, 32)
        ledger = RotationLedger(32)
        z2, _, _, ledger = align_rotate(z, z.clone(), z.clone(), ledger)
        assert ledger.shifts == [8]
        assert torch.equal(z2, torch.roll(z, 8, dims=-1))

    def test_four_turns_cancel(self):
        z = torch.randn(1, 4, 4, 16)
        m = torch.randn_like(z)
        v = torch.randn_like(z)
        ledger = RotationLedger(16)
        a, b, c = z, m, v
        for _ in range(4):
            a, b, c, ledger = align_rotate(a, b, c, ledger)
        assert ledger.cumulative == 0
        assert torch.equal(a, z) and torch.equal(b, m) and torch.equal(c, v)

    def test_width_must_divide(self):
        z = torch.zeros(1, 1, 2, 6)
        with pytest.raises(ValueError):
            align_rotate(z, z, z, RotationLedger(6))

    def test_rotation_commutes_with_step(self, models):
        # rotate -> step -> unrotate == step, when the denoiser is
        # shift-equivariant and the injected noise fields are shifted too
        gen = torch.Generator().manual_seed(2)
        z_t = torch.randn(1, 4, 16, 32, generator=gen)
        z0v = torch.randn(1, 4, 16, 32, generator=gen)
        lmask = (torch.rand(1, 4, 16, 32, generator=gen) > 0.3).float()
        nv = torch.randn(1, 4, 16, 32, generator=gen)
        ns = torch.randn(1, 4, 16, 32, generator=gen)
        t, t_prev = models.step_map.pairs()[2]

        direct = outpaint_step(z_t, t, t_prev, z0v, lmask, models.denoiser,
                               models.schedule, models.step_map,
                               noise_visible=nv, noise_step=ns)

        ledger = RotationLedger(32)
        rz, rm, rv, ledger = align_rotate(z_t, lmask, z0v, ledger)
        k = ledger.cumulative
        rotated = outpaint_step(rz, t, t_prev, rv, rm, models.denoiser,
                                models.schedule, models.step_map,
                                noise_visible=torch.roll(nv, k, dims=-1),
                                noise_step=torch.roll(ns, k, dims=-1))
        undone = torch.roll(rotated, -k, dims=-1)
        assert (undone - direct).abs().max().item() <= 1e-4


class TestOutpaint:
    def test_all_visible_composited_is_identity(self, models, pano):
        req = OutpaintRequest(rgb=pano.rgb, mask=np.ones((64, 128), np.uint8),
                              composite=True, seed=5)
        out = outpaint(req, models)[0]
        assert np.array_equal(out.rgb, pano.rgb)

    def test_alignment_bookkeeping_on_all_visible(self, models, pano):
        # with everything visible the final latent is exactly the encoded
        # input in both arms, so alignment must be fully undone
        base = dict(rgb=pano.rgb, mask=np.ones((64, 128), np.uint8),
                    depth=pano.depth, seed=5)
        plain = outpaint(OutpaintRequest(align=False, **base), models)[0]
        aligned = outpaint(OutpaintRequest(align=True, **base), models)[0]
        assert np.abs(plain.rgb - aligned.rgb).max() <= 1e-5
        assert np.abs(plain.depth - aligned.depth).max() <= 1e-4

    def test_deterministic(self, models, pano):
        req = OutpaintRequest(rgb=pano.rgb, mask=half_mask(64, 128), seed=7)
        a = outpaint(req, models)[0]
        b = outpaint(req, models)[0]
        assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth, b.depth)

    def test_samples_differ_on_masked_region(self, models, pano):
        mask = half_mask(64, 128)
        req = OutpaintRequest(rgb=pano.rgb, mask=mask, n_samples=3, seed=7)
        outs = outpaint(req, models)
        assert len(outs) == 3
        masked = mask == 0
        for i in range(3):
            for j in range(i + 1, 3):
                diff = np.abs(outs[i].rgb - outs[j].rgb)[masked]
                assert diff.mean() > 1e-4

    def test_composite_preserves_visible_exactly(self, models, pano):
        mask = half_mask(64, 128)
        req = OutpaintRequest(rgb=pano.rgb, mask=mask, composite=True, seed=1)
        out = outpaint(req, models)[0]
        vis = mask.astype(bool)
        assert np.array_equal(out.rgb[vis], pano.rgb[vis])


class TestResults:
    def test_save_results_files_and_sidecar(self, models, pano, tmp_path):
        req = OutpaintRequest(rgb=pano.rgb, mask=half_mask(64, 128), n_samples=2, seed=3)
        outs = outpaint(req, models)
        written = save_results(outs, tmp_path, "req0", req, models)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["req0.json", "req0_sample0_depth.png", "req0_sample0_rgb.png",
                         "req0_sample1_depth.png", "req0_sample1_rgb.png"]
        sidecar = json.loads((tmp_path / "req0.json").read_text())
        assert sidecar["seed"] == 3 and sidecar["step_count"] == models.step_map.S
        assert sidecar["ledger_checksum"] == run_ledger(req, models).checksum()
        assert len(written) == 5

    def test_ledger_checksum_tracks_alignment(self, models, pano):
        on = OutpaintRequest(rgb=pano.rgb, mask=half_mask(64, 128), align=True)
        off = OutpaintRequest(rgb=pano.rgb, mask=half_mask(64, 128), align=False)
        assert run_ledger(on, models).cumulative == (models.step_map.S * 8) % 32
        assert run_ledger(off, models).cumulative == 0
        assert run_ledger(on, models).checksum() != run_ledger(off, models).checksum()


def test_modelset_load_missing_stage(tmp_path):
    from panodiff.errors import InvalidStateError

    with pytest.raises(InvalidStateError, match="vae-rgb"):
        ModelSet.load(tmp_path)
