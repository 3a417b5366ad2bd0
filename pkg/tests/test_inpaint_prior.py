"""
Tests for the diffusion and oracle inpainting priors.
"""

import numpy as np
import pydantic
import pytest
import torch

from app.models.prior import LatentInpaintPrior
from app.schemas.prior import InpaintRequest, PriorConfig, TextureShift
from app.services.errors import CheckpointError, InpaintError
from app.services.inpaint_prior import (
    DiffusionInpainter,
    DiffusionSchedule,
    OracleInpainter,
    customize,
    ddim_sample,
    ddim_timesteps,
    latent_mask,
    load_prior,
    masked_epsilon_loss,
    mean_fill,
    oracle_inpaint,
    partial_inpaint,
    procedural_textures,
    random_rectangle_mask,
    save_prior,
    train_prior,
)


@pytest.fixture
def prior_config() -> PriorConfig:
    return PriorConfig(latent_channels=2, autoencoder_width=4, widths=(8, 8, 8), embed_dim=8, timesteps=50)


@pytest.fixture
def prior(prior_config) -> LatentInpaintPrior:
    torch.manual_seed(0)
    return LatentInpaintPrior(prior_config).eval()


def _request(image, mask, **kwargs) -> InpaintRequest:
    return InpaintRequest(image=image, mask=mask, **{"t_start": 30, "n_ddim_steps": 5, "seed": 4, **kwargs})


@pytest.fixture
def image_and_mask():
    rng = np.random.default_rng(0)
    image = rng.random((16, 16, 3)).astype(np.float32)
    mask = np.zeros((16, 16), dtype=bool)
    mask[4:10, 5:12] = True
    return image, mask


class TestSchedule:
    def test_linear_schedule(self):
        schedule = DiffusionSchedule.linear(1000)
        assert schedule.alpha_bars[0] == 1.0
        assert len(schedule.alpha_bars) == 1001
        assert np.all(np.diff(schedule.alpha_bars) < 0)
        assert schedule.betas[0] == pytest.approx(1e-4)

    def test_ddim_timesteps(self):
        steps = ddim_timesteps(980, 20)
        assert steps[0] == 980 and steps[-1] == 0
        assert len(steps) == 21
        assert all(a > b for a, b in zip(steps, steps[1:]))

    def test_ddim_timesteps_short_start(self):
        assert ddim_timesteps(5, 20) == [5, 4, 3, 2, 1, 0]
        assert ddim_timesteps(0, 20) == [0]

    def test_ddim_with_exact_noise_recovers_clean_latent(self):
        """A denoiser that predicts the true noise makes DDIM land on z0."""
        schedule = DiffusionSchedule.linear(100)
        gen = torch.Generator().manual_seed(0)
        z0 = torch.randn(1, 2, 4, 4, generator=gen, dtype=torch.float64)
        eps = torch.randn(1, 2, 4, 4, generator=gen, dtype=torch.float64)
        ab = float(schedule.alpha_bars[60])
        z_t = ab**0.5 * z0 + (1 - ab) ** 0.5 * eps

        def exact(z, t):
            a = float(schedule.alpha_bars[t])
            return (z - a**0.5 * z0) / (1 - a) ** 0.5

        out = ddim_sample(exact, z_t, 60, 10, schedule)
        assert torch.allclose(out, z0, atol=1e-10)


class TestTrainingPieces:
    def test_masked_epsilon_loss_nothing_kept(self):
        eps_hat = torch.rand(2, 2, 4, 4, requires_grad=True)
        loss = masked_epsilon_loss(torch.rand(2, 2, 4, 4), eps_hat, torch.zeros(2, 1, 4, 4))
        loss.backward()
        assert float(loss) == 0.0
        assert torch.all(eps_hat.grad == 0)

    def test_masked_epsilon_loss_all_kept_is_mse(self):
        eps, eps_hat = torch.rand(2, 2, 4, 4), torch.rand(2, 2, 4, 4)
        loss = masked_epsilon_loss(eps, eps_hat, torch.ones(2, 1, 4, 4))
        assert float(loss) == pytest.approx(float(torch.mean((eps - eps_hat) ** 2)), rel=1e-6)

    def test_latent_mask_marks_any_touched_cell(self):
        mask = torch.zeros(1, 1, 8, 8)
        mask[0, 0, 5, 2] = 1.0
        cells = latent_mask(mask)
        assert cells.shape == (1, 1, 2, 2)
        assert cells[0, 0].tolist() == [[0.0, 0.0], [1.0, 0.0]]

    def test_random_rectangle_mask_nonempty(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            mask = random_rectangle_mask(16, 24, rng)
            assert mask.shape == (16, 24) and mask.any()

    def test_procedural_textures_in_range(self):
        textures = procedural_textures(3, 16, np.random.default_rng(0))
        assert textures.shape == (3, 16, 16, 3)
        assert textures.dtype == np.float32
        assert textures.min() >= 0.0 and textures.max() <= 1.0

    def test_train_prior_history(self, prior):
        rng = np.random.default_rng(1)
        images = [rng.random((16, 16, 3)).astype(np.float32) for _ in range(2)]
        objects = [np.zeros((16, 16), dtype=bool) for _ in range(2)]
        history = train_prior(
            prior, steps=3, seed=0, images=images, object_masks=objects, size=16, batch_size=2, autoencoder_steps=1
        )
        assert len(history["autoencoder"]) == 1
        assert len(history["denoiser"]) == 3
        assert all(np.isfinite(history["denoiser"]))
        assert not prior.training


class TestPartialInpaint:
    def test_unmasked_pixels_untouched(self, prior, image_and_mask):
        image, mask = image_and_mask
        rendered = np.full_like(image, 0.5)
        out = partial_inpaint(_request(image, mask), rendered, prior, DiffusionSchedule.from_config(prior.prior_config))
        assert out.dtype == np.float32
        assert np.array_equal(out[~mask], image[~mask])
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_deterministic_for_a_seed(self, prior, image_and_mask):
        image, mask = image_and_mask
        inpainter = DiffusionInpainter(prior)
        a = inpainter.inpaint(_request(image, mask), image)
        b = inpainter.inpaint(_request(image, mask), image)
        assert np.array_equal(a, b)
        c = inpainter.inpaint(_request(image, mask, seed=5), image)
        assert not np.array_equal(a[mask], c[mask])

    @pytest.mark.parametrize(
        "kwargs, rendered_shape, message",
        [
            ({"condition": "nope"}, (16, 16, 3), "unknown conditioning token"),
            ({"t_start": 51}, (16, 16, 3), "outside"),
            ({}, (8, 16, 3), "differ in shape"),
        ],
    )
    def test_invalid_requests(self, prior, image_and_mask, kwargs, rendered_shape, message):
        image, mask = image_and_mask
        with pytest.raises(InpaintError, match=message):
            DiffusionInpainter(prior).inpaint(_request(image, mask, **kwargs), np.zeros(rendered_shape, np.float32))

    def test_empty_mask(self, prior, image_and_mask):
        image, _ = image_and_mask
        with pytest.raises(InpaintError, match="empty"):
            DiffusionInpainter(prior).inpaint(_request(image, np.zeros((16, 16), bool)), image)

    def test_dims_must_divide_by_four(self, prior):
        image = np.zeros((18, 16, 3), np.float32)
        mask = np.ones((18, 16), bool)
        with pytest.raises(InpaintError, match="divisible"):
            DiffusionInpainter(prior).inpaint(_request(image, mask), image)

    def test_negative_start_rejected_by_schema(self, image_and_mask):
        image, mask = image_and_mask
        with pytest.raises(pydantic.ValidationError):
            _request(image, mask, t_start=-1)


class TestOracle:
    def test_exact_when_uncorrupted(self, image_and_mask):
        image, mask = image_and_mask
        gt = np.random.default_rng(2).random(image.shape).astype(np.float32)
        shift = TextureShift(rho=0.0, offset=(0.0, 0.0, 0.0))
        out = oracle_inpaint(_request(image, mask), image, gt, 0.0, shift)
        assert np.array_equal(out[mask], gt[mask])
        assert np.array_equal(out[~mask], image[~mask])

    def test_render_is_ignored(self, image_and_mask):
        image, mask = image_and_mask
        gt = np.full_like(image, 0.4)
        oracle = OracleInpainter(sigma_incon=0.1)
        a = oracle.inpaint(_request(image, mask), np.zeros_like(image), gt)
        b = oracle.inpaint(_request(image, mask), np.ones_like(image), gt)
        assert np.array_equal(a, b)

    def test_inconsistency_differs_per_view(self, image_and_mask):
        image, mask = image_and_mask
        gt = np.full_like(image, 0.4)
        oracle = OracleInpainter(sigma_incon=0.1)
        a = oracle.inpaint(_request(image, mask, image_id=0), image, gt)
        b = oracle.inpaint(_request(image, mask, image_id=1), image, gt)
        assert not np.array_equal(a[mask], b[mask])

    def test_texture_shift_offsets_colour(self, image_and_mask):
        image, mask = image_and_mask
        gt = np.full_like(image, 0.5)
        out = oracle_inpaint(_request(image, mask), image, gt, 0.0, TextureShift(rho=0.3, offset=(0.1, 0.0, -0.1)))
        assert out[mask].mean(axis=0) == pytest.approx([0.6, 0.5, 0.4], abs=1e-6)

    def test_needs_ground_truth(self, image_and_mask):
        image, mask = image_and_mask
        with pytest.raises(InpaintError, match="object-removed ground truth"):
            OracleInpainter().inpaint(_request(image, mask), image, None)

    def test_mean_fill(self, image_and_mask):
        image, mask = image_and_mask
        filled = mean_fill(image, mask)
        assert np.array_equal(filled[~mask], image[~mask])
        assert filled[mask] == pytest.approx(np.tile(image[~mask].mean(axis=0), (mask.sum(), 1)), abs=1e-6)


class TestCustomization:
    def test_rank_zero_aliases_base_token(self, prior, small_dataset):
        tuned = customize(prior, small_dataset, rank=0, steps=5, token="desk")
        assert "desk" in tuned.known_tokens()
        assert "desk" not in prior.known_tokens()
        assert torch.equal(tuned.condition_vector("desk", 1), prior.condition_vector("inpaint", 1))

    def test_low_rank_adapters_leave_base_untouched(self, prior, small_dataset):
        before = {name: p.detach().clone() for name, p in prior.named_parameters()}
        tuned = customize(prior, small_dataset, rank=2, steps=2, token="desk", batch_size=2)
        assert tuned.lora_rank == 2
        assert "desk" in tuned.scene_tokens
        assert any("lora_" in name for name, _ in tuned.named_parameters())
        for name, p in prior.named_parameters():
            assert torch.equal(p, before[name])

    def test_customized_token_inpaints(self, prior, small_dataset):
        tuned = customize(prior, small_dataset, rank=2, steps=1, token="desk", batch_size=2)
        view = next(v for v in small_dataset.train_images() if v.mask.any())
        out = DiffusionInpainter(tuned, condition="desk").inpaint(
            _request(view.pixels, view.mask, condition="desk"), view.pixels
        )
        assert np.array_equal(out[~view.mask], view.pixels[~view.mask])


class TestPriorStorage:
    def test_base_prior_reloads_identically(self, prior, tmp_path):
        manifest = save_prior(prior, tmp_path / "prior.bin")
        assert manifest.adapter_file is None
        loaded = load_prior(tmp_path / "prior.bin")
        z = torch.rand(1, 2, 4, 4)
        args = (z, z, torch.zeros(1, 1, 4, 4), torch.tensor([10]))
        assert torch.equal(
            loaded.denoiser(*args, loaded.condition_vector("inpaint", 1)),
            prior.denoiser(*args, prior.condition_vector("inpaint", 1)),
        )

    def test_adapters_and_tokens_reload(self, prior, small_dataset, tmp_path):
        tuned = customize(prior, small_dataset, rank=2, steps=2, token="desk", batch_size=2)
        manifest = save_prior(tuned, tmp_path / "tuned.bin")
        assert manifest.adapter_file == "tuned.adapter.bin"
        assert (tmp_path / "tuned.adapter.bin").is_file()
        loaded = load_prior(tmp_path / "tuned.bin")
        assert loaded.lora_rank == 2
        z = torch.rand(1, 2, 4, 4)
        args = (z, z, torch.zeros(1, 1, 4, 4), torch.tensor([10]))
        assert torch.allclose(
            loaded.denoiser(*args, loaded.condition_vector("desk", 1)),
            tuned.denoiser(*args, tuned.condition_vector("desk", 1)),
        )

    def test_aliases_reload(self, prior, small_dataset, tmp_path):
        save_prior(customize(prior, small_dataset, rank=0, steps=0, token="desk"), tmp_path / "p.bin")
        assert load_prior(tmp_path / "p.bin").token_aliases == {"desk": "inpaint"}

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointError, match="manifest not found"):
            load_prior(tmp_path / "absent.bin")
