"""
Tests for masked adversarial losses and inpainting-aware patch sampling.
"""

import math

import numpy as np
import pydantic
import pytest
import torch
from torch import nn

from app.models.discriminator import PatchDiscriminator
from app.services.adversarial import (
    adversarial_losses,
    apply_mask,
    candidate_probabilities,
    discriminate,
    enumerate_candidates,
    extract_patch,
    f_adv,
    feature_matching,
    r1_penalty,
    sample_patch_locations,
    slice_tiles,
    stack_patches,
)
from app.services.errors import PatchSamplingError


class LinearDiscriminator(nn.Module):
    """D(x) = <g, x>, with one tap W x mixing channels."""

    def __init__(self, patch_size: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.patch_size = patch_size
        self.g = nn.Parameter(torch.randn(3, patch_size, patch_size, generator=gen, dtype=torch.float64))
        self.w = nn.Parameter(torch.randn(4, 3, generator=gen, dtype=torch.float64))

    def forward(self, x):
        scores = (x * self.g).sum(dim=(1, 2, 3))
        return scores, [torch.einsum("oc,bchw->bohw", self.w, x)]


def _small_disc() -> PatchDiscriminator:
    torch.manual_seed(11)
    return PatchDiscriminator(patch_size=8, widths=(4, 8)).double()


def _batch(gen: torch.Generator, b: int = 3, p: int = 8):
    fake = torch.rand(b, 3, p, p, generator=gen, dtype=torch.float64)
    real = torch.rand(b, 3, p, p, generator=gen, dtype=torch.float64)
    mask = torch.rand(b, p, p, generator=gen) > 0.5
    return fake, real, mask


class TestApplyMask:
    def test_all_true_is_identity(self):
        x = torch.rand(2, 3, 4, 4)
        assert torch.equal(apply_mask(x, torch.ones(2, 4, 4, dtype=torch.bool)), x)

    def test_all_false_is_zero(self):
        x = torch.rand(2, 3, 4, 4)
        assert torch.equal(apply_mask(x, torch.zeros(2, 4, 4, dtype=torch.bool)), torch.zeros_like(x))

    def test_idempotent(self):
        x = torch.rand(2, 3, 4, 4)
        m = torch.rand(2, 4, 4) > 0.5
        once = apply_mask(x, m)
        assert torch.equal(apply_mask(once, m), once)

    def test_accepts_channel_mask(self):
        x = torch.rand(1, 3, 4, 4)
        m = torch.rand(1, 1, 4, 4) > 0.5
        assert torch.equal(apply_mask(x, m), apply_mask(x, m[:, 0]))


class TestMaskingInvariance:
    def test_outside_pixels_never_matter(self):
        """Scores, losses and the R1 penalty are bit-identical when only unmasked pixels change."""
        disc = _small_disc()
        gen = torch.Generator().manual_seed(0)
        for _ in range(50):
            fake, real, mask = _batch(gen)
            noise_f = torch.rand(fake.shape, generator=gen, dtype=torch.float64)
            noise_r = torch.rand(real.shape, generator=gen, dtype=torch.float64)
            fake2 = torch.where(mask[:, None], fake, noise_f)
            real2 = torch.where(mask[:, None], real, noise_r)

            s1, _ = discriminate(disc, apply_mask(fake, mask))
            s2, _ = discriminate(disc, apply_mask(fake2, mask))
            assert torch.equal(s1, s2)

            l1, _ = adversarial_losses(disc, apply_mask(fake, mask), apply_mask(real, mask))
            l2, _ = adversarial_losses(disc, apply_mask(fake2, mask), apply_mask(real2, mask))
            assert torch.equal(l1, l2)

            fm1 = feature_matching(disc, apply_mask(fake, mask), apply_mask(real, mask))
            fm2 = feature_matching(disc, apply_mask(fake2, mask), apply_mask(real2, mask))
            assert torch.equal(fm1, fm2)

            assert torch.equal(r1_penalty(disc, real, mask), r1_penalty(disc, real2, mask))

    def test_field_gradient_confined_to_mask(self):
        disc = _small_disc()
        gen = torch.Generator().manual_seed(1)
        fake, real, mask = _batch(gen)
        fake.requires_grad_(True)
        loss, _ = adversarial_losses(disc, apply_mask(fake, mask), apply_mask(real, mask))
        (-loss).backward()
        outside = ~mask[:, None].expand_as(fake)
        assert torch.all(fake.grad[outside] == 0)
        assert fake.grad[~outside].abs().sum() > 0


class TestAdversarialLoss:
    def test_zero_head_gives_minus_two_log_two(self):
        disc = _small_disc()
        disc.zero_head()
        fake, real, _ = _batch(torch.Generator().manual_seed(2))
        loss, parts = adversarial_losses(disc, fake, real)
        assert torch.all(parts["fake_scores"] == 0)
        assert float(loss) == pytest.approx(-2.0 * math.log(2.0))

    def test_f_is_stable_at_large_magnitudes(self):
        x = torch.tensor([30.0, -30.0], dtype=torch.float64)
        out = f_adv(x)
        assert float(out[0]) == pytest.approx(-9.357623e-14, rel=1e-6)
        assert float(out[1]) == pytest.approx(-30.0, abs=1e-12)
        assert torch.isfinite(f_adv(torch.tensor([1e4, -1e4]))).all()

    def test_equal_inputs_score_equally(self):
        disc = _small_disc()
        fake, _, mask = _batch(torch.Generator().manual_seed(3))
        _, parts = adversarial_losses(disc, apply_mask(fake, mask), apply_mask(fake.clone(), mask))
        assert torch.equal(parts["fake_scores"], parts["real_scores"])

    def test_batch_permutation_invariance(self):
        disc = _small_disc()
        fake, real, _ = _batch(torch.Generator().manual_seed(4), b=5)
        order = torch.tensor([3, 0, 4, 1, 2])
        loss, _ = adversarial_losses(disc, fake, real)
        permuted, _ = adversarial_losses(disc, fake[order], real[order])
        assert float(permuted) == pytest.approx(float(loss), rel=1e-12)

    def test_wrong_patch_size_rejected(self):
        disc = _small_disc()
        with pytest.raises(PatchSamplingError) as exc:
            discriminate(disc, torch.zeros(1, 3, 16, 16, dtype=torch.float64))
        assert exc.value.details["expected"] == 8

    def test_discriminator_input_gradcheck(self):
        disc = _small_disc()
        x = torch.rand(2, 3, 8, 8, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda t: disc(t)[0], (x,), eps=1e-6, atol=1e-5)

    def test_tap_shapes_match_forward(self):
        disc = PatchDiscriminator(patch_size=16, widths=(4, 8, 8))
        _, taps = disc(torch.zeros(1, 3, 16, 16))
        assert [tuple(t.shape[1:]) for t in taps] == disc.tap_shapes()
        assert disc.tap_shapes() == [(4, 8, 8), (8, 4, 4), (8, 4, 4)]


class TestR1Penalty:
    def test_linear_discriminator_matches_closed_form(self):
        disc = LinearDiscriminator(8)
        gen = torch.Generator().manual_seed(5)
        _, real, mask = _batch(gen, b=4)
        expected = torch.stack([(disc.g * m).pow(2).sum() for m in mask.double()]).mean()
        assert float(r1_penalty(disc, real, mask)) == pytest.approx(float(expected), rel=1e-12)

    def test_penalty_trains_the_discriminator(self):
        disc = _small_disc()
        _, real, mask = _batch(torch.Generator().manual_seed(6))
        r1_penalty(disc, real, mask).backward()
        assert disc.stem.weight.grad is not None
        assert disc.stem.weight.grad.abs().sum() > 0


class TestFeatureMatching:
    def test_identical_inputs_are_zero(self):
        disc = _small_disc()
        fake, _, mask = _batch(torch.Generator().manual_seed(7))
        masked = apply_mask(fake, mask)
        assert float(feature_matching(disc, masked, masked.clone())) == 0.0

    def test_linear_tap_closed_form(self):
        disc = LinearDiscriminator(2, seed=1)
        a = torch.rand(1, 3, 2, 2, dtype=torch.float64)
        b = torch.rand(1, 3, 2, 2, dtype=torch.float64)
        expected = torch.einsum("oc,bchw->bohw", disc.w, a - b).abs().mean()
        assert float(feature_matching(disc, a, b)) == pytest.approx(float(expected), rel=1e-12)

    def test_monotone_along_interpolation(self):
        disc = LinearDiscriminator(2, seed=2)
        real = torch.rand(1, 3, 2, 2, dtype=torch.float64)
        fake = torch.rand(1, 3, 2, 2, dtype=torch.float64)
        values = [
            float(feature_matching(disc, real + alpha * (fake - real), real)) for alpha in np.linspace(0.0, 1.0, 11)
        ]
        assert values[0] == 0.0
        assert all(later >= earlier for earlier, later in zip(values, values[1:]))

    def test_real_side_is_detached(self):
        disc = _small_disc()
        fake, real, _ = _batch(torch.Generator().manual_seed(8))
        real.requires_grad_(True)
        fake.requires_grad_(True)
        feature_matching(disc, fake, real).backward()
        assert real.grad is None
        assert fake.grad is not None


def _mask_with(count: int, size: int) -> np.ndarray:
    mask = np.zeros(size * size, dtype=bool)
    mask[:count] = True
    return mask.reshape(size, size)


class TestPatchSampling:
    def test_probabilities_proportional_to_counts(self):
        assert candidate_probabilities(np.array([10, 30]), area=20) == pytest.approx([0.25, 0.75])

    def test_below_threshold_excluded(self):
        probs = candidate_probabilities(np.array([49, 60, 100]), area=100)
        assert probs[0] == 0.0
        assert probs[1:] == pytest.approx([0.375, 0.625])

    def test_no_eligible_candidate_raises(self):
        with pytest.raises(PatchSamplingError, match="mask too small"):
            candidate_probabilities(np.array([10, 20]), area=100)

    def test_empirical_frequencies(self):
        masks = [_mask_with(20, 6), _mask_with(30, 6)]
        picks = sample_patch_locations(masks, 0, 100_000, 6, np.random.default_rng(0))
        share = sum(1 for index, _, _ in picks if index == 0) / len(picks)
        assert share == pytest.approx(0.4, abs=0.01)

    def test_window_under_half_never_picked(self):
        masks = [_mask_with(49, 10), _mask_with(60, 10)]
        picks = sample_patch_locations(masks, 0, 20_000, 10, np.random.default_rng(1))
        assert all(index == 1 for index, _, _ in picks)

    def test_too_small_images_raise(self):
        with pytest.raises(PatchSamplingError, match="mask too small"):
            sample_patch_locations([np.ones((4, 4), dtype=bool)], 0, 1, 8, np.random.default_rng(0))

    def test_candidate_grid_reaches_the_far_edge(self):
        windows, counts = enumerate_candidates([np.ones((12, 12), dtype=bool)], 8, 3)
        assert [(r, c) for _, r, c in windows] == [(r, c) for r in (0, 3, 4) for c in (0, 3, 4)]
        assert np.all(counts == 64)

    def test_counts_match_brute_force(self):
        rng = np.random.default_rng(2)
        mask = rng.random((20, 17)) > 0.4
        windows, counts = enumerate_candidates([mask], 6, 4)
        for (_, r, c), count in zip(windows, counts):
            assert count == mask[r : r + 6, c : c + 6].sum()

    def test_subsampled_candidate_pool(self):
        masks = [np.ones((32, 32), dtype=bool)]
        picks = sample_patch_locations(masks, 3, 50, 8, np.random.default_rng(3))
        assert len({(r, c) for _, r, c in picks}) <= 3

    def test_subsampling_keeps_only_eligible_windows(self):
        """A small mask still samples when the pool is far smaller than the candidate grid."""
        mask = np.zeros((64, 64), dtype=bool)
        mask[50:60, 50:60] = True
        windows, counts = enumerate_candidates([mask], 8, 4)
        eligible = {w for w, n in zip(windows, counts) if n >= 32}
        assert 2 < len(eligible) < len(windows) // 20
        for seed in range(5):
            picks = sample_patch_locations([mask], 2, 40, 8, np.random.default_rng(seed))
            assert set(picks) <= eligible
            assert len(set(picks)) <= 2

    def test_tiles_cover_the_candidate(self):
        tiles = slice_tiles((0, 0), 256, 64)
        assert len(tiles) == 16
        assert len(set(tiles)) == 16
        assert tiles[0] == (0, 0) and tiles[-1] == (192, 192)
        assert slice_tiles((5, 7), 32, 16) == [(5, 7), (5, 23), (21, 7), (21, 23)]


class TestPatchRecords:
    def test_extract_and_stack(self):
        pixels = np.random.default_rng(0).random((10, 10, 3)).astype(np.float32)
        mask = np.zeros((10, 10), dtype=bool)
        mask[3:6, 4:8] = True
        samples = [
            extract_patch(pixels, mask, 2, (2, 3), 4, "inpainted"),
            extract_patch(pixels, mask, 2, (6, 6), 4, "rendered"),
        ]
        assert samples[0].size == 4
        assert samples[0].top_left == (2, 3)
        batch, masks = stack_patches(samples)
        assert batch.shape == (2, 3, 4, 4)
        assert masks.shape == (2, 4, 4) and masks.dtype == torch.bool
        assert np.array_equal(batch[0].permute(1, 2, 0).numpy(), pixels[2:6, 3:7])
        assert np.array_equal(masks[1].numpy(), mask[6:10, 6:10])

    def test_crop_past_the_border_rejected(self):
        pixels = np.zeros((6, 6, 3), dtype=np.float32)
        with pytest.raises(pydantic.ValidationError, match="P x P x 3"):
            extract_patch(pixels, np.ones((6, 6), dtype=bool), 0, (4, 0), 4, "rendered")
