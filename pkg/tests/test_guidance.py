import numpy as np
import pytest
import torch

from instedit.capture import ActivationCapture, AttentionCapture, CaptureConfig, CaptureSet
from instedit.errors import CaptureError
from instedit.geometry import BoundingBox, GridMask, Shift, mask_area, rasterize_box
from instedit.guidance import (
    PRESERVE_ATTENTION,
    EditPlan,
    GuidanceWeights,
    PlanObject,
    guided_noise,
    make_guided_noise_fn,
    position_energy,
    preservation_energy,
    total_guidance,
)
from instedit.sampler import cfg_noise, prompt_tensors, sample

from .conftest import make_tiny_model


def oracle_position(attn, m_orig, m_target, norm):
    """Double-loop summation of the position term."""
    h, w = attn.shape
    neg = 0.0
    pos = 0.0
    for r in range(h):
        for c in range(w):
            neg += (attn[r][c] * m_target[r][c]) ** 2
            pos += (attn[r][c] * m_orig[r][c]) ** 2
    return (-neg + pos) / norm


def oracle_preservation(psi_orig, psi_edit, m_orig, m_target, norm):
    """Triple-loop summation of the preservation term."""
    ch, h, w = psi_orig.shape
    total = 0.0
    for k in range(ch):
        for r in range(h):
            for c in range(w):
                a = psi_orig[k][r][c] * m_orig[r][c]
                b = psi_edit[k][r][c] * m_target[r][c]
                total += (a - b) ** 2
    return total / norm


def random_disjoint_masks(rng, size=8):
    cols = rng.permutation(size)
    half = size // 2
    orig = np.zeros((size, size), dtype=np.uint8)
    target = np.zeros((size, size), dtype=np.uint8)
    orig[:, np.sort(cols[:half])[: half // 2]] = 1
    target[:, np.sort(cols[half:])[: half // 2]] = 1
    return GridMask(orig), GridMask(target)


class TestPositionEnergy:
    def test_zero_attention(self):
        m = GridMask(np.eye(4, dtype=np.uint8))
        a = torch.zeros(4, 4, dtype=torch.float64)
        assert position_energy(a, m, m, mask_area(m)).item() == 0.0

    def test_fully_relocated_attention_scores_minus_one(self):
        orig = np.zeros((4, 4), dtype=np.uint8)
        orig[:, :2] = 1
        target = np.zeros((4, 4), dtype=np.uint8)
        target[:, 2:] = 1
        a = torch.tensor(target, dtype=torch.float64)
        e = position_energy(a, GridMask(orig), GridMask(target), int(orig.sum()))
        assert e.item() == pytest.approx(-1.0)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m_orig, m_target = random_disjoint_masks(rng)
            attn = rng.random((8, 8))
            norm = mask_area(m_orig)
            got = position_energy(
                torch.tensor(attn, dtype=torch.float64), m_orig, m_target, norm
            ).item()
            expected = oracle_position(attn, m_orig.values, m_target.values, norm)
            assert got == pytest.approx(expected, rel=1e-6)

    def test_monotone_sign_semantics(self):
        rng = np.random.default_rng(1)
        m_orig, m_target = random_disjoint_masks(rng)
        attn = torch.tensor(rng.random((8, 8)) + 0.1, dtype=torch.float64)
        norm = mask_area(m_orig)
        base = position_energy(attn, m_orig, m_target, norm).item()

        more_target = attn + 0.5 * torch.tensor(m_target.values, dtype=torch.float64)
        assert position_energy(more_target, m_orig, m_target, norm).item() < base

        more_orig = attn + 0.5 * torch.tensor(m_orig.values, dtype=torch.float64)
        assert position_energy(more_orig, m_orig, m_target, norm).item() > base

    def test_zero_norm_rejected(self):
        m = GridMask(np.ones((4, 4), dtype=np.uint8))
        with pytest.raises(ValueError):
            position_energy(torch.zeros(4, 4), m, m, 0)


class TestPreservationEnergy:
    def test_unchanged_features_zero(self):
        rng = np.random.default_rng(2)
        psi = torch.tensor(rng.random((3, 6, 6)))
        m = rasterize_box(BoundingBox(0.2, 0.2, 0.8, 0.8), 6, 6)
        e = preservation_energy(psi, psi.clone(), m, m, mask_area(m))
        assert e.item() == 0.0

    def test_constant_offset_inside_mask(self):
        c = 0.731
        m = rasterize_box(BoundingBox(0.0, 0.0, 0.5, 1.0), 6, 6)
        n = mask_area(m)
        psi = torch.zeros(1, 6, 6, dtype=torch.float64) + 2.0
        psi_edit = psi + c * torch.tensor(m.values, dtype=torch.float64)
        e = preservation_energy(psi, psi_edit, m, m, n)
        assert e.item() == pytest.approx(c**2, rel=1e-12)

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            m_orig, m_target = random_disjoint_masks(rng)
            psi_o = rng.random((3, 8, 8))
            psi_e = rng.random((3, 8, 8))
            norm = mask_area(m_orig)
            got = preservation_energy(
                torch.tensor(psi_o), torch.tensor(psi_e), m_orig, m_target, norm
            ).item()
            expected = oracle_preservation(psi_o, psi_e, m_orig.values, m_target.values, norm)
            assert got == pytest.approx(expected, rel=1e-6)

    def test_nonnegative(self):
        rng = np.random.default_rng(4)
        m, _ = random_disjoint_masks(rng)
        psi_o = torch.tensor(rng.standard_normal((2, 8, 8)))
        psi_e = torch.tensor(rng.standard_normal((2, 8, 8)))
        assert preservation_energy(psi_o, psi_e, m, m, mask_area(m)).item() >= 0.0


def _plan_and_captures(rng, *, w0=1.0, w1=2.5, n_objects=2, size=8, channels=4, seq=6):
    boxes = [
        BoundingBox(0.05, 0.1, 0.35, 0.6),
        BoundingBox(0.55, 0.3, 0.9, 0.8),
        BoundingBox(0.4, 0.05, 0.52, 0.28),
    ][:n_objects]
    objects = tuple(
        PlanObject(box=b, token_span=(i * 2, i * 2 + 2), label=f"o{i}")
        for i, b in enumerate(boxes)
    )
    plan = EditPlan(
        objects=objects,
        edited_index=0,
        shift=Shift(0.25, 0.1),
        weights=GuidanceWeights(w0=w0, w1=w1, s=0.0, v=1.0),
        capture=CaptureConfig(position_layers=("dec1",), preserve_layers=("dec3",)),
    )
    originals = CaptureSet()
    originals.add_attention(
        AttentionCapture("dec1", 0, rng.random((seq, size, size)).astype(np.float32))
    )
    originals.add_activation(
        ActivationCapture("dec3", 0, rng.random((channels, size, size)).astype(np.float32))
    )
    current = {
        ("attn", "dec1"): torch.tensor(rng.random((1, seq, size, size)), dtype=torch.float64),
        ("act", "dec3"): torch.tensor(rng.random((1, channels, size, size)), dtype=torch.float64),
    }
    return plan, originals, current


class TestTotalGuidance:
    def test_preservation_off_reduces_to_position(self):
        rng = np.random.default_rng(5)
        plan, originals, current = _plan_and_captures(rng, w0=0.0, w1=2.5)
        total = total_guidance(plan, originals, current, 0).item()

        maps = current[("attn", "dec1")][0]
        attn = maps[0:2].mean(dim=0)
        m_orig = rasterize_box(plan.edited.box, 8, 8)
        from instedit.geometry import shift_mask

        m_target = shift_mask(m_orig, plan.shift)
        expected = 2.5 * position_energy(attn, m_orig, m_target, mask_area(m_orig)).item()
        assert total == pytest.approx(expected, rel=1e-9)

    def test_both_terms_vanish(self):
        rng = np.random.default_rng(6)
        plan, originals, current = _plan_and_captures(rng)
        current[("attn", "dec1")] = torch.zeros_like(current[("attn", "dec1")])
        psi = torch.tensor(
            originals.activation(0, "dec3").features, dtype=torch.float64
        )[None]
        current[("act", "dec3")] = psi
        assert total_guidance(plan, originals, current, 0).item() == pytest.approx(0.0)

    def test_composition_oracle_two_objects(self):
        rng = np.random.default_rng(7)
        plan, originals, current = _plan_and_captures(rng, w0=1.3, w1=0.7)
        got = total_guidance(plan, originals, current, 0).item()

        from instedit.geometry import shift_mask

        maps = current[("attn", "dec1")][0].numpy()
        attn = (maps[0] + maps[1]) / 2.0
        m_orig = rasterize_box(plan.edited.box, 8, 8)
        m_target = shift_mask(m_orig, plan.shift)
        g_pos = oracle_position(attn, m_orig.values, m_target.values, mask_area(m_orig))

        other = plan.objects[1]
        m = rasterize_box(other.box, 8, 8)
        psi_o = originals.activation(0, "dec3").features.astype(np.float64)
        psi_e = current[("act", "dec3")][0].numpy()
        g_pre = oracle_preservation(psi_o, psi_e, m.values, m.values, mask_area(m))

        assert got == pytest.approx(1.3 * g_pre + 0.7 * g_pos, rel=1e-9)

    def test_single_object_preservation_is_zero(self):
        rng = np.random.default_rng(8)
        plan, originals, current = _plan_and_captures(rng, w0=5.0, w1=0.0, n_objects=1)
        plan_pos = EditPlan(
            objects=plan.objects,
            edited_index=0,
            shift=plan.shift,
            weights=GuidanceWeights(w0=5.0, w1=1.0, s=0.0, v=1.0),
            capture=plan.capture,
        )
        total = total_guidance(plan_pos, originals, current, 0).item()
        maps = current[("attn", "dec1")][0]
        attn = maps[0:2].mean(dim=0)
        m_orig = rasterize_box(plan.edited.box, 8, 8)
        from instedit.geometry import shift_mask

        m_target = shift_mask(m_orig, plan.shift)
        expected = position_energy(attn, m_orig, m_target, mask_area(m_orig)).item()
        assert total == pytest.approx(expected, rel=1e-9)

    def test_linear_in_weights(self):
        rng = np.random.default_rng(9)
        plan1, originals, current = _plan_and_captures(rng, w0=1.0, w1=0.0)
        e_pre = total_guidance(plan1, originals, current, 0).item()
        plan2, _, _ = _plan_and_captures(rng, w0=0.0, w1=1.0)
        rng2 = np.random.default_rng(9)
        plan2, originals2, current2 = _plan_and_captures(rng2, w0=0.0, w1=1.0)
        e_pos = total_guidance(plan2, originals, current, 0).item()
        rng3 = np.random.default_rng(9)
        plan3, _, _ = _plan_and_captures(rng3, w0=2.0, w1=3.0)
        combined = total_guidance(plan3, originals, current, 0).item()
        assert combined == pytest.approx(2.0 * e_pre + 3.0 * e_pos, rel=1e-9)

    def test_missing_capture_raises(self):
        rng = np.random.default_rng(10)
        plan, originals, current = _plan_and_captures(rng)
        with pytest.raises(CaptureError):
            total_guidance(plan, originals, current, 99)

    def test_attention_preserve_mode(self):
        rng = np.random.default_rng(11)
        plan, originals, current = _plan_and_captures(rng, w0=1.0, w1=0.0)
        plan_attn = EditPlan(
            objects=plan.objects,
            edited_index=0,
            shift=plan.shift,
            weights=plan.weights,
            capture=plan.capture,
            preserve_source=PRESERVE_ATTENTION,
        )
        got = total_guidance(plan_attn, originals, current, 0).item()

        other = plan.objects[1]
        m = rasterize_box(other.box, 8, 8)
        maps_orig = originals.attention(0, "dec1").maps.astype(np.float64)
        maps_edit = current[("attn", "dec1")][0].numpy()
        a_o = (maps_orig[2] + maps_orig[3]) / 2.0
        a_e = (maps_edit[2] + maps_edit[3]) / 2.0
        expected = oracle_preservation(a_o[None], a_e[None], m.values, m.values, mask_area(m))
        assert got == pytest.approx(expected, rel=1e-9)


def _toy_plan_for_model(model, vocab, prompt, *, weights, preserve_source="features"):
    objects = (
        PlanObject(box=BoundingBox(0.1, 0.2, 0.45, 0.7), token_span=(1, 3), label="a"),
        PlanObject(box=BoundingBox(0.55, 0.25, 0.9, 0.75), token_span=(5, 7), label="b"),
    )
    return EditPlan(
        objects=objects,
        edited_index=0,
        shift=Shift(0.2, 0.0),
        weights=weights,
        capture=CaptureConfig(position_layers=("dec1",), preserve_layers=("dec3",)),
    )


def _record_originals(model, schedule, vocab, prompt, steps):
    from instedit.sampler import record_generation

    _, caps = record_generation(
        model, schedule, vocab, prompt, seed=1, steps=steps, cfg_scale=0.0,
        config=CaptureConfig(),
    )
    return caps


class TestGuidedNoise:
    prompt = "a red circle and a blue square"

    def test_v_zero_bit_identical_to_cfg(self, schedule, vocab):
        model = make_tiny_model(vocab)
        originals = _record_originals(model, schedule, vocab, self.prompt, steps=4)
        plan = _toy_plan_for_model(
            model, vocab, self.prompt, weights=GuidanceWeights(w0=1.0, w1=2.5, s=3.0, v=0.0)
        )
        tokens, null_tokens = prompt_tensors(vocab, self.prompt, "cpu")
        torch.manual_seed(0)
        z = torch.randn(1, 3, 32, 32)
        guided, _ = guided_noise(
            model, schedule, z, 500, tokens, null_tokens, plan, originals, 0, 4
        )
        with torch.no_grad():
            plain, _ = cfg_noise(model, z, 500, tokens, null_tokens, 3.0)
        assert torch.equal(guided, plain)

    def test_zero_weights_bit_identical_to_cfg(self, schedule, vocab):
        model = make_tiny_model(vocab)
        originals = _record_originals(model, schedule, vocab, self.prompt, steps=4)
        plan = _toy_plan_for_model(
            model, vocab, self.prompt, weights=GuidanceWeights(w0=0.0, w1=0.0, s=2.0, v=1.0)
        )
        tokens, null_tokens = prompt_tensors(vocab, self.prompt, "cpu")
        torch.manual_seed(1)
        z = torch.randn(1, 3, 32, 32)
        guided, _ = guided_noise(
            model, schedule, z, 500, tokens, null_tokens, plan, originals, 0, 4
        )
        with torch.no_grad():
            plain, _ = cfg_noise(model, z, 500, tokens, null_tokens, 2.0)
        assert torch.equal(guided, plain)

    def test_outside_window_is_plain_cfg(self, schedule, vocab):
        model = make_tiny_model(vocab)
        originals = _record_originals(model, schedule, vocab, self.prompt, steps=5)
        plan = _toy_plan_for_model(
            model, vocab, self.prompt, weights=GuidanceWeights(w0=1.0, w1=2.5, s=1.0, v=1.0)
        )
        tokens, null_tokens = prompt_tensors(vocab, self.prompt, "cpu")
        torch.manual_seed(2)
        z = torch.randn(1, 3, 32, 32)
        # step 4 of 5 lies beyond the 0.8 window (4 >= 0.8 * 5)
        guided, _ = guided_noise(
            model, schedule, z, 500, tokens, null_tokens, plan, originals, 4, 5
        )
        with torch.no_grad():
            plain, _ = cfg_noise(model, z, 500, tokens, null_tokens, 1.0)
        assert torch.equal(guided, plain)

    def test_active_guidance_changes_estimate(self, schedule, vocab):
        model = make_tiny_model(vocab)
        originals = _record_originals(model, schedule, vocab, self.prompt, steps=4)
        plan = _toy_plan_for_model(
            model, vocab, self.prompt, weights=GuidanceWeights(w0=1.0, w1=2.5, s=1.0, v=50.0)
        )
        tokens, null_tokens = prompt_tensors(vocab, self.prompt, "cpu")
        torch.manual_seed(3)
        z = torch.randn(1, 3, 32, 32)
        guided, _ = guided_noise(
            model, schedule, z, 500, tokens, null_tokens, plan, originals, 0, 4
        )
        with torch.no_grad():
            plain, _ = cfg_noise(model, z, 500, tokens, null_tokens, 1.0)
        assert not torch.equal(guided, plain)

    def test_sampling_with_inert_guidance_is_bit_identical(self, schedule, vocab):
        model = make_tiny_model(vocab)
        originals = _record_originals(model, schedule, vocab, self.prompt, steps=5)
        plan = _toy_plan_for_model(
            model, vocab, self.prompt, weights=GuidanceWeights(w0=1.0, w1=2.5, s=3.0, v=0.0)
        )
        noise_fn = make_guided_noise_fn(
            model, schedule, vocab, self.prompt, plan, originals, steps=5
        )
        plain = sample(model, schedule, vocab, self.prompt, seed=4, steps=5, cfg_scale=3.0)
        guided = sample(
            model, schedule, vocab, self.prompt, seed=4, steps=5, cfg_scale=3.0,
            noise_fn=noise_fn,
        )
        assert np.array_equal(plain.image, guided.image)


class TestGradientCorrectness:
    def test_finite_differences_tiny_model(self, schedule, vocab):
        prompt = "a red circle and a blue square"
        model = make_tiny_model(vocab).double()
        originals = _record_originals(model, schedule, vocab, prompt, steps=3)
        plan = _toy_plan_for_model(
            model, vocab, prompt, weights=GuidanceWeights(w0=1.0, w1=2.5, s=0.0, v=1.0)
        )
        tokens, _ = prompt_tensors(vocab, prompt, "cpu")
        from instedit.guidance import PlanMasks

        masks = PlanMasks(plan, model.resolution_of)

        def energy_of(z):
            _, raw = model(
                z, 500, tokens,
                want_attn=frozenset(("dec1",)), want_act=frozenset(("dec3",)),
            )
            return total_guidance(plan, originals, raw, 0, masks=masks)

        torch.manual_seed(5)
        z = torch.randn(1, 3, 32, 32, dtype=torch.float64)
        z_req = z.clone().requires_grad_(True)
        grad = torch.autograd.grad(energy_of(z_req), z_req)[0]

        rng = np.random.default_rng(0)
        h = 1e-5
        for _ in range(10):
            c = int(rng.integers(0, 3))
            r = int(rng.integers(0, 32))
            col = int(rng.integers(0, 32))
            zp = z.clone()
            zp[0, c, r, col] += h
            zm = z.clone()
            zm[0, c, r, col] -= h
            with torch.no_grad():
                fd = (energy_of(zp) - energy_of(zm)).item() / (2 * h)
            analytic = grad[0, c, r, col].item()
            denom = max(abs(fd), abs(analytic), 1e-8)
            assert abs(fd - analytic) / denom < 1e-3, (fd, analytic)
