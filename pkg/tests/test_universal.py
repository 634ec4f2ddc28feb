"""Projection exactness, DeepFool geometry oracle, halting, budget contracts."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import helpers
from adaptbench.datasets import DomainDataset
from adaptbench.models import predict
from adaptbench.universal import (
    GapConfig,
    UapConfig,
    UniversalPerturbation,
    apply_perturbation,
    deepfool_step,
    fooling_rate,
    generate_gap,
    generate_uap,
    load_perturbation,
    project_linf,
    random_sign_perturbation,
    save_perturbation,
)

XI = 10.0 / 255.0


class TestProjection:
    def test_inside_ball_untouched(self):
        v = np.array([0.01, -0.02, 0.0], dtype=np.float32)
        assert np.array_equal(project_linf(v, XI), v)

    def test_budget_holds_exactly_in_float32(self):
        # 10/255 is not representable in float32; the projected values must
        # still satisfy the bound when widened back to float64.
        v = np.array([1.0, -1.0, 0.5], dtype=np.float32)
        out = project_linf(v, XI)
        assert float(np.abs(out).max()) <= XI
        assert out.dtype == np.float32

    def test_idempotent(self):
        v = np.linspace(-1, 1, 64).astype(np.float32).reshape(4, 4, 4)
        once = project_linf(v, XI)
        twice = project_linf(once, XI)
        assert np.array_equal(once, twice)

    @settings(max_examples=60, deadline=None)
    @given(
        v=hnp.arrays(np.float32, (3, 3, 3), elements=st.floats(-2, 2, width=32)),
        radius=st.floats(1e-4, 0.5),
    )
    def test_containment_property(self, v, radius):
        out = project_linf(v, radius)
        assert float(np.abs(out).max()) <= radius
        # Projection never moves a coordinate past the original value.
        assert np.all(np.abs(out) <= np.abs(v) + 1e-7)

    def test_perturbation_budget_enforced_on_construction(self):
        v = np.full((4, 4, 3), XI * 1.5, dtype=np.float32)
        with pytest.raises(ValueError, match="exceeds"):
            UniversalPerturbation(v=v, xi=XI, generator="uap", achieved_fooling_rate=0.0, seed=0)

    def test_apply_clamps_to_pixel_range(self):
        images = np.ones((2, 4, 4, 3), dtype=np.float32)
        v = np.full((4, 4, 3), XI, dtype=np.float32)
        out = apply_perturbation(images, v)
        assert out.max() <= 1.0 and out.min() >= 0.0


def _hyperplane_model(w3d):
    """Binary model with logits ((w3d * x).sum(), 0) for HWC image x.

    The model consumes CHW-flattened tensors, so the weight row is
    transposed to match; the elementwise-sum margin is order-independent.
    """
    row = w3d.transpose(2, 0, 1).reshape(-1).astype(np.float32)
    return helpers.LinearImageModel(np.stack([row, np.zeros_like(row)]))


def _margin(w3d, x):
    return float((w3d * x).sum())


class TestDeepFool:
    def test_matches_linear_geometry(self, rng):
        # Decision boundary is the hyperplane (w . x) = 0, so the minimal
        # L2 perturbation from x has norm |w . x| / ||w||.
        shape = (4, 4, 3)
        for _ in range(5):
            w = rng.normal(size=shape).astype(np.float32)
            x = rng.uniform(0.3, 0.7, size=shape).astype(np.float32)
            m = _margin(w, x)
            if m < 0:
                w, m = -w, -m
            w = w * (0.05 / m)  # rescale so the margin is exactly 0.05
            model = _hyperplane_model(w)
            expected = 0.05 / np.linalg.norm(w)
            r = deepfool_step(model, x, max_iters=10, overshoot=0.02)
            assert abs(np.linalg.norm(r) - expected) <= 0.01 * expected
            flipped = predict(model, (x + 1.02 * r)[None].clip(0, 1))
            assert flipped[0] == 1

    def test_skips_when_reference_label_disagrees(self, rng):
        w = rng.normal(size=(4, 4, 3)).astype(np.float32)
        model = _hyperplane_model(w)
        x = rng.uniform(0, 1, size=(4, 4, 3)).astype(np.float32)
        current = predict(model, x[None])[0]
        r = deepfool_step(model, x, reference_label=1 - current)
        assert np.array_equal(r, np.zeros_like(x))


def _toy_dataset(rng, w3d, margins, shape=(4, 4, 3)):
    """Points at prescribed signed margins from the hyperplane (w . x) = 0."""
    w_sq = float((w3d * w3d).sum())
    images = []
    for m in margins:
        x = rng.uniform(0.4, 0.6, size=shape).astype(np.float32)
        x = x + (m - _margin(w3d, x)) / w_sq * w3d
        images.append(np.clip(x, 0, 1))
    images = np.stack(images).astype(np.float32)
    labels = (np.asarray(margins) < 0).astype(np.int64)
    return DomainDataset(images, labels, class_count=2, domain_id="toy")


class TestGenerateUap:
    def test_halts_at_delta_on_easy_task(self, rng):
        # All points sit a hair from the boundary; one pass must suffice.
        w = rng.normal(size=(4, 4, 3)).astype(np.float32)
        w /= np.linalg.norm(w)
        model = _hyperplane_model(w)
        ds = _toy_dataset(rng, w, margins=[0.002] * 12)
        cfg = UapConfig(xi=XI, delta=0.8, max_passes=5, seed=1)
        pert = generate_uap(model, ds, cfg)
        assert pert.achieved_fooling_rate >= 0.8
        assert pert.passes_used == 1
        assert float(np.abs(pert.v).max()) <= XI
        # Re-verify with the independent evaluator.
        assert fooling_rate(model, ds.images, pert.v) == pert.achieved_fooling_rate

    def test_halts_at_max_passes_when_unfoolable(self, rng):
        # Margins far beyond xi * ||w||_1: no budget-feasible flip exists.
        w = rng.normal(size=(4, 4, 3)).astype(np.float32)
        w /= np.linalg.norm(w)
        model = _hyperplane_model(w)
        ds = _toy_dataset(rng, w, margins=[50.0] * 6)
        cfg = UapConfig(xi=1e-4, delta=0.8, max_passes=2, seed=1)
        pert = generate_uap(model, ds, cfg)
        assert pert.achieved_fooling_rate < 0.8
        assert pert.passes_used == cfg.max_passes
        assert float(np.abs(pert.v).max()) <= 1e-4

    def test_deterministic(self, rng):
        w = rng.normal(size=(4, 4, 3)).astype(np.float32)
        model = _hyperplane_model(w)
        ds = _toy_dataset(rng, w, margins=np.linspace(0.001, 0.05, 10))
        cfg = UapConfig(xi=XI, delta=0.99, max_passes=2, seed=3)
        a = generate_uap(model, ds, cfg)
        b = generate_uap(model, ds, cfg)
        assert np.array_equal(a.v, b.v)
        assert a.achieved_fooling_rate == b.achieved_fooling_rate


class TestGenerateGap:
    def test_budget_by_construction_and_fooling_tracked(self, rng):
        w = rng.normal(size=(4, 4, 3)).astype(np.float32)
        w /= np.linalg.norm(w)
        model = _hyperplane_model(w)
        ds = _toy_dataset(rng, w, margins=[0.002] * 16)
        cfg = GapConfig(xi=XI, steps=60, batch_size=16, eval_every=10, seed=2)
        pert = generate_gap(model, ds, cfg)
        assert float(np.abs(pert.v).max()) <= XI
        assert pert.generator == "gap"
        assert pert.achieved_fooling_rate == fooling_rate(model, ds.images, pert.v)
        # Points this close to the boundary must be foolable within budget.
        assert pert.achieved_fooling_rate >= 0.5

    def test_deterministic(self, rng):
        w = rng.normal(size=(4, 4, 3)).astype(np.float32)
        model = _hyperplane_model(w)
        ds = _toy_dataset(rng, w, margins=np.linspace(0.001, 0.05, 8))
        cfg = GapConfig(xi=XI, steps=20, batch_size=8, eval_every=5, seed=4)
        a = generate_gap(model, ds, cfg)
        b = generate_gap(model, ds, cfg)
        assert np.array_equal(a.v, b.v)


class TestPerturbationIO:
    def test_round_trip(self, tmp_path):
        v = random_sign_perturbation((4, 4, 3), xi=XI, seed=8)
        pert = UniversalPerturbation(
            v=v, xi=XI, generator="uap", achieved_fooling_rate=0.375, seed=8
        )
        save_perturbation(pert, str(tmp_path / "pert"))
        loaded = load_perturbation(str(tmp_path / "pert"))
        assert np.array_equal(loaded.v, pert.v)
        assert loaded.xi == pert.xi
        assert loaded.generator == "uap"
        assert loaded.achieved_fooling_rate == 0.375

    def test_random_sign_budget(self):
        v = random_sign_perturbation((6, 6, 3), xi=XI, seed=0)
        assert float(np.abs(v).max()) <= XI
        assert np.all(np.abs(v) > 0)
