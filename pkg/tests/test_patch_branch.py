"""Tests for the patch branch: encoding, gating, and LSE aggregation."""

import numpy as np
import pytest

from wsrpn.autodiff import AutodiffError, grad_check, set_default_dtype, tensor
from wsrpn.nn import MLP
from wsrpn.patch_branch import (
    Backbone,
    aggregate_patch_image_probs,
    classify_with_nofinding,
    lse_pool,
    position_encoding,
)


@pytest.fixture(autouse=True)
def _f64():
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float32)


class TestPositionEncoding:
    def test_patch_00_closed_form(self):
        pe = position_encoding(7, 7, 16)
        want = np.tile([0.0, 1.0], 8)  # sin(0), cos(0) interleaved
        np.testing.assert_allclose(pe[0, 0], want, atol=1e-15)

    def test_matches_independent_sinusoid(self):
        """Entry (m,n) only depends on (m,n,d); check one patch by hand."""
        d = 8
        pe = position_encoding(5, 6, d)
        half = d // 2
        m, n = 3, 4
        want = np.zeros(d)
        for i in range(half // 2):
            omega = 10000.0 ** (-2.0 * i / half)
            want[2 * i] = np.sin(m * omega)
            want[2 * i + 1] = np.cos(m * omega)
            want[half + 2 * i] = np.sin(n * omega)
            want[half + 2 * i + 1] = np.cos(n * omega)
        np.testing.assert_allclose(pe[m, n], want, atol=1e-15)

    def test_position_only_dependence(self):
        a = position_encoding(4, 4, 12)
        b = position_encoding(7, 9, 12)
        np.testing.assert_array_equal(a[2, 3], b[2, 3])

    def test_dim_not_divisible_by_4(self):
        with pytest.raises(ValueError, match="divisible by 4"):
            position_encoding(4, 4, 10)


class TestBackbone:
    def test_224_to_7x7_grid(self):
        rng = np.random.default_rng(42)
        bb = Backbone(rng, channels=(4, 8, 8, 8), d=8, final_pool=True)
        assert bb.stride == 32
        out = bb(tensor(rng.standard_normal((2, 1, 224, 224))))
        assert out.shape == (2, 7, 7, 8)

    def test_112_to_7x7_without_final_pool(self):
        rng = np.random.default_rng(42)
        bb = Backbone(rng, channels=(4, 8, 8, 8), d=8, final_pool=False)
        assert bb.stride == 16
        out = bb(tensor(rng.standard_normal((1, 1, 112, 112))))
        assert out.shape == (1, 7, 7, 8)

    def test_identical_images_identical_grids(self):
        rng = np.random.default_rng(42)
        bb = Backbone(rng, channels=(4, 8), d=8)
        image = rng.standard_normal((1, 1, 32, 32))
        a = bb(tensor(image.copy()))
        b = bb(tensor(image.copy()))
        np.testing.assert_array_equal(a.data, b.data)

    def test_indivisible_side_names_stride(self):
        rng = np.random.default_rng(42)
        bb = Backbone(rng, channels=(4, 8), d=8)
        with pytest.raises(ValueError, match="stride 4"):
            bb(tensor(np.zeros((1, 1, 30, 30))))

    def test_non_square_rejected(self):
        rng = np.random.default_rng(42)
        bb = Backbone(rng, channels=(4, 8), d=8)
        with pytest.raises(ValueError, match="square"):
            bb(tensor(np.zeros((1, 1, 32, 64))))


class TestGating:
    def _classifier(self, nc, seed=42):
        rng = np.random.default_rng(seed)
        return MLP(rng, 8, 8, nc + 1)

    def test_zero_logits(self):
        probs, _ = classify_with_nofinding(tensor(np.zeros((1, 3))), lambda t: t)
        np.testing.assert_allclose(probs.data, [[0.25, 0.25, 0.5]], atol=1e-15)

    def test_large_nofinding_logit_gates_classes(self):
        logits = np.array([[3.0, -1.0, 20.0]])
        probs, _ = classify_with_nofinding(tensor(logits), lambda t: t)
        np.testing.assert_allclose(probs.data[0, 2], 1.0, atol=1e-8)
        assert probs.data[0, 0] < 1e-8 and probs.data[0, 1] < 1e-8

    def test_class_permutation_symmetry(self):
        rng = np.random.default_rng(42)
        logits = rng.standard_normal((2, 5, 4))
        perm = [2, 0, 1]
        base, _ = classify_with_nofinding(tensor(logits), lambda t: t)
        permuted_in = np.concatenate(
            [logits[..., perm], logits[..., 3:]], axis=-1
        )
        permuted, _ = classify_with_nofinding(tensor(permuted_in), lambda t: t)
        np.testing.assert_allclose(permuted.data[..., :3], base.data[..., perm],
                                   atol=1e-15)

    def test_gating_inequality_exact(self):
        """p_c <= 1 - p_nf for every patch and class, to 1e-12."""
        rng = np.random.default_rng(42)
        classifier = self._classifier(nc=3)
        feats = tensor(rng.standard_normal((2, 7, 7, 8)))
        probs, _ = classify_with_nofinding(feats, classifier)
        p = probs.data
        bound = 1.0 - p[..., -1:]
        assert (p[..., :-1] <= bound + 1e-12).all()

    def test_probabilities_in_range(self):
        rng = np.random.default_rng(42)
        probs, _ = classify_with_nofinding(
            tensor(rng.standard_normal((4, 6)) * 10), lambda t: t
        )
        assert (probs.data >= 0).all() and (probs.data <= 1).all()


class TestLsePool:
    def test_constant_grid(self):
        for r in (0.5, 5.0, 50.0):
            out = lse_pool(tensor(np.full((3, 4), 0.7)), r)
            np.testing.assert_allclose(out.data, 0.7, atol=1e-12)

    def test_two_value_grid(self):
        """{0,1} on a 1x2 grid at r=5: (1/5) log((1 + e^5)/2)."""
        out = lse_pool(tensor(np.array([[0.0, 1.0]])), 5.0)
        want = np.log((1.0 + np.exp(5.0)) / 2.0) / 5.0
        np.testing.assert_allclose(out.data, want, atol=1e-12)
        np.testing.assert_allclose(want, 0.8627136, atol=1e-7)

    def test_one_hot_7x7(self):
        """Single 1 among 48 zeros at r=5: (1/5) log((48 + e^5)/49)."""
        grid = np.zeros((7, 7))
        grid[3, 2] = 1.0
        out = lse_pool(tensor(grid), 5.0)
        want = np.log((48.0 + np.exp(5.0)) / 49.0) / 5.0
        np.testing.assert_allclose(out.data, want, atol=1e-12)
        np.testing.assert_allclose(want, 0.2776800, atol=1e-7)

    def test_monotone_in_each_input(self):
        rng = np.random.default_rng(42)
        grid = rng.uniform(0, 1, (4, 4))
        base = lse_pool(tensor(grid), 5.0).item()
        for idx in np.ndindex(4, 4):
            bumped = grid.copy()
            bumped[idx] += 0.05
            assert lse_pool(tensor(bumped), 5.0).item() >= base - 1e-14

    def test_bounds(self):
        """lse in [min - log(HW)/r, max]."""
        rng = np.random.default_rng(42)
        for _ in range(50):
            grid = rng.uniform(0, 1, (5, 6))
            r = rng.uniform(0.5, 20.0)
            val = lse_pool(tensor(grid), r).item()
            assert grid.min() - np.log(30.0) / r - 1e-12 <= val <= grid.max() + 1e-12

    def test_r_to_infinity_approaches_max_monotonically(self):
        rng = np.random.default_rng(42)
        grid = rng.uniform(0, 1, (3, 3))
        vals = [lse_pool(tensor(grid), r).item() for r in (1.0, 5.0, 25.0, 125.0)]
        assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
        np.testing.assert_allclose(vals[-1], grid.max(), atol=0.05)

    def test_empty_grid_error(self):
        with pytest.raises(AutodiffError, match="empty"):
            lse_pool(tensor(np.zeros((0, 3))), 5.0)

    def test_nonpositive_r_error(self):
        with pytest.raises(ValueError, match="positive"):
            lse_pool(tensor(np.ones((2, 2))), 0.0)

    def test_gradient(self):
        rng = np.random.default_rng(42)
        x = tensor(rng.uniform(0.05, 0.95, (4, 4)), requires_grad=True)
        assert grad_check(lambda: lse_pool(x, 5.0), x) <= 1e-5


class TestAggregate:
    def test_unanimous_nofinding(self):
        probs = np.zeros((1, 3, 3, 3))
        probs[..., 2] = 1.0
        image = aggregate_patch_image_probs(tensor(probs), 5.0)
        np.testing.assert_allclose(image.all_nf.data, 1.0, atol=1e-12)
        np.testing.assert_allclose(image.any_nf.data, 1.0, atol=1e-12)

    def test_outputs_within_channel_range(self):
        rng = np.random.default_rng(42)
        probs = rng.uniform(0, 1, (2, 4, 4, 4))
        image = aggregate_patch_image_probs(tensor(probs), 5.0)
        for c in range(3):
            chan = probs[..., c].reshape(2, -1)
            assert (image.classes.data[:, c] <= chan.max(axis=1) + 1e-12).all()
            assert (image.classes.data[:, c] >= chan.min(axis=1) - np.log(16) / 5.0).all()

    def test_vector_layout(self):
        rng = np.random.default_rng(42)
        probs = rng.uniform(0, 1, (2, 3, 3, 4))
        image = aggregate_patch_image_probs(tensor(probs), 5.0)
        vec = image.vector()
        assert vec.shape == (2, 5)
        np.testing.assert_array_equal(vec.data[:, :3], image.classes.data)
        np.testing.assert_array_equal(vec.data[:, 3], image.all_nf.data)
        np.testing.assert_array_equal(vec.data[:, 4], image.any_nf.data)

    def test_gradient_through_gating_and_pooling(self):
        """Gradient w.r.t. patch logits passes grad_check at 1e-5."""
        rng = np.random.default_rng(42)
        logits = tensor(rng.standard_normal((1, 4, 4, 3)), requires_grad=True)

        def f():
            probs, _ = classify_with_nofinding(logits, lambda t: t)
            return aggregate_patch_image_probs(probs, 5.0).vector().sum()

        assert grad_check(f, logits) <= 1e-5
