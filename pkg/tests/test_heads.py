import numpy as np
import pytest

from flowad import heads as H
from flowad import tensor as T
from flowad.tensor import Tensor
from conftest import check_grad


class TestMaskedPool:
    def test_full_mask_is_global_mean(self, rng):
        Z = rng.standard_normal((3, 4, 5))
        pooled = H.masked_pool(Z, np.ones((4, 5)))
        assert np.allclose(pooled.data, Z.mean(axis=(1, 2)))

    def test_single_pixel_mask(self, rng):
        Z = rng.standard_normal((3, 4, 4))
        m = np.zeros((4, 4))
        m[2, 1] = 1
        pooled = H.masked_pool(Z, m)
        assert np.allclose(pooled.data, Z[:, 2, 1])

    def test_two_pixel_mean(self):
        Z = np.zeros((1, 2, 2))
        Z[0, 0, 0] = 1.0
        Z[0, 1, 1] = 3.0
        m = np.zeros((2, 2))
        m[0, 0] = m[1, 1] = 1
        assert H.masked_pool(Z, m).data[0] == pytest.approx(2.0)

    def test_empty_mask_rejected(self, rng):
        with pytest.raises(ValueError):
            H.masked_pool(rng.standard_normal((2, 3, 3)), np.zeros((3, 3)))

    def test_linearity(self, rng):
        Z1 = rng.standard_normal((3, 4, 4))
        Z2 = rng.standard_normal((3, 4, 4))
        m = (rng.random((4, 4)) > 0.5).astype(float)
        m[0, 0] = 1
        a, b = 2.5, -1.25
        lhs = H.masked_pool(a * Z1 + b * Z2, m).data
        rhs = a * H.masked_pool(Z1, m).data + b * H.masked_pool(Z2, m).data
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_differentiable(self, rng):
        m = np.zeros((3, 3))
        m[1, 1] = m[0, 2] = 1

        def build(z):
            return H.masked_pool(z, m).sum()

        check_grad(build, rng.standard_normal((2, 3, 3)))

    def test_pool_batch(self, rng):
        Z = rng.standard_normal((2, 3, 4, 4))
        masks = [np.ones((4, 4)), np.zeros((4, 4))]
        masks[1][1:3, 1:3] = 1
        out = H.pool_batch(Tensor(Z), masks)
        assert out.shape == (2, 3)
        assert np.allclose(out.data[0], Z[0].mean(axis=(1, 2)))
        assert np.allclose(out.data[1], Z[1][:, 1:3, 1:3].mean(axis=(1, 2)))


class TestAnomalyMask:
    def test_box_must_match_mask(self):
        m = np.zeros((4, 4), dtype=np.uint8)
        m[1:3, 1:3] = 1
        H.AnomalyMask(m, box=(1, 1, 2, 2))
        with pytest.raises(ValueError):
            H.AnomalyMask(m, box=(0, 1, 2, 2))

    def test_values_binary(self):
        with pytest.raises(ValueError):
            H.AnomalyMask(np.full((2, 2), 0.5))


class TestProjection:
    def test_zero_weights_zero_output(self):
        head = H.ProjectionHead(4, seed=0)
        for p in head.params():
            p.data = np.zeros_like(p.data)
        out = head(Tensor(np.ones(4)))
        assert np.array_equal(out.data, np.zeros(4))

    def test_identity_layers_pass_nonnegative_input(self):
        head = H.ProjectionHead(3, seed=0)
        head.W1.data = np.eye(3)
        head.W2.data = np.eye(3)
        head.b1.data = np.zeros(3)
        head.b2.data = np.zeros(3)
        v = np.array([0.5, 2.0, 0.0])
        assert np.allclose(head(Tensor(v)).data, v)

    def test_grad_vs_finite_differences(self, rng):
        head = H.ProjectionHead(3, seed=4)
        v0 = rng.standard_normal(3)

        def build_w1(w):
            head.W1.data = w.data if hasattr(w, "data") else w
            saved = head.W1
            head.W1 = w if isinstance(w, Tensor) else Tensor(w)
            out = head(Tensor(v0)).sum()
            head.W1 = saved
            return out

        check_grad(build_w1, rng.standard_normal((3, 3)))

    def test_dimension_mismatch(self, rng):
        head = H.ProjectionHead(4, seed=0)
        with pytest.raises(ValueError):
            head(Tensor(np.ones(5)))


class TestPrediction:
    def test_zero_weights_uniform_logits(self):
        head = H.PredictionHead(4, seed=0)
        for p in head.params():
            p.data = np.zeros_like(p.data)
        out = head(Tensor(np.ones(4)))
        assert np.array_equal(out.data, [0.0, 0.0])

    def test_deterministic(self, rng):
        head = H.PredictionHead(4, seed=1)
        v = Tensor(rng.standard_normal(4))
        assert np.array_equal(head(v).data, head(v).data)

    def test_batched_matches_single(self, rng):
        head = H.PredictionHead(4, seed=1)
        V = rng.standard_normal((3, 4))
        batched = head(Tensor(V)).data
        for i in range(3):
            assert np.allclose(batched[i], head(Tensor(V[i])).data)


def test_siamese_branches_share_parameter_storage(rng):
    # both pathways hold the *same* parameter tensors
    proj = H.ProjectionHead(4, seed=0)
    positive_branch, negative_branch = proj, proj
    for pa, pb in zip(positive_branch.params(), negative_branch.params()):
        assert pa is pb
    v1 = proj(Tensor(rng.standard_normal(4)))
    v2 = proj(Tensor(rng.standard_normal(4)))
    loss = (v1.sum() + v2.sum())
    loss.backward()
    assert proj.W1.grad is not None


def test_access_counter_increments(rng):
    head = H.PredictionHead(3, seed=0)
    assert head.access_count == 0
    head(Tensor(np.ones(3)))
    head(Tensor(np.ones(3)))
    assert head.access_count == 2
