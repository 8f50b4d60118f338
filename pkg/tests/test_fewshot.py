import numpy as np
import pytest

from ma3 import fewshot as fs
from ma3.errors import ConfigError
from ma3.nn import Adam, EmbeddingNet


class TestEmbed:
    def test_zero_weights_zero_embedding_without_bn(self):
        net = EmbeddingNet((16, 16), blocks=2, filters=8, h_dim=32, use_bn=False,
                           rng=np.random.default_rng(0))
        for k in net.params:
            if k.startswith("conv"):
                net.params[k][:] = 0.0
        net.params["proj.b"][:] = 0.0
        emb = fs.embed(net, np.zeros((16, 16)))
        np.testing.assert_array_equal(emb, np.zeros(32))

    def test_eval_mode_deterministic(self):
        net = EmbeddingNet((16, 16), blocks=2, filters=8, h_dim=32, rng=np.random.default_rng(1))
        x = np.random.default_rng(2).random((16, 16))
        e1 = fs.embed(net, x)
        e2 = fs.embed(net, x)
        np.testing.assert_array_equal(e1, e2)

    def test_incompatible_size_rejected(self):
        net = EmbeddingNet((16, 16), blocks=2, filters=8, h_dim=32)
        with pytest.raises(ConfigError, match="expected"):
            fs.embed(net, np.zeros((12, 12)))

    def test_too_many_pool_stages_rejected(self):
        with pytest.raises(ConfigError, match="pooling"):
            EmbeddingNet((8, 8), blocks=4, filters=4, h_dim=8)

    def test_norm_squared_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        net = EmbeddingNet((16, 16), blocks=2, filters=8, h_dim=32, rng=rng, dtype=np.float64)
        x = rng.random((1, 1, 16, 16))

        def loss():
            emb, _ = net.forward(x, train=False)
            return float(np.sum(emb * emb))

        emb, cache = net.forward(x, train=False)
        _, grads = net.backward(2.0 * emb, cache)
        h = 1e-5
        checked = 0
        for key in net.params:
            for off in rng.integers(0, net.params[key].size, size=2):
                orig = net.params[key].flat[off]
                net.params[key].flat[off] = orig + h
                lp = loss()
                net.params[key].flat[off] = orig - h
                lm = loss()
                net.params[key].flat[off] = orig
                num = (lp - lm) / (2 * h)
                rel = abs(grads[key].flat[off] - num) / max(abs(num), abs(grads[key].flat[off]), 1e-6)
                assert rel <= 1e-3, (key, off, rel)
                checked += 1
        assert checked >= 16


class TestPrototypes:
    def test_one_shot_prototype_is_the_embedding(self):
        emb = np.array([[1.0, 2.0], [3.0, 4.0]])
        protos = fs.compute_prototypes(emb, np.array([0, 1]), 2)
        np.testing.assert_array_equal(protos, emb)

    def test_mean_of_two(self):
        emb = np.array([[0.0, 0.0], [2.0, 2.0]])
        protos = fs.compute_prototypes(emb, np.array([0, 0]), 1)
        np.testing.assert_array_equal(protos, [[1.0, 1.0]])

    def test_order_invariant(self):
        rng = np.random.default_rng(4)
        emb = rng.random((10, 5))
        labels = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2, 0])
        p1 = fs.compute_prototypes(emb, labels, 3)
        perm = rng.permutation(10)
        p2 = fs.compute_prototypes(emb[perm], labels[perm], 3)
        np.testing.assert_allclose(p1, p2, atol=1e-12)

    def test_missing_class_rejected(self):
        with pytest.raises(ValueError, match="class 1"):
            fs.compute_prototypes(np.ones((2, 3)), np.array([0, 0]), 2)

    def test_backward_routes_mean(self):
        dprotos = np.array([[1.0, 0.0], [0.0, 2.0]])
        labels = np.array([0, 0, 1])
        demb = fs.prototypes_backward(dprotos, labels, 2)
        np.testing.assert_allclose(demb, [[0.5, 0.0], [0.5, 0.0], [0.0, 2.0]])


class TestProtonetLoss:
    def test_equidistant_queries_give_ln2(self):
        protos = np.array([[0.0, 0.0], [2.0, 0.0]])
        query = np.array([[1.0, 0.0]])
        loss, probs, _ = fs.protonet_loss(query, np.array([0]), protos)
        np.testing.assert_allclose(probs, [[0.5, 0.5]], atol=1e-12)
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)

    def test_hand_computed_example(self):
        protos = np.array([[0.0, 0.0], [0.0, 2.0]])
        query = np.array([[0.0, 0.5]])
        loss, probs, _ = fs.protonet_loss(query, np.array([0]), protos)
        # logits (-0.25, -2.25); p0 = 1/(1+e^-2)
        assert probs[0, 0] == pytest.approx(0.8808, abs=1e-4)
        assert loss == pytest.approx(0.1269, abs=1e-4)

    def test_query_at_prototype_dominant_logit(self):
        protos = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        query = np.array([[0.0, 0.0]])
        loss, _, _ = fs.protonet_loss(query, np.array([0]), protos)
        assert 0.0 <= loss <= 1e-40

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(5)
        loss, probs, _ = fs.protonet_loss(rng.random((7, 4)), rng.integers(0, 3, 7), rng.random((3, 4)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert np.isfinite(loss)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        query = rng.random((6, 4))
        labels = rng.integers(0, 3, 6)
        protos = rng.random((3, 4))
        loss1, probs1, _ = fs.protonet_loss(query, labels, protos)
        perm = np.array([2, 0, 1])  # new_label = perm[old_label]
        inv = np.argsort(perm)
        loss2, probs2, _ = fs.protonet_loss(query, perm[labels], protos[inv])
        assert loss1 == pytest.approx(loss2, abs=1e-12)
        np.testing.assert_allclose(probs2[:, perm], probs1, atol=1e-12)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(7)
        query = rng.random((4, 3))
        labels = rng.integers(0, 2, 4)
        protos = rng.random((2, 3))
        _, _, cache = fs.protonet_loss(query, labels, protos)
        dquery, dprotos = fs.protonet_backward(cache)
        h = 1e-6
        for arr, grad in ((query, dquery), (protos, dprotos)):
            for off in range(arr.size):
                orig = arr.flat[off]
                arr.flat[off] = orig + h
                lp, _, _ = fs.protonet_loss(query, labels, protos)
                arr.flat[off] = orig - h
                lm, _, _ = fs.protonet_loss(query, labels, protos)
                arr.flat[off] = orig
                num = (lp - lm) / (2 * h)
                assert abs(grad.flat[off] - num) / max(abs(num), 1e-6) <= 1e-4


class TestCosineLoss:
    def test_parallel_vs_orthogonal(self):
        protos = np.array([[1.0, 0.0], [0.0, 1.0]])
        query = np.array([[2.0, 0.0]])
        loss, probs, _ = fs.cosine_loss(query, np.array([0]), protos, tau=1.0)
        assert probs[0, 0] == pytest.approx(np.e / (np.e + 1.0), abs=1e-6)

    def test_scale_invariance(self):
        rng = np.random.default_rng(8)
        query = rng.random((3, 4)) + 0.1
        labels = np.array([0, 1, 0])
        protos = rng.random((2, 4)) + 0.1
        _, probs1, _ = fs.cosine_loss(query, labels, protos, tau=3.0)
        _, probs2, _ = fs.cosine_loss(query * 17.3, labels, protos, tau=3.0)
        np.testing.assert_allclose(probs1, probs2, atol=1e-9)

    def test_identical_prototypes_uniform(self):
        protos = np.tile(np.array([[1.0, 2.0]]), (4, 1))
        query = np.array([[0.3, 0.9]])
        loss, probs, _ = fs.cosine_loss(query, np.array([2]), protos, tau=5.0)
        np.testing.assert_allclose(probs, 0.25, atol=1e-12)
        assert loss == pytest.approx(np.log(4.0), abs=1e-12)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(9)
        query = rng.random((4, 3)) + 0.2
        labels = rng.integers(0, 2, 4)
        protos = rng.random((2, 3)) + 0.2
        _, _, cache = fs.cosine_loss(query, labels, protos, tau=4.0)
        dquery, dprotos = fs.cosine_backward(cache)
        h = 1e-6
        for arr, grad in ((query, dquery), (protos, dprotos)):
            for off in range(arr.size):
                orig = arr.flat[off]
                arr.flat[off] = orig + h
                lp, _, _ = fs.cosine_loss(query, labels, protos, tau=4.0)
                arr.flat[off] = orig - h
                lm, _, _ = fs.cosine_loss(query, labels, protos, tau=4.0)
                arr.flat[off] = orig
                num = (lp - lm) / (2 * h)
                assert abs(grad.flat[off] - num) / max(abs(num), 1e-6) <= 1e-4


class TestEpisodeAccuracy:
    def test_all_correct(self):
        probs = np.eye(3)
        assert fs.episode_accuracy(probs, np.array([0, 1, 2])) == 1.0

    def test_uniform_ties_break_to_class_zero(self):
        probs = np.full((4, 5), 0.2)
        assert fs.episode_accuracy(probs, np.array([0, 0, 0, 0])) == 1.0
        assert fs.episode_accuracy(probs, np.array([1, 2, 3, 4])) == 0.0

    def test_half_correct(self):
        probs = np.array([[0.9, 0.1], [0.9, 0.1], [0.1, 0.9], [0.9, 0.1]])
        assert fs.episode_accuracy(probs, np.array([0, 1, 1, 1])) == 0.5


class TestLearningSanity:
    def test_separable_toy_task_reaches_95_percent(self):
        # class k = bright block at a distinct location + small noise: a
        # linearly separable embedding task
        rng = np.random.default_rng(10)
        H = W = 16
        n_way, k_shot, q = 3, 1, 3

        def draw_image(cls):
            img = rng.normal(0.0, 0.02, size=(H, W))
            r, c = divmod(cls, 2)
            img[2 + 6 * r : 8 + 6 * r, 2 + 6 * c : 8 + 6 * c] += 1.0
            return np.clip(img, 0.0, 1.0)

        net = EmbeddingNet((H, W), blocks=2, filters=8, h_dim=16, rng=np.random.default_rng(11),
                           dtype=np.float64)
        opt = Adam(net.params, lr=1e-3)
        accs = []
        for _ in range(500):
            sx = np.stack([draw_image(k) for k in range(n_way)])[:, None]
            qx = np.stack([draw_image(k) for k in range(n_way) for _ in range(q)])[:, None]
            sy = np.arange(n_way)
            qy = np.repeat(np.arange(n_way), q)
            emb, cache = net.forward(np.concatenate([sx, qx]), train=True)
            protos = fs.compute_prototypes(emb[:n_way], sy, n_way)
            loss, probs, head_cache = fs.protonet_loss(emb[n_way:], qy, protos)
            accs.append(fs.episode_accuracy(probs, qy))
            dquery, dprotos = fs.protonet_backward(head_cache)
            dsup = fs.prototypes_backward(dprotos, sy, n_way)
            _, grads = net.backward(np.concatenate([dsup, dquery]), cache)
            opt.step(net.params, grads)
        assert np.mean(accs[-50:]) >= 0.95
