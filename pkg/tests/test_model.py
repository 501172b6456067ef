import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from privspeech import model as mdl
from privspeech import optim

K, F, H, D_M, H_M = 3, 12, 6, 3, 4


def rand_params(seed, multimodal, activation="tanh"):
    p = mdl.init_params(K, F, H, D_M if multimodal else 0, H_M, activation, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    # non-zero biases so every term of the gradient is exercised
    for k in p.tensors:
        if k.endswith(".b"):
            p.tensors[k] = rng.normal(0, 0.3, p.tensors[k].shape)
    return p


def loss_at(params, x, m, y, w):
    probs = mdl.forward_teacher(params, x, m)
    return mdl.weighted_ce_loss(probs, y, w)


def finite_difference(params, x, m, y, w, h=1e-6):
    grads = {}
    for name, v in params.tensors.items():
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            orig = v[idx]
            v[idx] = orig + h
            up = loss_at(params, x, m, y, w)
            v[idx] = orig - h
            down = loss_at(params, x, m, y, w)
            v[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def assert_rel_close(analytic, numeric, rel=1e-4, floor=1e-7):
    for name in numeric:
        a, n = analytic[name], numeric[name]
        err = np.abs(a - n)
        scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        assert np.all(err <= rel * scale + 1e-9), (name, float(np.max(err / scale)))


@pytest.mark.parametrize("multimodal", [True, False], ids=["teacher_mm", "student"])
@pytest.mark.parametrize("point", range(20))
def test_per_example_gradient_matches_finite_differences(multimodal, point):
    rng = np.random.default_rng(point)
    params = rand_params(point, multimodal)
    x = rng.standard_normal(F)
    m = rng.standard_normal(D_M) if multimodal else None
    y = int(rng.integers(K))
    w = float(rng.uniform(0.1, 10))
    analytic = mdl.per_example_grad(params, x, m, y, w)
    assert_rel_close(analytic.tensors, finite_difference(params, x, m, y, w))


def test_relu_gradient_matches_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(3)
    params = rand_params(3, True, "relu")
    X = rng.standard_normal((5, F))
    M = rng.standard_normal((5, D_M))
    y = rng.integers(K, size=5)
    w = rng.uniform(0.5, 2, size=5)
    bg = mdl.batch_backward(params, X, M, y, w)

    T = {k: torch.tensor(v, requires_grad=True) for k, v in params.tensors.items()}
    for i in range(5):
        x, m = torch.tensor(X[i]), torch.tensor(M[i])
        a = torch.relu(T["audio.W"] @ x + T["audio.b"])
        pm = torch.relu(T["priv.W"] @ m + T["priv.b"])
        logits = T["head.W"] @ torch.cat([a, pm]) + T["head.b"]
        loss = -w[i] * torch.log_softmax(logits, 0)[int(y[i])]
        grads = torch.autograd.grad(loss, list(T.values()))
        ours = bg.example(i).tensors
        for (k, _), g in zip(T.items(), grads):
            np.testing.assert_allclose(ours[k], g.numpy(), rtol=1e-10, atol=1e-12)


class TestFactoredGradients:
    def setup_method(self):
        rng = np.random.default_rng(9)
        self.params = rand_params(9, True)
        self.X = rng.standard_normal((7, F))
        self.M = rng.standard_normal((7, D_M))
        self.y = rng.integers(K, size=7)
        self.bg = mdl.batch_backward(self.params, self.X, self.M, self.y, 1.0)

    def test_norms_match_materialized(self):
        explicit = [self.bg.example(i).l2_norm for i in range(7)]
        np.testing.assert_allclose(self.bg.norms(), explicit, rtol=1e-12)

    def test_weighted_sum_matches_materialized(self):
        coef = np.linspace(0.1, 1.3, 7)
        total = self.bg.weighted_sum(coef)
        for name in self.params.names():
            ref = sum(coef[i] * self.bg.example(i).tensors[name] for i in range(7))
            np.testing.assert_allclose(total[name], ref, rtol=1e-12, atol=1e-14)

    def test_batch_rows_equal_single_examples(self):
        for i in range(7):
            single = mdl.per_example_grad(self.params, self.X[i], self.M[i], int(self.y[i]))
            for name, v in single.tensors.items():
                np.testing.assert_allclose(self.bg.example(i).tensors[name], v, rtol=1e-12, atol=1e-15)


class TestForward:
    def test_probabilities(self):
        params = rand_params(0, True, "relu")
        p = mdl.forward_teacher(params, np.ones(F), np.zeros(D_M))
        assert p.shape == (K,) and abs(p.sum() - 1) < 1e-12 and np.all(p > 0)

    def test_multimodal_needs_privileged(self):
        with pytest.raises(mdl.ShapeError):
            mdl.forward_teacher(rand_params(0, True), np.ones(F))

    def test_wrong_privileged_dim(self):
        with pytest.raises(mdl.ShapeError):
            mdl.forward_teacher(rand_params(0, True), np.ones(F), np.ones(D_M + 1))

    def test_student_rejects_multimodal(self):
        with pytest.raises(mdl.ShapeError):
            mdl.forward_student(rand_params(0, True), np.ones(F))

    def test_wrong_feature_size(self):
        with pytest.raises(mdl.ShapeError):
            mdl.forward_student(rand_params(0, False), np.ones(F + 1))

    def test_accepts_matrix_features(self):
        params = mdl.init_params(K, 4 * 5, 8, seed=1)
        spec = np.random.default_rng(0).standard_normal((4, 5))
        np.testing.assert_array_equal(
            mdl.forward_student(params, spec), mdl.forward_student(params, spec.ravel()))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-700, 700, allow_nan=False), min_size=2, max_size=6))
    def test_softmax_is_stable(self, z):
        p = mdl.softmax(np.array(z))
        assert np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-12

    def test_init_is_deterministic(self):
        a = mdl.init_params(K, F, H, D_M, seed=4)
        b = mdl.init_params(K, F, H, D_M, seed=4)
        for k in a.tensors:
            np.testing.assert_array_equal(a.tensors[k], b.tensors[k])
        assert np.all(a.tensors["audio.b"] == 0)
        lim = np.sqrt(6 / (F + H))
        assert np.abs(a.tensors["audio.W"]).max() <= lim


def test_ce_floor():
    assert mdl.weighted_ce_loss(np.array([1.0, 0.0]), 1, 2.0) == pytest.approx(2 * -np.log(1e-12))


def test_saturated_example_has_zero_gradient():
    params = mdl.init_params(2, 2, 2, seed=0)
    params.tensors["head.b"][:] = [0.0, -100.0]
    g = mdl.per_example_grad(params, np.zeros(2), None, 1)
    assert g.l2_norm == 0.0


def test_priv_dropout_frequency():
    rng = np.random.default_rng(0)
    m = np.ones(4)
    zeroed = sum(not mdl.priv_dropout(m, 0.5, rng).any() for _ in range(20000))
    assert abs(zeroed / 20000 - 0.5) < 3 * np.sqrt(0.25 / 20000)
    assert mdl.priv_dropout(m, 0.0, rng) is m
    assert not mdl.priv_dropout(m, 1.0, rng).any()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = rand_params(5, True, "relu")
        meta = mdl.save_checkpoint(params, tmp_path / "t.dpm")
        assert meta.name == "t.dpm.meta.json"
        back = mdl.load_checkpoint(tmp_path / "t.dpm")
        assert back.activation == "relu" and back.multimodal
        for k, v in params.tensors.items():
            np.testing.assert_array_equal(back.tensors[k], v.astype(np.float32).astype(np.float64))

    def test_layout(self, tmp_path):
        import struct

        params = mdl.init_params(2, 3, 4, seed=0)
        mdl.save_checkpoint(params, tmp_path / "a.dpm")
        blob = (tmp_path / "a.dpm").read_bytes()
        assert blob[:4] == b"DPM1"
        assert struct.unpack("<II", blob[4:12]) == (1, 4)
        (n,) = struct.unpack("<I", blob[12:16])
        assert blob[16:16 + n] == b"audio.W"
        total = sum(v.size for v in params.tensors.values())
        header = 12 + sum(4 + len(k) + 4 + 4 * v.ndim for k, v in params.tensors.items())
        assert len(blob) == header + 4 * total

    def test_hash_changes_with_content(self, tmp_path):
        mdl.save_checkpoint(mdl.init_params(2, 3, 4, seed=0), tmp_path / "a.dpm")
        mdl.save_checkpoint(mdl.init_params(2, 3, 4, seed=1), tmp_path / "b.dpm")
        assert mdl.checkpoint_hash(tmp_path / "a.dpm") != mdl.checkpoint_hash(tmp_path / "b.dpm")
        assert len(mdl.checkpoint_hash(tmp_path / "a.dpm")) == 16

    def test_rejects_non_finite(self):
        params = mdl.init_params(2, 3, 4, seed=0)
        params.tensors["head.b"][0] = np.nan
        with pytest.raises(ValueError):
            mdl.ModelParams(params.tensors)


def test_adamw_matches_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    theta = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5)}
    tt = {k: torch.tensor(v.copy(), requires_grad=True) for k, v in theta.items()}
    opt = torch.optim.AdamW(list(tt.values()), lr=1e-2, weight_decay=0.1, betas=(0.9, 0.999), eps=1e-8)
    moments = {}
    for t in range(1, 8):
        grads = {k: rng.standard_normal(v.shape) for k, v in theta.items()}
        optim.adamw_step(theta, grads, moments, t, 1e-2, 0.1)
        for k, p in tt.items():
            p.grad = torch.tensor(grads[k])
        opt.step()
    for k in theta:
        np.testing.assert_allclose(theta[k], tt[k].detach().numpy(), rtol=1e-12, atol=1e-14)


def test_sgd_step():
    theta = {"a": np.ones(3)}
    optim.sgd_step(theta, {"a": np.array([1.0, 2.0, 3.0])}, 0.5)
    np.testing.assert_array_equal(theta["a"], [0.5, 0.0, -0.5])
