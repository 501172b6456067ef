import inspect

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from privspeech import datamodel as dm
from privspeech import distill as kd
from privspeech import dpsgd
from privspeech import features as fe
from privspeech import model as mdl
from privspeech import optim

FRONT = fe.FrontEndConfig(frames=8)
SPEC = dm.SynthSpec(n=120, n_mels=5, L=8, frame_jitter=2, separation=0.5)


@pytest.fixture(scope="module")
def aux():
    return dm.synth_generate(SPEC, seed=1)


def soft_labels(aux, seed=0):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(aux.K), size=len(aux))
    return kd.TeacherProbFile(aux.K, "audio_only", "h", aux.ids, aux.labels, P)


class TestKdLoss:
    @pytest.mark.parametrize("point", range(20))
    def test_logit_gradient_matches_finite_differences(self, point):
        rng = np.random.default_rng(point)
        K = int(rng.integers(2, 6))
        z = rng.normal(0, 2, K)
        p_t = rng.dirichlet(np.ones(K))
        y = int(rng.integers(K))
        cfg = kd.KdConfig(tau=float(rng.uniform(0.5, 4)), alpha=float(rng.uniform(0, 1)))
        g = kd.kd_grad_logits(z, y, p_t, cfg)
        h = 1e-6
        for k in range(K):
            e = np.zeros(K)
            e[k] = h
            num = (kd.kd_loss(z + e, y, p_t, cfg) - kd.kd_loss(z - e, y, p_t, cfg)) / (2 * h)
            assert abs(g[k] - num) <= 1e-4 * max(abs(g[k]), abs(num), 1e-7) + 1e-9

    def test_alpha_zero_is_cross_entropy(self):
        z = np.array([1.0, -0.5, 2.0])
        ce = -np.log(mdl.softmax(z)[1])
        assert kd.kd_loss(z, 1, np.array([0.2, 0.3, 0.5]), kd.KdConfig(alpha=0.0)) == pytest.approx(ce, rel=1e-14)

    def test_matching_teacher_has_zero_kl(self):
        z = np.array([0.3, 1.2, -2.0])
        cfg = kd.KdConfig(alpha=1.0, tau=2.0)
        assert kd.kd_loss(z, 0, mdl.softmax(z), cfg) == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(kd.kd_grad_logits(z, 0, mdl.softmax(z), cfg), 0.0, atol=1e-12)

    def test_temper(self):
        p = np.array([0.7, 0.2, 0.1])
        np.testing.assert_allclose(kd.temper(p, 1.0), p, rtol=1e-14)
        t = kd.temper(p, 2.0)
        np.testing.assert_allclose(t, np.sqrt(p) / np.sqrt(p).sum(), rtol=1e-14)
        # a zero entry is floored, not a NaN
        assert np.all(np.isfinite(kd.temper(np.array([1.0, 0.0]), 2.0)))

    def test_batched_gradient_equals_rows(self):
        rng = np.random.default_rng(0)
        Z = rng.standard_normal((4, 3))
        P = rng.dirichlet(np.ones(3), size=4)
        y = np.array([0, 2, 1, 1])
        cfg = kd.KdConfig()
        batch = kd.kd_grad_logits(Z, y, P, cfg)
        for i in range(4):
            np.testing.assert_allclose(batch[i], kd.kd_grad_logits(Z[i], y[i], P[i], cfg), rtol=1e-14)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=3, max_size=3), st.integers(0, 2),
           st.floats(0.1, 10), st.floats(0, 1))
    def test_loss_is_at_least_the_weighted_ce(self, z, y, tau, alpha):
        z = np.array(z)
        p_t = np.array([0.5, 0.3, 0.2])
        cfg = kd.KdConfig(tau=tau, alpha=alpha)
        ce = -kd.log_softmax(z)[y]
        assert kd.kd_loss(z, y, p_t, cfg) >= (1 - alpha) * ce - 1e-9

    def test_config_validation(self):
        with pytest.raises(ValueError):
            kd.KdConfig(tau=0.0)
        with pytest.raises(ValueError):
            kd.KdConfig(alpha=1.5)


class TestProbFile:
    def test_round_trip(self, aux, tmp_path):
        f = soft_labels(aux)
        f.write(tmp_path / "p.csv")
        back = kd.TeacherProbFile.read(tmp_path / "p.csv")
        assert back.ids == f.ids and back.mode == "audio_only" and back.teacher_hash == "h"
        np.testing.assert_array_equal(back.labels, f.labels)
        np.testing.assert_allclose(back.probs, f.probs, rtol=1e-8)
        assert (tmp_path / "p.csv").read_text().startswith("#K=3 mode=audio_only teacher=h\n")

    def test_one_shot(self, aux, tmp_path):
        f = soft_labels(aux)
        f.write(tmp_path / "p.csv")
        before = (tmp_path / "p.csv").read_bytes()
        with pytest.raises(kd.OneShotViolation):
            soft_labels(aux, seed=5).write(tmp_path / "p.csv")
        assert (tmp_path / "p.csv").read_bytes() == before

    def test_label_aux_refuses_existing_output(self, aux, tmp_path):
        (tmp_path / "p.csv").write_text("x")
        teacher = mdl.init_params(3, 40, 4, seed=0)
        with pytest.raises(kd.OneShotViolation):
            kd.label_aux(teacher, aux, frontend=FRONT, out_path=tmp_path / "p.csv")

    def test_missing_id(self, aux):
        with pytest.raises(kd.MissingTeacherProbability):
            soft_labels(aux).lookup(["nope"])

    def test_rows_must_be_distributions(self):
        with pytest.raises(ValueError):
            kd.TeacherProbFile(2, "audio_only", "h", ["a"], [0], [[0.5, 0.6]])

    def test_bad_mode(self):
        with pytest.raises(kd.QueryModeError):
            kd.TeacherProbFile(2, "both", "h", [], [], np.zeros((0, 2)))


class TestLabelAux:
    def test_multimodal_teacher_modes(self, aux):
        teacher = mdl.init_params(3, 40, 4, d_m=3, seed=2)
        X = dpsgd.prepare_inputs(aux, FRONT)
        M = np.stack([e.privileged for e in aux.examples])
        audio = kd.label_aux(teacher, aux, "audio_only", FRONT)
        priv = kd.label_aux(teacher, aux, "privileged", FRONT)
        np.testing.assert_array_equal(audio.probs, mdl.predict_proba(teacher, X, np.zeros_like(M)))
        np.testing.assert_array_equal(priv.probs, mdl.predict_proba(teacher, X, M))
        assert (audio.mode, priv.mode) == ("audio_only", "privileged")

    def test_audio_teacher_is_recorded_as_audio_only(self, aux):
        teacher = mdl.init_params(3, 40, 4, seed=2)
        assert kd.label_aux(teacher, aux, "privileged", FRONT).mode == "audio_only"

    def test_privileged_mode_needs_vectors(self, aux):
        bare = aux.without_privileged()
        teacher = mdl.init_params(3, 40, 4, d_m=3, seed=2)
        with pytest.raises(kd.QueryModeError):
            kd.label_aux(teacher, bare, "privileged", FRONT)


class TestStudent:
    def test_interface_has_no_private_inputs(self):
        names = set(inspect.signature(kd.train_student).parameters)
        assert names == {"aux", "probs", "cfg", "model_cfg", "frontend", "init", "steps"}

    def test_alpha_zero_is_plain_cross_entropy_training(self, aux):
        cfg = kd.KdConfig(alpha=0.0, epochs=2, batch_size=16, seed=7)
        mc = dpsgd.ModelConfig(h=6)
        student = kd.train_student(aux, soft_labels(aux), cfg, mc, FRONT)

        # reference: minibatch AdamW on mean CE through the DP engine's CE gradients
        X = dpsgd.prepare_inputs(aux, FRONT)
        params = mdl.init_params(3, X.shape[1], 6, seed=7)
        rng = np.random.default_rng(7)
        moments, t = {}, 0
        for _ in range(2):
            order = rng.permutation(len(aux))
            for s in range(0, len(aux), 16):
                idx = order[s:s + 16]
                bg = mdl.batch_backward(params, X[idx], None, aux.labels[idx], 1.0 / idx.size)
                t += 1
                optim.adamw_step(params.tensors, bg.weighted_sum(np.ones(idx.size)), moments, t, cfg.lr,
                                 cfg.weight_decay)
        for k in params.tensors:
            np.testing.assert_array_equal(student.tensors[k], params.tensors[k])

    def test_self_distillation_fixed_point(self, aux):
        # a student initialized at the teacher, distilled on the teacher's own
        # probabilities (tau=1, alpha=1), sits at a stationary point of the KD objective
        X = dpsgd.prepare_inputs(aux, FRONT)
        teacher = mdl.init_params(3, X.shape[1], 6, seed=3)
        probs = kd.TeacherProbFile(3, "audio_only", "h", aux.ids, aux.labels, mdl.predict_proba(teacher, X))
        cfg = kd.KdConfig(alpha=1.0, tau=1.0, weight_decay=0.0)
        cache = mdl.forward_batch(teacher, X)
        d_logits = kd.kd_grad_logits(cache["logits"], aux.labels, probs.probs, cfg) / len(aux)
        layers = mdl.backward_from_logits(teacher, cache, d_logits)
        for d, inp in layers.values():
            assert np.abs(d.T @ inp).max() < 1e-14 and np.abs(d.sum(axis=0)).max() < 1e-14
        assert kd.kd_batch_loss(teacher, aux, probs, cfg, FRONT) == pytest.approx(0.0, abs=1e-12)
        # Adam rescales by 1/(sqrt(v)+eps), so one step moves at most lr * |g| / eps
        student = kd.train_student(aux, probs, cfg, dpsgd.ModelConfig(h=6), FRONT, init=teacher, steps=1)
        for k in teacher.tensors:
            np.testing.assert_allclose(student.tensors[k], teacher.tensors[k], rtol=0, atol=1e-9)

    def test_loss_decreases(self, aux):
        probs = soft_labels(aux)
        cfg = kd.KdConfig(epochs=10, seed=1)
        mc = dpsgd.ModelConfig(h=8)
        init = mdl.init_params(3, 40, 8, seed=1)
        before = kd.kd_batch_loss(init, aux, probs, cfg, FRONT)
        after = kd.kd_batch_loss(kd.train_student(aux, probs, cfg, mc, FRONT), aux, probs, cfg, FRONT)
        assert after < before

    def test_deterministic_and_step_cap(self, aux):
        cfg = kd.KdConfig(epochs=1, seed=2)
        a = kd.train_student(aux, soft_labels(aux), cfg, dpsgd.ModelConfig(h=4), FRONT)
        b = kd.train_student(aux, soft_labels(aux), cfg, dpsgd.ModelConfig(h=4), FRONT)
        for k in a.tensors:
            np.testing.assert_array_equal(a.tensors[k], b.tensors[k])
        init = mdl.init_params(3, 40, 4, seed=2)
        zero = kd.train_student(aux, soft_labels(aux), cfg, dpsgd.ModelConfig(h=4), FRONT, init=init, steps=0)
        for k in init.tensors:
            np.testing.assert_array_equal(zero.tensors[k], init.tensors[k])

    def test_student_is_audio_only(self, aux):
        with pytest.raises(ValueError):
            kd.train_student(aux, soft_labels(aux), kd.KdConfig(epochs=1), dpsgd.ModelConfig(multimodal=True), FRONT)
