import numpy as np
import pytest

from builders import central_difference, relative_error
from xplika import Conv2D, Dense, Flatten, Model, ReLU, XplikaError, forward
from xplika import featviz as F
from xplika.rng import Stream


def dense_probe(side=6, n_out=3, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(n_out, side * side))
    return Model([Flatten("flat"), Dense("fc", w)], [1, side, side]), w


class TestDecode:
    def test_zero_is_grey(self):
        img = F.decode_fourier(F.FourierBuffer.zeros((2, 5, 4)))
        assert np.all(img == 0.5)

    def test_dc_saturates(self):
        buf = F.FourierBuffer.zeros((1, 8, 8))
        buf.spectrum[0, 0, 0, 0] = 10.0
        assert np.all(F.decode_fourier(buf) > 0.99)

    def test_linear_before_sigmoid(self):
        spec = np.random.default_rng(0).normal(size=(2, 6, 7, 2))
        basis = F.FourierBasis(6, 7, 1.0)
        np.testing.assert_allclose(basis.synthesize(2 * spec), 2 * basis.synthesize(spec), rtol=0, atol=1e-12)

    def test_matches_numpy_ifft(self):
        h, w, d = 6, 5, 1.3
        spec = np.random.default_rng(1).normal(size=(1, h, w, 2))
        basis = F.FourierBasis(h, w, d)
        fy, fx = np.fft.fftfreq(h)[:, None], np.fft.fftfreq(w)[None, :]
        lam = (np.sqrt(fy**2 + fx**2) + 1 / max(h, w)) ** d
        coef = (spec[0, ..., 0] - 1j * spec[0, ..., 1]) / lam
        expected = np.real(np.fft.ifft2(coef)) * np.sqrt(h * w)
        np.testing.assert_allclose(basis.synthesize(spec)[0], expected, atol=1e-12)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(2)
        buf = F.FourierBuffer(0.3 * rng.normal(size=(1, 8, 8, 2)))
        probe = rng.normal(size=(1, 8, 8))

        def loss(spectrum):
            return float(np.sum(probe * F.decode_fourier(F.FourierBuffer(spectrum, buf.decay, buf.scale))))

        analytic = F.decode_fourier_vjp(buf, probe)
        numeric = central_difference(loss, buf.spectrum)
        assert relative_error(analytic, numeric) < 1e-4

    def test_open_interval(self):
        buf = F.FourierBuffer(np.random.default_rng(3).normal(size=(1, 8, 8, 2)))
        img = F.decode_fourier(buf)
        assert img.min() > 0.0 and img.max() < 1.0


class TestObjective:
    def trace(self, act):
        model = Model([Dense("a", np.eye(len(act)))], [len(act)])
        return forward(model, act, capture=["a"])

    def test_neuron(self):
        assert F.eval_objective(self.trace([5.0, 7.0]), F.Objective([F.neuron("a", 1)])) == 7.0

    def test_direction(self):
        assert F.eval_objective(self.trace([1.0, 2.0]), F.Objective([F.direction("a", [3.0, 4.0])])) == 11.0

    def test_cancellation(self):
        obj = F.Objective([F.neuron("a", 0, 1.0), F.neuron("a", 0, -1.0)])
        assert F.eval_objective(self.trace([5.0, 7.0]), obj) == 0.0

    def test_channel_and_layer_means(self):
        model = Model([Conv2D("c", np.eye(2).reshape(2, 2, 1, 1)), Flatten("f")], [2, 2, 2])
        x = np.arange(8.0).reshape(2, 2, 2)
        trace = forward(model, x, capture=["c"])
        assert F.eval_objective(trace, F.Objective([F.channel("c", 1)])) == 5.5
        assert F.eval_objective(trace, F.Objective([F.layer_mean("c")])) == 3.5

    def test_linear_in_weights(self):
        trace = self.trace([1.0, -2.0, 4.0])
        t1, t2 = F.neuron("a", 2), F.direction("a", [1.0, 1.0, 1.0])
        v = lambda a, b: F.eval_objective(trace, F.Objective([F.Term(t1.layer, t1.selector, t1.index, None, a),
                                                               F.Term(t2.layer, t2.selector, None, t2.vector, b)]))
        assert v(2.0, 3.0) == 2 * v(1.0, 0.0) + 3 * v(0.0, 1.0)

    def test_errors(self):
        trace = self.trace([1.0, 2.0])
        with pytest.raises(XplikaError, match="missing"):
            F.eval_objective(trace, F.Objective([F.neuron("b", 0)]))
        with pytest.raises(XplikaError, match="out of range"):
            F.eval_objective(trace, F.Objective([F.neuron("a", 2)]))
        with pytest.raises(XplikaError, match="direction"):
            F.eval_objective(trace, F.Objective([F.direction("a", [1.0, 2.0, 3.0])]))
        with pytest.raises(XplikaError):
            F.Objective([])


class TestTransforms:
    def test_identity(self):
        img = np.random.default_rng(0).normal(size=(2, 4, 5))
        out = F.apply_transforms(img, F.TransformSpec(), Stream(0))
        assert np.array_equal(out, img)

    def test_jitter_reflect(self):
        img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        ty = F.axis_matrix(2, 1, 1.0, 1)
        tx = F.axis_matrix(2, 0, 1.0, 1)
        out = np.einsum("yi,cij,xj->cyx", ty, img, tx)
        # row 0 reads source row -1, which reflects to row 1
        assert out.tolist() == [[[3.0, 4.0], [1.0, 2.0]]]

    def test_scale_one_exact(self):
        assert np.array_equal(F.axis_matrix(7, 0, 1.0, 0), np.eye(7))

    def test_rows_stochastic(self):
        for factor in (0.8, 1.0, 1.3):
            m = F.axis_matrix(9, 2, factor, 3)
            np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)

    def test_seeded(self):
        img = np.random.default_rng(1).normal(size=(1, 6, 6))
        spec = F.TransformSpec(jitter=2, scale=(0.9, 1.1), pad=2)
        a = F.apply_transforms(img, spec, Stream(3, 1))
        b = F.apply_transforms(img, spec, Stream(3, 1))
        assert a.tobytes() == b.tobytes()

    def test_spec_validation(self):
        with pytest.raises(XplikaError):
            F.TransformSpec(jitter=2, pad=1)
        with pytest.raises(XplikaError):
            F.TransformSpec(scale=(1.2, 1.1))


class TestOptimize:
    def test_pixel_aligns_with_weight(self):
        model, w = dense_probe()
        res = F.optimize(model, F.Objective([F.neuron("fc", 1)]), param="pixel", steps=500, seed=0)
        raw = res.raw.reshape(-1)
        cos = raw @ w[1] / (np.linalg.norm(raw) * np.linalg.norm(w[1]))
        assert cos >= 0.99
        assert res.image.min() >= 0.0 and res.image.max() <= 1.0

    def test_monotone_without_transforms(self):
        model, _ = dense_probe()
        res = F.optimize(model, F.Objective([F.neuron("fc", 0)]), param="pixel", steps=50, step_size=0.01)
        assert np.all(np.diff(res.trajectory) > 0)

    def test_fourier_improves_and_stays_in_range(self):
        rng = np.random.default_rng(0)
        model = Model([Conv2D("conv", rng.normal(size=(3, 1, 3, 3)), padding="same"), ReLU("relu"),
                       Flatten("flat"), Dense("fc", rng.normal(size=(2, 3 * 8 * 8)))], [1, 8, 8])
        spec = F.TransformSpec(jitter=1, scale=(0.95, 1.05), pad=2)
        res = F.optimize(model, F.Objective([F.channel("conv", 0)]), "fourier", 60, 0.1, spec, seed=1)
        assert res.image.min() > 0.0 and res.image.max() < 1.0
        assert res.trajectory[-5:].mean() > res.trajectory[:5].mean()

    def test_deterministic(self):
        model, _ = dense_probe()
        obj = F.Objective([F.neuron("fc", 2)])
        spec = F.TransformSpec(jitter=1, scale=(0.9, 1.1), pad=1)
        a = F.optimize(model, obj, "fourier", 20, 0.05, spec, seed=5)
        b = F.optimize(model, obj, "fourier", 20, 0.05, spec, seed=5)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.trajectory.tobytes() == b.trajectory.tobytes()

    def test_missing_layer(self):
        model, _ = dense_probe()
        with pytest.raises(XplikaError):
            F.optimize(model, F.Objective([F.neuron("nope", 0)]), "pixel", 5)

    def test_transform_gradient_matches_finite_difference(self):
        # the ascent direction through a sampled transform must be the true gradient
        rng = np.random.default_rng(4)
        model, w = dense_probe(side=5)
        spec = F.TransformSpec(jitter=1, scale=(0.8, 1.2), pad=2)
        draw = F.sample_transform(spec, Stream(9, 1))
        ty, tx = F.transform_matrices((1, 5, 5), draw, spec.pad)
        img = rng.normal(size=(1, 5, 5))

        def value(z):
            seen = np.einsum("yi,cij,xj->cyx", ty, z, tx)
            return float(forward(model, seen).output[0])

        g = np.einsum("yi,cyx,xj->cij", ty, w[0].reshape(1, 5, 5), tx)
        assert relative_error(g, central_difference(value, img)) < 1e-6
