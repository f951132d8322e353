import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matlstm_ad import cells
from matlstm_ad import matgrad as mg
from matlstm_ad.errors import ShapeError
from matlstm_ad.models import ModelSpec, param_shapes


def _mat_params(rng, n_r, n_c, k_r, k_c, scale=0.5):
    arrays = {k: scale * rng.standard_normal(s) for k, s in cells.matlstm_shapes(n_r, n_c, k_r, k_c).items()}
    return arrays, cells.matlstm_view(arrays)


def _vec_params(rng, d, k, scale=0.5):
    arrays = {k_: scale * rng.standard_normal(s) for k_, s in cells.veclstm_shapes(d, k).items()}
    return arrays, cells.veclstm_view(arrays)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _mat_op_loops(X, H, g):
    """Element-index oracle for one gate pre-activation."""
    n_r, n_c = X.shape
    k_r, k_c = H.shape
    out = np.zeros((k_r, k_c))
    for i in range(k_r):
        for j in range(k_c):
            s = g.B[i, j]
            for a in range(n_r):
                for b in range(n_c):
                    s += g.U_xh[a, i] * X[a, b] * g.V_xh[b, j]
            for a in range(k_r):
                for b in range(k_c):
                    s += g.U_hh[a, i] * H[a, b] * g.V_hh[b, j]
            out[i, j] = s
    return out


def _step_oracle(X, H, C, p):
    """Matrix LSTM step written independently with explicit transposes."""

    def pre(g):
        return g.U_xh.T @ X @ g.V_xh + g.U_hh.T @ H @ g.V_hh + g.B

    i, f, o = _sigmoid(pre(p.i)), _sigmoid(pre(p.f)), _sigmoid(pre(p.o))
    c = f * C + i * np.tanh(pre(p.c))
    return o * c, c


class TestMatOp:
    def test_matches_quadruple_loop(self, rng):
        _, p = _mat_params(rng, 3, 4, 2, 2)
        X, H = rng.standard_normal((3, 4)), rng.standard_normal((2, 2))
        np.testing.assert_allclose(cells.mat_op(X, H, p.i), _mat_op_loops(X, H, p.i), rtol=0, atol=1e-12)

    def test_zero_inputs_give_bias(self, rng):
        _, p = _mat_params(rng, 3, 4, 2, 5)
        out = cells.mat_op(np.zeros((3, 4)), np.zeros((2, 5)), p.o)
        np.testing.assert_array_equal(out, p.o.B)

    def test_identity_factors(self, rng):
        eye = np.eye(4)
        g = cells.MatGateParams(eye, eye, eye, eye, np.zeros((4, 4)))
        X, H = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
        np.testing.assert_allclose(cells.mat_op(X, H, g), X + H, atol=1e-15)

    def test_batched_matches_per_item(self, rng):
        _, p = _mat_params(rng, 3, 4, 2, 3)
        X = rng.standard_normal((3, 5, 4))
        H = rng.standard_normal((2, 5, 3))
        out = cells.mat_op(X, H, p.f)
        for b in range(5):
            np.testing.assert_allclose(out[:, b, :], cells.mat_op(X[:, b], H[:, b], p.f), atol=1e-13)

    @pytest.mark.parametrize("xs,hs", [((3, 5), (2, 2)), ((4, 4), (2, 2)), ((3, 4), (2, 3))])
    def test_shape_mismatch(self, rng, xs, hs):
        _, p = _mat_params(rng, 3, 4, 2, 2)
        with pytest.raises(ShapeError):
            cells.mat_op(np.zeros(xs), np.zeros(hs), p.i)

    def test_permutation_equivariance(self, rng):
        """Row/column permutations of X are absorbed by the input factors."""
        _, p = _mat_params(rng, 5, 6, 3, 4)
        X, H = rng.standard_normal((5, 6)), rng.standard_normal((3, 4))
        P = np.eye(5)[rng.permutation(5)]
        Q = np.eye(6)[:, rng.permutation(6)]
        g = p.c
        moved = cells.MatGateParams(P @ g.U_xh, Q.T @ g.V_xh, g.U_hh, g.V_hh, g.B)
        np.testing.assert_allclose(cells.mat_op(P @ X @ Q, H, moved), cells.mat_op(X, H, g), atol=1e-12)


class TestMatLstmStep:
    def test_matches_oracle(self, rng):
        _, p = _mat_params(rng, 3, 4, 2, 3)
        X = rng.standard_normal((3, 4))
        H, C = rng.uniform(-1, 1, (2, 3)), rng.standard_normal((2, 3))
        state = cells.matlstm_step(X, cells.MatState(H, C), p)
        h, c = _step_oracle(X, H, C, p)
        np.testing.assert_allclose(state.H, h, rtol=0, atol=1e-12)
        np.testing.assert_allclose(state.C, c, rtol=0, atol=1e-12)

    def test_zero_params(self, rng):
        arrays = {k: np.zeros(s) for k, s in cells.matlstm_shapes(3, 4, 2, 2).items()}
        p = cells.matlstm_view(arrays)
        C = rng.standard_normal((2, 2))
        state = cells.matlstm_step(rng.standard_normal((3, 4)), cells.MatState(rng.standard_normal((2, 2)), C), p)
        np.testing.assert_allclose(state.C, 0.5 * C, atol=1e-15)
        np.testing.assert_allclose(state.H, 0.25 * C, atol=1e-15)

    def test_pure_retention(self, rng):
        arrays, _ = _mat_params(rng, 3, 4, 2, 2, scale=0.01)
        arrays["f.B"] = np.full((2, 2), 60.0)
        arrays["i.B"] = np.full((2, 2), -60.0)
        p = cells.matlstm_view(arrays)
        C = rng.standard_normal((2, 2))
        state = cells.matlstm_step(rng.standard_normal((3, 4)), cells.MatState(np.zeros((2, 2)), C), p)
        np.testing.assert_allclose(state.C, C, rtol=1e-12)

    def test_fused_matches_composed_with_gradients(self, rng):
        arrays, _ = _mat_params(rng, 3, 4, 2, 3)
        X = rng.standard_normal((3, 2, 4))
        s0 = cells.zero_state((2, 3), batch=2)

        def run(step):
            tape = mg.Tape()
            p = cells.matlstm_view(tape.params_from(arrays))
            s = s0
            for _ in range(3):
                s = step(X, s, p)
            loss = mg.total(mg.add(mg.hadamard(s.H, s.H), s.C))
            return mg.value(s.H), tape.backward(loss)

        h1, g1 = run(cells.matlstm_step)
        h2, g2 = run(cells.matlstm_step_composed)
        np.testing.assert_allclose(h1, h2, atol=1e-13)
        for k in arrays:
            np.testing.assert_allclose(g1[k], g2[k], atol=1e-12)

    def test_gradient_check_three_steps(self, rng):
        arrays, _ = _mat_params(rng, 3, 4, 2, 3)
        xs = rng.standard_normal((3, 3, 4))
        target = rng.standard_normal((2, 3))

        def f(ps):
            p = cells.matlstm_view(ps)
            s = cells.zero_state((2, 3))
            for x in xs:
                s = cells.matlstm_step(x, s, p)
            return mg.frobenius_mse(target, s.H)

        assert mg.grad_check(f, arrays, max_entries=None) < 1e-4

    def test_input_gradient(self, rng):
        arrays, _ = _mat_params(rng, 3, 4, 2, 3)
        p = cells.matlstm_view(arrays)
        X0 = rng.standard_normal((3, 4))
        H0 = rng.uniform(-0.5, 0.5, (2, 3))
        C0 = rng.standard_normal((2, 3))

        def f(ps):
            s = cells.matlstm_step(ps["X"], cells.MatState(ps["H"], ps["C"]), p)
            return mg.total(mg.add(s.H, mg.hadamard(s.C, s.C)))

        assert mg.grad_check(f, {"X": X0, "H": H0, "C": C0}, max_entries=None) < 1e-6

    @pytest.mark.parametrize("xs", [(3, 5), (4, 4)])
    def test_shape_error(self, rng, xs):
        _, p = _mat_params(rng, 3, 4, 2, 2)
        with pytest.raises(ShapeError):
            cells.matlstm_step(np.zeros(xs), cells.zero_state((2, 2)), p)

    @settings(max_examples=40, deadline=None)
    @given(
        seed=st.integers(0, 2**32 - 1),
        scale=st.floats(0.1, 5.0),
        c_scale=st.floats(0.0, 10.0),
    )
    def test_state_bounds(self, seed, scale, c_scale):
        # |C_t| <= F|C_{t-1}| + I <= |C_{t-1}| + 1 and |H_t| = O|C_t| <= |C_t|.
        rng = np.random.default_rng(seed)
        _, p = _mat_params(rng, 3, 4, 2, 3, scale=scale)
        C = c_scale * rng.standard_normal((2, 3))
        H = rng.uniform(-1, 1, (2, 3))
        s = cells.matlstm_step(scale * rng.standard_normal((3, 4)), cells.MatState(H, C), p)
        assert np.all(np.abs(s.C) <= np.abs(C) + 1.0)
        assert np.all(np.abs(s.H) <= np.abs(s.C))

    def test_memory_can_grow_past_one(self):
        # Saturated input and forget gates with a saturated candidate add 1 per step,
        # so max(|C_{t-1}|, 1) is not an upper bound of |C_t| and H can leave (-1, 1).
        arrays = {k: np.zeros(s) for k, s in cells.matlstm_shapes(2, 2, 2, 2).items()}
        for g in ("i", "f", "o", "c"):
            arrays[f"{g}.B"] = np.full((2, 2), 40.0)
        p = cells.matlstm_view(arrays)
        s = cells.zero_state((2, 2))
        for _ in range(3):
            s = cells.matlstm_step(np.zeros((2, 2)), s, p)
        np.testing.assert_allclose(s.C, 3.0)
        np.testing.assert_allclose(s.H, 3.0)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), steps=st.integers(1, 8))
    def test_memory_bounded_by_step_count(self, seed, steps):
        rng = np.random.default_rng(seed)
        _, p = _mat_params(rng, 3, 4, 2, 3, scale=3.0)
        s = cells.zero_state((2, 3))
        for _ in range(steps):
            s = cells.matlstm_step(3.0 * rng.standard_normal((3, 4)), s, p)
        assert np.all(np.abs(s.C) <= steps)


class TestVecLstm:
    def test_single_unit_hand_computation(self):
        arrays = {}
        for g, (wx, wh, b) in {"i": (0.5, -0.3, 0.1), "f": (0.2, 0.4, 1.0),
                                "o": (-0.6, 0.1, 0.0), "c": (0.9, -0.2, 0.05)}.items():
            arrays[f"{g}.W_x"] = np.array([[wx]])
            arrays[f"{g}.W_h"] = np.array([[wh]])
            arrays[f"{g}.b"] = np.array([[b]])
        x, h, c = 0.7, 0.3, -0.4
        i = 1 / (1 + np.exp(-(0.5 * x - 0.3 * h + 0.1)))
        f = 1 / (1 + np.exp(-(0.2 * x + 0.4 * h + 1.0)))
        o = 1 / (1 + np.exp(-(-0.6 * x + 0.1 * h)))
        cand = np.tanh(0.9 * x - 0.2 * h + 0.05)
        c_new = f * c + i * cand
        s = cells.lstm_step(np.array([[x]]), cells.MatState(np.array([[h]]), np.array([[c]])),
                            cells.veclstm_view(arrays))
        assert s.C[0, 0] == pytest.approx(c_new, abs=1e-15)
        assert s.H[0, 0] == pytest.approx(o * c_new, abs=1e-15)

    def test_zero_params(self, rng):
        arrays = {k: np.zeros(s) for k, s in cells.veclstm_shapes(6, 4).items()}
        C = rng.standard_normal((1, 4))
        s = cells.lstm_step(rng.standard_normal((1, 6)), cells.MatState(np.zeros((1, 4)), C),
                            cells.veclstm_view(arrays))
        np.testing.assert_allclose(s.H, 0.25 * C, atol=1e-15)

    def test_fused_matches_composed(self, rng):
        arrays, p = _vec_params(rng, 6, 4)
        x = rng.standard_normal((1, 3, 6))
        prev = cells.MatState(rng.uniform(-1, 1, (1, 3, 4)), rng.standard_normal((1, 3, 4)))
        a = cells.lstm_step(x, prev, p)
        b = cells.lstm_step_composed(x, prev, p)
        np.testing.assert_allclose(a.H, b.H, atol=1e-14)
        np.testing.assert_allclose(a.C, b.C, atol=1e-14)

    def test_gradient_check_three_steps(self, rng):
        arrays, _ = _vec_params(rng, 5, 3)
        xs = rng.standard_normal((3, 1, 5))

        def f(ps):
            p = cells.veclstm_view(ps)
            s = cells.zero_state((1, 3))
            for x in xs:
                s = cells.lstm_step(x, s, p)
            return mg.total(mg.hadamard(s.H, s.C))

        assert mg.grad_check(f, arrays, max_entries=None) < 1e-4

    def test_shape_error(self, rng):
        _, p = _vec_params(rng, 5, 3)
        with pytest.raises(ShapeError):
            cells.lstm_step(np.zeros((1, 4)), cells.zero_state((1, 3)), p)


def _matnet_loops(H, layers):
    z = H
    for U, V, B, act in layers:
        out = np.zeros((U.shape[0], V.shape[1]))
        for i in range(out.shape[0]):
            for j in range(out.shape[1]):
                out[i, j] = B[i, j] + sum(
                    U[i, a] * z[a, b] * V[b, j] for a in range(z.shape[0]) for b in range(z.shape[1])
                )
        z = np.tanh(out) if act == "tanh" else out
    return z


class TestMatnet:
    def test_two_layers_match_loop_oracle(self, rng):
        shapes = cells.matnet_shapes((3, 4), [(2, 5), (3, 2)])
        arrays = {k: rng.standard_normal(s) for k, s in shapes.items()}
        p = cells.matnet_view(arrays, "", 2)
        H = rng.standard_normal((3, 4))
        layers = [(arrays[f"{i}.U"], arrays[f"{i}.V"], arrays[f"{i}.B"], a) for i, a in ((0, "tanh"), (1, "identity"))]
        np.testing.assert_allclose(cells.matnet_forward(H, p), _matnet_loops(H, layers), atol=1e-12)

    def test_identity_layer(self, rng):
        p = cells.MatnetParams([cells.MatnetLayer(np.eye(3), np.eye(3), np.zeros((3, 3)), "identity")])
        H = rng.standard_normal((3, 3))
        np.testing.assert_array_equal(cells.matnet_forward(H, p), H)

    def test_no_dropout_training_equals_inference(self, rng):
        shapes = cells.matnet_shapes((3, 4), [(3, 4), (2, 2)])
        arrays = {k: rng.standard_normal(s) for k, s in shapes.items()}
        p = cells.matnet_view(arrays, "", 2, dropout_rate=0.0)
        H = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(
            cells.matnet_forward(H, p, training=True, rng=rng), cells.matnet_forward(H, p)
        )

    def test_dropout_only_in_training(self, rng):
        shapes = cells.matnet_shapes((3, 4), [(6, 6), (2, 2)])
        arrays = {k: rng.standard_normal(s) for k, s in shapes.items()}
        p = cells.matnet_view(arrays, "", 2, dropout_rate=0.5)
        H = rng.standard_normal((3, 4))
        ref = cells.matnet_forward(H, p)
        np.testing.assert_array_equal(cells.matnet_forward(H, p), ref)
        assert not np.allclose(cells.matnet_forward(H, p, training=True, rng=rng), ref)
        with pytest.raises(ValueError):
            cells.matnet_forward(H, p, training=True)

    def test_vector_head(self, rng):
        shapes = cells.matnet_shapes((1, 4), [(1, 3)], vector=True)
        assert set(shapes) == {"0.V", "0.B"}
        arrays = {k: rng.standard_normal(s) for k, s in shapes.items()}
        p = cells.matnet_view(arrays, "", 1)
        h = rng.standard_normal((1, 4))
        np.testing.assert_allclose(cells.matnet_forward(h, p), h @ arrays["0.V"] + arrays["0.B"])


class TestInit:
    def test_glorot_limits_and_forget_bias(self, rng):
        params = cells.init_from_shapes(rng, cells.matlstm_shapes(10, 20, 4, 5))
        lim = np.sqrt(6.0 / (10 + 4))
        assert np.all(np.abs(params["i.U_xh"]) <= lim)
        assert params["i.U_xh"].std() > 0.3 * lim
        np.testing.assert_array_equal(params["f.B"], np.ones((4, 5)))
        for g in ("i", "o", "c"):
            np.testing.assert_array_equal(params[f"{g}.B"], np.zeros((4, 5)))

    def test_vector_forget_bias(self, rng):
        params = cells.init_from_shapes(rng, cells.veclstm_shapes(8, 3))
        np.testing.assert_array_equal(params["f.b"], np.ones((1, 3)))
        np.testing.assert_array_equal(params["c.b"], np.zeros((1, 3)))


class TestParamCount:
    def test_hand_count(self):
        spec = ModelSpec((2, 2), hidden=(2, 2), head_layers=1, tied_decoder=True)
        assert cells.param_count(spec) == 4 * 20 + 12 == 92

    def test_separate_decoder_doubles_cells(self):
        spec = ModelSpec((2, 2), hidden=(2, 2), head_layers=1)
        assert cells.param_count(spec) == 2 * 80 + 12

    def test_paper_budget_config(self):
        spec = ModelSpec((10, 100), hidden=(10, 64))
        assert abs(cells.param_count(spec) - 104_000) <= 0.10 * 104_000

    @pytest.mark.parametrize(
        "spec",
        [
            ModelSpec((3, 4), hidden=(2, 5)),
            ModelSpec((3, 4), hidden=(2, 5), layers=2),
            ModelSpec((3, 4), hidden=(2, 5), layers=2, layer_training="joint", tied_decoder=True),
            ModelSpec((3, 4), cell="veclstm", hidden=(7,), head_layers=3),
            ModelSpec((3, 4), cell="veclstm", hidden=(7,), layers=2),
        ],
    )
    def test_equals_enumerated_entries(self, spec):
        from matlstm_ad.models import init_params

        params = init_params(spec, 0)
        assert cells.param_count(spec) == sum(v.size for v in params.values())
        assert set(params) == set(param_shapes(spec))
