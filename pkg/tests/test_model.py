import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stsens import autodiff as ad
from stsens.autodiff import Tensor
from stsens.data import SynthConfig, WindowSpec, fit_scaler, apply_scaler, generate_synthetic, make_windows
from stsens.model import (
    CheckpointError,
    ModelConfig,
    ShapeError,
    _Ctx,
    as_tensors,
    causal_mask,
    forward,
    grn_forward,
    init_params,
    interpretable_mha,
    load_checkpoint,
    param_count,
    predict,
    save_checkpoint,
    vsn_forward,
)


def brute_mha(q, k, v, WQ, WK, WV, WH, mask):
    """Per-head loops: mean_h softmax(q WQ_h (k WK_h)^T / sqrt(a)) v WV, then WH."""
    H, _, a = WQ.shape
    N, T, _ = q.shape
    out = np.zeros((N, T, WV.shape[1]))
    attn = np.zeros((N, H, T, T))
    for n in range(N):
        vv = v[n] @ WV
        for h in range(H):
            qh, kh = q[n] @ WQ[h], k[n] @ WK[h]
            for i in range(T):
                s = np.array([qh[i] @ kh[j] / np.sqrt(a) if mask[i, j] else -np.inf for j in range(T)])
                w = np.exp(s - s.max())
                w /= w.sum()
                attn[n, h, i] = w
                out[n, i] += w @ vv / H
    return out @ WH, attn


def mha_params(rng, D, H):
    a = D // H
    return {
        "attn.WQ": rng.normal(size=(H, D, a)),
        "attn.WK": rng.normal(size=(H, D, a)),
        "attn.WV": rng.normal(size=(D, D)),
        "attn.WH": rng.normal(size=(D, D)),
    }


@pytest.fixture(scope="module")
def tiny():
    p = generate_synthetic(SynthConfig(counties=3, days=40, seed=2))
    p = apply_scaler(p, fit_scaler(p))
    w = make_windows(p, WindowSpec(5, 3))
    cfg = ModelConfig.from_batch(w, d_model=8, n_heads=2, dropout=0.1)
    return p, w, cfg, init_params(cfg, 0)


class TestMultiHeadAttention:
    def test_matches_brute_force(self, rng):
        for _ in range(20):
            D, H = 8, int(rng.choice([1, 2, 4]))
            N, T = int(rng.integers(1, 4)), int(rng.integers(1, 7))
            P = mha_params(rng, D, H)
            q, k, v = (rng.normal(size=(N, T, D)) for _ in range(3))
            mask = causal_mask(T)
            with ad.no_grad():
                out, attn = interpretable_mha(Tensor(q), Tensor(k), Tensor(v), as_tensors(P), mask)
            ref, ref_attn = brute_mha(q, k, v, P["attn.WQ"], P["attn.WK"], P["attn.WV"], P["attn.WH"], mask)
            np.testing.assert_allclose(out.data, ref, atol=1e-9)
            np.testing.assert_allclose(attn.data, ref_attn, atol=1e-12)

    def test_single_head_is_plain_attention(self, rng):
        D, T = 4, 5
        P = mha_params(rng, D, 1)
        x = rng.normal(size=(1, T, D))
        with ad.no_grad():
            out, _ = interpretable_mha(Tensor(x), Tensor(x), Tensor(x), as_tensors(P), causal_mask(T))
        s = (x[0] @ P["attn.WQ"][0]) @ (x[0] @ P["attn.WK"][0]).T / np.sqrt(D)
        s = np.where(causal_mask(T), s, -np.inf)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(out.data[0], w @ x[0] @ P["attn.WV"] @ P["attn.WH"], atol=1e-10)

    def test_equal_keys_give_uniform_rows(self, rng):
        D, T = 4, 6
        P = mha_params(rng, D, 2)
        k = np.tile(rng.normal(size=(1, 1, D)), (1, T, 1))
        with ad.no_grad():
            _, attn = interpretable_mha(Tensor(rng.normal(size=(1, T, D))), Tensor(k), Tensor(k), as_tensors(P), causal_mask(T))
        for i in range(T):
            np.testing.assert_allclose(attn.data[0, :, i, : i + 1], 1.0 / (i + 1), atol=1e-12)

    def test_future_values_do_not_leak(self, rng):
        D, T = 4, 6
        P = mha_params(rng, D, 2)
        x = rng.normal(size=(1, T, D))
        y = x.copy()
        y[0, 4:] += 10.0
        with ad.no_grad():
            a, _ = interpretable_mha(Tensor(x), Tensor(x), Tensor(x), as_tensors(P), causal_mask(T))
            b, _ = interpretable_mha(Tensor(y), Tensor(y), Tensor(y), as_tensors(P), causal_mask(T))
        np.testing.assert_allclose(a.data[0, :4], b.data[0, :4], atol=1e-12)

    def test_huge_logits_stay_causal(self, rng):
        P = mha_params(rng, 4, 2)
        P["attn.WQ"] *= 1e6
        P["attn.WK"] *= 1e6
        x = Tensor(rng.normal(size=(3, 6, 4)))
        with ad.no_grad():
            _, attn = interpretable_mha(x, x, x, as_tensors(P), causal_mask(6))
        assert np.all(np.triu(attn.data, 1) == 0.0)
        np.testing.assert_allclose(attn.data.sum(-1), 1.0)

    def test_rejects_noncausal_mask(self, rng):
        P = mha_params(rng, 4, 2)
        x = Tensor(rng.normal(size=(1, 3, 4)))
        with pytest.raises(ValueError, match="causal"):
            interpretable_mha(x, x, x, as_tensors(P), np.ones((3, 3), dtype=bool))

    def test_mask_shape_checked(self, rng):
        P = mha_params(rng, 4, 2)
        x = Tensor(rng.normal(size=(1, 3, 4)))
        with pytest.raises(ShapeError):
            interpretable_mha(x, x, x, as_tensors(P), causal_mask(4))


def grn_params(rng, d_in, d, d_ctx=None):
    P = {
        "g.fc1.W": rng.normal(size=(d_in, d)),
        "g.fc1.b": rng.normal(size=d),
        "g.fc2.W": rng.normal(size=(d, d)),
        "g.fc2.b": rng.normal(size=d),
        "g.gate.W": rng.normal(size=(d, d)),
        "g.gate.b": rng.normal(size=d),
        "g.value.W": rng.normal(size=(d, d)),
        "g.value.b": rng.normal(size=d),
        "g.ln.gamma": np.ones(d),
        "g.ln.beta": np.zeros(d),
    }
    if d_ctx:
        P["g.ctx.W"] = rng.normal(size=(d_ctx, d))
    if d_in != d:
        P["g.skip.W"] = rng.normal(size=(d_in, d))
        P["g.skip.b"] = rng.normal(size=d)
    return P


def layer_norm(x):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)


class TestGRN:
    def _run(self, P, x, context=None):
        cfg = ModelConfig(1, 1, 1, 1, d_model=4, n_heads=1, dropout=0.0)
        with ad.no_grad():
            return grn_forward(Tensor(x), _Ctx(as_tensors(P), cfg, False, None), "g", None if context is None else Tensor(context)).data

    def test_closed_gate_is_layernorm_of_input(self, rng):
        P = grn_params(rng, 4, 4)
        P["g.gate.W"][:] = 0.0
        P["g.gate.b"][:] = -1e3
        x = rng.normal(size=(5, 4))
        np.testing.assert_allclose(self._run(P, x), layer_norm(x), atol=1e-9)

    def test_matches_reference(self, rng):
        P = grn_params(rng, 6, 4, d_ctx=3)
        x, c = rng.normal(size=(5, 6)), rng.normal(size=(5, 3))
        h = x @ P["g.fc1.W"] + P["g.fc1.b"] + c @ P["g.ctx.W"]
        h = np.where(h > 0, h, np.expm1(h))
        h = h @ P["g.fc2.W"] + P["g.fc2.b"]
        sig = 1 / (1 + np.exp(-(h @ P["g.gate.W"] + P["g.gate.b"])))
        glu = sig * (h @ P["g.value.W"] + P["g.value.b"])
        ref = layer_norm(x @ P["g.skip.W"] + P["g.skip.b"] + glu)
        np.testing.assert_allclose(self._run(P, x, c), ref, atol=1e-10)

    def test_width_mismatch(self, rng):
        P = grn_params(rng, 4, 4)
        with pytest.raises(ShapeError):
            self._run(P, rng.normal(size=(2, 5)))


class TestVSN:
    def test_weights_on_simplex(self, tiny):
        _, w, cfg, params = tiny
        out = forward(w, params, cfg)
        for k, v in out.vsn_weights.items():
            assert np.all(v >= 0), k
            np.testing.assert_allclose(v.sum(-1), 1.0, atol=1e-12)

    def test_combination_oracle(self, tiny, rng):
        _, _, cfg, params = tiny
        F, D = cfg.n_static, cfg.d_model
        emb = rng.normal(size=(4, F, D))
        ctx = _Ctx(as_tensors(params), cfg, False, None)
        with ad.no_grad():
            combined, weights = vsn_forward(Tensor(emb), ctx, "vsn.static")
            per = []
            for f in range(F):
                sub = {k.replace(f"vsn.static.feature.", "g."): v[f] for k, v in params.items() if k.startswith("vsn.static.feature.")}
                per.append(grn_forward(Tensor(emb[:, f]), _Ctx(as_tensors(sub), cfg, False, None), "g").data)
        ref = np.einsum("nf,fnd->nd", weights.data, np.stack(per))
        np.testing.assert_allclose(combined.data, ref, atol=1e-10)


class TestNetwork:
    def test_shapes(self, tiny):
        _, w, cfg, params = tiny
        out = forward(w, params, cfg)
        assert out.predictions.shape == (len(w), 3, 2)
        assert out.attention.shape == (2, len(w), 8, 8)

    def test_attention_causal_and_normalised(self, tiny):
        _, w, cfg, params = tiny
        for mode, rng in (("eval", None), ("train", np.random.default_rng(0))):
            a = forward(w, params, cfg, mode, rng).attention
            assert np.all(np.triu(a, 1) == 0.0)
            np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)

    def test_eval_deterministic_train_stochastic(self, tiny):
        _, w, cfg, params = tiny
        a = forward(w, params, cfg).predictions
        np.testing.assert_array_equal(a, forward(w, params, cfg).predictions)
        t1 = forward(w, params, cfg, "train", np.random.default_rng(1)).predictions
        t2 = forward(w, params, cfg, "train", np.random.default_rng(2)).predictions
        assert not np.allclose(t1, t2)

    def test_train_needs_rng(self, tiny):
        _, w, cfg, params = tiny
        with pytest.raises(ValueError, match="rng"):
            forward(w, params, cfg, "train")

    def test_window_permutation_equivariance(self, tiny, rng):
        _, w, cfg, params = tiny
        perm = rng.permutation(len(w))
        a = forward(w, params, cfg).predictions[perm]
        b = forward(w.take(perm), params, cfg).predictions
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_future_targets_do_not_influence_prediction(self, tiny):
        p, w, cfg, params = tiny
        w2 = w.take(np.arange(len(w)))
        w2.targets = w2.targets + 100.0
        np.testing.assert_array_equal(forward(w, params, cfg).predictions, forward(w2, params, cfg).predictions)

    def test_chunked_predict_matches(self, tiny):
        _, w, cfg, params = tiny
        a = forward(w, params, cfg)
        b = predict(w, params, cfg, chunk=7)
        np.testing.assert_allclose(a.predictions, b.predictions, atol=1e-12)
        np.testing.assert_allclose(a.attention, b.attention, atol=1e-12)

    def test_shape_mismatch(self, tiny):
        _, w, cfg, params = tiny
        bad = w.take(np.arange(3))
        bad.past = bad.past[:, :, :-1]
        with pytest.raises(ShapeError):
            forward(bad, params, cfg)

    def test_init_seeded(self, tiny):
        _, _, cfg, params = tiny
        again = init_params(cfg, 0)
        assert list(again) == list(params)
        assert all(np.array_equal(params[k], again[k]) for k in params)
        assert not np.array_equal(init_params(cfg, 1)["attn.WQ"], params["attn.WQ"])
        assert param_count(params) == sum(v.size for v in params.values())

    def test_heads_must_divide(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(1, 1, 1, 1, d_model=10, n_heads=4)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_attention_rows_normalised_random_params(self, seed):
        p = generate_synthetic(SynthConfig(counties=2, days=12, seed=seed))
        w = make_windows(p, WindowSpec(4, 3))
        cfg = ModelConfig.from_batch(w, d_model=4, n_heads=2)
        a = forward(w, init_params(cfg, seed), cfg).attention
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
        assert np.all(np.triu(a, 1) == 0.0)


class TestCheckpoint:
    def test_round_trip(self, tiny, tmp_path):
        p, w, cfg, params = tiny
        scaler = fit_scaler(p)
        path = save_checkpoint(params, cfg, scaler, tmp_path / "m.ckpt")
        params2, cfg2, scaler2 = load_checkpoint(path)
        assert cfg2 == cfg and list(params2) == list(params)
        np.testing.assert_array_equal(forward(w, params, cfg).predictions, forward(w, params2, cfg2).predictions)
        np.testing.assert_array_equal(scaler2.maximum, scaler.maximum)

    def test_deterministic_bytes(self, tiny, tmp_path):
        _, _, cfg, params = tiny
        a = save_checkpoint(params, cfg, None, tmp_path / "a").read_bytes()
        b = save_checkpoint(params, cfg, None, tmp_path / "b").read_bytes()
        assert a == b

    def test_corruption_detected(self, tiny, tmp_path):
        _, _, cfg, params = tiny
        path = save_checkpoint(params, cfg, None, tmp_path / "m.ckpt")
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_truncation_detected(self, tiny, tmp_path):
        _, _, cfg, params = tiny
        path = save_checkpoint(params, cfg, None, tmp_path / "m.ckpt")
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_magic_and_version(self, tiny, tmp_path):
        _, _, cfg, params = tiny
        (tmp_path / "x").write_bytes(b"not a checkpoint at all, definitely not" * 2)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "x")
        path = save_checkpoint(params, cfg, None, tmp_path / "m.ckpt")
        data = bytearray(path.read_bytes())
        data[8] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "none.ckpt")


def _numeric_check(f, params, h=1e-5, tol=1e-5):
    """Compare reverse-mode gradients of scalar ``f(P)`` with central differences."""
    P = as_tensors(params, requires_grad=True)
    f(P).backward()
    for name, arr in params.items():
        num = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            with ad.no_grad():
                up = float(f(as_tensors(params)).data)
            arr[i] = old - h
            with ad.no_grad():
                dn = float(f(as_tensors(params)).data)
            arr[i] = old
            num[i] = (up - dn) / (2 * h)
        np.testing.assert_allclose(P[name].grad, num, rtol=tol, atol=1e-9, err_msg=name)


class TestLayerGradients:
    cfg = ModelConfig(1, 1, 1, 1, d_model=4, n_heads=2, dropout=0.0)

    def test_grn(self, rng):
        P = grn_params(rng, 3, 4, d_ctx=2)
        x, c = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
        w = rng.normal(size=(2, 4))
        _numeric_check(lambda T: (grn_forward(Tensor(x), _Ctx(T, self.cfg, False, None), "g", Tensor(c)) * Tensor(w)).sum(), P)

    def test_vsn(self, rng):
        F, D = 3, 4
        P = {}
        for k, v in grn_params(rng, F * D, D).items():
            P[k.replace("g.", "v.select.")] = v
        P["v.select.skip.W"] = rng.normal(size=(F * D, F))
        P["v.select.skip.b"] = rng.normal(size=F)
        for k in ("gate", "value"):
            P[f"v.select.{k}.W"] = rng.normal(size=(D, F))
            P[f"v.select.{k}.b"] = rng.normal(size=F)
        P["v.select.ln.gamma"], P["v.select.ln.beta"] = np.ones(F), np.zeros(F)
        for k, v in grn_params(rng, D, D).items():
            P[k.replace("g.", "v.feature.")] = np.stack([v] * F) + 0.1 * rng.normal(size=(F,) + v.shape)
        emb = rng.normal(size=(2, F, D))
        w = rng.normal(size=(2, D))

        def f(T):
            combined, weights = vsn_forward(Tensor(emb), _Ctx(T, self.cfg, False, None), "v")
            return (combined * Tensor(w)).sum() + (weights * weights).sum()

        _numeric_check(f, P)

    def test_attention(self, rng):
        P = mha_params(rng, 4, 2)
        x = rng.normal(size=(2, 5, 4))
        w = rng.normal(size=(2, 5, 4))
        _numeric_check(lambda T: (interpretable_mha(Tensor(x), Tensor(x), Tensor(x), T, causal_mask(5))[0] * Tensor(w)).sum(), P)

    def test_lstm(self, rng):
        from stsens.model import _lstm

        D = 3
        P = {
            "l.Wx": rng.normal(size=(D, 4 * D)) * 0.5,
            "l.Wh": rng.normal(size=(D, 4 * D)) * 0.5,
            "l.b": rng.normal(size=4 * D) * 0.5,
        }
        x = rng.normal(size=(2, 4, D))
        w = rng.normal(size=(2, 4, D))

        def f(T):
            h0 = Tensor(np.zeros((2, D)))
            out, h, c = _lstm(Tensor(x), _Ctx(T, self.cfg, False, None), "l", h0, h0)
            return (out * Tensor(w)).sum() + c.sum()

        _numeric_check(f, P)
