"""Model structure, residual-over-climatology, causality, gradients."""

import numpy as np
import pytest

from extremecast import autodiff as ad
from extremecast import model as md


def tiny_inputs(T=4, H=3, W=3, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    x_st = rng.random((9, T, H, W)).astype(dtype)
    x_s = rng.random((2, H, W)).astype(dtype)
    x_t = rng.random((2, T)).astype(dtype)
    return (ad.Tensor(x_st), ad.Tensor(x_s), ad.Tensor(x_t))


def tiny_cfg(variant="convlstm", hidden=2, n_layers=2):
    return md.ModelConfig(variant=variant, n_layers=n_layers, hidden=hidden,
                          head_hidden=3, in_channels=13)


class TestParamCounts:
    def test_default_count_analytic(self):
        assert md.count_params(md.ModelConfig()) == 794094

    def test_default_near_reference_budget(self):
        n = md.count_params(md.ModelConfig())
        assert abs(n - 768000) / 768000 < 0.05

    def test_head_params(self):
        cfg = md.ModelConfig()
        head = cfg.head_hidden * cfg.hidden + cfg.head_hidden \
            + 4 * cfg.head_hidden + 4
        assert head == 654

    @pytest.mark.parametrize("variant", md.VARIANTS)
    def test_analytic_matches_actual(self, variant):
        cfg = tiny_cfg(variant=variant, hidden=5, n_layers=3)
        params = md.init_params(cfg, seed=0)
        assert md.params_size(params) == md.count_params(cfg)

    def test_kernel_size_by_variant(self):
        assert md.ModelConfig(variant="convlstm").kernel_size == 3
        assert md.ModelConfig(variant="lstm").kernel_size == 1
        assert md.ModelConfig(variant="conv").kernel_size == 3


class TestInit:
    def test_deterministic(self):
        cfg = tiny_cfg()
        a = md.init_params(cfg, seed=3)
        b = md.init_params(cfg, seed=3)
        c = md.init_params(cfg, seed=4)
        for k in a:
            assert np.array_equal(a[k].data, b[k].data)
        assert not np.array_equal(a["layer0.kernel"].data,
                                  c["layer0.kernel"].data)

    def test_forget_gate_bias_shifted(self):
        cfg = tiny_cfg(hidden=4)
        params = md.init_params(cfg, seed=0)
        bias = params["layer0.bias"].data
        fan_in = (13 + 4) * 9
        bound = 1.0 / np.sqrt(fan_in)
        assert np.all(np.abs(bias[:12]) <= bound)
        assert np.all(bias[12:] >= 1.0 - bound)

    def test_bounds_scale_with_fan_in(self):
        cfg = tiny_cfg(hidden=4)
        params = md.init_params(cfg, seed=0)
        k0 = params["layer0.kernel"].data
        assert np.abs(k0).max() <= 1.0 / np.sqrt((13 + 4) * 9)


class TestResidualHead:
    @pytest.mark.parametrize("variant", md.VARIANTS)
    def test_zero_params_reproduce_climatology(self, variant):
        cfg = tiny_cfg(variant=variant)
        params = md.zero_params(md.init_params(cfg, seed=0))
        x_st, x_s, x_t = tiny_inputs()
        pred = md.model_forward(cfg, params, x_st, x_s, x_t)
        assert np.array_equal(pred.data, x_st.data[4:8])


class TestTemporalStructure:
    def test_future_inputs_cannot_reach_past_predictions(self):
        cfg = tiny_cfg()
        params = md.init_params(cfg, seed=1)
        x_st, x_s, x_t = tiny_inputs(T=6, seed=2)
        base = md.model_forward(cfg, params, x_st, x_s, x_t).data
        bumped = x_st.data.copy()
        bumped[:, 4] += 0.5
        pred2 = md.model_forward(cfg, params, ad.Tensor(bumped), x_s,
                                 x_t).data
        assert np.array_equal(base[:, :4], pred2[:, :4])
        assert not np.array_equal(base[:, 4], pred2[:, 4])

    def test_truncated_forward_is_prefix(self):
        cfg = tiny_cfg()
        params = md.init_params(cfg, seed=1)
        x_st, x_s, x_t = tiny_inputs(T=6, seed=3)
        full = md.model_forward(cfg, params, x_st, x_s, x_t).data
        part = md.model_forward(cfg, params, x_st, x_s, x_t,
                                n_steps=3).data
        assert np.array_equal(part, full[:, :3])

    def test_conv_variant_is_memoryless(self):
        cfg = tiny_cfg(variant="conv")
        params = md.init_params(cfg, seed=1)
        x_st, x_s, x_t = tiny_inputs(T=5, seed=4)
        base = md.model_forward(cfg, params, x_st, x_s, x_t).data
        bumped = x_st.data.copy()
        bumped[:, 1] += 0.5
        pred2 = md.model_forward(cfg, params, ad.Tensor(bumped), x_s,
                                 x_t).data
        assert not np.array_equal(base[:, 1], pred2[:, 1])
        assert np.array_equal(base[:, 2:], pred2[:, 2:])

    def test_recurrent_variants_carry_memory(self):
        for variant in ("convlstm", "lstm"):
            cfg = tiny_cfg(variant=variant)
            params = md.init_params(cfg, seed=1)
            x_st, x_s, x_t = tiny_inputs(T=5, seed=4)
            base = md.model_forward(cfg, params, x_st, x_s, x_t).data
            bumped = x_st.data.copy()
            bumped[:, 1] += 0.5
            pred2 = md.model_forward(cfg, params, ad.Tensor(bumped), x_s,
                                     x_t).data
            assert not np.array_equal(base[:, 2:], pred2[:, 2:]), variant


class TestSpatialStructure:
    def test_pixel_lstm_is_spatially_local(self):
        cfg = tiny_cfg(variant="lstm")
        params = md.init_params(cfg, seed=1)
        x_st, x_s, x_t = tiny_inputs(T=4, H=5, W=5, seed=5)
        base = md.model_forward(cfg, params, x_st, x_s, x_t).data
        bumped = x_st.data.copy()
        bumped[:4, 0, 2, 2] += 0.5
        pred2 = md.model_forward(cfg, params, ad.Tensor(bumped), x_s,
                                 x_t).data
        delta = np.abs(base - pred2).sum(axis=(0, 1))
        assert delta[2, 2] > 0
        off = delta.copy()
        off[2, 2] = 0
        assert off.sum() == 0.0

    def test_convlstm_spreads_spatially(self):
        cfg = tiny_cfg(variant="convlstm")
        params = md.init_params(cfg, seed=1)
        x_st, x_s, x_t = tiny_inputs(T=4, H=5, W=5, seed=5)
        base = md.model_forward(cfg, params, x_st, x_s, x_t).data
        bumped = x_st.data.copy()
        bumped[:4, 0, 2, 2] += 0.5
        pred2 = md.model_forward(cfg, params, ad.Tensor(bumped), x_s,
                                 x_t).data
        delta = np.abs(base - pred2).sum(axis=(0, 1))
        assert delta[0, 0] > 0  # reaches the corner after several steps


class TestPersistence:
    def test_save_load_roundtrip(self, tmp_path):
        cfg = tiny_cfg()
        m = md.Model.initialized(cfg, seed=9)
        m.save(tmp_path / "ckpt", extra={"epoch": 2})
        back = md.Model.load(tmp_path / "ckpt")
        assert back.cfg == cfg
        x_st, x_s, x_t = tiny_inputs(seed=6)
        a = m.forward(x_st, x_s, x_t).data
        b = back.forward(x_st, x_s, x_t).data
        assert np.array_equal(a, b)


def _f64_params(params):
    return {k: ad.Tensor(p.data.astype(np.float64), requires_grad=True)
            for k, p in params.items()}


class TestGradients:
    def test_parameter_gradients_match_finite_differences(self):
        cfg = md.ModelConfig(variant="convlstm", n_layers=2, hidden=2,
                             head_hidden=3, in_channels=13)
        params = _f64_params(md.init_params(cfg, seed=2))
        rng = np.random.default_rng(8)
        x_st = ad.Tensor(rng.random((9, 3, 3, 3)))
        x_s = ad.Tensor(rng.random((2, 3, 3)))
        x_t = ad.Tensor(rng.random((2, 3)))
        target = ad.Tensor(rng.random((4, 3, 3, 3)))
        valid = ad.Tensor((rng.random((4, 3, 3, 3)) < 0.8)
                          .astype(np.float64))

        def loss_for(name):
            def f(p):
                trial = dict(params)
                trial[name] = p
                pred = md.model_forward(cfg, trial, x_st, x_s, x_t)
                return ad.masked_mean_abs(pred, target, valid)
            return f

        for name in ("layer1.kernel", "layer0.bias", "head.kernel",
                     "out.kernel", "out.bias"):
            err = ad.finite_difference_check(loss_for(name), params[name])
            assert err < 1e-3, f"{name}: {err}"

    def test_input_gradients_flow_to_all_three_inputs(self):
        cfg = tiny_cfg()
        params = md.init_params(cfg, seed=2)
        rng = np.random.default_rng(9)
        x_st = ad.Tensor(rng.random((9, 3, 3, 3), dtype=np.float32),
                         requires_grad=True)
        x_s = ad.Tensor(rng.random((2, 3, 3), dtype=np.float32),
                        requires_grad=True)
        x_t = ad.Tensor(rng.random((2, 3), dtype=np.float32),
                        requires_grad=True)
        with ad.Tape() as tape:
            pred = md.model_forward(cfg, params, x_st, x_s, x_t)
            loss = ad.sum_all(pred)
            grads = tape.backward(loss)
        assert np.abs(grads[x_st]).sum() > 0
        assert np.abs(grads[x_s]).sum() > 0
        assert np.abs(grads[x_t]).sum() > 0
