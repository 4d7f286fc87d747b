"""Path-integral attribution: exactness oracles, masks, event pairing."""

import dataclasses

import numpy as np
import pytest

from extremecast import attribution as at
from extremecast import autodiff as ad
from extremecast import model as md
from extremecast import store, synth


class TestCore:
    def test_linear_function_exact_at_any_step_count(self):
        # F linear in its inputs: the Riemann sum is exact, so the
        # attribution equals input * gradient and the residual vanishes.
        rng = np.random.default_rng(3)
        a = rng.standard_normal((2, 3)).astype(np.float64)
        b = rng.standard_normal(4).astype(np.float64)
        wa = ad.Tensor(rng.standard_normal((2, 3)))
        wb = ad.Tensor(rng.standard_normal(4))

        def fn(leaves):
            return ad.add(ad.sum_all(ad.mul(leaves["a"], wa)),
                          ad.sum_all(ad.mul(leaves["b"], wb)))

        for n in (1, 4):
            out = at.ig_core(fn, {"a": a, "b": b}, n)
            assert out["residual"] < 1e-12
            np.testing.assert_allclose(out["attr"]["a"], a * wa.data,
                                       atol=1e-12, rtol=0)
            np.testing.assert_allclose(out["attr"]["b"], b * wb.data,
                                       atol=1e-12, rtol=0)
            assert out["f_base"] == 0.0

    def test_constant_function_gets_zero_attribution(self):
        c = ad.Tensor(np.array([2.5, -1.0]))

        def fn(leaves):
            return ad.sum_all(ad.square(c))

        out = at.ig_core(fn, {"x": np.ones(5)}, 3)
        assert np.all(out["attr"]["x"] == 0.0)
        assert out["f_x"] == out["f_base"]
        assert out["residual"] == 0.0
        assert out["ratio"] == 0.0

    def test_quadratic_ratio_is_exactly_inverse_step_count(self):
        # F(x) = sum(x^2): the right-endpoint sum overshoots by S/n, so
        # residual = sum(x^2)/n and ratio = 1/n.
        rng = np.random.default_rng(9)
        x = rng.standard_normal(30).astype(np.float64)
        s = float((x ** 2).sum())

        def fn(leaves):
            return ad.sum_all(ad.square(leaves["x"]))

        for n in (4, 9, 16):
            out = at.ig_core(fn, {"x": x}, n)
            assert out["residual"] == pytest.approx(s / n, rel=1e-9)
            assert out["ratio"] == pytest.approx(1.0 / n, rel=1e-9)

    def test_rejects_nonpositive_step_count(self):
        with pytest.raises(ValueError):
            at.ig_core(lambda leaves: ad.sum_all(leaves["x"]),
                       {"x": np.ones(2)}, 0)
        with pytest.raises(ValueError):
            at.AttributionConfig(n_steps=0)


@pytest.fixture(scope="module")
def cube():
    cfg = synth.SyntheticConfig(n_cubes=3, n_sites=3, grid=8, seed=11,
                                event_rate=1.0)
    return synth.generate_synthetic_cube(cfg, 0)


@pytest.fixture(scope="module")
def tiny_model():
    cfg = md.ModelConfig(variant="lstm", n_layers=1, hidden=4,
                         head_hidden=3, in_channels=67)
    return md.Model.initialized(cfg, seed=5)


class TestPooledMask:
    def test_selected_rows_follow_clouds_and_vegetation(self, cube):
        from extremecast import features as ft
        valid, horizon = at.pooled_kndvi_mask(cube, np.array([3, 5]))
        assert horizon == 5
        assert valid.shape == (1, 5) + cube.grid
        veg = ft.vegetation_mask_from_xs(cube.x_s)
        for pos in (3, 5):
            expect = ((cube.cloud_mask[pos] == 0) & veg).astype(np.float32)
            np.testing.assert_array_equal(valid[0, pos - 1], expect)
        untouched = [r for r in range(5) if r not in (2, 4)]
        assert np.all(valid[0, untouched] == 0)

    def test_empty_selection_rejected(self, cube):
        with pytest.raises(at.AttributionError):
            at.pooled_kndvi_mask(cube, np.array([], dtype=int))

    def test_out_of_range_rejected(self, cube):
        with pytest.raises(at.AttributionError):
            at.pooled_kndvi_mask(cube, np.array([0]))
        with pytest.raises(at.AttributionError):
            at.pooled_kndvi_mask(cube, np.array([cube.n_steps]))

    def test_fully_clouded_selection_rejected(self, cube):
        blocked = dataclasses.replace(cube,
                                      cloud_mask=cube.cloud_mask.copy())
        blocked.cloud_mask[7] = 1
        with pytest.raises(at.AttributionError):
            at.pooled_kndvi_mask(blocked, np.array([7]))


class TestModelAttribution:
    def test_shapes_and_exact_zero_tail(self, cube, tiny_model):
        res = at.attribute_cube(tiny_model, cube, np.array([2, 4]),
                                at.AttributionConfig(n_steps=2))
        assert res.horizon == 4
        for name in at.INPUT_NAMES:
            assert res.attr[name].shape == getattr(cube, name).shape
        # the forward pass never reads steps at or past the horizon
        assert np.all(res.attr["x_st"][:, 4:] == 0.0)
        assert np.all(res.attr["x_t"][:, 4:] == 0.0)
        assert np.any(res.attr["x_st"][:, :4] != 0.0)

    def test_completeness_bookkeeping(self, cube, tiny_model):
        res = at.attribute_cube(tiny_model, cube, np.array([3]),
                                at.AttributionConfig(n_steps=3))
        total = sum(float(a.sum()) for a in res.attr.values())
        gap = res.f_x - res.f_base
        assert res.residual == pytest.approx(abs(total - gap), abs=1e-15)
        assert res.ratio == pytest.approx(res.residual / abs(gap))

    def test_finer_path_does_not_increase_error(self, cube, tiny_model):
        # float64 throughout so the comparison is not noise-bound
        params = {k: ad.Tensor(v.data.astype(np.float64))
                  for k, v in tiny_model.params.items()}
        mdl = md.Model(tiny_model.cfg, params)
        wide = dataclasses.replace(
            cube,
            x_st=cube.x_st.astype(np.float64),
            x_s=cube.x_s.astype(np.float64),
            x_t=cube.x_t.astype(np.float64))
        ratios = [at.attribute_cube(mdl, wide, np.array([3]),
                                    at.AttributionConfig(n)).ratio
                  for n in (2, 8, 32)]
        assert ratios[0] >= ratios[1] - 1e-12
        assert ratios[1] >= ratios[2] - 1e-12


class TestAggregation:
    def test_mean_and_stderr_across_cubes(self):
        rows = [np.array([1.0, 2.0]), np.array([3.0, 4.0]),
                np.array([5.0, 0.0])]
        table = at.aggregate_channels(rows)
        np.testing.assert_allclose(table["mean"], [3.0, 2.0])
        np.testing.assert_allclose(table["stderr"],
                                   [2.0 / np.sqrt(3), 2.0 / np.sqrt(3)])
        assert table["n_cubes"] == 3

    def test_single_cube_has_zero_stderr(self):
        table = at.aggregate_channels([np.array([1.0, -7.0])])
        assert np.all(table["stderr"] == 0.0)

    def test_top_channels_ranked_by_magnitude(self):
        table = {"mean": np.array([0.1, -5.0, 2.0])}
        names = ["a", "b", "c"]
        assert at.top_channels(table, names, k=2) == ["b", "c"]

    def test_channel_totals_collapse_non_channel_axes(self):
        attr = {"x_t": np.arange(12, dtype=np.float64).reshape(3, 4)}
        res = at.AttributionResult(attr=attr, f_x=0.0, f_base=0.0,
                                   residual=0.0, ratio=0.0,
                                   positions=np.array([1]), horizon=1,
                                   n_steps=1)
        np.testing.assert_allclose(at.channel_totals(res, "x_t"),
                                   [6.0, 22.0, 38.0])


class TestCounterfactualPairing:
    def test_positions_shift_one_year(self):
        np.testing.assert_array_equal(
            at.counterfactual_positions(np.array([74, 80])), [1, 7])

    def test_missing_coverage_rejected(self):
        with pytest.raises(at.AttributionError):
            at.counterfactual_positions(np.array([73]))
        with pytest.raises(at.AttributionError):
            at.counterfactual_positions(np.array([], dtype=int))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("attr_ds")
    cfg = synth.SyntheticConfig(n_cubes=6, n_sites=3, grid=8, seed=11,
                                event_rate=1.0)
    synth.build_dataset(cfg, path)
    return path / "manifest.json"


class TestEventStudy:
    def test_dominant_event_sits_in_the_later_year(self, dataset):
        assert at.most_frequent_event(dataset) == 3

    def test_paired_tables_cover_all_input_groups(self, dataset,
                                                  tiny_model):
        out = at.event_counterfactual(tiny_model, dataset, 3,
                                      at.AttributionConfig(n_steps=2))
        assert out["cubes"]
        shapes = {"x_st": 9, "x_s": 34, "x_t": 24}
        for name, n_ch in shapes.items():
            for kind in ("event", "counterfactual"):
                table = out["tables"][name][kind]
                assert table["mean"].shape == (n_ch,)
                assert table["stderr"].shape == (n_ch,)
                assert table["n_cubes"] == len(out["cubes"])
        assert len(out["per_cube"]["event"]) == len(out["cubes"])
        assert len(out["per_cube"]["counterfactual"]) == len(out["cubes"])
        for row in out["per_cube"]["event"]:
            assert row["n_positions"] > 0

    def test_unknown_event_rejected(self, dataset, tiny_model):
        with pytest.raises(at.AttributionError):
            at.event_counterfactual(tiny_model, dataset, 42)
