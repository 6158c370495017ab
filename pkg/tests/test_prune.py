import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from softprune import graph as G
from softprune.errors import ConfigError, InputError, StateError, UnsupportedError
from softprune.prune import (FilterMask, PruneConfig, apply_mask, compact, decay_step_as_regularization,
                             rank_filters, read_mask, select_mask, write_mask)

from oracle import exhaustive_select


def model_with_norms(norms, m=2, s=3):
    """Single conv layer whose filter j has l2 norm ``norms[j]``."""
    model = G.ModelGraph([G.conv("c", m, len(norms), s=s)], (m, 5, 5))
    rng = np.random.default_rng(len(norms))
    w = rng.standard_normal((len(norms), m, s, s))
    w /= np.linalg.norm(w.reshape(len(norms), -1), axis=1)[:, None, None, None]
    model.params["c"]["weight"] = w * np.asarray(norms, dtype=float)[:, None, None, None]
    return model


def pruned_set(mask, name="c"):
    return set(int(i) for i in mask.pruned_indices(name))


class TestRankFilters:
    def test_order(self):
        ranked = rank_filters(model_with_norms([3.0, 1.0, 2.0, 0.5]), "c")
        assert [i for i, _ in ranked] == [3, 1, 2, 0]
        np.testing.assert_allclose([v for _, v in ranked], [0.5, 1.0, 2.0, 3.0], rtol=1e-14)

    def test_ties_stable(self):
        model = G.ModelGraph([G.conv("c", 1, 4)], (1, 4, 4))
        model.params["c"]["weight"][...] = 1.0
        assert [i for i, _ in rank_filters(model, "c")] == [0, 1, 2, 3]

    def test_single_filter(self):
        assert [i for i, _ in rank_filters(model_with_norms([2.0]), "c")] == [0]

    def test_non_conv(self):
        with pytest.raises(InputError):
            rank_filters(G.make_toy_cnn(), "fc")

    def test_l1(self):
        model = G.ModelGraph([G.conv("c", 1, 2, s=1)], (1, 2, 2))
        model.params["c"]["weight"][:, 0, 0, 0] = [-3.0, 2.0]
        assert rank_filters(model, "c", norm="l1") == [(1, 2.0), (0, 3.0)]


class TestSelectMask:
    def test_half(self):
        mask = select_mask(model_with_norms([0.5, 3.0, 1.0, 2.0]), PruneConfig(0.5))
        assert pruned_set(mask) == {0, 2} == exhaustive_select([0.5, 3.0, 1.0, 2.0], 2)

    def test_rate_zero(self):
        mask = select_mask(model_with_norms([1.0, 2.0]), PruneConfig(0.0))
        assert mask.per_layer["c"].all()

    def test_floor_rule(self):
        mask = select_mask(model_with_norms(np.arange(1.0, 17.0)), PruneConfig(0.2))
        assert pruned_set(mask) == {0, 1, 2}
        assert mask.per_layer["c"].sum() == 16 - 3

    def test_all_pruned_is_config_error(self):
        with pytest.raises(ConfigError):
            select_mask(model_with_norms([1.0, 2.0]), PruneConfig(0.5), rate=1.0)
        with pytest.raises(InputError):
            select_mask(model_with_norms([1.0, 2.0]), PruneConfig(0.5), rate=-0.1)

    def test_classifier_and_stem_never_masked(self):
        model = G.make_resnet_cifar(20).init_params(0)
        mask = select_mask(model, PruneConfig(0.4))
        assert "fc" not in mask.per_layer and "conv1" not in mask.per_layer
        assert len(mask.per_layer) == 18

    def test_scope(self):
        model = G.make_toy_cnn().init_params(0)
        mask = select_mask(model, PruneConfig(0.5, scope=("conv2",)))
        assert list(mask.per_layer) == ["conv2"]
        with pytest.raises(InputError):
            select_mask(model, PruneConfig(0.5, scope=("fc",)))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=1, max_size=10), st.data())
    def test_matches_exhaustive_with_ties(self, ints, data):
        norms = [float(v) for v in ints]
        k = data.draw(st.integers(0, len(norms) - 1))
        # 1x1x1 filters with small integer weights: norms are exact, ties are common
        w = np.zeros((len(norms), 1, 1, 1))
        w[:, 0, 0, 0] = norms
        model = G.ModelGraph([G.conv("c", 1, len(norms), s=1)], (1, 2, 2), {"c": {"weight": w}})
        rate = k / len(norms)
        assert pruned_set(select_mask(model, PruneConfig(rate))) == exhaustive_select(norms, k)

    def test_weight_granularity_counts(self):
        model = G.make_toy_cnn().init_params(1)
        mask = select_mask(model, PruneConfig(0.3, granularity="weight"))
        for name, keep in mask.per_layer.items():
            w = model.params[name]["weight"]
            k = int(np.floor(w.size * 0.3))
            assert (~keep).sum() == k
            assert keep.shape == w.shape
            assert np.abs(w[~keep]).max() <= np.abs(w[keep]).min()


class TestApplyMask:
    def setup_method(self):
        self.model = G.make_toy_cnn().init_params(0)
        self.mask = select_mask(self.model, PruneConfig(0.5))
        self.orig = {n: p["weight"].copy() for n, p in self.model.params.items()}

    def test_alpha_one_is_identity(self):
        apply_mask(self.model, self.mask, 1.0)
        for n, w in self.orig.items():
            assert self.model.params[n]["weight"].tobytes() == w.tobytes()

    def test_alpha_zero_zeroes_pruned_keeps_rest(self):
        apply_mask(self.model, self.mask, 0.0)
        for n, keep in self.mask.per_layer.items():
            w = self.model.params[n]["weight"]
            assert not w[~keep].any()
            assert w[keep].tobytes() == self.orig[n][keep].tobytes()
            np.testing.assert_array_equal(w, self.orig[n] * keep[:, None, None, None])

    def test_fractional_alpha(self):
        model = G.ModelGraph([G.conv("c", 1, 2, s=1)], (1, 1, 2))
        model.params["c"]["weight"][:, 0, 0, 0] = [2.0, 5.0]
        mask = FilterMask({"c": np.array([False, True])})
        apply_mask(model, mask, 0.75)
        assert model.params["c"]["weight"][:, 0, 0, 0].tolist() == [1.5, 5.0]

    def test_buffers_scaled(self):
        buf = {n: np.ones_like(w) for n, w in self.orig.items() if n in self.mask.per_layer}
        apply_mask(self.model, self.mask, 0.25, buf)
        keep = self.mask.per_layer["conv1"]
        assert (buf["conv1"][~keep] == 0.25).all() and (buf["conv1"][keep] == 1.0).all()

    def test_shape_mismatch(self):
        bad = FilterMask({"conv1": np.ones(3, dtype=bool)})
        with pytest.raises(StateError):
            apply_mask(self.model, bad, 0.5)

    def test_bad_alpha(self):
        with pytest.raises(InputError):
            apply_mask(self.model, self.mask, 1.5)


class TestRegularizationIdentity:
    def test_example(self):
        out = decay_step_as_regularization(np.array([2.0, -4.0]), 0.75, 1.0)
        assert out.tolist() == [1.5, -3.0]

    def test_lambda_zero(self):
        wp = np.array([0.3, -1.7])
        assert decay_step_as_regularization(wp, 0.6, 0.6).tobytes() == (0.6 * wp).tobytes()

    def test_zero_input(self):
        assert not decay_step_as_regularization(np.zeros(5), 0.3, 0.9).any()

    @pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 0.75, 1.0])
    def test_bit_exact_at_unit_alpha0(self, alpha):
        wp = np.random.default_rng(7).standard_normal((4, 3, 3, 3))
        assert decay_step_as_regularization(wp, alpha, 1.0).tobytes() == (alpha * wp).tobytes()

    def test_alpha_above_alpha0(self):
        with pytest.raises(InputError):
            decay_step_as_regularization(np.ones(2), 0.9, 0.5)


def masked_toy(seed, rate=0.25, channels=(4, 6)):
    model = G.make_toy_cnn(channels, classes=5, input_shape=(3, 6, 6)).init_params(seed)
    mask = select_mask(model, PruneConfig(rate))
    apply_mask(model, mask, 0.0)
    return model, mask


class TestCompact:
    def test_no_pruning_identity(self):
        model = G.make_toy_cnn().init_params(0)
        mask = select_mask(model, PruneConfig(0.0))
        out = compact(model, mask)
        assert [l.to_dict() for l in out.layers] == [l.to_dict() for l in model.layers]
        for (_, _, a), (_, _, b) in zip(model.named_arrays(), out.named_arrays()):
            assert a.tobytes() == b.tobytes()

    def test_toy_one_filter(self):
        model = G.ModelGraph([G.conv("conv1", 2, 4), G.LayerSpec(G.RELU, "r"), G.conv("conv2", 4, 3),
                              G.LayerSpec(G.AVGPOOL, "p"), G.LayerSpec(G.FLATTEN, "f"), G.dense("fc", 3, 2)],
                             (2, 5, 5)).init_params(0)
        mask = FilterMask({"conv1": np.array([True, False, True, True])})
        apply_mask(model, mask, 0.0)
        out = compact(model, mask)
        assert out.params["conv1"]["weight"].shape == (3, 2, 3, 3)
        assert out.params["conv2"]["weight"].shape == (3, 3, 3, 3)
        x = np.random.default_rng(1).standard_normal((10, 2, 5, 5))
        a, _ = G.forward(model, x)
        b, _ = G.forward(out, x)
        np.testing.assert_allclose(b, a, rtol=1e-6, atol=1e-12)

    def test_flatten_consumer(self):
        model, mask = masked_toy(2, rate=0.5)
        out = compact(model, mask)
        assert out.layer("fc").in_features == 3 * 9
        x = np.random.default_rng(2).random((20, 3, 6, 6))
        np.testing.assert_allclose(G.forward(out, x)[0], G.forward(model, x)[0], rtol=1e-6, atol=1e-12)

    def test_resnet_flops_consistency(self):
        model = G.make_resnet_cifar(56).init_params(0)
        mask = select_mask(model, PruneConfig(0.2))
        apply_mask(model, mask, 0.0)
        small = compact(model, mask)
        assert G.count_flops(small).total == G.count_flops(model, 0.2, widths="floor").total

    def test_not_decayed(self):
        model = G.make_toy_cnn().init_params(0)
        mask = select_mask(model, PruneConfig(0.5))
        apply_mask(model, mask, 0.1)
        with pytest.raises(StateError, match="not fully decayed"):
            compact(model, mask)

    def test_weight_granularity_unsupported(self):
        model = G.make_toy_cnn().init_params(0)
        mask = select_mask(model, PruneConfig(0.5, granularity="weight"))
        with pytest.raises(UnsupportedError):
            compact(model, mask)


class TestMaskFile:
    def test_round_trip(self, tmp_path):
        model = G.make_resnet_cifar(20).init_params(0)
        mask = select_mask(model, PruneConfig(0.3))
        write_mask(tmp_path / "mask.txt", mask)
        lines = (tmp_path / "mask.txt").read_text().splitlines()
        assert lines[1].startswith("layer1.0.conv1: ")
        assert len(lines[1].split(":")[1].split()) == 4
        assert read_mask(tmp_path / "mask.txt", model) == mask

    def test_weight_round_trip(self, tmp_path):
        model = G.make_toy_cnn().init_params(0)
        mask = select_mask(model, PruneConfig(0.7, granularity="weight"))
        write_mask(tmp_path / "m.txt", mask)
        assert read_mask(tmp_path / "m.txt", model) == mask

    def test_unknown_layer(self, tmp_path):
        (tmp_path / "m.txt").write_text("nope: 1 2\n")
        with pytest.raises(StateError):
            read_mask(tmp_path / "m.txt", G.make_toy_cnn())
