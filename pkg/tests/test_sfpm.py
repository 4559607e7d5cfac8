import json

import numpy as np
import pytest

from sfpnet import ops
from sfpnet.autograd import ParamStore
from sfpnet.errors import ConfigError, ContractError
from sfpnet.gradcheck import check_op
from sfpnet.sfpm import (ModulatorConfig, ModulatorParams, block_param_shapes, export_level_kernels,
                         extract_contexts, gated_aggregate, init_block, init_modulator,
                         level_kernel_grids, make_rulebooks, modulator_param_shapes,
                         receptive_fields, sfp_block_forward, sfpm_forward)
from sfpnet.sparse import SparseTensor

from conftest import random_coords


def setup(rng, cfg, n=20, batches=1, dtype=np.float64):
    x = SparseTensor.from_unsorted(random_coords(rng, n, extent=4, batches=batches),
                                   rng.standard_normal((n, cfg.channels)))
    store = ParamStore(dtype)
    init_modulator(store, "m", cfg, rng)
    return x, store, make_rulebooks(x, cfg)


class TestStructure:
    def test_kernel_growth(self):
        cfg = ModulatorConfig(8, focal_levels=3, base_kernel=3)
        assert cfg.kernel_sizes == (3, 5, 7)
        assert cfg.gate_width == 4

    def test_receptive_fields(self):
        assert receptive_fields((3, 5, 7)) == (3, 7, 13)
        assert receptive_fields((3, 5, 7), rule="literal") == (3, 9, 19)
        with pytest.raises(ValueError):
            receptive_fields((3,), rule="other")

    def test_no_pool_drops_one_level(self):
        cfg = ModulatorConfig(8, focal_levels=3, use_global_pool=False)
        assert cfg.gate_width == 3
        assert modulator_param_shapes(cfg)["gate0.w"] == (8, 3)

    @pytest.mark.parametrize("kw", [dict(focal_levels=0), dict(base_kernel=4), dict(base_kernel=1),
                                    dict(channels=0), dict(gate_depth=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ModulatorConfig(**{"channels": 4, **kw})

    def test_same_width_everywhere(self):
        shapes = modulator_param_shapes(ModulatorConfig(6))
        for name, shape in shapes.items():
            if name.startswith("gate"):
                continue
            assert shape[-1] == 6, name

    def test_no_positional_parameters(self):
        # every tensor is a channel map or a kernel over relative offsets
        for cfg in (ModulatorConfig(5), ModulatorConfig(5, 2, use_global_pool=False, gate_depth=2)):
            for name, shape in block_param_shapes(cfg).items():
                assert "pos" not in name
                assert len(shape) in (1, 2) or (len(shape) == 3 and round(shape[0] ** (1 / 3)) ** 3 == shape[0])

    def test_deep_gate(self, rng):
        cfg = ModulatorConfig(4, 2, gate_depth=2)
        assert modulator_param_shapes(cfg)["gate0.w"] == (4, 4)
        assert modulator_param_shapes(cfg)["gate1.w"] == (4, 3)
        x, store, rbs = setup(rng, cfg)
        out = sfpm_forward(x, ModulatorParams.from_source(store, "m", cfg), rbs)
        assert out.features.shape == x.features.shape

    def test_gate_width_checked(self, rng):
        cfg = ModulatorConfig(4, 2)
        _, store, _ = setup(rng, cfg)
        with pytest.raises(ContractError):
            ModulatorParams.from_source(store, "m", ModulatorConfig(4, 2, use_global_pool=False))


class TestContexts:
    def test_rulebook_mismatch(self, rng):
        cfg = ModulatorConfig(3, 2)
        x, store, rbs = setup(rng, cfg)
        params = ModulatorParams.from_source(store, "m", cfg)
        with pytest.raises(ContractError):
            extract_contexts(x, params, {3: rbs[3]})
        with pytest.raises(ContractError):
            extract_contexts(x, params, {3: rbs[5], 5: rbs[5]})

    def test_isolated_voxel_uses_center_only(self, rng):
        cfg = ModulatorConfig(3, 3, use_global_pool=False)
        x = SparseTensor(np.array([[0, 0, 0, 0]]), rng.standard_normal((1, 3)))
        store = ParamStore(np.float64)
        init_modulator(store, "m", cfg, rng)
        p = ModulatorParams.from_source(store, "m", cfg)
        levels = extract_contexts(x, p, make_rulebooks(x, cfg))
        s = ops.linear(x.features, p.stem_w, p.stem_b)
        for kern, (g, b), got in zip(p.level_kernels, p.level_norms, levels):
            w = kern.weights[kern.kernel_size ** 3 // 2]
            s = ops.layer_norm(ops.gelu(s @ w + kern.bias), g, b)
            np.testing.assert_allclose(got, s, rtol=1e-13)

    def test_pool_level_is_per_batch_mean(self, rng):
        cfg = ModulatorConfig(3, 2)
        x, store, rbs = setup(rng, cfg, n=30, batches=2)
        levels = extract_contexts(x, ModulatorParams.from_source(store, "m", cfg), rbs)
        assert len(levels) == 3
        for b in (0, 1):
            rows = x.batch == b
            np.testing.assert_allclose(levels[2][rows], np.tile(levels[1][rows].mean(0), (rows.sum(), 1)))


class TestAggregate:
    def _params(self, rng, cfg):
        x, store, rbs = setup(rng, cfg)
        return x, store, rbs

    def test_zero_gates_give_mixer_bias(self, rng):
        cfg = ModulatorConfig(3, 2)
        x, store, rbs = self._params(rng, cfg)
        store.set("m.gate0.w", np.zeros((3, 3)))
        store.set("m.mixer.b", np.array([0.5, -1.0, 2.0]))
        p = ModulatorParams.from_source(store, "m", cfg)
        out = gated_aggregate(x, extract_contexts(x, p, rbs), p).features
        assert np.array_equal(out, np.tile([0.5, -1.0, 2.0], (len(x), 1)))

    def test_one_hot_gate_identity_mixer(self, rng):
        cfg = ModulatorConfig(3, 2)
        x, store, rbs = self._params(rng, cfg)
        store.set("m.gate0.w", np.zeros((3, 3)))
        store.set("m.gate0.b", np.array([1.0, 0.0, 0.0]))
        store.set("m.mixer.w", np.eye(3)[None])
        p = ModulatorParams.from_source(store, "m", cfg)
        levels = extract_contexts(x, p, rbs)
        assert np.array_equal(gated_aggregate(x, levels, p).features, levels[0])

    def test_matches_hand_evaluation(self, rng):
        cfg = ModulatorConfig(4, 3)
        x, store, rbs = self._params(rng, cfg)
        for name in store.names():
            store.set(name, rng.standard_normal(store[name].shape))
        p = ModulatorParams.from_source(store, "m", cfg)
        levels = extract_contexts(x, p, rbs)
        got = gated_aggregate(x, levels, p).features
        gates = x.features @ store["m.gate0.w"] + store["m.gate0.b"]
        want = np.zeros_like(got)
        for i in range(len(x)):
            mixed = sum(gates[i, l] * levels[l][i] for l in range(4))
            want[i] = mixed @ store["m.mixer.w"][0] + store["m.mixer.b"]
        assert np.max(np.abs(got - want)) < 1e-12

    def test_level_count_checked(self, rng):
        cfg = ModulatorConfig(3, 2)
        x, store, rbs = self._params(rng, cfg)
        p = ModulatorParams.from_source(store, "m", cfg)
        with pytest.raises(ContractError):
            gated_aggregate(x, extract_contexts(x, p, rbs)[:2], p)


class TestForward:
    def test_shape_preserved(self, rng):
        cfg = ModulatorConfig(5)
        x, store, rbs = setup(rng, cfg)
        out = sfpm_forward(x, ModulatorParams.from_source(store, "m", cfg), rbs)
        assert out.features.shape == x.features.shape
        assert np.array_equal(out.coords, x.coords)

    def test_zero_query(self, rng):
        cfg = ModulatorConfig(3)
        x, store, rbs = setup(rng, cfg)
        store.set("m.query.w", np.zeros((3, 3)))
        out = sfpm_forward(x, ModulatorParams.from_source(store, "m", cfg), rbs)
        assert not out.features.any()

    def test_reduces_to_single_level_chain(self, rng):
        cfg = ModulatorConfig(3, focal_levels=1, use_global_pool=False)
        x, store, rbs = setup(rng, cfg)
        store.set("m.gate0.w", np.zeros((3, 1)))
        store.set("m.gate0.b", np.ones(1))
        store.set("m.query.w", np.zeros((3, 3)))
        store.set("m.query.b", np.ones(3))
        store.set("m.mixer.w", np.eye(3)[None])
        p = ModulatorParams.from_source(store, "m", cfg)
        got = sfpm_forward(x, p, rbs).features
        s = ops.linear(x.features, store["m.stem.w"], store["m.stem.b"])
        conv = ops.submconv_forward(x.replace(s), p.level_kernels[0], rbs[3]).features
        want = ops.layer_norm(ops.gelu(conv), store["m.level0.ln.g"], store["m.level0.ln.b"])
        assert np.array_equal(got, want)

    def test_channel_mismatch(self, rng):
        cfg = ModulatorConfig(3)
        x, store, rbs = setup(rng, cfg)
        with pytest.raises(ContractError):
            sfpm_forward(x.replace(np.zeros((len(x), 4))),
                         ModulatorParams.from_source(store, "m", cfg), rbs)

    @pytest.mark.parametrize("shift", [(7, 3, -5), (1, 0, 0), (-13, 22, 4)])
    def test_translation_invariance(self, rng, shift, backend):
        cfg = ModulatorConfig(4)
        x, store, rbs = setup(rng, cfg, n=40, batches=2, dtype=np.float32)
        p = ModulatorParams.from_source(store, "m", cfg)
        a = sfpm_forward(x.replace(x.features.astype(np.float32)), p, rbs)
        y = x.shifted(shift).replace(x.features.astype(np.float32))
        b = sfpm_forward(y, p, make_rulebooks(y, cfg))
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(b.coords[:, 1:], a.coords[:, 1:] + shift)


class TestBlock:
    def test_zero_weights_identity(self, rng):
        cfg = ModulatorConfig(4, 2)
        x = SparseTensor.from_unsorted(random_coords(rng, 20), rng.standard_normal((20, 4)))
        store = ParamStore(np.float64)
        init_block(store, "b", cfg, rng)
        for name in store.names():
            store.set(name, np.zeros_like(store[name]))
        y = sfp_block_forward(x, store, "b", cfg, make_rulebooks(x, cfg))
        assert np.array_equal(y.features, x.features)
        assert np.array_equal(y.coords, x.coords)

    def test_param_inventory(self):
        cfg = ModulatorConfig(4, 3)
        store = ParamStore()
        init_block(store, "b", cfg, np.random.default_rng(0))
        assert {n[2:] for n in store.names()} == set(block_param_shapes(cfg))
        assert store["b.mlp.fc1.w"].shape == (4, 16)

    def test_gradient_check(self):
        assert check_op("sfp_block", seed=11).passed

    def test_modulator_gradient_check(self):
        assert check_op("sfpm_forward", seed=5).max_rel_err < 1e-4


class TestExport:
    def test_grids(self, tmp_path):
        cfg = ModulatorConfig(4, 3)
        store = ParamStore()
        init_modulator(store, "m", cfg, np.random.default_rng(0))
        grids = level_kernel_grids(store, "m", cfg)
        assert [g.shape for g in grids] == [(3, 3, 3), (5, 5, 5), (7, 7, 7)]
        np.testing.assert_allclose(grids[1].ravel(), store["m.level1.w"].mean(axis=(1, 2)), atol=1e-8)
        path = tmp_path / "k.json"
        export_level_kernels([("down0", 0, l, g) for l, g in enumerate(grids)], path)
        doc = json.loads(path.read_text())
        assert [d["kernel_size"] for d in doc] == [3, 5, 7]
        assert [d["level"] for d in doc] == [1, 2, 3]
        assert np.asarray(doc[2]["grid"]).shape == (7, 7, 7)
