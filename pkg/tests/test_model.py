"""Model geometry, routing, initialization, and forward-pass invariants."""

import numpy as np
import pytest

from mript import ops
from mript.autodiff import GradTape, Tensor, grad_check, mean_all, sum_all
from mript.degradation import MaskFamily
from mript.model import (ALL_FAMILIES, MRIPT, ModelConfig, TaskLabel,
                         _relative_index, _shifted_window_mask, desk_config,
                         pair_keys, param_count, paper_config, parameter_shapes,
                         resolve_family, resolve_ratio, tiny_config)


@pytest.fixture(scope="module")
def tiny_model():
    return MRIPT(tiny_config(), init_seed=0)


def tiny_image(seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((1, 16, 16), dtype=np.float32)


class TestTaskLabel:
    def test_family_coercion(self):
        lab = TaskLabel("gaussian1d", 4)
        assert lab.family is MaskFamily.GAUSSIAN_1D
        assert lab.acceleration == 4.0

    def test_rejects_bad_acceleration(self):
        with pytest.raises(ValueError):
            TaskLabel("random", 1.0)


class TestModelConfig:
    def test_presets(self):
        desk = desk_config()
        assert (desk.image_size, desk.patch_size, desk.embed_dim,
                desk.encoder_depth) == (64, 8, 96, 6)
        assert desk.grid_size == 8 and desk.token_count == 64
        paper = paper_config()
        assert (paper.image_size, paper.patch_size, paper.embed_dim,
                paper.encoder_depth, paper.num_heads) == (224, 16, 768, 24, 12)
        assert paper.grid_size == 14

    @pytest.mark.parametrize("bad", [
        dict(image_size=60),                   # not a multiple of patch
        dict(window_size=3),                   # grid 8 does not tile by 3
        dict(shift_size=4),                    # shift must stay below window
        dict(embed_dim=97),                    # heads must divide dim
        dict(variant="fused"),
        dict(ratios=(4.0, 2.0)),               # must ascend
        dict(ratios=(1.0, 2.0)),               # ratios > 1
        dict(ratios=()),
        dict(families=()),
        dict(families=("random", "random")),
    ])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            desk_config(**bad)

    def test_dict_round_trip(self):
        cfg = tiny_config()
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_mlp_hidden(self):
        assert desk_config().mlp_hidden == 384
        assert tiny_config().mlp_hidden == 32


class TestRouting:
    def test_pair_bank_sizes_by_variant(self):
        assert len(pair_keys(desk_config(variant="type"))) == 5
        assert len(pair_keys(desk_config(variant="level"))) == 4
        assert len(pair_keys(desk_config(variant="split"))) == 20

    def test_pair_key_names(self):
        assert pair_keys(desk_config(variant="type"))[:2] == ("x2", "x4")
        assert pair_keys(desk_config(variant="level"))[0] == "random"
        assert "gaussian1d-x8" in pair_keys(desk_config(variant="split"))

    def test_resolve_ratio_exact_then_next_higher_then_clamp(self):
        trained = (2.0, 4.0, 6.0, 8.0, 10.0)
        assert resolve_ratio(4.0, trained) == 4.0
        assert resolve_ratio(5.0, trained) == 6.0
        assert resolve_ratio(7.0, trained) == 8.0
        assert resolve_ratio(12.0, trained) == 10.0
        assert resolve_ratio(1.5, trained) == 2.0

    def test_resolve_family(self):
        trained = (MaskFamily.CARTESIAN_RANDOM, MaskFamily.GAUSSIAN_1D)
        assert resolve_family("gaussian1d", trained) is MaskFamily.GAUSSIAN_1D
        assert resolve_family("gaussian2d", trained) is MaskFamily.CARTESIAN_RANDOM
        no_random = (MaskFamily.CARTESIAN_EQUISPACED, MaskFamily.GAUSSIAN_2D)
        assert resolve_family("gaussian1d", no_random) is MaskFamily.CARTESIAN_EQUISPACED

    def test_route_by_variant(self):
        m_type = MRIPT(tiny_config(variant="type"))
        assert m_type.route(TaskLabel("random", 3.0)) == "x4"
        m_level = MRIPT(tiny_config(variant="level"))
        assert m_level.route(TaskLabel("gaussian2d", 4.0)) == "random"
        m_split = MRIPT(tiny_config(variant="split"))
        assert m_split.route(TaskLabel("equispaced", 2.0)) == "equispaced-x2"


class TestParameters:
    def test_shapes_match_built_params(self, tiny_model):
        declared = dict(parameter_shapes(tiny_model.config))
        assert set(declared) == set(tiny_model.params)
        for name, t in tiny_model.params.items():
            assert t.dims == declared[name], name
            assert t.requires_grad

    def test_group_totals(self):
        counts = param_count(tiny_config())
        groups = ("heads", "tails", "patch", "prompt", "encoder", "decoder")
        assert counts["total"] == sum(counts[g] for g in groups)
        assert counts["pairs"] == 4

    def test_pair_count_scales_parameters(self):
        level = param_count(desk_config(variant="level"))
        split = param_count(desk_config(variant="split"))
        assert split["heads"] == 5 * level["heads"]
        assert split["encoder"] == level["encoder"]

    def test_init_determinism_and_seed_variation(self):
        a = MRIPT(tiny_config(), init_seed=3)
        b = MRIPT(tiny_config(), init_seed=3)
        c = MRIPT(tiny_config(), init_seed=4)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)
        assert any(not np.array_equal(a.params[n].data, c.params[n].data)
                   for n in a.params)

    def test_init_values(self, tiny_model):
        p = tiny_model.params
        assert (p["enc0.norm1.g"].data == 1.0).all()
        assert (p["enc0.norm1.b"].data == 0.0).all()
        assert (p["head.random-x2.conv_in.b"].data == 0.0).all()
        w = p["enc0.attn.q.w"].data
        assert w.std() > 0.0
        assert np.abs(w).max() <= 0.04 + 1e-7  # truncated at two sigmas

    def test_grad_name_lookup(self, tiny_model):
        t = tiny_model.params["patch.pos"]
        assert tiny_model.grad_name(id(t)) == "patch.pos"
        assert tiny_model.grad_name(id(Tensor(np.zeros(1)))) is None

    def test_bank_views_share_storage(self, tiny_model):
        view = tiny_model.bank.heads["random-x2"]["conv_in.w"]
        assert view is tiny_model.params["head.random-x2.conv_in.w"]


class TestWindowing:
    def test_relative_index_encodes_displacement(self):
        w = 3
        idx = _relative_index(w).reshape(w * w, w * w)
        coords = [(i, j) for i in range(w) for j in range(w)]
        seen = {}
        for a, (ia, ja) in enumerate(coords):
            for b, (ib, jb) in enumerate(coords):
                disp = (ia - ib, ja - jb)
                if disp in seen:
                    assert idx[a, b] == seen[disp]
                else:
                    seen[disp] = idx[a, b]
        assert len(set(seen.values())) == (2 * w - 1) ** 2
        assert all(idx[a, a] == idx[0, 0] for a in range(w * w))

    def test_shift_mask_matches_region_bruteforce(self):
        grid, window, shift = 4, 2, 1
        mask = _shifted_window_mask(grid, window, shift)
        assert mask.shape == (4, 1, 4, 4)
        assert set(np.unique(mask).tolist()) <= {-1e9, 0.0}
        # rebuild regions directly: cells co-attend iff both their row spans
        # and their col spans agree on the rolled grid
        def span(c):
            if c < grid - window:
                return 0
            return 1 if c < grid - shift else 2
        nw = grid // window
        for wi in range(nw * nw):
            base_r, base_c = (wi // nw) * window, (wi % nw) * window
            cells = [(base_r + a // window, base_c + a % window)
                     for a in range(window * window)]
            for a, (ra, ca) in enumerate(cells):
                for b, (rb, cb) in enumerate(cells):
                    same = span(ra) == span(rb) and span(ca) == span(cb)
                    assert mask[wi, 0, a, b] == (0.0 if same else -1e9)

    def test_no_shift_when_grid_is_single_window(self):
        cfg = tiny_config(image_size=16, patch_size=4, window_size=4, shift_size=3)
        model = MRIPT(cfg)
        assert model._shift == 0
        assert model._shift_mask is None

    def test_window_partition_merge_inverse(self, tiny_model):
        g, d = tiny_model.config.grid_size, tiny_model.config.embed_dim
        x = Tensor(np.random.default_rng(0).standard_normal((g, g, d)).astype(np.float32))
        back = tiny_model._window_merge(tiny_model._window_partition(x))
        assert np.array_equal(back.data, x.data)

    def test_unshifted_block_commutes_with_window_swap(self, tiny_model):
        cfg = tiny_model.config
        g, w, d = cfg.grid_size, cfg.window_size, cfg.embed_dim
        rng = np.random.default_rng(1)
        x = rng.standard_normal((g * g, d)).astype(np.float32)

        def swap_windows(tokens):
            grid = tokens.reshape(g, g, d).copy()
            a = grid[0:w, 0:w].copy()
            grid[0:w, 0:w] = grid[w:2 * w, w:2 * w]
            grid[w:2 * w, w:2 * w] = a
            return grid.reshape(g * g, d)

        out_plain = tiny_model._wmsa(Tensor(x), block=0, shifted=False).data
        out_swapped = tiny_model._wmsa(Tensor(swap_windows(x)), block=0,
                                       shifted=False).data
        np.testing.assert_allclose(swap_windows(out_plain), out_swapped,
                                   rtol=1e-4, atol=1e-5)


class TestForward:
    def test_output_dims_and_dtype(self, tiny_model):
        out = tiny_model.forward(tiny_image(), TaskLabel("random", 4.0))
        assert out.dims == (1, 16, 16)
        assert out.dtype == np.float32

    def test_rejects_wrong_dims(self, tiny_model):
        with pytest.raises(ValueError):
            tiny_model.forward(np.zeros((1, 32, 32), dtype=np.float32),
                               TaskLabel("random", 4.0))

    def test_forward_deterministic(self, tiny_model):
        img = tiny_image(2)
        lab = TaskLabel("equispaced", 2.0)
        a = tiny_model.forward(img, lab).data
        b = tiny_model.forward(img, lab).data
        assert np.array_equal(a, b)

    def test_desk_forward_shape(self):
        model = MRIPT(desk_config(), init_seed=0)
        img = np.random.default_rng(0).random((1, 64, 64), dtype=np.float32)
        assert model.forward(img, TaskLabel("gaussian2d", 6.0)).dims == (1, 64, 64)

    def test_prompt_changes_output_without_changing_route(self):
        model = MRIPT(tiny_config(variant="level"), init_seed=0)
        img = tiny_image(3)
        a_lab, b_lab = TaskLabel("random", 2.0), TaskLabel("random", 4.0)
        assert model.route(a_lab) == model.route(b_lab)
        a = model.forward(img, a_lab).data
        b = model.forward(img, b_lab).data
        assert not np.array_equal(a, b)

    def test_unseen_label_falls_back_to_trained_prompt(self, tiny_model):
        img = tiny_image(4)
        between = tiny_model.forward(img, TaskLabel("random", 3.0)).data
        ceil = tiny_model.forward(img, TaskLabel("random", 4.0)).data
        assert np.array_equal(between, ceil)

    def test_input_changes_output(self, tiny_model):
        lab = TaskLabel("random", 2.0)
        a = tiny_model.forward(tiny_image(5), lab).data
        b = tiny_model.forward(tiny_image(6), lab).data
        assert not np.array_equal(a, b)

    def test_head_residual_blocks_reduce_to_conv_when_zeroed(self):
        model = MRIPT(tiny_config(), init_seed=1)
        key = "random-x2"
        img = Tensor(tiny_image(7))
        for r in (1, 2):
            for c in (1, 2):
                model.params[f"head.{key}.res{r}.conv{c}.w"].data[:] = 0.0
                model.params[f"head.{key}.res{r}.conv{c}.b"].data[:] = 0.0
        direct = ops.conv2d(img, model.params[f"head.{key}.conv_in.w"],
                            model.params[f"head.{key}.conv_in.b"], pad=1)
        np.testing.assert_array_equal(model.head_forward(key, img).data, direct.data)

    def test_prompt_tokens_shape(self, tiny_model):
        pr = tiny_model.encode_prompt(TaskLabel("random", 2.0))
        assert pr.dims == (2, tiny_model.config.embed_dim)

    def test_encoder_ignores_label(self, tiny_model):
        # the backbone is shared: identical tokens give identical encodings
        tok = Tensor(np.random.default_rng(8)
                     .standard_normal((16, 16)).astype(np.float32))
        a = tiny_model.encoder_forward(tok).data
        b = tiny_model.encoder_forward(tok).data
        assert np.array_equal(a, b)


class TestModelGradients:
    def test_full_model_grad_check_wrt_input(self):
        model = MRIPT(tiny_config(), init_seed=0, dtype=np.float64)
        lab = TaskLabel("random", 2.0)
        point = Tensor(np.random.default_rng(0).random((1, 16, 16)),
                       dtype=np.float64)
        err = grad_check(lambda x: model.forward(x, lab), point)
        assert err < 1e-3

    def test_full_model_grad_check_wrt_parameters(self):
        model = MRIPT(tiny_config(), init_seed=1, dtype=np.float64)
        lab = TaskLabel("equispaced", 4.0)
        img = np.random.default_rng(1).random((1, 16, 16))
        for pname in ("tail.equispaced-x4.out.w", "prompt.ratios",
                      "enc1.attn.bias"):
            orig = model.params[pname]

            def op(t, pname=pname, orig=orig):
                model.params[pname] = t
                try:
                    return model.forward(img, lab)
                finally:
                    model.params[pname] = orig

            point = Tensor(orig.data.copy(), dtype=np.float64)
            assert grad_check(op, point) < 1e-3, pname

    def test_loss_gradients_cover_routed_pair_only(self):
        model = MRIPT(tiny_config(), init_seed=2)
        lab = TaskLabel("random", 2.0)
        target = Tensor(tiny_image(10))
        with GradTape() as tape:
            pred = model.forward(tiny_image(9), lab)
            loss = mean_all(ops.absolute(ops.sub(pred, target)))
        tape.backward(loss)
        touched = {model.grad_name(tid) for tid in tape._grads}
        touched.discard(None)
        assert "head.random-x2.conv_in.w" in touched
        assert "tail.random-x2.out.w" in touched
        assert "enc0.attn.q.w" in touched
        assert "dec0.read.q.w" in touched
        assert not any(n.startswith(("head.equispaced", "tail.equispaced"))
                       for n in touched)

    def test_every_parameter_reachable_across_pair_cycle(self):
        model = MRIPT(tiny_config(), init_seed=3)
        labels = [TaskLabel(f, r) for f in ("random", "equispaced")
                  for r in (2.0, 4.0)]
        touched = set()
        for i, lab in enumerate(labels):
            with GradTape() as tape:
                out = sum_all(model.forward(tiny_image(20 + i), lab))
            tape.backward(out)
            touched |= {model.grad_name(tid) for tid in tape._grads}
        touched.discard(None)
        assert touched == set(model.param_names)
