import copy

import numpy as np
import pytest

from voxelseg.errors import ConfigError, FormatError, ShapeError
from voxelseg.network import (
    DropoutSpec,
    NetworkConfig,
    NodeSpec,
    build_network,
    grid_alignment,
    load_checkpoint,
    output_shape,
    receptive_field,
    save_checkpoint,
    walk_grid,
)
from voxelseg.tensor import Tape, Tensor, backward, reduce_sum

from conftest import ConstantRng, benchmark_config, chain_config, downsample_config, reference_config


def single_conv_config(kernel=(3, 3, 3), stride=(1, 1, 1), extra=None):
    nodes = [
        NodeSpec(id="c1", op="conv", inputs=["input"], features=2,
                 kernel=kernel, stride=stride, preact=False),
    ]
    prev = "c1"
    for i, (k, s) in enumerate(extra or []):
        nid = f"c{i + 2}"
        nodes.append(NodeSpec(id=nid, op="conv", inputs=[prev], features=2,
                              kernel=k, stride=s, preact=True))
        prev = nid
    # six 1x1x1 blocks so the aux-head invariant holds without changing geometry
    for i in range(6):
        nid = f"pb{i}"
        nodes.append(NodeSpec(id=nid, op="block", inputs=[prev], kind="plain",
                              features=2, kernel=(1, 1, 1)))
        prev = nid
    return NetworkConfig(name="probe", in_features=1, nodes=nodes,
                         final_head=prev, aux_heads=[f"pb{i}" for i in range(6)])


class TestConfigValidation:
    def test_seven_aux_heads_rejected(self):
        cfg = chain_config()
        cfg.aux_heads = cfg.aux_heads + ["b1x"]
        with pytest.raises(ConfigError, match="6 auxiliary heads"):
            cfg.validate()

    def test_five_aux_heads_rejected(self):
        cfg = chain_config()
        cfg.aux_heads = cfg.aux_heads[:5]
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_unknown_input_rejected(self):
        cfg = chain_config()
        cfg.nodes[2].inputs = ["nonexistent"]
        with pytest.raises(ConfigError, match="nonexistent"):
            cfg.validate()

    def test_residual_feature_change_rejected(self):
        cfg = chain_config()
        cfg.nodes[3].features = 5
        with pytest.raises(ConfigError, match="residual"):
            cfg.validate()

    def test_dropout_invariants(self):
        cfg = chain_config()
        cfg.nodes[2].dropout = DropoutSpec(position="pre_add", p=1.0)
        with pytest.raises(ConfigError):
            cfg.validate()
        cfg.nodes[2].dropout = DropoutSpec(position="sideways", p=0.5)
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_dangling_node_rejected(self):
        cfg = chain_config()
        cfg.nodes.append(NodeSpec(id="orphan", op="conv", inputs=["b1"],
                                  features=2, kernel=(1, 1, 1)))
        with pytest.raises(ConfigError, match="orphan"):
            cfg.validate()

    def test_upsample_beyond_stride_rejected(self):
        cfg = single_conv_config()
        cfg.nodes.insert(1, NodeSpec(id="up", op="upsample", inputs=["c1"],
                                     factors=(2, 2, 2)))
        cfg.nodes[2].inputs = ["up"]  # pb0 now reads from up
        with pytest.raises(ConfigError, match="factor"):
            cfg.validate()

    def test_json_roundtrip(self, tmp_path):
        cfg = downsample_config()
        path = tmp_path / "net.json"
        cfg.to_json(path)
        loaded = NetworkConfig.from_json(path)
        assert loaded.to_dict() == cfg.to_dict()
        assert loaded.config_hash() == cfg.config_hash()


class TestReceptiveField:
    def test_single_conv(self):
        cfg = single_conv_config(kernel=(3, 3, 3))
        assert receptive_field(cfg) == (3, 3, 3)

    def test_chain_formula(self):
        # k3/s1 then k3/s2 then k3/s1: 1 + 2 + 2 + 4 = 9 on strided axes
        cfg = single_conv_config(
            kernel=(3, 3, 3),
            extra=[((3, 3, 3), (2, 2, 2)), ((3, 3, 3), (1, 1, 1))],
        )
        assert receptive_field(cfg) == (9, 9, 9)

    def test_reference_config_matches_stated_field(self):
        cfg = reference_config()
        assert receptive_field(cfg) == (37, 85, 85)

    def test_benchmark_config(self):
        cfg = benchmark_config()
        rf = receptive_field(cfg)
        assert rf == (17, 45, 45)


class TestOutputShape:
    def test_single_valid_conv(self):
        cfg = single_conv_config(kernel=(3, 3, 3))
        assert output_shape(cfg, (10, 10, 10)) == (8, 8, 8)

    def test_input_below_receptive_field_rejected(self):
        cfg = single_conv_config(kernel=(3, 3, 3))
        with pytest.raises(ShapeError):
            output_shape(cfg, (2, 10, 10))

    def test_matches_actual_forward_small(self, tiny_unet_cfg):
        in_spatial = (3, 34, 46)
        predicted = output_shape(tiny_unet_cfg, in_spatial)
        net = build_network(tiny_unet_cfg, seed=1)
        x = Tensor(np.random.default_rng(0).normal(size=(1,) + in_spatial)
                   .astype(np.float32))
        main, aux = net.forward_logits(x, "train", rng=np.random.default_rng(1))
        assert main.shape[1:] == predicted
        for a in aux:
            assert a.shape[1:] == predicted

    def test_matches_actual_forward_benchmark(self):
        cfg = benchmark_config()
        predicted = output_shape(cfg, (20, 48, 48))
        net = build_network(cfg, seed=0)
        x = Tensor(np.random.default_rng(2).normal(size=(1, 20, 48, 48))
                   .astype(np.float32))
        main, _ = net.forward_logits(x, "train", rng=np.random.default_rng(3))
        assert main.shape[1:] == predicted


class TestBuild:
    def test_same_seed_is_bit_identical(self, tiny_unet_cfg):
        n1 = build_network(tiny_unet_cfg, seed=7)
        n2 = build_network(tiny_unet_cfg, seed=7)
        assert n1.parameter_names() == n2.parameter_names()
        for k in n1.params:
            assert np.array_equal(n1.params[k].data, n2.params[k].data)

    def test_different_seed_differs(self, tiny_unet_cfg):
        n1 = build_network(tiny_unet_cfg, seed=7)
        n2 = build_network(tiny_unet_cfg, seed=8)
        assert any(
            not np.array_equal(n1.params[k].data, n2.params[k].data)
            for k in n1.params if k.endswith(".w")
        )

    def test_parameter_count_matches_shape_walk(self):
        # independent walk over the raw config dict
        cfg = benchmark_config()
        net = build_network(cfg, seed=0)
        d = cfg.to_dict()
        feats = {"input": d["in_features"]}
        expected = 0
        for n in d["nodes"]:
            if n["op"] == "conv":
                cin = feats[n["inputs"][0]]
                if n["preact"]:
                    expected += 2 * cin
                expected += n["features"] * cin * int(np.prod(n["kernel"]))
                feats[n["id"]] = n["features"]
            elif n["op"] == "block":
                cin = feats[n["inputs"][0]]
                f = n["features"]
                kvol = int(np.prod(n["kernel"]))
                expected += 2 * cin + f * cin * kvol + 2 * f + f * f * kvol
                feats[n["id"]] = f
            elif n["op"] == "upsample":
                feats[n["id"]] = feats[n["inputs"][0]]
            elif n["op"] == "concat":
                feats[n["id"]] = sum(feats[s] for s in n["inputs"])
        for src in d["aux_heads"]:
            expected += 2 * feats[src] + feats[src] + 1
        expected += 2 * feats[d["final_head"]] + feats[d["final_head"]] + 1
        assert net.num_parameters() == expected


class TestForward:
    def test_eval_twice_identical(self, tiny_chain_cfg):
        net = build_network(tiny_chain_cfg, seed=3)
        x = Tensor(np.random.default_rng(5).normal(size=(1, 2, 4, 40))
                   .astype(np.float32))
        net.forward_logits(x, "train", rng=np.random.default_rng(0))  # warm BN stats
        m1, a1 = net.forward(x, "eval")
        m2, a2 = net.forward(x, "eval")
        assert np.array_equal(m1.data, m2.data)
        for u, v in zip(a1, a2):
            assert np.array_equal(u.data, v.data)
        assert np.all((m1.data > 0) & (m1.data < 1))

    def test_train_dropout_draws_differ(self):
        cfg = chain_config(
            dropout_block="b3",
            dropout=DropoutSpec(position="pre_add", p=0.5),
        )
        net = build_network(cfg, seed=3)
        x = Tensor(np.random.default_rng(5).normal(size=(1, 2, 4, 40))
                   .astype(np.float32))
        m1, _ = net.forward_logits(x, "train", rng=np.random.default_rng(1))
        m2, _ = net.forward_logits(x, "train", rng=np.random.default_rng(2))
        assert not np.array_equal(m1.data, m2.data)

    def test_too_small_patch_names_requirement(self, tiny_chain_cfg):
        net = build_network(tiny_chain_cfg, seed=0)
        with pytest.raises(ShapeError, match="receptive field"):
            net.forward_logits(
                Tensor(np.zeros((1, 1, 1, 10), dtype=np.float32)), "train",
                rng=np.random.default_rng(0),
            )

    def test_residual_block_with_zero_final_conv_is_cropped_identity(self):
        cfg = chain_config(kind="residual")
        net = build_network(cfg, seed=2)
        node = cfg.node_map()["b1"]
        net.params["b1.c2.w"].data[:] = 0.0
        x = Tensor(np.random.default_rng(7).normal(size=(2, 3, 3, 11))
                   .astype(np.float32))
        out = net._run_block(node, x, "train", rng=np.random.default_rng(0))
        assert np.array_equal(out.data, x.data[:, :, :, 2:9])


class TestDropoutSkipProperty:
    """Zero dropout mask at pre_add: residual passes the skip, plain dies."""

    def _run(self, kind):
        cfg = chain_config(
            kind=kind,
            dropout_block="b1",
            dropout=DropoutSpec(position="pre_add", p=0.5),
        )
        net = build_network(cfg, seed=4)
        node = cfg.node_map()["b1"]
        x = Tensor(
            np.random.default_rng(8).normal(size=(2, 3, 3, 11)).astype(np.float32)
        )
        with Tape() as tape:
            tape.watch(x)
            out = net._run_block(node, x, "train", rng=ConstantRng(0.0))
            loss = reduce_sum(out)
        grad = backward(loss, tape)[x].data
        return x, out, grad

    def test_residual_output_equals_cropped_input(self):
        x, out, grad = self._run("residual")
        assert np.array_equal(out.data, x.data[:, :, :, 2:9])
        assert np.any(grad != 0.0)

    def test_plain_output_is_zero_and_blocks_gradient(self):
        x, out, grad = self._run("plain")
        assert np.all(out.data == 0.0)
        assert np.all(grad == 0.0)


class TestPlainVsResidual:
    def test_residual_equals_plain_plus_skip(self):
        cfg_r = chain_config(kind="residual")
        cfg_p = chain_config(kind="plain")
        net_r = build_network(cfg_r, seed=11)
        net_p = build_network(cfg_p, seed=11)
        for k in net_r.params:
            assert np.array_equal(net_r.params[k].data, net_p.params[k].data)
        x = Tensor(np.random.default_rng(9).normal(size=(2, 3, 3, 11))
                   .astype(np.float32))
        node_r = cfg_r.node_map()["b1"]
        node_p = cfg_p.node_map()["b1"]
        out_r = net_r._run_block(node_r, x, "train", rng=None)
        out_p = net_p._run_block(node_p, x, "train", rng=None)
        from voxelseg.layers import crop_center
        from voxelseg.tensor import add

        skip = crop_center(x, out_p.shape[1:])
        assert np.array_equal(out_r.data, add(skip, out_p).data)


class TestTranslationCovariance:
    def test_shift_by_total_stride_moves_output_one_voxel(self):
        cfg = single_conv_config(kernel=(1, 3, 3), stride=(1, 2, 2))
        net = build_network(cfg, seed=5)
        for s in net.bn.values():
            s.set_running(np.zeros(s.gamma.data.size), np.ones(s.gamma.data.size))
        rng = np.random.default_rng(13)
        base = rng.normal(size=(1, 1, 13, 13)).astype(np.float32)
        shifted = base[:, :, 2:, 2:]
        m0, _ = net.forward_logits(Tensor(base), "eval")
        m1, _ = net.forward_logits(Tensor(shifted), "eval")
        # output voxel i of the shifted input equals voxel i+1 of the original
        n = m1.shape
        assert np.allclose(
            m1.data, m0.data[:, :, 1 : 1 + n[2], 1 : 1 + n[3]], atol=1e-6
        )


class TestGradientFlow:
    def test_full_network_parameter_gradients_nonzero(self, tiny_unet_cfg):
        net = build_network(tiny_unet_cfg, seed=6)
        x = Tensor(np.random.default_rng(1).normal(size=(1, 3, 34, 46))
                   .astype(np.float32))
        with Tape() as tape:
            params = list(net.params.values())
            tape.watch(*params)
            main, aux = net.forward_logits(x, "train", rng=np.random.default_rng(2))
            loss = reduce_sum(main)
            for a in aux:
                loss = loss + reduce_sum(a)
        grads = backward(loss, tape)
        nonzero = sum(1 for p in params if np.any(grads[p].data != 0))
        assert nonzero > len(params) * 0.9


class TestCheckpoint:
    def test_save_load_save_is_byte_identical(self, tmp_path, tiny_unet_cfg):
        net = build_network(tiny_unet_cfg, seed=12)
        # make running stats non-trivial
        x = Tensor(np.random.default_rng(3).normal(size=(1, 3, 34, 46))
                   .astype(np.float32))
        net.forward_logits(x, "train", rng=np.random.default_rng(0))
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        rng_state = np.random.default_rng(42).bit_generator.state
        save_checkpoint(net, p1, epoch=3, rng_state=rng_state)
        loaded, header = load_checkpoint(p1)
        assert header["epoch"] == 3
        assert header["rng_state"] == rng_state
        save_checkpoint(loaded, p2, epoch=3, rng_state=rng_state)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_network_reproduces_outputs(self, tmp_path, tiny_unet_cfg):
        net = build_network(tiny_unet_cfg, seed=12)
        x = Tensor(np.random.default_rng(3).normal(size=(1, 3, 34, 46))
                   .astype(np.float32))
        net.forward_logits(x, "train", rng=np.random.default_rng(0))
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        loaded, _ = load_checkpoint(path)
        m0, _ = net.forward(x, "eval")
        m1, _ = loaded.forward(x, "eval")
        assert np.array_equal(m0.data, m1.data)

    def test_truncated_checkpoint_rejected(self, tmp_path, tiny_unet_cfg):
        net = build_network(tiny_unet_cfg, seed=1)
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 16])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_not_a_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"garbage")
        with pytest.raises(FormatError):
            load_checkpoint(path)


class TestAlignment:
    def test_reference_alignment_is_symmetric(self):
        cfg = reference_config()
        al = grid_alignment(cfg, (98, 178, 178))
        assert al.out_extent == (62, 94, 94)
        assert al.jump == (1, 1, 1)
        assert al.offset == (18, 42, 42)
        assert al.is_symmetric((98, 178, 178))

    def test_benchmark_alignment(self):
        cfg = benchmark_config()
        al = grid_alignment(cfg, (48, 96, 96))
        assert al.out_extent == (32, 52, 52)
        assert al.offset == (8, 22, 22)
        assert al.is_symmetric((48, 96, 96))

    def test_output_equals_input_minus_rf_plus_one(self):
        for cfg, spatial in [
            (reference_config(), (98, 178, 178)),
            (benchmark_config(), (48, 96, 96)),
        ]:
            rf = receptive_field(cfg)
            out = output_shape(cfg, spatial)
            assert out == tuple(n - r + 1 for n, r in zip(spatial, rf))
