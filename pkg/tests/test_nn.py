"""Network construction, shape propagation, and dropout-branch enumeration."""

import numpy as np
import pytest

from collabnn import tensor as T
from collabnn.nn import (
    BuildError,
    build_network,
    conv_spec,
    default_arch,
    dropout_spec,
    flatten_spec,
    forward_branches,
    forward_local_head,
    linear_spec,
    pool_spec,
    project,
)
from collabnn.rng import substream
from collabnn.tensor import Tensor


def tiny_arch(m=4):
    return [
        conv_spec(4, group=0),
        conv_spec(4, group=1),
        pool_spec(2),
        flatten_spec(),
        dropout_spec(0.5),
        linear_spec(8),
        dropout_spec(0.5),
        linear_spec(m),
    ]


def make_net(m=4, seed=0, dtype=np.float64, arch=None, input_shape=(1, 8, 8)):
    return build_network(arch or tiny_arch(m), m, input_shape, seed, dtype)


class TestBuild:
    def test_counts(self):
        net = make_net()
        assert net.N == 2
        assert net.n_dropout == 2
        assert len(net.local_heads) == 2
        assert len(net.projections) == 2

    def test_empty_trunk_rejected(self):
        with pytest.raises(BuildError):
            build_network([flatten_spec(), linear_spec(4)], 4, (1, 8, 8), 0)

    def test_default_arch_shape_checks(self):
        net = build_network(default_arch(m=4), 4, (1, 16, 16), 0)
        assert net.N == 3 and net.n_dropout == 2
        x = Tensor(np.zeros((2, 1, 16, 16)))
        _, outs, trunk_out = net.forward_trunk(x, train=False)
        assert [o.shape for o in outs] == [(2, 8, 16, 16), (2, 16, 8, 8), (2, 16, 4, 4)]
        assert trunk_out.shape == (2, 16, 4, 4)
        assert net.forward_head(trunk_out, None).shape == (2, 4)

    def test_final_linear_must_match_classes(self):
        arch = tiny_arch(m=5)
        with pytest.raises(BuildError):
            build_network(arch, 4, (1, 8, 8), 0)

    def test_input_shape_mismatch(self):
        net = make_net()
        with pytest.raises(BuildError):
            net.forward_trunk(Tensor(np.zeros((1, 2, 8, 8))), train=False)

    def test_same_seed_same_params(self):
        a = make_net(seed=7).parameters()
        b = make_net(seed=7).parameters()
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_init_scale(self):
        net = make_net(seed=3)
        w = net.blocks[0].weight.data
        bound = np.sqrt(1.0 / (1 * 3 * 3))
        assert np.all(np.abs(w) <= bound)
        np.testing.assert_array_equal(net.blocks[0].gamma.data, np.ones(4))
        np.testing.assert_array_equal(net.blocks[0].beta.data, np.zeros(4))


class TestTrunk:
    def test_returns_every_block_output(self):
        net = make_net()
        x = Tensor(np.random.default_rng(0).random((3, 1, 8, 8)))
        inputs, outs, _ = net.forward_trunk(x, train=True)
        assert len(outs) == 2 and len(inputs) == 2
        assert inputs[0] is x

    def test_eval_forward_is_pure(self):
        net = make_net()
        x = Tensor(np.random.default_rng(1).random((2, 1, 8, 8)))
        _, outs1, t1 = net.forward_trunk(x, train=False)
        _, outs2, t2 = net.forward_trunk(x, train=False)
        np.testing.assert_array_equal(t1.data, t2.data)
        for a, b in zip(outs1, outs2):
            np.testing.assert_array_equal(a.data, b.data)


class TestBranches:
    @pytest.mark.parametrize("K,expected", [(1, 1), (2, 4), (3, 9)])
    def test_branch_counts(self, K, expected):
        net = make_net()  # two dropout layers in the head
        x = Tensor(np.random.default_rng(2).random((2, 1, 8, 8)))
        _, _, trunk_out = net.forward_trunk(x, train=False)
        branches = forward_branches(net, trunk_out, K, substream(0, 99))
        assert len(branches.logits) == expected
        assert all(z.shape == (2, 4) for z in branches.logits)

    @pytest.mark.parametrize("K", [1, 2, 3])
    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_branch_count_grid(self, K, n):
        arch = [conv_spec(2), flatten_spec()]
        for _ in range(n):
            arch += [dropout_spec(0.5)]
        arch += [linear_spec(3)]
        net = build_network(arch, 3, (1, 4, 4), 0, np.float64)
        x = Tensor(np.random.default_rng(3).random((2, 1, 4, 4)))
        _, _, trunk_out = net.forward_trunk(x, train=False)
        branches = forward_branches(net, trunk_out, K, substream(0, 98))
        assert len(branches.logits) == K ** n

    def test_same_masks_same_logits(self):
        net = make_net()
        x = Tensor(np.random.default_rng(4).random((2, 1, 8, 8)))
        _, _, trunk_out = net.forward_trunk(x, train=False)
        masks = net.sample_masks(2, 2, substream(0, 97))
        b1 = forward_branches(net, trunk_out, 2, masks=masks)
        b2 = forward_branches(net, trunk_out, 2, masks=masks)
        for z1, z2 in zip(b1.logits, b2.logits):
            np.testing.assert_array_equal(z1.data, z2.data)

    def test_branches_share_trunk(self):
        net = make_net()
        x = Tensor(np.random.default_rng(5).random((2, 1, 8, 8)))
        _, _, t1 = net.forward_trunk(x, train=False)
        _, _, t2 = net.forward_trunk(x, train=False)
        np.testing.assert_array_equal(t1.data, t2.data)

    def test_k1_single_forward_matches_manual(self):
        net = make_net()
        x = Tensor(np.random.default_rng(6).random((2, 1, 8, 8)))
        _, _, trunk_out = net.forward_trunk(x, train=False)
        masks = net.sample_masks(2, 1, substream(0, 96))
        branches = forward_branches(net, trunk_out, 1, masks=masks)
        direct = net.forward_head(trunk_out, [masks[0][0], masks[1][0]])
        np.testing.assert_array_equal(branches.logits[0].data, direct.data)


class TestLocalHeadsAndProjections:
    def test_local_head_output_columns(self):
        net = make_net(m=4)
        x = Tensor(np.random.default_rng(7).random((3, 1, 8, 8)))
        _, outs, _ = net.forward_trunk(x, train=False)
        for i in (1, 2):
            assert forward_local_head(net, i, outs[i - 1]).shape == (3, 4)

    def test_zero_activation_gives_fc_bias(self):
        net = make_net()
        zeros = Tensor(np.zeros((2, 4, 8, 8)))
        out = forward_local_head(net, 1, zeros)
        np.testing.assert_array_equal(
            out.data, np.tile(net.local_heads[0].fc_bias.data, (2, 1))
        )

    def test_identity_projection_at_init(self):
        net = make_net()
        x = Tensor(np.random.default_rng(8).random((2, 1, 8, 8)))
        _, outs, _ = net.forward_trunk(x, train=False)
        for i in (1, 2):
            proj = project(net, i, outs[i - 1])
            assert proj.shape == outs[i - 1].shape
            np.testing.assert_allclose(proj.data, outs[i - 1].data, atol=1e-12)

    def test_zero_projection_gives_zero_map(self):
        net = make_net()
        net.projections[0].data[:] = 0.0
        x = Tensor(np.random.default_rng(9).random((2, 1, 8, 8)))
        _, outs, _ = net.forward_trunk(x, train=False)
        np.testing.assert_array_equal(project(net, 1, outs[0]).data, 0.0)

    def test_index_out_of_range(self):
        net = make_net()
        x = Tensor(np.zeros((2, 4, 8, 8)))
        with pytest.raises(BuildError):
            forward_local_head(net, 3, x)
        with pytest.raises(BuildError):
            project(net, 0, x)

    def test_local_head_gradient_through_hard_loss(self):
        from collabnn.losses import j_hard

        net = make_net(dtype=np.float64)
        x = T.constant(np.random.default_rng(10).random((3, 1, 8, 8)))
        y = np.eye(4)[[0, 1, 2]]

        def loss():
            _, outs, _ = net.forward_trunk(x, train=True, update_running=False)
            z = forward_local_head(net, 1, outs[0])
            return j_hard(y, z, 2.0)

        lh = net.local_heads[0]
        for p in (lh.conv_weight, lh.fc_weight, lh.fc_bias):
            assert T.finite_diff_check(loss, p) < 1e-4
