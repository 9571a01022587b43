import numpy as np
import pytest

from lipar.autodiff import Tensor, backward, no_grad, softmax_cross_entropy
from lipar.autodiff import functional as F
from lipar.autodiff.lstm import lstm_param_count
from lipar.model import (
    BranchSpec,
    CheckpointError,
    ModelParams,
    SizeReport,
    analytic_param_count,
    branch_forward,
    build_dwparnet,
    build_stparnet,
    canonical_branches,
    combine_logits,
    dwparnet_forward,
    fuse_spatial,
    fusion_forward,
    load_checkpoint,
    save_checkpoint,
    size_report,
    stparnet_forward,
)


@pytest.fixture(scope="module")
def model():
    return build_stparnet(seed=3)


def _batch(n, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.random((n, 3, 9, 9), dtype=np.float32)
    seqs = np.ascontiguousarray(images.reshape(n, 27, 9).transpose(1, 0, 2))
    return images, seqs


def test_branch_count_and_fusion_width(model):
    names = [b.name for b in model.branches]
    assert names == ["branch1", "branch2", "branch3", "branch4", "fusion"]
    fusion = model.spec("fusion")
    assert fusion.input_shape == (512, 2, 2)
    assert fusion.layers[0].in_ch == 512 and fusion.layers[0].out_ch == 192


def test_kernel_sizes_are_1_or_3():
    for b in canonical_branches("st"):
        for l in b.layers:
            if l.kind in ("pw", "dw", "conv"):
                assert l.kernel in (1, 3)
            if l.kind == "pw":
                assert l.kernel == 1
            if l.kind == "dw":
                assert l.kernel == 3


def test_same_seed_bit_identical():
    a, b = build_stparnet(11), build_stparnet(11)
    assert a.tensors.keys() == b.tensors.keys()
    for k in a.tensors:
        assert np.array_equal(a.tensors[k].data, b.tensors[k].data)
    c = build_stparnet(12)
    assert not np.array_equal(a.tensors["fusion.conv.weight"].data, c.tensors["fusion.conv.weight"].data)


def test_every_param_belongs_to_one_unit(model):
    owners = {}
    for unit in model.unit_names:
        for k in model.unit_params(unit):
            assert k not in owners
            owners[k] = unit
    assert set(owners) == set(model.tensors)


@pytest.mark.parametrize("branch,channels", [(1, 64), (2, 256), (3, 192)])
@pytest.mark.parametrize("n", [1, 8])
def test_spatial_branch_shapes(model, branch, channels, n):
    images, _ = _batch(n)
    with no_grad():
        out = branch_forward(model, branch, images)
    assert out.shape == (n, channels, 2, 2)


def test_branch4_shape_and_zero_params():
    m = build_stparnet(0)
    _, seqs = _batch(6)
    with no_grad():
        assert branch_forward(m, 4, seqs).shape == (6, 5)
    for k, t in m.unit_params("branch4").items():
        t.data[...] = 0
    with no_grad():
        logits = branch_forward(m, 4, np.zeros((27, 4, 9), np.float32)).data
    assert np.all(logits == logits[0, 0])
    np.testing.assert_allclose(F.softmax(logits), 0.2, atol=1e-7)


@pytest.mark.parametrize("branch,shape", [(1, (4, 3, 9, 8)), (2, (4, 1, 9, 9)), (3, (3, 9, 9)), (4, (26, 4, 9)), (4, (27, 4, 8))])
def test_branch_rejects_bad_shapes(model, branch, shape):
    with pytest.raises(ValueError):
        branch_forward(model, branch, np.zeros(shape, np.float32))


def test_branch_order_independent(model):
    images, seqs = _batch(5, seed=1)
    inputs = {1: images, 2: images, 3: images, 4: seqs}
    with no_grad():
        forward_order = {b: branch_forward(model, b, inputs[b]).data for b in (1, 2, 3, 4)}
        reverse_order = {b: branch_forward(model, b, inputs[b]).data for b in (4, 3, 2, 1)}
    for b in forward_order:
        assert np.array_equal(forward_order[b], reverse_order[b])


@pytest.mark.parametrize("n", [1, 3, 17])
def test_dwparnet_shape_and_eval_determinism(model, n):
    images, _ = _batch(n)
    with no_grad():
        a = dwparnet_forward(model, images).data
        b = dwparnet_forward(model, images).data
    assert a.shape == (n, 5)
    assert np.array_equal(a, b)


def test_dwparnet_equals_explicit_pipeline(model):
    images, _ = _batch(7, seed=2)
    with no_grad():
        feats = [branch_forward(model, b, images).data for b in (1, 2, 3)]
        manual = fusion_forward(model, np.concatenate(feats, axis=1)).data
        direct = dwparnet_forward(model, images).data
    assert np.array_equal(manual, direct)


def test_fusion_rejects_wrong_width(model):
    with pytest.raises(ValueError):
        fusion_forward(model, np.zeros((2, 448, 2, 2), np.float32))


def test_stparnet_is_mean_of_parts(model):
    images, seqs = _batch(9, seed=4)
    with no_grad():
        spatial = dwparnet_forward(model, images).data
        temporal = branch_forward(model, 4, seqs).data
        out = stparnet_forward(model, images, seqs).data
    assert np.array_equal(out, (spatial + temporal) * np.float32(0.5))
    np.testing.assert_allclose(out, (spatial.astype(np.float64) + temporal) / 2, atol=1e-6)


def test_combine_logits_symmetry():
    rng = np.random.default_rng(0)
    L = rng.standard_normal((4, 5)).astype(np.float32)
    assert np.array_equal(combine_logits(Tensor(L), Tensor(L)).data, L)
    zero = combine_logits(Tensor(L), Tensor(-L)).data
    assert np.all(zero == 0)
    np.testing.assert_allclose(F.softmax(zero), 0.2)


def test_stparnet_batch_mismatch(model):
    images, _ = _batch(4)
    _, seqs = _batch(5)
    with pytest.raises(ValueError, match="items"):
        stparnet_forward(model, images, seqs)


def test_stparnet_needs_temporal_branch():
    m = build_dwparnet(0)
    assert "branch4" not in m.unit_names
    images, seqs = _batch(2)
    with pytest.raises(ValueError):
        stparnet_forward(m, images, seqs)


@pytest.mark.parametrize("zeroed", ["branch1", "branch2", "branch3", "branch4"])
def test_branches_parameter_disjoint(zeroed):
    m = build_stparnet(5)
    images, seqs = _batch(3, seed=5)
    inputs = {"branch1": images, "branch2": images, "branch3": images, "branch4": seqs}
    with no_grad():
        before = {b: branch_forward(m, b, inputs[b]).data for b in inputs}
        for t in m.unit_params(zeroed).values():
            t.data[...] = 0
        after = {b: branch_forward(m, b, inputs[b]).data for b in inputs}
    for b in inputs:
        if b == zeroed:
            assert not np.array_equal(before[b], after[b])
        else:
            assert np.array_equal(before[b], after[b])


def test_param_counts_match_analytic(model):
    for spec in model.branches:
        assert model.param_count(spec.name) == analytic_param_count(spec)
    assert model.param_count("branch4") == lstm_param_count(9, 32, 2) + 32 * 5 + 5
    # fusion: 3x3 conv 512->192, BN, linear 192->5
    assert model.param_count("fusion") == 9 * 512 * 192 + 2 * 192 + 192 * 5 + 5


def test_size_report_values(model):
    rep = size_report(model)
    b4 = rep.unit("branch4")
    assert round(b4.param_mb, 2) == 0.05
    assert b4.param_mb == pytest.approx(4 * 13861 / 2 ** 20)
    for u in rep.units:
        assert u.total_mb == pytest.approx(u.fwd_bwd_mb + u.param_mb)
    assert rep.total.total_mb == pytest.approx(sum(u.total_mb for u in rep.units))
    assert rep.total.param_count == sum(t.size for t in model.tensors.values())
    totals = {u.name: u.total_mb for u in rep.units}
    assert totals["branch2"] > totals["branch3"] > totals["branch1"] > totals["branch4"]


def test_size_report_branch1_hand_trace(model):
    # per item: pw (64*9*9) + dw stride 1 (64*9*9) + pool (64*2*2)
    acts = 64 * 81 * 2 + 64 * 4
    assert size_report(model).unit("branch1").activation_count == acts
    assert size_report(model, batch_size=4).unit("branch1").activation_count == acts


def test_size_report_empty_unit():
    empty = ModelParams("dw", (BranchSpec("branch1", (), (3, 9, 9), (3, 9, 9)),), {}, {})
    rep = size_report(empty)
    u = rep.unit("branch1")
    assert (u.fwd_bwd_mb, u.param_mb, u.total_mb) == (0, 0, 0)
    assert isinstance(rep, SizeReport) and rep.total.total_mb == 0


def _trained_a_bit(seed=0):
    m = build_stparnet(seed)
    images, seqs = _batch(8, seed=seed)
    labels = np.arange(8) % 5
    loss = softmax_cross_entropy(stparnet_forward(m, images, seqs, training=True, rng=np.random.default_rng(0)), labels)
    backward(loss)
    for t in m.tensors.values():
        t.data -= 0.01 * t.grad
    return m


def test_checkpoint_round_trip(tmp_path):
    m = _trained_a_bit()
    images, seqs = _batch(6, seed=9)
    p1, p2 = tmp_path / "a.lipc", tmp_path / "b.lipc"
    save_checkpoint(m, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for k, s in m.bn.items():
        assert np.array_equal(s.mean, loaded.bn[k].mean)
        assert np.array_equal(s.var, loaded.bn[k].var)
    assert not np.allclose(m.bn["branch1.pw1.bn"].mean, 0)
    with no_grad():
        assert np.array_equal(stparnet_forward(m, images, seqs).data, stparnet_forward(loaded, images, seqs).data)


def test_checkpoint_dw_variant(tmp_path):
    m = build_dwparnet(2)
    save_checkpoint(m, tmp_path / "dw.lipc")
    loaded = load_checkpoint(tmp_path / "dw.lipc")
    assert loaded.variant == "dw" and loaded.unit_names == m.unit_names


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "m.lipc"
    save_checkpoint(build_dwparnet(0), p)
    blob = bytearray(p.read_bytes())
    blob[0:4] = b"XXXX"
    p.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_checkpoint_bad_version(tmp_path):
    p = tmp_path / "m.lipc"
    save_checkpoint(build_dwparnet(0), p)
    blob = bytearray(p.read_bytes())
    blob[4] = 99
    p.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)


def test_checkpoint_truncated(tmp_path):
    p = tmp_path / "m.lipc"
    save_checkpoint(build_dwparnet(0), p)
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(p)


def test_fuse_spatial_gradient_reaches_all_spatial_branches():
    m = build_dwparnet(1)
    images, _ = _batch(4)
    feats = [branch_forward(m, b, images, training=True) for b in (1, 2, 3)]
    loss = softmax_cross_entropy(fuse_spatial(m, feats, training=True, rng=np.random.default_rng(0)), np.array([0, 1, 2, 3]))
    backward(loss)
    for unit in ("branch1", "branch2", "branch3", "fusion"):
        assert any(np.any(t.grad != 0) for t in m.unit_params(unit).values())
