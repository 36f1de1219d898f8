import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from lipspot.kwsnet import (
    BiLSTM,
    BiLSTMLayer,
    KWSNet,
    KWSNetConfig,
    MaskedBatchNorm,
    bilstm_layer,
    ff_classify,
    fuse_keyword,
    length_mask,
    masked_max,
    reverse_within_length,
    seq_classify,
    seq_classify_scores,
    sequence_dropout_mask,
    video_embedding_classify,
)

import oracles

TINY = dict(d_feat=5, d_v=8, d_r=4, d_s=4, dropout_p=0.0)


def tiny_net(seed=0, dtype=torch.float64, **kw):
    torch.manual_seed(seed)
    return KWSNet(KWSNetConfig(**{**TINY, **kw})).to(dtype)


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


@pytest.mark.parametrize("T", [1, 7, 40])
def test_bilstm_layer_keeps_length(T):
    torch.manual_seed(0)
    layer = BiLSTMLayer(5, 8)
    assert bilstm_layer(layer, torch.randn(T, 5)).shape == (T, 8)


def test_bilstm_layer_zero_parameters():
    layer = BiLSTMLayer(5, 8)
    zero_(layer)
    assert torch.equal(bilstm_layer(layer, torch.randn(9, 5)), torch.zeros(9, 8))


def test_bilstm_direction_symmetry():
    torch.manual_seed(1)
    a = BiLSTM(3, 4)
    b = BiLSTM(3, 4)
    b.fwd.load_state_dict(a.bwd.state_dict())
    b.bwd.load_state_dict(a.fwd.state_dict())
    x = torch.randn(1, 6, 3)
    L = torch.tensor([6])
    out = a(x, L)[0]
    swapped = b(x.flip(1), L)[0]
    expected = torch.cat([out[:, 4:], out[:, :4]], dim=1).flip(0)
    assert torch.allclose(swapped, expected, atol=1e-6)


def test_bilstm_matches_packed_reference():
    from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

    torch.manual_seed(2)
    m = BiLSTM(5, 4)
    ref = torch.nn.LSTM(5, 4, batch_first=True, bidirectional=True)
    with torch.no_grad():
        for n in ("weight_ih", "weight_hh", "bias_ih", "bias_hh"):
            getattr(ref, n + "_l0").copy_(getattr(m.fwd, n + "_l0"))
            getattr(ref, n + "_l0_reverse").copy_(getattr(m.bwd, n + "_l0"))
    x = torch.randn(3, 7, 5)
    L = torch.tensor([7, 3, 5])
    packed = pack_padded_sequence(x, L, batch_first=True, enforce_sorted=False)
    expected, _ = pad_packed_sequence(ref(packed)[0], batch_first=True, total_length=7)
    assert torch.allclose(m(x, L), expected, atol=1e-6)


def test_reverse_within_length():
    x = torch.arange(5.0).reshape(1, 5, 1).repeat(2, 1, 1)
    out = reverse_within_length(x, torch.tensor([5, 3]))
    assert out[0, :, 0].tolist() == [4, 3, 2, 1, 0]
    assert out[1, :, 0].tolist() == [2, 1, 0, 3, 4]


def test_fuse_keyword():
    Y = torch.randn(2, 5, 256)
    r = torch.randn(2, 128)
    fused = fuse_keyword(Y, r, 128)
    assert fused.shape == (2, 5, 384)
    assert torch.equal(fuse_keyword(Y, torch.zeros(2, 128))[..., 256:], torch.zeros(2, 5, 128))
    other = fuse_keyword(Y, torch.randn(2, 128))
    assert torch.equal(other[..., :256], fused[..., :256])
    with pytest.raises(ValueError):
        fuse_keyword(Y, torch.randn(2, 64), 128)


def test_ff_zero_network_gives_one_half():
    net = tiny_net()
    zero_(net)
    assert float(ff_classify(net, torch.zeros(4, 8, dtype=torch.float64)).detach()) == 0.5


def test_ff_sum_aggregation():
    net = tiny_net()
    Z = torch.randn(1, 4, 8, dtype=torch.float64)
    v = net.ff.aggregate(Z, length_mask(torch.tensor([4]), 4))
    v2 = net.ff.aggregate(Z.repeat_interleave(2, dim=1), length_mask(torch.tensor([8]), 8))
    assert torch.allclose(v2, 2 * v)


def test_seq_closed_form():
    y = torch.tensor([0.1, 2.0, -1.0])
    out = seq_classify_scores(y, 3)
    assert float(out.p) == pytest.approx(1 / (1 + math.exp(-2.0)), abs=1e-7)
    assert float(out.p) == pytest.approx(0.8808, abs=1e-4)
    # 0-based: the second frame
    assert int(out.t_hat) == 1


def test_seq_ties_and_masking():
    y = torch.tensor([[1.0, 3.0, 3.0, 9.0]])
    top, idx = masked_max(y, torch.tensor([3]))
    assert float(top) == 3.0 and int(idx) == 1
    with pytest.raises(ValueError):
        masked_max(y, torch.tensor([0]))
    single = seq_classify_scores(torch.tensor([-4.0]), 1)
    assert int(single.t_hat) == 0


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12), st.floats(0.01, 3))
@settings(max_examples=50, deadline=None)
def test_raising_the_max_raises_p(values, bump):
    y = torch.tensor(values, dtype=torch.float64)
    out = seq_classify_scores(y, len(values))
    y2 = y.clone()
    y2[out.t_hat] += bump
    assert float(seq_classify_scores(y2, len(values)).p) > float(out.p) or float(out.p) == 1.0
    assert 0 <= int(out.t_hat) < len(values)


def test_seq_padding_invariance():
    net = tiny_net().eval()
    Z = torch.randn(5, 8, dtype=torch.float64)
    base = seq_classify(net, Z, 5)
    padded = torch.cat([Z, torch.randn(4, 8, dtype=torch.float64)])
    out = seq_classify(net, padded, 5)
    assert torch.allclose(out.p, base.p) and int(out.t_hat) == int(base.t_hat)
    with pytest.raises(ValueError):
        seq_classify(net, Z, 0)


def test_ff_padding_invariance():
    net = tiny_net().eval()
    Z = torch.randn(1, 5, 8, dtype=torch.float64)
    padded = torch.cat([Z, torch.randn(1, 3, 8, dtype=torch.float64)], dim=1)
    v = net.ff.aggregate(Z, length_mask(torch.tensor([5]), 5))
    vp = net.ff.aggregate(padded, length_mask(torch.tensor([5]), 8))
    assert torch.equal(v, vp)


def test_full_forward_padding_invariance():
    net = tiny_net(dropout_p=0.2)
    net.set_backend("sequence")
    net.eval()
    X = torch.randn(2, 9, 5, dtype=torch.float64)
    r = torch.randn(2, 4, dtype=torch.float64)
    batch = net(X, torch.tensor([9, 4]), r)
    alone = net(X[1:2, :4], torch.tensor([4]), r[1:2])
    assert torch.allclose(batch.p[1], alone.p[0]) and int(batch.t_hat[1]) == int(alone.t_hat[0])
    assert 0 <= int(batch.t_hat[1]) < 4


def test_video_embedding_range_and_determinism():
    net = tiny_net(dropout_p=0.2).eval()
    X = torch.randn(6, 5, dtype=torch.float64) * 10
    r = torch.randn(4, dtype=torch.float64)
    p = video_embedding_classify(net, X, r).detach()
    assert 0 < float(p) < 1
    assert torch.equal(p, video_embedding_classify(net, X, r))


def test_dropout_mask():
    assert torch.equal(sequence_dropout_mask((2, 5, 3), 0.0), torch.ones(2, 1, 3))
    assert torch.equal(sequence_dropout_mask((2, 5, 3), 0.5, training=False), torch.ones(2, 1, 3))
    g = torch.Generator().manual_seed(0)
    m = sequence_dropout_mask((10_000, 5, 8), 0.2, g)
    x = torch.randn(1, 5, 8) + 3
    mean = (x * m).mean(dim=0)
    assert torch.allclose(mean, x[0], rtol=0.02)
    # one mask per sequence, repeated over time
    assert (x * m)[:, 0].div(x[0, 0]).allclose((x * m)[:, 4].div(x[0, 4]))
    with pytest.raises(ValueError):
        sequence_dropout_mask((1, 1, 1), 1.0)


def test_masked_batch_norm_ignores_padding():
    torch.manual_seed(0)
    bn = MaskedBatchNorm(3)
    x = torch.randn(2, 6, 3)
    mask = length_mask(torch.tensor([6, 2]), 6)
    out = bn(x, mask)
    valid = torch.cat([x[0], x[1, :2]])
    expected = (valid - valid.mean(0)) / torch.sqrt(valid.var(0, unbiased=False) + 1e-5)
    assert torch.allclose(torch.cat([out[0], out[1, :2]]), expected, atol=1e-5)
    assert torch.equal(out[1, 2:], torch.zeros(4, 3))
    x2 = x.clone()
    x2[1, 2:] = 1e6
    bn2 = MaskedBatchNorm(3)
    assert torch.allclose(bn2(x2, mask), out)


def _check_gradients(net, loss_fn, extra=()):
    params = [p for p in net.parameters() if p.requires_grad] + list(extra)
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    numeric = oracles.finite_difference_grads(loss_fn, params)
    worst = max(oracles.relative_error(a, n) for a, n in zip(analytic, numeric))
    assert worst < 1e-4


def bce(p, label):
    return -(label * torch.log(p) + (1 - label) * torch.log(1 - p)).sum()


def test_gradient_ff_classify():
    net = tiny_net(4)
    Z = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    _check_gradients(net.ff, lambda: bce(ff_classify(net, Z), 1.0), [Z])


def test_gradient_seq_classify():
    net = tiny_net(5)
    Z = torch.randn(6, 8, dtype=torch.float64, requires_grad=True)
    _check_gradients(net.seq, lambda: bce(seq_classify(net, Z, 6).p, 0.0), [Z])


def test_gradient_video_embedding():
    net = tiny_net(6)
    X = torch.randn(2, 5, 5, dtype=torch.float64)
    r = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([1.0, 0.0], dtype=torch.float64)
    _check_gradients(net.videoemb, lambda: bce(video_embedding_classify(net, X, r), labels), [r])


@pytest.mark.parametrize("backend", ["feed-forward", "sequence"])
def test_gradient_full_network(backend):
    net = tiny_net(7)
    net.set_backend(backend)
    X = torch.randn(2, 6, 5, dtype=torch.float64)
    lengths = torch.tensor([6, 4])
    r = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    pair_video = torch.tensor([0, 1, 1])
    labels = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
    _check_gradients(net, lambda: bce(net(X, lengths, r, pair_video).p, labels), [r])
