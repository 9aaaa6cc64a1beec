import math

import pytest
import torch
from torch import nn

from models.config import LayerSpec, conv
from models.layers import (ConvBlock, ConvLSTMCell, ConvStack, Dense, FCHead, Frozen, RecurrentState,
                           ShapeError, StaleStateError, StreamState, check_stream, conv2d_forward,
                           fc_forward, init_parameters, make_adam, resample_grid, to_hwc, xavier_init)


def sigmoid(x):
    return 1 / (1 + math.exp(-x))


def test_conv2d_forward_oracle():
    x = torch.arange(9.).view(1, 1, 3, 3)
    spec = conv(1, 1, 2)
    weight = torch.ones(1, 1, 2, 2)
    y = conv2d_forward(x, spec, weight, torch.tensor([1.]))
    torch.testing.assert_close(y, torch.tensor([[[[9., 13.], [21., 25.]]]]))


def test_conv2d_forward_nested_loop_oracle():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 2, 9, 11, generator=g)
    weight = torch.randn(3, 2, 5, 5, generator=g)
    bias = torch.randn(3, generator=g)
    for stride in (1, 2):
        spec = conv(2, 3, 5, stride)
        y = conv2d_forward(x, spec, weight, bias)
        oh, ow = spec.output_size((9, 11))
        assert y.shape == (2, 3, oh, ow)
        expected = torch.empty_like(y)
        for n in range(2):
            for o in range(3):
                for i in range(oh):
                    for j in range(ow):
                        total = bias[o].item()
                        for c in range(2):
                            for u in range(5):
                                for v in range(5):
                                    total += x[n, c, i * stride + u, j * stride + v].item() * weight[o, c, u, v].item()
                        expected[n, o, i, j] = total
        torch.testing.assert_close(y, expected, rtol=0, atol=1e-12)


def test_conv2d_forward_stride():
    x = torch.arange(16.).view(1, 1, 4, 4)
    spec = conv(1, 1, 1, 2)
    y = conv2d_forward(x, spec, torch.ones(1, 1, 1, 1))
    torch.testing.assert_close(y, torch.tensor([[[[0., 2.], [8., 10.]]]]))


def test_conv2d_forward_shape_errors():
    spec = conv(3, 4, 3)
    with pytest.raises(ShapeError, match='3 input channels'):
        conv2d_forward(torch.zeros(1, 2, 8, 8), spec, torch.zeros(4, 3, 3, 3))
    with pytest.raises(ShapeError, match='smaller than kernel'):
        conv2d_forward(torch.zeros(1, 3, 2, 8), spec, torch.zeros(4, 3, 3, 3))


def test_conv_stack_reports_trace():
    stack = ConvStack([conv(3, 4, 3), conv(5, 4, 3)], norm=False)
    with pytest.raises(ShapeError, match='layer 1') as e:
        stack(torch.zeros(1, 3, 8, 8))
    assert '3x8x8 -> 4x6x6' in str(e.value)


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec(kind='pooling')
    with pytest.raises(ValueError):
        LayerSpec(kernel=(0, 3))
    with pytest.raises(ValueError):
        LayerSpec(dropout=1.5)
    assert conv(1, 1, (2, 5), 1).output_size((4, 11)) == (3, 7)


def test_fc_forward():
    x = torch.tensor([[1., -2.]])
    w = torch.tensor([[1., 1.], [2., 0.], [0., 1.]])
    b = torch.tensor([0., -1., 0.])
    torch.testing.assert_close(fc_forward(x, w, b), torch.tensor([[-1., 1., -2.]]))
    torch.testing.assert_close(fc_forward(x, w, b, 'relu'), torch.tensor([[0., 1., 0.]]))
    with pytest.raises(ShapeError):
        fc_forward(torch.zeros(1, 3), w)
    with pytest.raises(ValueError):
        fc_forward(x, w, b, 'gelu')


def test_fc_forward_nested_loop_oracle():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(4, 8, generator=g)
    w = torch.randn(3, 8, generator=g)
    b = torch.randn(3, generator=g)
    expected = torch.tensor([[b[o].item() + sum(x[n, k].item() * w[o, k].item() for k in range(8))
                              for o in range(3)] for n in range(4)])
    torch.testing.assert_close(fc_forward(x, w, b), expected, rtol=0, atol=1e-12)
    torch.testing.assert_close(fc_forward(x, w, b, 'relu'), expected.clamp(min=0), rtol=0, atol=1e-12)


def test_convlstm_scalar_oracle():
    cell = ConvLSTMCell(1, 1, (1, 1), kernel=1)
    bias = [0.3, -0.2, 0.5, 0.7]
    with torch.no_grad():
        cell.gates.weight.zero_()
        cell.gates.weight[:, 0] = torch.tensor([0.1, 0.2, -0.3, 0.4]).view(4, 1, 1)
        cell.gates.bias.copy_(torch.tensor(bias))
    x = torch.full((1, 1, 1, 1), 2.)
    state = RecurrentState(torch.zeros(1, 1, 1, 1), torch.full((1, 1, 1, 1), 0.5))
    h, new = cell(x, state)

    i, f, o, g = (w * 2 + b for w, b in zip((0.1, 0.2, -0.3, 0.4), bias))
    c = sigmoid(f) * 0.5 + sigmoid(i) * math.tanh(g)
    expected = sigmoid(o) * math.tanh(c)
    assert new.cell.item() == pytest.approx(c, rel=1e-12)
    assert h.item() == pytest.approx(expected, rel=1e-12)
    assert torch.equal(h, new.hidden)


def test_convlstm_shapes_and_errors():
    cell = ConvLSTMCell(4, 3, (9, 16))
    h, state = cell(torch.randn(2, 4, 9, 16))
    assert h.shape == (2, 3, 9, 16)
    assert state.cell.shape == (2, 3, 9, 16)
    with pytest.raises(ShapeError):
        cell(torch.randn(2, 4, 9, 15))
    with pytest.raises(ShapeError):
        cell(torch.randn(1, 4, 9, 16), state)
    with pytest.raises(ValueError):
        ConvLSTMCell(4, 3, (9, 16), kernel=2)


SEEDS = range(50)


@pytest.mark.parametrize('seed', SEEDS)
def test_convlstm_gradcheck(seed):
    torch.manual_seed(seed)
    cell = ConvLSTMCell(2, 2, (3, 4)).double()
    x = torch.randn(1, 2, 3, 4, requires_grad=True)
    h0 = torch.randn(1, 2, 3, 4, requires_grad=True)
    c0 = torch.randn(1, 2, 3, 4, requires_grad=True)

    def run(x, h0, c0):
        h, state = cell(x, RecurrentState(h0, c0))
        h, state = cell(x * 0.5, state)
        return h, state.cell

    assert torch.autograd.gradcheck(run, (x, h0, c0))


@pytest.mark.parametrize('seed', SEEDS)
def test_conv_block_gradcheck(seed):
    torch.manual_seed(seed)
    block = ConvBlock(conv(2, 3, 3, 2), norm=True).double()
    x = torch.randn(2, 2, 7, 7, requires_grad=True)
    assert torch.autograd.gradcheck(block, (x,))


@pytest.mark.parametrize('seed', SEEDS)
def test_dense_gradcheck(seed):
    torch.manual_seed(seed)
    layer = Dense(5, 3, activation=None).double()
    x = torch.randn(4, 5, requires_grad=True)
    assert torch.autograd.gradcheck(layer, (x,))


@pytest.mark.parametrize('seed', SEEDS)
def test_resample_gradcheck(seed):
    torch.manual_seed(seed)
    x = torch.randn(2, 7, 9, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: resample_grid(t, (3, 4)), (x,))
    assert torch.autograd.gradcheck(lambda t: resample_grid(t, (11, 13)), (x,))


def test_xavier_init():
    w = xavier_init((200, 300), seed=0)
    assert w.std().item() == pytest.approx(math.sqrt(2 / 500), rel=0.05)
    assert torch.equal(w, xavier_init((200, 300), seed=0))
    assert not torch.equal(w, xavier_init((200, 300), seed=1))
    with pytest.raises(ValueError):
        xavier_init((0, 3), seed=0)


@pytest.mark.parametrize('seed', range(5))
def test_xavier_variance_square_layer(seed):
    # fan_in = fan_out = 100: variance 2 / 200 over 10^4 draws
    w = xavier_init((100, 100), seed=seed)
    assert w.mean().item() == pytest.approx(0.0, abs=0.005)
    assert w.var().item() == pytest.approx(0.01, rel=0.06)


def test_init_parameters_is_seeded():
    a = init_parameters(nn.Sequential(nn.Conv2d(2, 4, 3), nn.Linear(4, 2)), seed=7)
    b = init_parameters(nn.Sequential(nn.Conv2d(2, 4, 3), nn.Linear(4, 2)), seed=7)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
    assert torch.count_nonzero(a[0].bias) == 0


def test_resample_grid_bilinear():
    x = torch.tensor([[0., 1.], [2., 3.]])
    y = resample_grid(x, (3, 3))
    torch.testing.assert_close(y, torch.tensor([[0., .5, 1.], [1., 1.5, 2.], [2., 2.5, 3.]]))
    assert resample_grid(x, (2, 2)) is x


def test_resample_grid_keeps_leading_axes():
    x = torch.rand(2, 3, 20, 40)
    y = resample_grid(x, (2, 4))
    assert y.shape == (2, 3, 2, 4)
    assert 0 <= y.min() and y.max() <= 1


def test_resample_constant_is_constant():
    y = resample_grid(torch.full((3, 720, 1280), 7.), (72, 128))
    torch.testing.assert_close(y, torch.full((3, 72, 128), 7.))


def test_dropout_statistics():
    torch.manual_seed(0)
    head = FCHead(1000, (1000, 1), dropout=0.3)
    dropout = head.layers[1]
    head.train()
    # 10^6 independent draws
    kept = dropout(torch.ones(1000, 1000))
    assert (kept == 0).double().mean().item() == pytest.approx(0.3, rel=0.01)
    assert kept.mean().item() == pytest.approx(1.0, rel=0.01)
    torch.testing.assert_close(kept[kept != 0], torch.full_like(kept[kept != 0], 1 / 0.7))
    head.eval()
    x = torch.ones(4, 1000)
    assert torch.equal(head(x), head(x))


def test_frozen_stays_in_eval():
    module = ConvBlock(conv(1, 2, 3), norm=True, dropout=0.5).double()
    frozen = Frozen(module)
    frozen.train()
    assert not frozen.training and not module.training
    assert all(not p.requires_grad for p in frozen.parameters())
    x = torch.randn(3, 1, 5, 5)
    y = frozen(x)
    assert not y.requires_grad
    torch.testing.assert_close(module.norm.running_mean, torch.zeros(2))
    assert torch.equal(y, frozen(x))


def test_make_adam_first_step():
    trainable = nn.Parameter(torch.tensor([1., -2.]))
    fixed = nn.Parameter(torch.tensor([3.]), requires_grad=False)
    optimizer = make_adam([trainable, fixed], lr=0.1)
    assert len(optimizer.param_groups[0]['params']) == 1

    loss = (trainable ** 2).sum() + fixed.sum()
    loss.backward()
    optimizer.step()
    # the first Adam update is lr * sign(grad), up to eps
    torch.testing.assert_close(trainable.detach(), torch.tensor([0.9, -1.9]), atol=1e-6, rtol=0)
    assert fixed.item() == 3.


def test_check_stream():
    state = StreamState('clip-0000', ())
    check_stream(state, 'clip-0000')
    with pytest.raises(StaleStateError, match='clip-0001'):
        check_stream(state, 'clip-0001')


def test_to_hwc():
    x = torch.arange(24.).view(2, 3, 4)
    assert to_hwc(x).shape == (3, 4, 2)
    assert to_hwc(x)[1, 2, 1] == x[1, 1, 2]
