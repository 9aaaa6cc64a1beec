import itertools

import pytest
import torch
from torch.func import functional_call

from models.config import ModelConfig, conv, trace_chain
from models.driving import DrivingModel
from models.encoders import FovealEncoder, PeripheralEncoder
from models.layers import ShapeError, StaleStateError
from models.planner import CombinedPlanner, DualPlanner, concat_features, insert_fovea_features
from models.utils import positional_encoding
from preprocessor.frames import preprocess_peripheral


def random_frames(T, size=(180, 320), seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randint(0, 256, (T, 3, *size), generator=g, dtype=torch.uint8)


def test_full_scale_shape_audit():
    config = ModelConfig.build(scale=1)
    traces = config.audit()
    assert traces['peripheral'] == [(3, 72, 128), (64, 16, 30), (128, 14, 28),
                                    (16, 6, 13), (16, 4, 11), (8, 3, 7)]
    assert traces['foveal'][0] == (3, 185, 185)
    assert traces['foveal'][-1] == (8, 3, 3)
    assert traces['attention'][-1][1:] == (9, 16)
    assert config.patch_span == 3
    assert config.frame_size[0] / 9 == config.frame_size[1] / 16 == 80


def test_toy_scale_keeps_ratios():
    config = ModelConfig.build(scale=4)
    assert config.frame_size == (180, 320)
    assert config.peripheral_size == (18, 32)
    assert config.patch_span == 3
    assert config.trace('peripheral')[-1] == (8, 3, 7)
    dual = ModelConfig.build('dual', scale=4)
    assert dual.trace('foveal')[-1] == (8, 14, 14)


def test_config_rejections():
    with pytest.raises(ValueError):
        ModelConfig.build('periphery-only', 'top-k')
    with pytest.raises(ValueError):
        ModelConfig.build('combined', 'none')
    with pytest.raises(ValueError):
        ModelConfig.build(horizon=0)
    with pytest.raises(ValueError):
        ModelConfig.build(fc_widths=(64, 32, 16, 2))
    with pytest.raises(ValueError):
        ModelConfig.build(scale=3)
    with pytest.raises(ShapeError, match='trace'):
        ModelConfig.build(peripheral_size=(8, 8))


def test_trace_chain_error_names_layer():
    with pytest.raises(ShapeError, match='layer 1'):
        trace_chain([conv(3, 8, 3), conv(8, 8, 5)], 3, (6, 6))


def test_config_round_trip():
    config = ModelConfig.build('dual', 'sampled', temperature=0.5, seed=3)
    assert ModelConfig.from_dict(config.to_dict()) == config


def test_peripheral_encoder_shapes():
    config = ModelConfig.build()
    encoder = PeripheralEncoder(config.peripheral_head, config.peripheral_feature_size).eval()
    features = torch.randn(4, 16, 14, 28)
    y = encoder(features)
    assert y.shape == (4, 8, 9, 16)
    assert encoder.head(features).shape == (4, 8, 3, 7)
    assert torch.equal(y, encoder(features))
    with pytest.raises(ShapeError):
        encoder(torch.randn(4, 16, 20, 28))


def test_foveal_encoder_shapes():
    config = ModelConfig.build()
    encoder = FovealEncoder(config.foveal_head, 3).eval()
    assert encoder(torch.randn(2, 16, 42, 42)).shape == (2, 8, 3, 3)
    dual = ModelConfig.build('dual')
    assert FovealEncoder(dual.foveal_head, 14).eval()(torch.randn(2, 16, 42, 42)).shape == (2, 8, 14, 14)


def test_insert_single_patch():
    patch = torch.rand(1, 1, 8, 3, 3) + 1
    grid = insert_fovea_features(patch, [[(0, 0)]])
    assert grid.shape == (1, 8, 9, 16)
    torch.testing.assert_close(grid[0, :, :3, :3], patch[0, 0])
    assert torch.count_nonzero(grid[0, :, 3:]) == 0
    assert torch.count_nonzero(grid[0, :, :, 3:]) == 0


def test_insert_duplicate_is_idempotent():
    patch = torch.randn(1, 1, 8, 3, 3)
    twice = torch.cat([patch, patch], dim=1)
    torch.testing.assert_close(insert_fovea_features(twice, [[(2, 5), (2, 5)]]),
                               insert_fovea_features(patch, [[(2, 5)]]))


@pytest.mark.parametrize('seed', range(5))
def test_insert_matches_cellwise_max(seed):
    g = torch.Generator().manual_seed(seed)
    patches = torch.randn(1, 2, 4, 3, 3, generator=g)
    corners = [(int(torch.randint(0, 7, (1,), generator=g)), int(torch.randint(0, 14, (1,), generator=g)))
               for _ in range(2)]
    corners[1] = (min(corners[0][0] + 1, 6), min(corners[0][1] + 2, 13))
    grid = insert_fovea_features(patches, [corners])[0]

    expected = torch.zeros(4, 9, 16)
    for i, j in itertools.product(range(9), range(16)):
        values = [patches[0, k, :, i - h, j - w] for k, (h, w) in enumerate(corners)
                  if h <= i < h + 3 and w <= j < w + 3]
        if values:
            expected[:, i, j] = torch.stack(values).amax(dim=0)
    torch.testing.assert_close(grid, expected)

    swapped = insert_fovea_features(patches.flip(1), [corners[::-1]])[0]
    torch.testing.assert_close(swapped, grid)


def test_insert_rejects_bad_corner():
    with pytest.raises(ValueError):
        insert_fovea_features(torch.randn(1, 1, 8, 3, 3), [[(7, 0)]])


def test_concat_layout():
    p, f = torch.randn(2, 8, 9, 16), torch.randn(2, 8, 9, 16)
    x = concat_features(p, f)
    assert x.shape == (2, 16, 9, 16)
    assert torch.equal(x[:, :8], p)
    assert torch.equal(x[:, 8:], f)
    with pytest.raises(ShapeError):
        concat_features(p, f[:, :4])


def test_positional_encoding():
    torch.testing.assert_close(positional_encoding((0, 0), 8),
                               torch.tensor([0., 0., 1., 1., 0., 0., 1., 1.]))
    codes = torch.stack([positional_encoding(c, 8) for c in itertools.product(range(9), range(16))])
    distances = torch.cdist(codes, codes) + torch.eye(144)
    assert distances.min() > 1e-6
    assert torch.equal(positional_encoding((3, 4), 8), positional_encoding((3, 4), 8))
    with pytest.raises(ValueError):
        positional_encoding((0, 0), 7)


def test_combined_planner_constant_head():
    planner = CombinedPlanner(16).eval()
    with torch.no_grad():
        last = planner.head.layers[-1]
        last.weight.zero_()
        last.bias.fill_(42.)
    torch.testing.assert_close(planner(torch.randn(5, 16, 9, 16)), torch.full((5,), 42.))


def test_combined_planner_step_matches_forward():
    planner = CombinedPlanner(16).eval()
    x = torch.randn(4, 16, 9, 16)
    state = planner.init_state('clip-a')
    steps = []
    for t in range(4):
        y, state = planner.step(x[t:t + 1], state, 'clip-a')
        steps.append(y)
    torch.testing.assert_close(torch.cat(steps), planner(x))
    with pytest.raises(StaleStateError):
        planner.step(x[:1], state, 'clip-b')


def test_combined_planner_gradcheck():
    planner = CombinedPlanner(3, hidden_channels=2, grid=(3, 4), fc_widths=(5, 1), dropout=0.0)
    params = dict(planner.named_parameters())
    x = torch.randn(2, 3, 3, 4)

    def run(*values):
        return functional_call(planner, dict(zip(params, values)), (x,))

    assert torch.autograd.gradcheck(run, tuple(p.detach().requires_grad_() for p in params.values()))


def symmetric_dual_planner():
    planner = DualPlanner(feature_channels=2, num_foveae=2, hidden_channels=2, grid=(9, 16),
                          patch_size=4, fc_widths=(4, 1), dropout=0.0).eval()
    with torch.no_grad():
        w = planner.foveal.gates.weight
        w[:, 2:4] = w[:, 0:2]
    return planner


def test_dual_planner_fovea_order_symmetry():
    planner = symmetric_dual_planner()
    peripheral = torch.randn(3, 2, 9, 16)
    patches = torch.randn(3, 2, 2, 4, 4)
    cells = [[(1, 2), (5, 9)]] * 3
    swapped_cells = [[(5, 9), (1, 2)]] * 3
    torch.testing.assert_close(planner(peripheral, patches, cells),
                               planner(peripheral, patches.flip(1), swapped_cells))


def test_dual_planner_uses_positions():
    planner = DualPlanner(feature_channels=2, num_foveae=2, hidden_channels=2, grid=(9, 16),
                          patch_size=4, fc_widths=(4, 1), dropout=0.0).eval()
    peripheral = torch.randn(2, 2, 9, 16)
    patches = torch.randn(2, 2, 2, 4, 4)
    a = planner(peripheral, patches, [[(1, 2), (5, 9)]] * 2)
    b = planner(peripheral, patches, [[(1, 3), (5, 9)]] * 2)
    assert not torch.allclose(a, b)
    with pytest.raises(ShapeError):
        planner(peripheral, patches[:, :1], [[(1, 2)]] * 2)


def test_dual_planner_gradcheck():
    planner = DualPlanner(feature_channels=2, num_foveae=2, hidden_channels=2, grid=(3, 4),
                          patch_size=3, fc_widths=(3, 1), dropout=0.0)
    params = dict(planner.named_parameters())
    args = (torch.randn(2, 2, 3, 4), torch.randn(2, 2, 2, 3, 3), [[(0, 1), (2, 3)]] * 2)

    def run(*values):
        return functional_call(planner, dict(zip(params, values)), args)

    assert torch.autograd.gradcheck(run, tuple(p.detach().requires_grad_() for p in params.values()))


def test_forward_clip_horizon_arithmetic():
    model = DrivingModel(ModelConfig.build('periphery-only', 'none')).eval()
    out = model.forward_clip(torch.zeros(400, 3, 180, 320, dtype=torch.uint8), 'clip-a')
    assert out.predictions.shape == (400,)
    assert out.predictions[:-model.config.horizon].shape == (390,)
    assert out.placements is None and model.foveal is None
    with pytest.raises(ValueError):
        model.forward_clip(torch.zeros(10, 3, 180, 320, dtype=torch.uint8), 'short')
    with pytest.raises(ValueError):
        model.forward_clip(torch.zeros(20, 3, 90, 160, dtype=torch.uint8), 'small')


@pytest.mark.parametrize('variant,policy', [('combined', 'central'), ('combined', 'random'), ('dual', 'central')])
def test_forward_clip_with_foveae(variant, policy):
    model = DrivingModel(ModelConfig.build(variant, policy, horizon=2)).eval()
    frames = random_frames(4)
    out = model.forward_clip(frames, 'clip-a', torch.Generator().manual_seed(0))
    assert out.predictions.shape == (4,)
    assert len(out.placements) == 4
    assert all(len(p.cells) == 2 for p in out.placements)
    again = model.forward_clip(frames, 'clip-a', torch.Generator().manual_seed(0))
    torch.testing.assert_close(out.predictions, again.predictions)


def test_attention_policy_needs_attention_model():
    with pytest.raises(ValueError):
        DrivingModel(ModelConfig.build(policy='top-k'))


def test_top_k_model_places_foveae_from_attention():
    from models.attention import AttentionNet

    config = ModelConfig.build(policy='top-k', horizon=2)
    model = DrivingModel(config, AttentionNet.from_config(config)).eval()
    out = model.forward_clip(random_frames(3), 'clip-a')
    assert out.attention.shape == (3, 9, 16)
    torch.testing.assert_close(out.attention.sum(dim=(1, 2)), torch.ones(3))
    for t, placement in enumerate(out.placements):
        flat = out.attention[t].flatten()
        assert [divmod(int(k), 16) for k in flat.topk(2).indices] == placement.cells


def test_state_resets_between_clips():
    model = DrivingModel(ModelConfig.build(policy='central', horizon=2)).eval()
    a, b = random_frames(5, seed=1), random_frames(5, seed=2)
    alone = model.forward_clip(b, 'b').predictions
    model.forward_clip(a, 'a')
    torch.testing.assert_close(model.forward_clip(b, 'b').predictions, alone)


def test_periphery_only_sees_only_the_downsampled_frame():
    model = DrivingModel(ModelConfig.build('periphery-only', 'none', horizon=2)).eval()
    frames = random_frames(3)
    a = model.forward_clip(frames, 'a', torch.Generator().manual_seed(0)).predictions
    b = model.forward_clip(frames, 'a', torch.Generator().manual_seed(1)).predictions
    assert torch.equal(a, b)
    x = preprocess_peripheral(frames, model.config.preproc)
    torch.testing.assert_close(model.planner(model.peripheral(model.backbone(x))), a)


def test_frozen_parts_stay_frozen():
    model = DrivingModel(ModelConfig.build(policy='central'))
    model.train()
    assert not model.backbone.training
    assert all(not p.requires_grad for p in model.backbone.parameters())
    trainable = {id(p) for m in model.trainable_modules() for p in m.parameters()}
    assert all(p.requires_grad == (id(p) in trainable) for p in model.parameters())


def test_end_to_end_gradcheck():
    config = ModelConfig.build(policy='central', horizon=2, hidden_channels=2, fc_widths=(4, 1), dropout=0.0)
    model = DrivingModel(config).eval()
    frames = random_frames(3)
    names = [n for n, p in model.named_parameters() if p.requires_grad]
    params = dict(model.named_parameters())

    def run(*values):
        return functional_call(model, dict(zip(names, values)), (frames, 'clip-a'))

    inputs = tuple(params[n].detach().clone().requires_grad_() for n in names)
    assert torch.autograd.gradcheck(run, inputs, fast_mode=True)
