import pytest

from models.config import ModelConfig, conv, trace_chain
from models.flops import (GATE_OPS, RESAMPLE_OPS, build_uniresolution_baseline, compute_flops, conv_flops,
                          convlstm_flops, fc_flops, layer_flops, resample_flops, resample_taps)
from models.layers import ShapeError


def test_conv_by_hand():
    # 3x3 kernel over an 8x8 single-channel map: 36 outputs x 9 MACs x 2
    assert conv_flops(conv(1, 1, 3), conv(1, 1, 3).output_size((8, 8))) == 648


def test_conv_scales_with_channels():
    base = conv_flops(conv(4, 4, 3), (10, 10))
    assert conv_flops(conv(8, 8, 3), (10, 10)) == 4 * base
    assert conv_flops(conv(4, 4, 3), (20, 10)) == 2 * base


def test_fc_and_recurrent_cell():
    assert fc_flops(1152, 64) == 2 * 1152 * 64
    cells = 9 * 16
    assert convlstm_flops(16, 8, 3, (9, 16)) == 2 * 9 * 24 * 32 * cells + GATE_OPS * 8 * cells


def test_total_is_sum_of_layers():
    config = ModelConfig.build(policy='central')
    records = layer_flops(config)
    assert compute_flops(config) == sum(r.flops for r in records)
    assert len({r.name for r in records}) == len(records)
    # 180x320 -> 18x32 shrinks tenfold on both axes: 21-tap rows then columns
    assert records[0].flops == 3 * (180 * 32 * 2 * 21 + 18 * 32 * 2 * 21)


def test_foveae_are_counted_per_fovea():
    one = compute_flops(ModelConfig.build(policy='central', num_foveae=1))
    two = compute_flops(ModelConfig.build(policy='central', num_foveae=2))
    per_fovea = sum(r.flops for r in layer_flops(ModelConfig.build(policy='central'))
                    if r.name.startswith('fovea0.'))
    assert two - one == per_fovea


def test_branches_add_up():
    none = compute_flops(ModelConfig.build('periphery-only', 'none'))
    central = ModelConfig.build(policy='central')
    top2 = ModelConfig.build(policy='top-k')

    foveal = sum(r.flops for r in layer_flops(central) if r.name.startswith('fovea'))
    # the combined planner reads 16 channels instead of 8
    planner_extra = 2 * 9 * 8 * 4 * 8 * 9 * 16
    assert compute_flops(central) - none == foveal + planner_extra

    attention = sum(r.flops for r in layer_flops(top2) if r.name.startswith('attention'))
    assert attention > 0
    assert compute_flops(top2) - compute_flops(central) == attention


def test_full_scale_is_larger():
    assert compute_flops(ModelConfig.build(scale=1, policy='central')) > \
        compute_flops(ModelConfig.build(scale=4, policy='central'))


def test_uniresolution_baseline_matches_within_two_percent():
    reference = ModelConfig.build(policy='top-k')
    target = compute_flops(reference)
    baseline = build_uniresolution_baseline(reference)
    flops = compute_flops(baseline)
    assert baseline.variant == 'periphery-only'
    assert baseline.fovea.policy == 'none'
    assert 0.98 * target <= flops <= target
    h, w = baseline.peripheral_size
    assert w / h == pytest.approx(16 / 9, rel=0.03)
    assert h > reference.peripheral_size[0]


def test_uniresolution_baseline_is_monotone():
    reference = ModelConfig.build(policy='top-k')
    target = compute_flops(reference)
    small = build_uniresolution_baseline(reference, target)
    large = build_uniresolution_baseline(reference, 2 * target)
    assert large.peripheral_size[0] > small.peripheral_size[0]
    assert large.peripheral_size[1] > small.peripheral_size[1]


def test_uniresolution_infeasible_target():
    reference = ModelConfig.build(policy='top-k')
    with pytest.raises(ValueError):
        build_uniresolution_baseline(reference, target=10)


@pytest.mark.parametrize('spec, size, expected', [
    (conv(1, 1, 3), (8, 8), 648),
    (conv(3, 8, 3), (18, 32), 207360),
    (conv(8, 16, 3), (16, 30), 903168),
    (conv(3, 64, 11, 4), (72, 128), 22302720),
    (conv(16, 8, (2, 5)), (4, 11), 53760),
    (conv(2, 4, 3, 2), (7, 7), 1296),
    (conv(16, 16, 3, 3), (42, 42), 903168),
])
def test_conv_hand_counts(spec, size, expected):
    assert conv_flops(spec, spec.output_size(size)) == expected


@pytest.mark.parametrize('count, expected', [
    (lambda: fc_flops(1152, 64), 147456),
    (lambda: convlstm_flops(16, 8, 3, (9, 16)), 2001024),
    (lambda: convlstm_flops(8, 8, 1, (3, 3)), 9864),
])
def test_dense_and_recurrent_hand_counts(count, expected):
    assert count() == expected


def test_doubling_resolution_quadruples_backbone():
    backbone = ModelConfig.build().backbone

    def cost(size):
        trace = trace_chain(backbone, 3, size)
        return sum(conv_flops(spec, out[1:]) for spec, out in zip(backbone, trace[1:]))

    assert 3.6 <= cost((72, 128)) / cost((36, 64)) <= 4.6


def test_resample_taps():
    assert resample_taps(320, 32) == 21
    assert resample_taps(60, 46) == 5
    assert resample_taps(46, 60) == 3
    assert resample_flops(2, (3, 7), (9, 16)) == RESAMPLE_OPS * 2 * 9 * 16
    # shrinking one axis still filters the other with the minimal window
    assert resample_flops(1, (10, 40), (20, 20)) == 2 * 5 * 10 * 20 + 2 * 3 * 20 * 20


def test_fovea_resize_counts_antialias_taps():
    config = ModelConfig.build(policy='central')
    record = next(r for r in layer_flops(config) if r.name == 'fovea0.resize')
    # 60x60 crop -> 46x46 input
    assert record.flops == 3 * (60 * 46 * 2 * 5 + 46 * 46 * 2 * 5)


def test_uniresolution_baseline_prefers_grid_aspect():
    reference = ModelConfig.build(policy='top-k')
    target = compute_flops(reference)
    baseline = build_uniresolution_baseline(reference)
    h0, w0 = baseline.peripheral_size
    deviation = abs(w0 / h0 - 16 / 9)
    for h in range(max(1, h0 - 8), h0 + 9):
        for w in range(int(h * 16 / 9 * 0.97), int(h * 16 / 9 * 1.03) + 2):
            try:
                flops = compute_flops(reference.uniresolution((h, w)))
            except ShapeError:
                continue
            if 0.98 * target <= flops <= target:
                assert abs(w / h - 16 / 9) >= deviation - 1e-12, (h, w)
