import numpy as np
import pytest

from dualcad import diffops as ops
from dualcad.case import Case
from dualcad.errors import ConfigError, GeometryError, ShapeError
from dualcad.unet import ARM_ORDER, UNet, assemble_input, build_unet, get_config, infer_volume
from dualcad.volume import Grid, Volume

from gradcheck import numeric_grad, rel_error

# slots per arm, written out by hand from the arm definitions
SLOT_TABLE = {
    "dual_all": 8,
    "dual_ce": 2,
    "dual_native": 6,
    "dual_nT1": 2,
    "dual_T2": 2,
    "dual_FLAIR": 2,
    "dual_ce+FLAIR": 4,
    "T1n_ce": 2,
    "all": 4,
    "ce": 1,
    "ce+FLAIR": 2,
}


def make_case(dims=(16, 16, 5), seed=0, sequences=("ceT1w", "T1w", "T2w", "FLAIR"), prediag=True):
    rng = np.random.default_rng(seed)
    grid = Grid(dims, (1.5, 1.5, 4.0))
    dx = {s: Volume(rng.normal(100 + 10 * i, 5 + i, dims).astype(np.float32), grid) for i, s in enumerate(sequences)}
    pre = {s: Volume(rng.normal(50 + 10 * i, 3 + i, dims).astype(np.float32), grid) for i, s in enumerate(sequences)} if prediag else {}
    return Case("c0", "p0", dx, pre, mask=Volume(np.zeros(dims, np.uint8), grid))


def test_eleven_arms_in_table_order():
    assert list(ARM_ORDER) == list(SLOT_TABLE)


@pytest.mark.parametrize("arm", ARM_ORDER)
def test_channel_count(arm):
    cfg = get_config(arm)
    assert cfg.n_channels == SLOT_TABLE[arm] * 3
    native = arm in ("dual_native", "dual_nT1", "dual_T2", "dual_FLAIR")
    assert (("diagnosis", "ceT1w") in cfg.slots) == (not native)


def test_dual_all_has_24_channels():
    assert build_unet("dual_all", 8, 4).in_channels == 24


def test_input_conv_shape():
    net = build_unet("ce", base_features=8, depth=4)
    assert net.params["enc0.conv0.weight"].shape == (8, 3, 3, 3)
    assert net.params["bottleneck.conv0.weight"].shape == (128, 64, 3, 3)
    assert net.params["head.weight"].shape == (2, 8, 1, 1)


def test_feature_doubling():
    net = build_unet("ce", base_features=4, depth=3)
    for lvl in range(3):
        assert net.params[f"enc{lvl}.conv1.weight"].shape[0] == 4 * 2**lvl
        assert net.params[f"dec{lvl}.conv0.weight"].shape[1] == 2 * 4 * 2**lvl


def test_same_seed_same_params():
    a, b = build_unet("dual_ce", seed=3), build_unet("dual_ce", seed=3)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = build_unet("dual_ce", seed=4)
    assert not np.array_equal(a.params["enc0.conv0.weight"], c.params["enc0.conv0.weight"])


def test_bad_build_args():
    with pytest.raises(ConfigError):
        build_unet("ce", base_features=1)
    with pytest.raises(ConfigError):
        build_unet("ce", depth=1)
    with pytest.raises(ConfigError):
        get_config("dual_everything")


def test_divisibility():
    net = build_unet("ce", 2, 3)
    with pytest.raises(ShapeError, match="divisible by 8"):
        net.forward(np.zeros((1, 3, 12, 16), np.float32))


@pytest.mark.parametrize("seed", range(3))
def test_whole_network_gradient(seed):
    net = build_unet("ce", base_features=2, depth=2, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 8, 8))
    t = (rng.random((2, 8, 8)) < 0.3).astype(np.uint8)
    tape = []
    total, _, _, g, _ = ops.combined_loss(net.forward(x, tape), t)
    grads, dx = net.backward(g, tape)

    def loss():
        return ops.combined_loss(net.forward(x), t)[0]

    for name in ("enc0.conv0.weight", "bottleneck.conv1.bias", "dec1.up.weight", "dec0.conv1.weight", "head.weight"):
        p = net.params[name]
        assert rel_error(grads[name], numeric_grad(loss, p, step=1e-5)) < 1e-4, name
    assert rel_error(dx, numeric_grad(loss, x, step=1e-5)) < 1e-4


def test_translation_consistency_before_pooling():
    net = build_unet("ce", 4, 2, seed=1, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((1, 3, 16, 16))
    shifted = np.roll(x, 1, axis=3)
    tape_a, tape_b = [], []
    net.forward(x, tape_a)
    net.forward(shifted, tape_b)
    # enc0.conv0 output, interior columns only (edges see padding)
    fa = ops.conv2d(x, net.params["enc0.conv0.weight"], net.params["enc0.conv0.bias"])[0]
    fb = ops.conv2d(shifted, net.params["enc0.conv0.weight"], net.params["enc0.conv0.bias"])[0]
    assert np.allclose(fb[..., 2:-1], fa[..., 1:-2])


def test_softmax_channels_sum_to_one():
    net = build_unet("ce", 4, 2, seed=0)
    logits = net.forward(np.random.default_rng(0).standard_normal((2, 3, 8, 8)).astype(np.float32))
    p = ops.softmax(logits.astype(np.float64))
    assert np.allclose(p.sum(axis=1), 1, atol=1e-6)


def test_checkpoint_round_trip(tmp_path):
    net = build_unet("dual_ce", 4, 2, seed=2)
    path = net.save(tmp_path / "ckpt")
    back = UNet.load(path)
    assert back.config == net.config
    assert all(np.array_equal(back.params[k], net.params[k]) for k in net.params)


class TestAssembly:
    def test_ce_interior(self):
        case = make_case()
        x = assemble_input(case, "ce", 2)
        ce = case.diagnosis["ceT1w"].data.astype(np.float64)
        norm = (ce - ce.mean()) / ce.std()
        assert x.shape == (3, 16, 16)
        for i, z in enumerate((1, 2, 3)):
            assert np.allclose(x[i], norm[:, :, z], atol=1e-5)

    def test_edge_clamp(self):
        x = assemble_input(make_case(), "ce", 0)
        assert np.array_equal(x[0], x[1])

    def test_t1n_ce_order(self):
        case = make_case()
        x = assemble_input(case, "T1n_ce", 2)
        assert x.shape[0] == 6
        pre = case.prediag["T1w"].data.astype(np.float64)
        dx = case.diagnosis["ceT1w"].data.astype(np.float64)
        assert np.allclose(x[1], (pre[:, :, 2] - pre.mean()) / pre.std(), atol=1e-5)
        assert np.allclose(x[4], (dx[:, :, 2] - dx.mean()) / dx.std(), atol=1e-5)

    def test_missing_sequence(self):
        case = make_case(sequences=("ceT1w", "T1w", "FLAIR"))
        with pytest.raises(ConfigError, match="T2w"):
            assemble_input(case, "dual_T2", 1)
        assemble_input(case, "dual_ce", 1)

    def test_mono_ignores_prediag(self):
        assert assemble_input(make_case(prediag=False), "all", 1).shape[0] == 12

    def test_unaligned_grid(self):
        case = make_case()
        moved = Volume(case.prediag["ceT1w"].data, Grid(case.grid.dims, case.grid.spacing, (1, 0, 0)))
        case.prediag["ceT1w"] = moved
        with pytest.raises(GeometryError):
            assemble_input(case, "dual_ce", 1)


def test_infer_volume_contract():
    case = make_case(dims=(32, 32, 4))
    for s in case.diagnosis:
        case.diagnosis[s] = case.diagnosis[s].with_data(np.full((32, 32, 4), 7.0, np.float32) + np.arange(4) * 1e-3)
    net = build_unet("ce", 8, 4, seed=0)
    heat = infer_volume(net, case)
    assert heat.grid.same_as(case.grid)
    assert heat.data.min() >= 0 and heat.data.max() <= 1
    assert np.all(np.abs(heat.data - 0.01) < 0.01)
    flat = build_unet("ce", 8, 4, seed=0, foreground_prior=0.5)
    assert np.all(np.abs(infer_volume(flat, case).data - 0.5) < 0.2)
