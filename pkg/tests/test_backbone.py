import numpy as np
import pytest

from casnet.backbone import (
    DEFAULT_STAGES,
    HardShareNet,
    NetConfig,
    StageSpec,
    _center,
    build,
    expected_num_params,
    forward,
    forward_hard,
    load_checkpoint,
    save_checkpoint,
    stream_num_params,
)
from casnet.data import generate_synthetic
from casnet.errors import ConfigError, NearKinkError, ShapeError
from casnet.sharing import AblationConfig, cas_num_params
from casnet.tensor import Param, Tape, Tensor, add, bce_loss, grad_check, linear, gap, scale

# Logits recorded from this implementation (seed 5, synthetic images seed 11).
# They pin the forward pass against accidental changes, not against an outside reference.
GOLDEN_CAS_A = [[0.01011932342850165, 0.03660439160605505, 0.056015233795329786, 0.052137694733107504],
                [0.06098052279406381, 0.024374171751674015, 0.023867532933749054, 0.0604426078889454],
                [0.036671706877061436, 0.02283230030284443, 0.03111281768203172, 0.05536439500120564],
                [0.004951834191964627, 0.013051034779291358, 0.0006815473859891827, 0.0779495163558939]]
GOLDEN_CAS_B = [[-0.022967202769173686, 0.006992825790574222, -0.056288896255838855],
                [-0.024290148595365657, -0.004785407723463391, -0.047216759698123174],
                [-0.014327484323501487, -0.006046816656583492, -0.04117504737677356],
                [-0.040985094887418125, -0.010401471979122183, -0.0607140312228084]]
GOLDEN_HARD = [[0.014036925260083433, -0.08019139059894234, -0.09242645176460529, -0.04063304180529696,
                0.12786066356002868, -0.14691750830999553],
               [0.09158178761994866, -0.06909233482041346, 0.007044939989132295, -0.006284366906076238,
                0.1206526228830074, -0.1236968304857264],
               [0.044866071797311696, -0.0536104605666746, -0.053415297115504294, 0.005977326632458861,
                0.09737359854869329, -0.12334945058200217],
               [0.03608240419925943, -0.10373302609614764, -0.08174482482215745, -0.0066826337787547,
                0.11889881917886165, -0.1499576404266482]]


@pytest.fixture(scope="module")
def images():
    return Tensor(generate_synthetic(4, seed=11).images)


# ---------------------------------------------------------------- parameter counts


def test_stream_count_by_hand():
    # 3x3 convs 3->8->16->32->64 with biases
    assert stream_num_params(DEFAULT_STAGES) == 224 + 1168 + 4640 + 18496 == 24528


@pytest.mark.parametrize("kind,count", [
    ("hard", 24528 + 64 * 26 + 26),
    ("none", 2 * 24528 + 2 * (64 * 13 + 13)),
    ("cas", 2 * 24528 + 2 * (64 * 13 + 13) + 584 + 1480 + 5066 + 19150),
    ("cross_stitch", 2 * 24528 + 2 * (64 * 13 + 13) + 4 * (8 + 16 + 32 + 64)),
    ("sluice", 2 * 24528 + 2 * (64 * 13 + 13) + 4 * 16),
])
def test_default_param_counts(kind, count):
    net = build(NetConfig(13, 13, sharing_kind=kind))
    assert net.num_params() == count == expected_num_params(net.cfg)


def test_empty_mask_equals_vanilla():
    cas = build(NetConfig(13, 13, sharing_kind="cas", insertion_mask=(False,) * 4))
    van = build(NetConfig(13, 13, sharing_kind="none"))
    assert cas.num_params() == van.num_params()


@pytest.mark.parametrize("variant", ["full", "synergetic--", "attentive--", "channel--"])
def test_cas_adds_module_sizes(variant):
    ab = AblationConfig.from_name(variant)
    for mask in [(True, False, False, True), (False, True, True, False), (True,) * 4]:
        net = build(NetConfig(5, 7, sharing_kind="cas", insertion_mask=mask, ablation=ab))
        van = build(NetConfig(5, 7, sharing_kind="none"))
        extra = sum(cas_num_params(s.out_channels, 16, ab) for s, m in zip(DEFAULT_STAGES, mask) if m)
        assert net.num_params() - van.num_params() == extra


# ---------------------------------------------------------------- configuration errors


def test_build_errors():
    with pytest.raises(ConfigError):
        NetConfig(3, 3, insertion_mask=(True, True))
    with pytest.raises(ConfigError):
        NetConfig(3, 3, sharing_kind="sluice", stages=(StageSpec(3), StageSpec(8)), insertion_mask=(True, False))
    with pytest.raises(ConfigError):
        NetConfig(3, 3, sharing_kind="bogus")
    with pytest.raises(ConfigError):
        NetConfig(0, 3)
    with pytest.raises(ConfigError):
        StageSpec(0)


def test_input_checks(images):
    net = build(NetConfig(13, 13))
    with pytest.raises(ShapeError):
        forward(net, Tensor(np.zeros((1, 60, 32, 3))))
    with pytest.raises(ShapeError):
        forward(net, Tensor(np.zeros((1, 64, 32, 1))))


# ---------------------------------------------------------------- forward semantics


def test_golden_logits(images):
    a, b, _ = forward(build(NetConfig(13, 13, sharing_kind="cas", seed=5)), images)
    np.testing.assert_allclose(a.data.reshape(4, -1)[:, :4], GOLDEN_CAS_A, rtol=0, atol=1e-10)
    np.testing.assert_allclose(b.data.reshape(4, -1)[:, -3:], GOLDEN_CAS_B, rtol=0, atol=1e-10)
    z = forward_hard(build(NetConfig(13, 13, sharing_kind="hard", seed=5)), images)
    np.testing.assert_allclose(z.data.reshape(4, -1)[:, ::5], GOLDEN_HARD, rtol=0, atol=1e-10)


def test_determinism(images):
    z1 = forward_hard(build(NetConfig(13, 13, sharing_kind="hard", seed=3)), images).data
    z2 = forward_hard(build(NetConfig(13, 13, sharing_kind="hard", seed=3)), images).data
    assert z1.tobytes() == z2.tobytes()


def _stream_logits(stream, head, images, factor=1.0):
    x = _center(images)
    for i in range(len(stream.specs)):
        x = scale(stream.run_stage(i, x), factor)
    return head(x)


def test_vanilla_is_two_independent_streams(images):
    net = build(NetConfig(13, 13, sharing_kind="none", seed=2))
    a, b, maps = forward(net, images)
    assert maps == []
    np.testing.assert_array_equal(a.data, _stream_logits(net.stream_a, net.head_a, images).data)
    np.testing.assert_array_equal(b.data, _stream_logits(net.stream_b, net.head_b, images).data)


def test_zero_module_params_scale_streams(images):
    net = build(NetConfig(13, 13, sharing_kind="cas", seed=2))
    for m in net.modules:
        for p in m.params():
            p.value[...] = 0.0
    a, b, _ = forward(net, images)
    np.testing.assert_allclose(a.data, _stream_logits(net.stream_a, net.head_a, images, 0.375).data, atol=1e-12)
    np.testing.assert_allclose(b.data, _stream_logits(net.stream_b, net.head_b, images, 0.375).data, atol=1e-12)


def test_hard_zero_weights_give_biases():
    net = build(NetConfig(2, 3, sharing_kind="hard"))
    assert isinstance(net, HardShareNet)
    for p in net.params():
        p.value[...] = 0.0
    net.head.b.value[...] = np.arange(5)
    z = forward_hard(net, Tensor(np.zeros((2, 64, 32, 3))))
    np.testing.assert_array_equal(z.data.reshape(2, 5), [np.arange(5)] * 2)


def test_map_shapes(images):
    net = build(NetConfig(13, 13, sharing_kind="cas", insertion_mask=(True, False, True, True)))
    _, _, maps = forward(net, images)
    sizes = [(32, 16), (8, 4), (4, 2)]
    assert len(maps) == 3
    for (ma, mb), (h, w) in zip(maps, sizes):
        assert ma.shape == mb.shape == (4, h, w, 1)


def test_gain_match_rescales_following_layer_only():
    cfg = NetConfig(13, 13, sharing_kind="cas", seed=4)
    raw = build(NetConfig(13, 13, sharing_kind="cas", seed=4, gain_match=False))
    net = build(cfg)
    for i in range(4):
        ga, gb = net.unit_gains(i)
        assert 0 < ga < 1 and 0 < gb < 1
        nxt_a = net.stream_a.layers[i + 1][0][0] if i < 3 else net.head_a.w
        ref_a = raw.stream_a.layers[i + 1][0][0] if i < 3 else raw.head_a.w
        np.testing.assert_allclose(nxt_a.value, ref_a.value / ga, rtol=1e-15)
    np.testing.assert_array_equal(net.stream_a.layers[0][0][0].value, raw.stream_a.layers[0][0][0].value)


# ---------------------------------------------------------------- gradient flow


def _task_a_grads(kind):
    net = build(NetConfig(3, 3, sharing_kind=kind, seed=1))
    x = Tensor(generate_synthetic(4, seed=1).images)
    with Tape() as tape:
        a, _, _ = forward(net, x)
        loss = bce_loss(a, np.ones(a.shape))
    tape.backward(loss)
    return [p for p in net.stream_b.params()]


def test_no_cross_gradient_without_sharing():
    assert all(np.all(p.grad == 0) for p in _task_a_grads("none"))


@pytest.mark.parametrize("kind", ["cas", "cross_stitch", "sluice"])
def test_cross_gradient_with_sharing(kind):
    assert any(np.any(p.grad != 0) for p in _task_a_grads(kind))


def mini_net_grad_error(kind, seed=0):
    stages = (StageSpec(4, 2), StageSpec(8, 2))
    for attempt in range(20):
        rng = np.random.default_rng([seed, attempt])
        net = build(NetConfig(2, 3, stages=stages, sharing_kind=kind, insertion_mask=(True, True),
                              r=2, seed=seed * 100 + attempt))
        for p in net.params():
            if np.all(p.value == 0):
                p.value[...] = rng.standard_normal(p.shape) * 0.1
        x = Tensor(rng.random((2, 8, 8, 3)))
        ya, yb = rng.integers(0, 2, (2, 1, 1, 2)), rng.integers(0, 2, (2, 1, 1, 3))
        if kind == "hard":
            y = np.concatenate([ya, yb], axis=3)
            f = lambda: bce_loss(forward_hard(net, x), y)
        else:
            def f():
                a, b, _ = forward(net, x)
                return add(bce_loss(a, ya), bce_loss(b, yb))
        try:
            return grad_check(f, net.params(), eps=1e-5)
        except NearKinkError:
            continue
    raise RuntimeError("no smooth evaluation point found")


@pytest.mark.parametrize("kind", ["cas", "none", "hard", "cross_stitch", "sluice"])
def test_end_to_end_gradient(kind):
    assert mini_net_grad_error(kind) < 1e-6


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, images):
    net = build(NetConfig(13, 13, sharing_kind="cas", seed=8))
    for p in net.params():
        p.value += 0.01
    path = save_checkpoint(net, tmp_path / "ck.npz")
    back = load_checkpoint(path)
    assert back.cfg == net.cfg
    for p, q in zip(net.params(), back.params()):
        assert p.name == q.name and p.value.tobytes() == q.value.tobytes()
    a1, _, _ = forward(net, images)
    a2, _, _ = forward(back, images)
    assert a1.data.tobytes() == a2.data.tobytes()


def test_checkpoint_rejects_mismatch(tmp_path):
    net = build(NetConfig(13, 13, sharing_kind="cas"))
    path = save_checkpoint(net, tmp_path / "ck.npz")
    with pytest.raises(ShapeError):
        load_checkpoint(path, build(NetConfig(13, 13, sharing_kind="cas", r=4)))
    with pytest.raises(ShapeError):
        load_checkpoint(path, build(NetConfig(13, 13, sharing_kind="none")))
    with pytest.raises(ShapeError):
        load_checkpoint(path, build(NetConfig(12, 14, sharing_kind="cas")))
    bogus = tmp_path / "plain.npz"
    np.savez(bogus, a=np.zeros(3))
    with pytest.raises(ShapeError):
        load_checkpoint(bogus)
