import numpy as np
import pytest
from helpers import central_fd, rel_err
from hypothesis import given
from hypothesis import strategies as st

from lumafield.errors import CheckpointError, ConfigError
from lumafield.neural import (
    LIGHTFIELD_HEADS,
    MATERIAL_HEADS,
    EncodingSpec,
    NetworkConfig,
    adam_init,
    adam_step,
    freq_encode,
    init_lightfield_net,
    init_material_net,
    init_mlp,
    lightfield_net_eval,
    load_checkpoint,
    material_net_eval,
    mlp_backward,
    mlp_forward,
    save_checkpoint,
)

SMALL = NetworkConfig(depth=3, hidden=16, inject_at=2)

# ---------------------------------------------------------------- encoding


def test_encoding_widths():
    assert EncodingSpec(10).width() == 63
    assert EncodingSpec(4).width() == 27
    assert freq_encode(np.zeros((5, 3)), EncodingSpec(10)).shape == (5, 63)
    assert EncodingSpec(3, include_identity=False).width(2) == 12


def test_encoding_at_origin():
    e = freq_encode(np.zeros(3), EncodingSpec(4))
    assert np.all(e[:3] == 0)
    for k in range(4):
        j = 3 + 6 * k
        assert np.all(e[j:j + 3] == 0) and np.all(e[j + 3:j + 6] == 1)


def test_encoding_half_at_base_frequency():
    e = freq_encode(np.array([0.5]), EncodingSpec(2))
    np.testing.assert_allclose(e[1], 1.0, atol=1e-15)
    np.testing.assert_allclose(e[2], 0.0, atol=1e-15)


@given(st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3))
def test_encoding_matches_direct_trig(x):
    x = np.array(x)
    e = freq_encode(x, EncodingSpec(10))
    direct = [x] + [f(2.0**k * np.pi * x) for k in range(10) for f in (np.sin, np.cos)]
    np.testing.assert_allclose(e, np.concatenate(direct), atol=1e-11)


# ---------------------------------------------------------------- forward / backward


def small_net(rng, heads=MATERIAL_HEADS, depth=2, hidden=8, inject_at=2, in_width=5, inject_width=3):
    p = init_mlp(rng, in_width, inject_width, heads, depth, hidden, inject_at, dtype=np.float64)
    for b in p.biases:
        b[:] = rng.normal(0, 0.3, b.shape)  # move units off the ReLU kink
    return p


def test_zero_weights_collapse_to_head_bias(rng):
    p = small_net(rng)
    for w in p.weights:
        w[:] = 0
    for b in p.biases[:-1]:
        b[:] = 0
    p.biases[-1][:] = [0.3, -1.0, 0.0, 2.0]
    out, _ = mlp_forward(p, rng.normal(size=(4, 5)), rng.normal(size=(4, 3)))
    want = [np.log1p(np.exp(0.3)), 1 / (1 + np.e), 0.5, 1 / (1 + np.exp(-2.0))]
    np.testing.assert_allclose(out, np.tile(want, (4, 1)), rtol=1e-12)


def test_batching_equivalence(rng):
    p = small_net(rng)
    x, z = rng.normal(size=(6, 5)), rng.normal(size=(6, 3))
    batch, _ = mlp_forward(p, x, z)
    single = np.array([mlp_forward(p, x[i], z[i])[0] for i in range(6)])
    np.testing.assert_allclose(batch, single, rtol=1e-12)


def test_forward_deterministic(rng):
    p = small_net(rng)
    x, z = rng.normal(size=(6, 5)), rng.normal(size=(6, 3))
    assert np.array_equal(mlp_forward(p, x, z)[0], mlp_forward(p, x, z)[0])


def test_fuzz_finite_outputs(rng):
    p = init_lightfield_net(rng)
    x = rng.uniform(-1, 1, (10_000, 3))
    w = rng.normal(size=(10_000, 3))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    sh = lightfield_net_eval(p, x, w, rng.normal(size=18))
    assert sh.shape == (10_000, 12) and np.all(np.isfinite(sh))
    m = material_net_eval(init_material_net(rng), x, w)
    assert np.all(np.isfinite(m.gamma)) and np.all(np.isfinite(m.eta))


def test_width_mismatch(rng):
    p = small_net(rng)
    with pytest.raises(ValueError, match="width mismatch"):
        mlp_forward(p, np.zeros((2, 4)), np.zeros((2, 3)))
    with pytest.raises(ValueError, match="width mismatch"):
        mlp_forward(p, np.zeros((2, 5)), np.zeros((2, 2)))
    with pytest.raises(ValueError, match="width mismatch"):
        mlp_forward(p, np.zeros((2, 5)))


@pytest.mark.parametrize("heads", [MATERIAL_HEADS, LIGHTFIELD_HEADS])
def test_backward_matches_finite_differences(rng, heads):
    p = small_net(rng, heads)
    x, z = rng.normal(size=(7, 5)), rng.normal(size=(7, 3))
    r = rng.normal(size=(7, p.out_width))

    def loss():
        return float(np.sum(mlp_forward(p, x, z)[0] * r))

    out, tape = mlp_forward(p, x, z)
    grads = mlp_backward(p, tape, r)
    arrays = p.arrays()
    idx = [(k, i) for k, a in enumerate(arrays) for i in np.ndindex(a.shape)]
    fd = central_fd(loss, arrays, idx, h=1e-4)
    an = np.array([grads[k][i] for k, i in idx])
    assert np.max(rel_err(an, fd, floor=1e-6)) <= 1e-4


def test_input_gradients(rng):
    p = small_net(rng)
    x, z = rng.normal(size=(3, 5)), rng.normal(size=(3, 3))
    r = rng.normal(size=(3, 4))
    _, tape = mlp_forward(p, x, z)
    _, dx, dz = mlp_backward(p, tape, r, input_grads=True)
    fx = central_fd(lambda: float(np.sum(mlp_forward(p, x, z)[0] * r)), [x], [(0, i) for i in np.ndindex(x.shape)])
    fz = central_fd(lambda: float(np.sum(mlp_forward(p, x, z)[0] * r)), [z], [(0, i) for i in np.ndindex(z.shape)])
    np.testing.assert_allclose(dx.reshape(-1), fx, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(dz.reshape(-1), fz, rtol=1e-6, atol=1e-9)


def test_zero_upstream_gives_zero_grads(rng):
    p = small_net(rng)
    _, tape = mlp_forward(p, rng.normal(size=(4, 5)), rng.normal(size=(4, 3)))
    assert all(np.all(g == 0) for g in mlp_backward(p, tape, np.zeros((4, 4))))


def test_dead_relu_unit_has_zero_grad(rng):
    p = small_net(rng)
    p.biases[0][0] = -1e6  # unit 0 of layer 1 never fires
    _, tape = mlp_forward(p, rng.normal(size=(4, 5)), rng.normal(size=(4, 3)))
    g = mlp_backward(p, tape, rng.normal(size=(4, 4)))
    assert np.all(g[0][:, 0] == 0) and g[1][0] == 0


def test_tape_reuse_rejected(rng):
    p = small_net(rng)
    _, tape = mlp_forward(p, rng.normal(size=(2, 5)), rng.normal(size=(2, 3)))
    mlp_backward(p, tape, np.ones((2, 4)))
    with pytest.raises(RuntimeError):
        mlp_backward(p, tape, np.ones((2, 4)))


def test_init_validation(rng):
    with pytest.raises(ConfigError):
        init_mlp(rng, 3, 0, [("a", 1, "tanh")])
    with pytest.raises(ConfigError):
        init_mlp(rng, 3, 2, MATERIAL_HEADS, depth=2, inject_at=0)


# ---------------------------------------------------------------- Adam


def test_adam_first_step_moves_by_lr(rng):
    p = small_net(rng)
    before = [a.copy() for a in p.arrays()]
    grads = [np.full_like(a, -2.5) for a in before]
    st = adam_init(p, lr=1e-3)
    adam_step(p, grads, st)
    for a, b in zip(p.arrays(), before):
        np.testing.assert_allclose(a - b, 1e-3, rtol=1e-4)
    assert st.step == 1


def test_adam_zero_grads(rng):
    p = small_net(rng)
    before = [a.copy() for a in p.arrays()]
    st = adam_init(p)
    adam_step(p, [np.zeros_like(a) for a in before], st)
    assert st.step == 1
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), before))


def test_adam_skips_non_finite(rng):
    p = small_net(rng)
    before = [a.copy() for a in p.arrays()]
    grads = [np.zeros_like(a) for a in before]
    grads[3][0] = np.nan
    st = adam_init(p)
    adam_step(p, grads, st)
    assert st.skipped_steps == 1 and st.step == 0
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), before))


def test_adam_scalar_convergence():
    p = init_mlp(np.random.default_rng(0), 1, 0, [("w", 1, "linear")], depth=0, hidden=1, inject_at=0,
                 dtype=np.float64)
    w = p.biases[0]
    p.weights[0][:] = 0
    st = adam_init(p, lr=0.1)
    for _ in range(200):
        adam_step(p, [np.zeros((1, 1)), 2 * (w - 3.0)], st)
    assert abs(w[0] - 3.0) < 0.05


def test_constant_target_loss_non_increasing_over_windows():
    rng = np.random.default_rng(5)
    p = small_net(rng, LIGHTFIELD_HEADS, depth=3, hidden=16)
    x, z = rng.normal(size=(64, 5)), rng.normal(size=(64, 3))
    target = np.full((64, 12), 0.4)
    st = adam_init(p, lr=1e-3)
    losses = []
    for _ in range(400):
        out, tape = mlp_forward(p, x, z)
        diff = out - target
        losses.append(np.mean(diff ** 2))
        adam_step(p, mlp_backward(p, tape, 2 * diff / diff.size), st)
    losses = np.array(losses)
    assert np.all(losses[100:] <= losses[:-100])


# ---------------------------------------------------------------- network evaluators


def test_material_net_zero_head_bias(rng):
    p = init_material_net(rng, SMALL)
    p.weights[-1][:] = 0
    m = material_net_eval(p, rng.uniform(-1, 1, (5, 3)), [0, 0, 1.0], SMALL)
    np.testing.assert_allclose(m.gamma, np.log(2), rtol=1e-6)
    np.testing.assert_allclose(m.eta, 0.5, rtol=1e-6)


@given(st.integers(0, 2**31))
def test_material_ranges(seed):
    r = np.random.default_rng(seed)
    p = init_material_net(r, SMALL)
    p.biases[-1][:] = r.normal(0, 5, 4)
    m = material_net_eval(p, r.uniform(-1, 1, (16, 3)), r.normal(size=3) / np.sqrt(3), SMALL)
    assert np.all(m.gamma >= 0) and np.all((m.eta >= 0) & (m.eta <= 1))


def test_material_view_dependence(rng):
    p = init_material_net(rng, SMALL, dtype=np.float64)
    x = np.array([0.1, 0.2, 0.3])
    a = material_net_eval(p, x, [0, 0, 1.0], SMALL).gamma
    b = material_net_eval(p, x, [1.0, 0, 0], SMALL).gamma
    assert a != b


def test_lightfield_zero_and_code_dependence(rng):
    p = init_lightfield_net(rng, SMALL, dtype=np.float64)
    x = rng.uniform(-1, 1, (4, 3))
    a = lightfield_net_eval(p, x, [0, 1.0, 0], rng.normal(size=18), SMALL)
    b = lightfield_net_eval(p, x, [0, 1.0, 0], rng.normal(size=18), SMALL)
    assert not np.allclose(a, b)
    for arr in p.arrays():
        arr[:] = 0
    assert np.all(lightfield_net_eval(p, x, [0, 1.0, 0], np.ones(18), SMALL) == 0)


def test_injection_widths():
    rng = np.random.default_rng(0)
    p = init_lightfield_net(rng)
    assert p.weights[3].shape == (256 + 27 + 18, 256)
    assert p.weights[0].shape == (63, 256)
    assert len(p.weights) == 9
    m = init_material_net(rng)
    assert m.weights[3].shape == (256 + 27, 256) and m.weights[-1].shape == (256, 4)


# ---------------------------------------------------------------- checkpoints


def _nets(rng, cfg=SMALL):
    return {"material": init_material_net(rng, cfg), "lightfield": init_lightfield_net(rng, cfg)}


def test_checkpoint_round_trip_bitwise(tmp_path, rng):
    nets = _nets(rng)
    for p in nets.values():
        for a in p.arrays():
            a[:] = rng.normal(size=a.shape)
    opts = {k: adam_init(v) for k, v in nets.items()}
    adam_step(nets["material"], [rng.normal(size=a.shape) for a in nets["material"].arrays()], opts["material"])
    save_checkpoint(tmp_path / "c.lfld", nets, opts, {"iteration": 3})
    ck = load_checkpoint(tmp_path / "c.lfld")
    assert ck.meta == {"iteration": 3}
    for name, p in nets.items():
        for a, b in zip(p.arrays(), ck.nets[name].arrays()):
            assert a.tobytes() == b.tobytes()
        for a, b in zip(opts[name].m + opts[name].v, ck.optimizers[name].m + ck.optimizers[name].v):
            assert a.tobytes() == b.tobytes()
        assert ck.optimizers[name].step == opts[name].step


def test_checkpoint_errors(tmp_path, rng):
    nets = _nets(rng)
    path = tmp_path / "c.lfld"
    save_checkpoint(path, nets)
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="bad checkpoint header"):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short")
    (tmp_path / "ver").write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver")
    wider = init_lightfield_net(rng, NetworkConfig(depth=3, hidden=32, inject_at=2))
    with pytest.raises(CheckpointError, match="architecture mismatch"):
        load_checkpoint(path, expected={"lightfield": wider.descriptor()})
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "missing")
