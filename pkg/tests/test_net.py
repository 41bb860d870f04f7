import numpy as np
import pytest

from remgrasp.data import synth_dataset
from remgrasp.net import GraspNet, LayerSpec, NetworkSpec, gradient_check
from remgrasp.numerics import ShapeError
from remgrasp.rem import RemConfig
from remgrasp.train import (TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint,
                            train)

TINY_REM = RemConfig(kernel=3, n_f=3, decompress=2)


def tiny_spec(**kw):
    base = dict(input_size=(8, 8, 2), layers=(LayerSpec(3, 2, 3),), rem_position=1,
                rem=TINY_REM, anchors="multi")
    base.update(kw)
    return NetworkSpec(**base)


def test_default_shapes():
    spec = NetworkSpec()
    assert spec.grid_size == 12 and spec.cell_pixels == 8.0
    raw, inter = GraspNet(spec).forward(np.zeros((2, 96, 96, 3)))
    assert raw.shape == (2, 12, 12, 23)
    assert inter.shape == (2, 12, 12, 9)


def test_rem_off():
    on = GraspNet(NetworkSpec())
    off = GraspNet(NetworkSpec(rem=RemConfig(enabled=False)))
    raw, inter = off.forward(np.zeros((96, 96, 3)))
    assert inter is None and raw.shape == (12, 12, 23)
    # the layer after the block sees decompress fewer inputs
    assert on.params["l3.w"].shape[2] - off.params["l3.w"].shape[2] == RemConfig().decompress + 16 - 32


def test_zero_weights():
    net = GraspNet(tiny_spec())
    net.set_flat(np.zeros(net.n_params))
    raw, inter = net.forward(np.ones((8, 8, 2)))
    assert not raw.any() and not inter.any()


def test_shape_errors():
    net = GraspNet(tiny_spec())
    with pytest.raises(ShapeError):
        net.forward(np.zeros((9, 8, 2)))
    with pytest.raises(ShapeError):
        net.set_flat(np.zeros(3))
    with pytest.raises(ValueError):
        NetworkSpec(input_size=(90, 90, 3))


def test_backward_before_forward():
    net = GraspNet(tiny_spec())
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((4, 4, 7 * 23)))


def test_zero_gradient_in_zero_out(rng):
    net = GraspNet(tiny_spec())
    raw, inter = net.forward(rng.normal(size=(1, 8, 8, 2)))
    grads = net.backward(np.zeros_like(raw), np.zeros_like(inter))
    assert all(not g.any() for g in grads.values())


def test_dead_unit(rng):
    spec = tiny_spec(rem=RemConfig(enabled=False), slope=0.0,
                     layers=(LayerSpec(3, 1, 2), LayerSpec(3, 2, 2)))
    net = GraspNet(spec, seed=3)
    net.params["l0.b"][1] = -1e3  # unit 1 of the first layer never fires
    raw, _ = net.forward(rng.normal(size=(1, 8, 8, 2)))
    grads = net.backward(rng.normal(size=raw.shape))
    assert not grads["l0.w"][..., 1].any() and grads["l0.b"][1] == 0.0
    assert grads["l0.w"][..., 0].any()


@pytest.mark.parametrize("mode", ["reg", "cls", "rot"])
def test_network_gradients(rng, mode):
    net = GraspNet(tiny_spec(angle_mode=mode), seed=1)
    x = rng.normal(size=(1, 8, 8, 2))
    raw, inter = net.forward(x)
    wr, wi = rng.normal(size=raw.shape), rng.normal(size=inter.shape)

    def f():
        r, i = net.forward(x)
        return float((r * wr).sum() + (i * wi).sum())

    net.forward(x)
    grads = net.backward(wr, wi)
    for k, p in net.params.items():
        assert gradient_check(f, p, grads[k]) <= 1e-4, k


def test_seeded_init():
    a, b = GraspNet(NetworkSpec(), seed=5), GraspNet(NetworkSpec(), seed=5)
    assert np.array_equal(a.get_flat(), b.get_flat())
    assert not np.array_equal(a.get_flat(), GraspNet(NetworkSpec(), seed=6).get_flat())


def test_spec_dict_round_trip():
    spec = tiny_spec(angle_mode="rot", rem=RemConfig(kernel=3, rl=True))
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_checkpoint_round_trip(tmp_path, rng):
    net = GraspNet(tiny_spec(angle_mode="reg"), seed=2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, net, extra={"note": 1})
    back, header = load_checkpoint(path)
    assert back.spec == net.spec and header["extra"] == {"note": 1}
    assert np.array_equal(back.get_flat(), net.get_flat())
    save_checkpoint(tmp_path / "again.ckpt", back, extra={"note": 1})
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    data = bytearray(path.read_bytes())
    data[-1] ^= 1
    path.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="checksum"):
        load_checkpoint(path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_lr_schedule():
    cfg = TrainConfig(epochs=10, warmup_epochs=2, lr=0.01, lr_final=0.001)
    lrs = [cfg.lr_at(e) for e in range(10)]
    assert lrs[0] < lrs[1] < lrs[2] == pytest.approx(0.01)
    assert all(a >= b for a, b in zip(lrs[2:], lrs[3:]))
    assert TrainConfig.from_mapping({"epochs": "3", "lr": "0.5", "bogus": 1}).epochs == 3


@pytest.fixture(scope="module")
def small_scenes():
    return synth_dataset(24, seed=7, objects=(1, 1))


def test_zero_epochs_leaves_net(small_scenes):
    net = GraspNet(NetworkSpec(), seed=0)
    before = net.get_flat().copy()
    res = train(net, small_scenes, [], TrainConfig(epochs=0))
    assert res.history == [] and np.array_equal(net.get_flat(), before)
    with pytest.raises(ValueError):
        train(net, [], [], TrainConfig(epochs=1))


def test_training_deterministic(small_scenes):
    cfg = TrainConfig(epochs=2, batch_size=8, lambda_noobj=1.0)
    runs = []
    for _ in range(2):
        net = GraspNet(NetworkSpec(), seed=0)
        res = train(net, small_scenes[:16], small_scenes[16:], cfg)
        runs.append((net.get_flat(), res.history))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_full_batch_loss_decreases(small_scenes):
    cfg = TrainConfig(epochs=10, batch_size=len(small_scenes), lambda_noobj=1.0)
    hist = train(GraspNet(NetworkSpec(), seed=0), small_scenes, [], cfg).history
    losses = [h["loss"] for h in hist]
    assert all(b <= a for a, b in zip(losses, losses[1:])), losses


def test_divergence_detected(small_scenes):
    net = GraspNet(NetworkSpec(), seed=0)
    net.params["l8.b"][:] = np.nan
    with pytest.raises(TrainingDiverged):
        train(net, small_scenes[:8], [], TrainConfig(epochs=1))
