import numpy as np
import pytest

from hcseg.data import SynthSpec, synth_generate
from hcseg.segnet import NetworkConfig, build_network
from hcseg.tensor import Tensor
from hcseg.train import AdamState, NumericalError, TrainConfig, adam_step, evaluate, predict_masks, soft_dice_per_image, train


def reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return theta


def test_adam_matches_reference():
    rng = np.random.default_rng(0)
    theta0 = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(7)]
    p = Tensor(theta0.copy())
    state = AdamState(lr=0.01)
    for g in grads:
        adam_step([p], [g], state)
    np.testing.assert_allclose(p.data, reference_adam(theta0, grads, 0.01), rtol=1e-12)
    assert state.t == 7


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.zeros(3))
    adam_step([p], [np.array([5.0, -0.1, 2.0])], AdamState(lr=0.001))
    np.testing.assert_allclose(p.data, [-0.001, 0.001, -0.001], rtol=1e-6)


def test_adam_rejects_nonfinite_and_bad_shapes():
    p = Tensor(np.zeros(2))
    with pytest.raises(NumericalError, match="w"):
        adam_step([p], [np.array([np.nan, 0.0])], AdamState(), names=["w"])
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(3)], AdamState())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_soft_dice_per_image():
    m = np.zeros((2, 1, 2, 2))
    m[0, 0, 0, 0] = 1
    np.testing.assert_allclose(soft_dice_per_image(m, m), [1.0, 1.0])


@pytest.fixture(scope="module")
def tiny():
    recs = synth_generate(SynthSpec(count=4, image_size=(32, 32), semi_axis_range=(9, 13), speckle=0.1, margin=1, seed=2))
    cfg = NetworkConfig("ms-mini-linknet", (32, 32), base_channels=4)
    return recs, cfg


def test_training_reduces_loss_and_is_reproducible(tiny, tmp_path):
    recs, cfg = tiny
    tc = TrainConfig(epochs=20, batch_size=2, lr=0.01, seed=1, checkpoint_dir=str(tmp_path), checkpoint_every=10)
    net_a, hist_a = train(build_network(cfg, seed=0), recs, recs[:2], tc)
    net_b, hist_b = train(build_network(cfg, seed=0), recs, recs[:2], TrainConfig(epochs=20, batch_size=2, lr=0.01, seed=1))
    assert len(hist_a) == 20
    assert hist_a.rows[-1].train_loss < hist_a.rows[0].train_loss
    assert [r.train_loss for r in hist_a.rows] == [r.train_loss for r in hist_b.rows]
    for (n1, p1), (_, p2) in zip(net_a.named_parameters(), net_b.named_parameters()):
        np.testing.assert_array_equal(p1.data, p2.data, err_msg=n1)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_0010.ckpt", "epoch_0020.ckpt"]
    assert not net_a.training
    hist_a.write_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().startswith("epoch,train_loss,val_soft_dice,wall_time_s\n")


def test_zero_epochs_and_empty_set(tiny):
    recs, cfg = tiny
    net = build_network(cfg)
    _, hist = train(net, recs, [], TrainConfig(epochs=0))
    assert len(hist) == 0
    with pytest.raises(ValueError):
        train(net, [], [], TrainConfig(epochs=1))


def test_predict_and_evaluate_shapes(tiny):
    recs, cfg = tiny
    net = build_network(cfg)
    masks = predict_masks(net, recs)
    assert [m.shape for m in masks] == [r.mask.shape for r in recs]
    assert all(m.dtype == bool for m in masks)
    report = evaluate(net, recs)
    assert len(report.rows) == len(recs)
