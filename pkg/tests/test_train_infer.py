import struct

import numpy as np
import pytest

from advbnn import nd_core as nd
from advbnn.bayes_net import Linear, Network, mlp, small_cnn
from advbnn.data_io import synth_blobs
from advbnn.nd_core import NoiseSource, Tensor
from advbnn.train_infer import (SGD, CorruptHeaderError, ShapeMismatchError, TrainConfig,
                                TruncatedPayloadError, UnsupportedVersionError, build_network, load_checkpoint,
                                predict_ensemble, predict_mean, save_checkpoint, train)


@pytest.fixture(scope="module")
def blobs():
    return synth_blobs(300, n_classes=3, dim=3, separation=6.0, seed=1)


def quick_cfg(mode, **kw):
    base = dict(epochs=5, batch_size=32, lr=0.05, gamma_train=0.03, k_train=3, sigma0=0.1, alpha=0.05,
                seed=3, defense_mode=mode)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_rejects_unknown_mode(self):
        with pytest.raises(ValueError):
            TrainConfig(defense_mode="rse")

    def test_rejects_negative_budget(self):
        with pytest.raises(ValueError):
            TrainConfig(k_train=-1)

    def test_step_decay(self):
        cfg = TrainConfig(lr=0.1, lr_decay=0.5, lr_decay_every=10)
        assert [cfg.lr_at(e) for e in (0, 9, 10, 25)] == [0.1, 0.1, 0.05, 0.025]

    def test_hash_tracks_fields(self):
        assert TrainConfig().hash() == TrainConfig().hash()
        assert TrainConfig().hash() != TrainConfig(seed=1).hash()

    def test_mode_must_fit_network(self, blobs):
        net = mlp(3, [4], 3, variational=False)
        with pytest.raises(ValueError):
            train(net, blobs.inputs, blobs.labels, quick_cfg("bnn"))


def test_sgd_step_by_hand():
    p = Tensor(np.array([1.5]), dtype=np.float64)
    opt = SGD([p], lr=0.1, momentum=0.0)
    opt.step([np.array([2.0])])
    assert p.data[0] == pytest.approx(1.5 - 0.1 * 2.0, abs=1e-15)


def test_sgd_momentum_by_hand():
    p = Tensor(np.array([0.0]), dtype=np.float64)
    opt = SGD([p], lr=1.0, momentum=0.5)
    opt.step([np.array([1.0])])
    opt.step([np.array([1.0])])
    # v1 = 1, v2 = 0.5 * 1 + 1 = 1.5
    assert p.data[0] == pytest.approx(-2.5)


def test_separable_blobs_reach_99_percent():
    ds = synth_blobs(200, n_classes=2, dim=2, separation=6.0, seed=0)
    cfg = TrainConfig(epochs=50, batch_size=32, lr=0.05, defense_mode="none", seed=0)
    net = build_network(cfg, 2, 2, hidden=(16,))
    res = train(net, ds.inputs, ds.labels, cfg)
    assert np.mean(predict_mean(net, ds.inputs) == ds.labels) >= 0.99
    assert res.history[-1].kl == 0


@pytest.mark.parametrize("mode", ["none", "bnn", "adv_train", "adv_bnn"])
def test_loss_descends_over_first_epochs(blobs, mode):
    cfg = quick_cfg(mode)
    net = build_network(cfg, 3, 3, hidden=(16,))
    res = train(net, blobs.inputs, blobs.labels, cfg)
    totals = [h.total for h in res.history]
    assert len(totals) == 5
    assert totals[-1] < totals[0]


@pytest.mark.parametrize("mode", ["none", "bnn", "adv_train", "adv_bnn"])
def test_one_of_each_per_minibatch(blobs, mode):
    cfg = quick_cfg(mode, epochs=2)
    net = build_network(cfg, 3, 3, hidden=(8,))
    c = train(net, blobs.inputs, blobs.labels, cfg).counters
    n_batches = 2 * -(-len(blobs) // cfg.batch_size)
    assert c.minibatches == c.forwards == c.backwards == c.updates == n_batches
    assert c.attacks == (n_batches if mode in ("adv_train", "adv_bnn") else 0)
    assert c.weight_samples == (n_batches if mode in ("bnn", "adv_bnn") else 0)


def test_zero_radius_adv_bnn_matches_bnn(blobs, f64):
    nets = []
    for mode in ("bnn", "adv_bnn"):
        cfg = quick_cfg(mode, epochs=3, gamma_train=0.0)
        net = build_network(cfg, 3, 3, hidden=(8,))
        train(net, blobs.inputs, blobs.labels, cfg)
        nets.append(net)
    for a, b in zip(nets[0].parameters(), nets[1].parameters()):
        assert np.max(np.abs(a.data - b.data)) <= 1e-6


def test_bit_exact_reproducibility(blobs, f64, tmp_path):
    blobs_paths = []
    for run in range(2):
        cfg = quick_cfg("adv_bnn", epochs=2)
        net = build_network(cfg, 3, 3, hidden=(8,))
        train(net, blobs.inputs, blobs.labels, cfg)
        path = tmp_path / f"run{run}.abnn"
        save_checkpoint(net, path, "adv_bnn")
        blobs_paths.append(path.read_bytes())
    assert blobs_paths[0] == blobs_paths[1]


def test_metrics_csv(blobs, tmp_path):
    cfg = quick_cfg("bnn", epochs=2)
    net = build_network(cfg, 3, 3, hidden=(8,))
    train(net, blobs.inputs, blobs.labels, cfg, metrics_csv=tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "epoch,clean_acc,ce,kl,total"
    assert len(lines) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts(blobs):
    cfg = quick_cfg("none", epochs=1)
    net = build_network(cfg, 3, 3, hidden=(8,))
    net.parameters()[0].data[...] = 3e38   # float32 products overflow
    with pytest.raises((FloatingPointError, nd.NonFiniteError)):
        train(net, blobs.inputs, blobs.labels, cfg)


class TestPredictEnsemble:
    def test_single_sample_is_one_forward(self):
        net = mlp(3, [6], 3, variational=True, sigma0=0.3)
        x = np.random.default_rng(0).random((10, 3))
        labels, _ = predict_ensemble(net, x, m=1, noise=NoiseSource(5))
        eps = net.sample_eps(NoiseSource(5))
        np.testing.assert_array_equal(labels, net.forward(x, eps).data.argmax(axis=1))

    def test_zero_variance_matches_mean(self):
        net = mlp(3, [6], 3, variational=True)
        net.set_log_std(np.log(1e-7))
        x = np.random.default_rng(0).random((50, 3))
        for m in (1, 7):
            for mode in ("mean_prob", "min_expected_loss"):
                labels, _ = predict_ensemble(net, x, m=m, mode=mode)
                np.testing.assert_array_equal(labels, predict_mean(net, x))

    def test_min_expected_loss_is_argmin_of_mean_ce(self, f64):
        net = mlp(3, [6], 4, variational=True, sigma0=1.0, seed=3)
        x = np.random.default_rng(1).random((30, 3))
        labels, _ = predict_ensemble(net, x, m=5, mode="min_expected_loss", noise=NoiseSource(2))
        noise = NoiseSource(2)
        losses = np.zeros((30, 4))
        for _ in range(5):
            logits = net.forward(x, net.sample_eps(noise)).data
            for c in range(4):
                losses[:, c] += nd.per_example_cross_entropy(logits, np.full(30, c))
        np.testing.assert_array_equal(labels, losses.argmin(axis=1))

    def test_probabilities_normalized(self):
        net = mlp(3, [6], 3, variational=True, sigma0=0.5)
        _, probs = predict_ensemble(net, np.random.default_rng(0).random((8, 3)), m=4)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_bad_args(self):
        net = mlp(3, [6], 3, variational=True)
        with pytest.raises(ValueError):
            predict_ensemble(net, np.zeros((1, 3)), m=0)
        with pytest.raises(ValueError):
            predict_ensemble(net, np.zeros((1, 3)), mode="vote")

    def test_variance_shrinks_like_one_over_m(self, blobs):
        cfg = quick_cfg("bnn", epochs=5, sigma0=0.3)
        net = build_network(cfg, 3, 3, hidden=(16,))
        train(net, blobs.inputs, blobs.labels, cfg)
        x = blobs.inputs[:100]

        def spread(m):
            runs = np.stack([predict_ensemble(net, x, m=m, noise=NoiseSource(77, m, t))[1] for t in range(30)])
            return runs.var(axis=0, ddof=1).mean()

        ratio = spread(16) / spread(1)
        assert 1 / 32 <= ratio <= 1 / 8


class TestCheckpoint:
    def trained(self):
        net = mlp(3, [6], 3, variational=True, sigma0=0.1, seed=4)
        net.set_log_std(-2.0)
        return net

    def test_round_trip_bit_exact(self, tmp_path):
        net = self.trained()
        path = tmp_path / "a.abnn"
        save_checkpoint(net, path, "adv_bnn", meta={"epoch": 3})
        x = np.random.default_rng(0).random((10, 3)).astype(np.float32)
        net2, header = load_checkpoint(path)
        assert header["defense_mode"] == "adv_bnn" and header["meta"] == {"epoch": 3}
        assert net.forward(x, mean=True).data.tobytes() == net2.forward(x, mean=True).data.tobytes()

    def test_round_trip_cnn_and_f64(self, tmp_path, f64):
        net = small_cnn((1, 6, 6), 3, variational=True, channels=2, hidden=5)
        save_checkpoint(net, tmp_path / "c.abnn")
        net2, header = load_checkpoint(tmp_path / "c.abnn")
        assert header["dtype"] == "float64"
        x = np.random.default_rng(0).random((4, 1, 6, 6))
        assert net.forward(x, mean=True).data.tobytes() == net2.forward(x, mean=True).data.tobytes()

    def test_layout(self, tmp_path):
        save_checkpoint(self.trained(), tmp_path / "a.abnn")
        buf = (tmp_path / "a.abnn").read_bytes()
        assert buf[:4] == b"ABNN"
        assert struct.unpack("<I", buf[4:8])[0] == 1

    def test_truncated(self, tmp_path):
        path = tmp_path / "a.abnn"
        save_checkpoint(self.trained(), path)
        buf = path.read_bytes()
        for cut in (2, 10, len(buf) // 2, len(buf) - 1):
            path.write_bytes(buf[:cut])
            with pytest.raises((TruncatedPayloadError, CorruptHeaderError)) as e:
                load_checkpoint(path)
            if cut > 40:
                assert "truncated payload" in str(e.value)

    def test_version_99(self, tmp_path):
        path = tmp_path / "a.abnn"
        save_checkpoint(self.trained(), path)
        buf = bytearray(path.read_bytes())
        buf[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(buf))
        with pytest.raises(UnsupportedVersionError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "a.abnn"
        save_checkpoint(self.trained(), path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(CorruptHeaderError):
            load_checkpoint(path)

    def test_shape_mismatch(self, tmp_path):
        a, b = tmp_path / "a.abnn", tmp_path / "b.abnn"
        save_checkpoint(mlp(3, [6], 3, variational=False), a)
        save_checkpoint(mlp(3, [7], 3, variational=False), b)
        # splice the config block of a onto the arrays of b
        def split(buf):
            n = struct.unpack("<I", buf[8:12])[0]
            return buf[:12 + n], buf[12 + n:]
        head_a, _ = split(a.read_bytes())
        _, body_b = split(b.read_bytes())
        a.write_bytes(head_a + body_b)
        with pytest.raises(ShapeMismatchError):
            load_checkpoint(a)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "a.abnn"
        save_checkpoint(Network([Linear(2, 2)]), path)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(CorruptHeaderError):
            load_checkpoint(path)
