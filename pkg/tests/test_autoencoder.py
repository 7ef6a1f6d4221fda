import numpy as np
import pytest

from aelstm.autoencoder import AEConfig, Autoencoder, train_ae
from aelstm.core import Checkpoint, NumericError, Tape, grad_check
from aelstm.policy import Policy, PolicyConfig


def test_config_checks():
    assert AEConfig(96).decoder_dims == [10, 32, 64, 96]
    with pytest.raises(ValueError):
        AEConfig(8, (4,), 10)


def test_constant_dataset():
    X = np.full((64, 12), 0.37)
    ae, curve = train_ae(X, X, AEConfig(12, (8,), 4), epochs=200, lr=1e-2, batch_size=64, val_every=10)
    assert curve.best_val < 1e-4


def test_identity_capable_small_set():
    # latent as wide as the input reconstructs a handful of frames essentially exactly
    X = np.random.default_rng(0).uniform(0.1, 0.9, size=(8, 4))
    ae, curve = train_ae(X, X, AEConfig(4, (16,), 4), epochs=3000, lr=1e-2, batch_size=8, val_every=50)
    assert curve.best_val < 1e-6


def test_synthetic_tactile_regression(tactile_frames):
    # bound recorded from a reference run (about 9e-4 after 100 epochs)
    Xtr, Xva = tactile_frames
    ae, curve = train_ae(Xtr, Xva, AEConfig(96, (64, 32), 10), epochs=100, val_every=5)
    assert ae.mse(Xva) == pytest.approx(curve.best_val, rel=1e-12)
    assert curve.best_val < 0.005


def test_best_epoch_is_restored():
    r = np.random.default_rng(1)
    Xtr, Xva = r.uniform(0.1, 0.9, (40, 6)), r.uniform(0.1, 0.9, (10, 6))
    ae, curve = train_ae(Xtr, Xva, AEConfig(6, (5,), 3), epochs=60, lr=3e-2, batch_size=8)
    assert min(curve.val) == curve.best_val == ae.mse(Xva)


def test_encode_shapes_and_determinism():
    ae = Autoencoder(AEConfig(24, (32, 16), 10), seed=3)
    x = np.random.default_rng(0).uniform(0.1, 0.9, (5, 24))
    z = ae.encode(x)
    assert z.shape == (5, 10) and np.all((z > 0) & (z < 1))
    assert ae.decode(z).shape == x.shape
    assert ae.reconstruct(x).tobytes() == ae.reconstruct(x).tobytes()
    other = Autoencoder(AEConfig(24, (32, 16), 10), seed=3)
    assert other.reconstruct(x).tobytes() == ae.reconstruct(x).tobytes()


def test_tape_matches_numpy():
    ae = Autoencoder(AEConfig(7, (5,), 3), seed=0)
    x = np.random.default_rng(2).uniform(0.1, 0.9, (4, 7))
    z, rec = ae.tape_forward(Tape(), x)
    np.testing.assert_allclose(z.value, ae.encode(x), rtol=1e-14)
    np.testing.assert_allclose(rec.value, ae.reconstruct(x), rtol=1e-14)


def test_grad_check():
    ae = Autoencoder(AEConfig(6, (5,), 3), seed=1)
    x = np.random.default_rng(3).uniform(0.1, 0.9, (3, 6))

    def loss(t):
        return t.weighted_sse(ae.tape_forward(t, x)[1], x, np.ones(6))

    assert grad_check(loss, ae.params).max_rel_error < 1e-4


def test_nan_validation_aborts():
    X = np.full((4, 3), 0.5)
    V = X.copy()
    V[0, 0] = np.nan
    with pytest.raises(NumericError, match="epoch 0"):
        train_ae(X, V, AEConfig(3, (), 2), epochs=3)


def test_training_leaves_policy_untouched():
    pol = Policy(PolicyConfig(), seed=0)
    before = [p.value.copy() for p in pol.params]
    X = np.random.default_rng(0).uniform(0.1, 0.9, (20, 24))
    train_ae(X, X, AEConfig(24, (8,), 10), epochs=5)
    for p, b in zip(pol.params, before):
        assert p.value.tobytes() == b.tobytes()


def test_checkpoint_round_trip(tmp_path):
    ae = Autoencoder(AEConfig(24, (32, 16), 10), seed=5, name="ae_thumb")
    ae.checkpoint("h").save(tmp_path / "ae.ckpt")
    back = Autoencoder.from_checkpoint(Checkpoint.load(tmp_path / "ae.ckpt"))
    assert back.name == "ae_thumb" and back.config.latent_dim == 10
    x = np.random.default_rng(0).uniform(0.1, 0.9, (3, 24))
    assert back.reconstruct(x).tobytes() == ae.reconstruct(x).tobytes()
