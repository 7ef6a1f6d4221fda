"""Fully connected tactile autoencoders (whole hand and thumb)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (Checkpoint, NumericError, OptimizerState, Param, Tape, init_linear, optimizer_step,
                   restore, sigmoid, snapshot)

log = logging.getLogger(__name__)


@dataclass
class AEConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 32)
    latent_dim: int = 10

    def __post_init__(self):
        self.hidden_dims = tuple(self.hidden_dims)
        if self.latent_dim > self.input_dim:
            raise ValueError(f"latent_dim {self.latent_dim} exceeds input_dim {self.input_dim}")

    @property
    def encoder_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.latent_dim]

    @property
    def decoder_dims(self) -> list[int]:
        return self.encoder_dims[::-1]


class Autoencoder:
    """tanh hidden layers; sigmoid on the latent and on the reconstruction so
    both live in (0, 1) like the normalized data."""

    def __init__(self, config: AEConfig, seed: int | np.random.Generator = 0, name: str = "ae"):
        self.config = config
        self.name = name
        rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
        self.enc: list[tuple[Param, Param]] = []
        self.dec: list[tuple[Param, Param]] = []
        dims = config.encoder_dims
        for i in range(len(dims) - 1):
            self.enc.append(init_linear(rng, f"{name}.enc{i}", dims[i], dims[i + 1]))
        dims = config.decoder_dims
        for i in range(len(dims) - 1):
            self.dec.append(init_linear(rng, f"{name}.dec{i}", dims[i], dims[i + 1]))

    @property
    def params(self) -> list[Param]:
        return [p for layer in self.enc + self.dec for p in layer]

    @staticmethod
    def _run(layers, x: np.ndarray) -> np.ndarray:
        for k, (W, b) in enumerate(layers):
            x = x @ W.value + b.value
            x = sigmoid(x) if k == len(layers) - 1 else np.tanh(x)
        return x

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self._run(self.enc, x)

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return self._run(self.dec, z)

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(x))

    def tape_forward(self, tape: Tape, x) -> tuple:
        """Returns (latent node, reconstruction node)."""
        h = x if not isinstance(x, np.ndarray) else tape.const(x)
        z = None
        layers = self.enc + self.dec
        n_enc = len(self.enc)
        for k, (W, b) in enumerate(layers):
            h = tape.affine(h, tape.param(W), tape.param(b))
            last = k == n_enc - 1 or k == len(layers) - 1
            h = tape.sigmoid(h) if last else tape.tanh(h)
            if k == n_enc - 1:
                z = h
        return z, h

    def mse(self, x: np.ndarray) -> float:
        r = self.reconstruct(x)
        return float(np.mean((r - x) ** 2))

    def checkpoint(self, config_hash: str = "", opt: OptimizerState | None = None) -> Checkpoint:
        meta = {"kind": "autoencoder", "name": self.name, "input_dim": self.config.input_dim,
                "hidden_dims": list(self.config.hidden_dims), "latent_dim": self.config.latent_dim}
        return Checkpoint.from_params(self.params, config_hash, meta, opt)

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "Autoencoder":
        m = ck.meta
        ae = cls(AEConfig(m["input_dim"], tuple(m["hidden_dims"]), m["latent_dim"]), 0, m["name"])
        ck.load_into(ae.params)
        return ae


@dataclass
class TrainCurve:
    train: list[float] = field(default_factory=list)
    val: list[float] = field(default_factory=list)
    val_epochs: list[int] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")


def train_ae(train_x: np.ndarray, val_x: np.ndarray, config: AEConfig, epochs: int = 1000, seed: int = 0,
             lr: float = 1e-3, batch_size: int = 256, name: str = "ae",
             optimizer: str = "adam", val_every: int = 1) -> tuple[Autoencoder, TrainCurve]:
    """Frame-wise training; returns the parameters of the best validation epoch."""
    rng = np.random.default_rng(seed)
    ae = Autoencoder(config, rng, name)
    params = ae.params
    opt = OptimizerState(lr, optimizer)
    curve = TrainCurve()
    best = snapshot(params)
    n = len(train_x)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            xb = train_x[order[start:start + batch_size]]
            tape = Tape()
            _, rec = ae.tape_forward(tape, xb)
            loss = tape.weighted_sse(rec, xb, np.ones(xb.shape[1]))
            tape.backward(loss, 1.0 / xb.size)
            optimizer_step(params, opt)
            total += loss.value[0, 0]
        curve.train.append(total / train_x.size)
        if epoch % val_every == 0 or epoch == epochs - 1:
            v = ae.mse(val_x)
            if not np.isfinite(v):
                raise NumericError(f"{name}: validation loss became {v} at epoch {epoch}")
            curve.val.append(v)
            curve.val_epochs.append(epoch)
            if v < curve.best_val:
                curve.best_val, curve.best_epoch = v, epoch
                best = snapshot(params)
    restore(params, best)
    log.info("%s: best validation MSE %.3g at epoch %d", name, curve.best_val, curve.best_epoch)
    return ae, curve
