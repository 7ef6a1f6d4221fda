"""Modality attention: a two-layer MLP over [h, x_in] followed by a 4-way
softmax whose entries scale the four input blocks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionError, Node, Param, Tape, init_linear, softmax

MODALITIES = ("whole", "thumb", "joints", "torques")


@dataclass(frozen=True)
class ModalityLayout:
    blocks: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        off = 0
        for name, o, w in self.blocks:
            if o != off or w <= 0:
                raise DimensionError(f"block {name} at offset {o} width {w} breaks contiguity")
            off += w

    @classmethod
    def build(cls, latent_dim: int, n_joints: int, thumb: bool = True) -> "ModalityLayout":
        widths = [("whole", latent_dim)]
        if thumb:
            widths.append(("thumb", latent_dim))
        widths += [("joints", n_joints), ("torques", n_joints)]
        blocks, off = [], 0
        for name, w in widths:
            blocks.append((name, off, w))
            off += w
        return cls(tuple(blocks))

    @property
    def width(self) -> int:
        return sum(w for _, _, w in self.blocks)

    @property
    def widths(self) -> list[int]:
        return [w for _, _, w in self.blocks]

    @property
    def names(self) -> list[str]:
        return [n for n, _, _ in self.blocks]

    def slice(self, name: str) -> slice:
        for n, o, w in self.blocks:
            if n == name:
                return slice(o, o + w)
        raise KeyError(name)


class AttentionParams:
    def __init__(self, hidden_size: int, layout: ModalityLayout, mlp_hidden: int = 32,
                 rng: np.random.Generator | int = 0):
        if len(layout.blocks) != 4:
            raise DimensionError(f"attention needs exactly 4 modality blocks, got {len(layout.blocks)}")
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.layout = layout
        self.hidden_size = hidden_size
        self.W1, self.b1 = init_linear(rng, "att.fc1", hidden_size + layout.width, mlp_hidden)
        self.W2, self.b2 = init_linear(rng, "att.fc2", mlp_hidden, 4)

    @property
    def params(self) -> list[Param]:
        return [self.W1, self.b1, self.W2, self.b2]


def attention_forward(h: np.ndarray, x_in: np.ndarray, params: AttentionParams) -> np.ndarray:
    """A = softmax(mlp([h, x_in])); one row per sample."""
    z = np.concatenate([np.atleast_2d(h), np.atleast_2d(x_in)], axis=1)
    a = np.tanh(z @ params.W1.value + params.b1.value)
    return softmax(a @ params.W2.value + params.b2.value)


def apply_attention(x_in: np.ndarray, A: np.ndarray, layout: ModalityLayout) -> np.ndarray:
    x_in = np.atleast_2d(x_in)
    A = np.atleast_2d(A)
    if x_in.shape[1] != layout.width or A.shape[1] != len(layout.blocks):
        raise DimensionError(f"x {x_in.shape} / A {A.shape} do not fit layout width {layout.width}")
    return x_in * np.repeat(A, layout.widths, axis=1)


def tape_attention(tape: Tape, h: Node, x_in: Node, params: AttentionParams) -> tuple[Node, Node]:
    """Returns (A, x_lstm) nodes."""
    z = tape.concat([h, x_in])
    a = tape.tanh(tape.affine(z, tape.param(params.W1), tape.param(params.b1)))
    A = tape.softmax(tape.affine(a, tape.param(params.W2), tape.param(params.b2)))
    return A, tape.block_scale(x_in, A, params.layout.widths)


# trace export order
EXPORT_ORDER = ("joints", "torques", "whole", "thumb")


def trace_rows(A: np.ndarray, labels: np.ndarray, layout: ModalityLayout) -> list[list]:
    """Rows (t, A_joint, A_torque, A_whole_tactile, A_thumb_tactile, subtask_label)."""
    cols = [layout.names.index(n) for n in EXPORT_ORDER]
    return [[t, *[float(A[t, c]) for c in cols], int(labels[t])] for t in range(len(A))]
