"""MLP feature extractor with a bias-free linear head.

The head matrix has one row per class, so class scores are plain inner
products with the extracted feature vector; that layout is what the
closed-form semantic losses differentiate through. A frozen snapshot of the
parameters is a pure-numpy copy, so nothing computed from it can leak
gradients back into training.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensorcore import Tensor, softmax

CHECKPOINT_MAGIC = b"PLSW"
CHECKPOINT_VERSION = 1


@dataclass
class ClassifierParams:
    layers: list[tuple[Tensor, Tensor]]   # (weight (in,out), bias (out,)) per hidden layer
    head: Tensor                          # (l, d_f), rows are class vectors

    @property
    def n_classes(self) -> int:
        return self.head.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.head.shape[1]

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0] if self.layers else self.head.shape[1]

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for w, b in self.layers:
            out.extend((w, b))
        out.append(self.head)
        return out

    def clone(self) -> "ClassifierParams":
        return ClassifierParams(
            layers=[(Tensor(w.data.copy(), requires_grad=True),
                     Tensor(b.data.copy(), requires_grad=True))
                    for w, b in self.layers],
            head=Tensor(self.head.data.copy(), requires_grad=True),
        )

    # numpy fast paths for evaluation (no graph construction)

    def eval_features(self, x: np.ndarray) -> np.ndarray:
        a = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        for w, b in self.layers:
            a = np.maximum(a @ w.data + b.data, 0.0)
        return a

    def eval_logits(self, x: np.ndarray) -> np.ndarray:
        return self.eval_features(x) @ self.head.data.T

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.eval_logits(x).argmax(axis=1)


def init_classifier(input_dim: int, hidden_dims: tuple[int, ...], n_classes: int,
                    rng: np.random.Generator) -> ClassifierParams:
    """He-style gaussian weights, zero biases, bias-free head."""
    layers = []
    fan_in = input_dim
    for width in hidden_dims:
        w = rng.standard_normal((fan_in, width)) * np.sqrt(2.0 / fan_in)
        layers.append((Tensor(w, requires_grad=True),
                       Tensor(np.zeros(width), requires_grad=True)))
        fan_in = width
    head = rng.standard_normal((n_classes, fan_in)) * np.sqrt(2.0 / fan_in)
    return ClassifierParams(layers=layers, head=Tensor(head, requires_grad=True))


def extract_features(params: ClassifierParams, x: np.ndarray) -> Tensor:
    """Differentiable forward pass through the ReLU stack."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    if x.shape[1] != params.input_dim:
        raise ValueError(f"input dim {x.shape[1]} != expected {params.input_dim}")
    a = Tensor(x)
    for w, b in params.layers:
        a = (a @ w + b).relu()
    return a


def logits(features: Tensor, head: Tensor) -> Tensor:
    if features.shape[1] != head.shape[1]:
        raise ValueError("feature dim does not match head")
    return features @ head.T


class FrozenClassifier:
    """Immutable numpy copy of the parameters; gradient-opaque by construction."""

    def __init__(self, layers: list[tuple[np.ndarray, np.ndarray]], head: np.ndarray):
        self.layers = [(w.copy(), b.copy()) for w, b in layers]
        self.head = head.copy()

    @property
    def n_classes(self) -> int:
        return self.head.shape[0]

    def features(self, x: np.ndarray) -> np.ndarray:
        a = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        for w, b in self.layers:
            a = np.maximum(a @ w + b, 0.0)
        return a

    def logits_of(self, x: np.ndarray) -> np.ndarray:
        return self.features(x) @ self.head.T

    def probs(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits_of(x), axis=1)


def snapshot_frozen(params: ClassifierParams) -> FrozenClassifier:
    return FrozenClassifier(
        layers=[(w.data, b.data) for w, b in params.layers],
        head=params.head.data,
    )


def save_checkpoint(path, params: ClassifierParams) -> None:
    arrays = [t.data for t in params.parameters()]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HHI", CHECKPOINT_VERSION, 0, len(arrays)))
        for arr in arrays:
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ClassifierParams:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {buf[:4]!r}")
    version, _flags, count = struct.unpack("<HHI", buf[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    arrays = []
    for _ in range(count):
        (rank,) = struct.unpack("<I", buf[off:off + 4])
        off += 4
        dims = struct.unpack(f"<{rank}I", buf[off:off + 4 * rank])
        off += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(buf[off:off + 8 * size], dtype="<f8").reshape(dims).copy()
        off += 8 * size
        arrays.append(arr)
    if len(arrays) % 2 != 1:
        raise ValueError("checkpoint must hold layer pairs plus a head")
    layers = [
        (Tensor(arrays[i], requires_grad=True), Tensor(arrays[i + 1], requires_grad=True))
        for i in range(0, len(arrays) - 1, 2)
    ]
    return ClassifierParams(layers=layers, head=Tensor(arrays[-1], requires_grad=True))
