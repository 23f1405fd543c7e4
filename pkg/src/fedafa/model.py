"""Split MLP: a feature extractor followed by a classifier head.

Parameters are kept as one flat list ``[W0, b0, W1, b1, ...]`` with weights
shaped ``(fan_in, fan_out)``. The boundary only decides where that list is
cut into extractor and classifier halves, so moving it never changes the
full-model prediction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"FAFA"
CHECKPOINT_VERSION = 1


@dataclass
class SplitModel:
    layer_sizes: tuple[int, ...]
    boundary_index: int
    params: list[np.ndarray]

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        _check_boundary(self.layer_sizes, self.boundary_index)
        expected = param_shapes(self.layer_sizes)
        got = [p.shape for p in self.params]
        if got != expected:
            raise ValueError(f"parameter shapes {got} do not match layer sizes {self.layer_sizes}")

    @property
    def split(self) -> int:
        return 2 * (self.boundary_index + 1)

    @property
    def extractor(self) -> list[np.ndarray]:
        return self.params[: self.split]

    @property
    def classifier(self) -> list[np.ndarray]:
        return self.params[self.split:]

    @property
    def feature_dim(self) -> int:
        return self.layer_sizes[self.boundary_index + 1]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "SplitModel":
        return SplitModel(self.layer_sizes, self.boundary_index, [p.copy() for p in self.params])

    def with_boundary(self, boundary_index: int) -> "SplitModel":
        return SplitModel(self.layer_sizes, boundary_index, [p.copy() for p in self.params])

    def with_classifier(self, classifier: Sequence[np.ndarray]) -> "SplitModel":
        return SplitModel(self.layer_sizes, self.boundary_index,
                          [p.copy() for p in self.extractor] + [p.copy() for p in classifier])

    def predict(self, x: np.ndarray) -> np.ndarray:
        return classify(extract_features(x, self.extractor), self.classifier)


def param_shapes(layer_sizes: Sequence[int]) -> list[tuple[int, ...]]:
    shapes = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        shapes += [(fan_in, fan_out), (fan_out,)]
    return shapes


def _check_boundary(layer_sizes: Sequence[int], boundary_index: int) -> None:
    n_hidden = len(layer_sizes) - 2
    if n_hidden < 1:
        raise ValueError(f"need at least one hidden layer, got layer sizes {tuple(layer_sizes)}")
    if not 0 <= boundary_index < n_hidden:
        raise ValueError(
            f"boundary_index {boundary_index} invalid for {n_hidden} hidden layers; "
            "both extractor and classifier need at least one layer")


def init_model(layer_sizes: Sequence[int], boundary_index: int, seed: int) -> SplitModel:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    _check_boundary(layer_sizes, boundary_index)
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return SplitModel(tuple(layer_sizes), boundary_index, params)


# -- forward ------------------------------------------------------------------

def _layers(x, params, relu_last: bool):
    h = x
    n_layers = len(params) // 2
    for i in range(n_layers):
        W, b = params[2 * i], params[2 * i + 1]
        h = ad.add_bias(ad.matmul(h, W), b)
        if relu_last or i < n_layers - 1:
            h = ad.relu(h)
    return h


def _check_width(x: ad.Tensor, params, what: str) -> None:
    want = np.shape(params[0].value if isinstance(params[0], ad.Tensor) else params[0])[0]
    if x.value.ndim != 2 or x.shape[1] != want:
        raise ValueError(f"{what}: input shape {x.shape} does not match expected width {want}")


def extractor_forward(x, extractor) -> ad.Tensor:
    """Extractor pass as a graph-aware op chain (ReLU after every extractor layer)."""
    x = x if isinstance(x, ad.Tensor) else ad.Tensor(np.atleast_2d(x))
    _check_width(x, extractor, "extract_features")
    return _layers(x, extractor, relu_last=True)


def classifier_logits(h, classifier) -> ad.Tensor:
    """Classifier logits; ReLU between classifier layers, none on the output."""
    h = h if isinstance(h, ad.Tensor) else ad.Tensor(np.atleast_2d(h))
    _check_width(h, classifier, "classify")
    return _layers(h, classifier, relu_last=False)


def extract_features(x: np.ndarray, extractor: Sequence[np.ndarray]) -> np.ndarray:
    return extractor_forward(x, extractor).value


def classify(h: np.ndarray, classifier: Sequence[np.ndarray]) -> np.ndarray:
    """Class probabilities, one row per sample."""
    return ad.softmax(classifier_logits(h, classifier).value)


def local_loss(x: np.ndarray, y: np.ndarray, extractor, classifier) -> float:
    """Mean cross-entropy of the split model over a batch."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("local_loss needs a non-empty batch")
    logits = classifier_logits(extractor_forward(x, extractor), classifier)
    return float(ad.softmax_cross_entropy(logits, ad.one_hot(y, logits.shape[1])).value)


def loss_and_grads(params: Sequence[np.ndarray], split: int, x: np.ndarray, y: np.ndarray,
                   train_extractor: bool = True) -> tuple[float, list[np.ndarray]]:
    """Loss of the full model and gradients for the trainable parameters.

    With ``train_extractor=False`` only the classifier half (``params[split:]``)
    is differentiated and returned; the extractor is treated as constant.
    """
    if len(y) == 0:
        raise ValueError("empty batch")
    g = ad.Graph()
    if train_extractor:
        tensors = [g.tensor(p, requires_grad=True) for p in params]
        h = extractor_forward(ad.Tensor(x), tensors[:split])
    else:
        tensors = [g.tensor(p, requires_grad=True) for p in params[split:]]
        h = g.tensor(extract_features(x, params[:split]))
    logits = classifier_logits(h, tensors if not train_extractor else tensors[split:])
    loss = ad.softmax_cross_entropy(logits, ad.one_hot(y, logits.shape[1]))
    grads = ad.backward(loss)
    return float(loss.value), [grads[t] for t in tensors]


# -- optimisation -------------------------------------------------------------

@dataclass
class OptimizerState:
    """SGD with momentum and L2 weight decay on weight matrices only."""

    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: list[np.ndarray] = field(default_factory=list)


def sgd_step(params: list[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState) -> None:
    """In-place update.

    buffer <- momentum * buffer + grad + wd * param   (wd on weights only)
    param  <- param - lr * buffer

    The first step starts from a zero buffer, so it is plain ``param - lr * grad``
    when weight decay is off.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params vs {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient, SGD step aborted")
    if not state.buffers:
        state.buffers = [np.zeros_like(p) for p in params]
    for p, g, buf in zip(params, grads, state.buffers):
        d = g + state.weight_decay * p if (state.weight_decay and p.ndim > 1) else g
        if state.momentum:
            buf *= state.momentum
            buf += d
            d = buf
        p -= state.lr * d


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(model: SplitModel, path) -> None:
    """Header (magic, version, layer count, sizes, boundary) + float32 LE params."""
    sizes = model.layer_sizes
    header = struct.pack(f"<4sII{len(sizes)}II", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                         len(sizes), *sizes, model.boundary_index)
    body = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in model.params)
    Path(path).write_bytes(header + body)


def load_checkpoint(path) -> SplitModel:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    version, n_sizes = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    if len(raw) < off + 4 * n_sizes + 4:
        raise ValueError(f"{path}: truncated header")
    sizes = struct.unpack_from(f"<{n_sizes}I", raw, off)
    off += 4 * n_sizes
    (boundary,) = struct.unpack_from("<I", raw, off)
    off += 4
    shapes = param_shapes(sizes)
    expected = off + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != expected:
        raise ValueError(f"{path}: size {len(raw)} bytes, header implies {expected}")
    params = []
    for s in shapes:
        n = int(np.prod(s))
        params.append(np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(s))
        off += 4 * n
    return SplitModel(sizes, boundary, params)
