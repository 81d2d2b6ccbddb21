"""Fixed-architecture micro CNN with hand-written forward and backward passes.

Architecture: 3x32x32 input -> conv3x3(8)+ReLU+maxpool2 -> conv3x3(16)+ReLU
+maxpool2 -> conv3x3(32)+ReLU -> global average pool -> linear head. The GAP
feature width is 32, so the linear head is exactly the weighting that class
activation maps need.

Inputs stay in [0, 1] at the API; the forward pass subtracts a fixed 0.5
before the first convolution (the usual mean-centering preprocessing, baked
into the model so serialized weights carry the convention). The input
gradient is unaffected by the constant shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    maxpool2_backward,
    maxpool2_forward,
)

INPUT_SHAPE = (3, 32, 32)
INPUT_CENTER = 0.5
FEATURE_DIM = 32
CONV_LAYERS = ("conv1", "conv2", "conv3")
_CONV_CHANNELS = {"conv1": (3, 8), "conv2": (8, 16), "conv3": (16, 32)}


def weight_shapes(num_classes: int) -> dict[str, tuple]:
    """Named weight tensors of the architecture descriptor."""
    shapes = {}
    for name, (cin, cout) in _CONV_CHANNELS.items():
        shapes[f"{name}.weight"] = (cout, cin, 3, 3)
        shapes[f"{name}.bias"] = (cout,)
    shapes["head.weight"] = (num_classes, FEATURE_DIM)
    shapes["head.bias"] = (num_classes,)
    return shapes


@dataclass
class Activations:
    """Per-layer post-ReLU maps plus GAP features and logits.

    Pool outputs and argmax maps are carried along for the backward pass.
    """

    conv1: np.ndarray
    conv2: np.ndarray
    conv3: np.ndarray
    gap: np.ndarray
    logits: np.ndarray
    pool1: np.ndarray = field(repr=False, default=None)
    pool2: np.ndarray = field(repr=False, default=None)
    pool1_arg: np.ndarray = field(repr=False, default=None)
    pool2_arg: np.ndarray = field(repr=False, default=None)


class MicroCnn:
    """Immutable-weight CNN; forward/gradient methods are pure."""

    def __init__(self, weights: dict[str, np.ndarray], num_classes: int | None = None):
        if num_classes is None:
            num_classes = weights["head.weight"].shape[0]
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        expected = weight_shapes(num_classes)
        if set(weights) != set(expected):
            missing = sorted(set(expected) - set(weights))
            extra = sorted(set(weights) - set(expected))
            raise ValueError(f"weight names mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if tuple(weights[name].shape) != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {weights[name].shape}")
        self.num_classes = num_classes
        self.weights = {k: np.ascontiguousarray(v) for k, v in weights.items()}
        self.dtype = self.weights["conv1.weight"].dtype

    @classmethod
    def init_random(cls, num_classes: int, seed: int) -> "MicroCnn":
        """Kaiming-style uniform init: bound sqrt(6 / fan_in), biases zero."""
        rng = np.random.default_rng(seed)
        weights = {}
        for name, shape in weight_shapes(num_classes).items():
            if name.endswith(".bias"):
                weights[name] = np.zeros(shape, np.float32)
            else:
                fan_in = int(np.prod(shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                weights[name] = rng.uniform(-bound, bound, shape).astype(np.float32)
        return cls(weights, num_classes)

    def astype(self, dtype) -> "MicroCnn":
        return MicroCnn({k: v.astype(dtype) for k, v in self.weights.items()}, self.num_classes)

    def copy(self) -> "MicroCnn":
        return MicroCnn({k: v.copy() for k, v in self.weights.items()}, self.num_classes)

    def forward_batch(self, images: np.ndarray, masked_units=None) -> Activations:
        """Forward a (B,3,32,32) batch. masked_units maps a conv layer name to
        channel indices zeroed after ReLU (network-dissection masking)."""
        x = np.ascontiguousarray(images, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1:] != INPUT_SHAPE:
            raise ShapeError(f"expected batch of {INPUT_SHAPE} images, got {x.shape}")
        masked_units = masked_units or {}
        unknown = set(masked_units) - set(CONV_LAYERS)
        if unknown:
            raise ValueError(f"unknown layers in masked_units: {sorted(unknown)}")

        def mask(layer, a):
            idx = masked_units.get(layer)
            if idx is not None and len(idx) > 0:
                idx = np.asarray(idx, dtype=np.intp)
                if idx.min() < 0 or idx.max() >= a.shape[1]:
                    raise ValueError(f"unit index out of range for {layer}")
                a = a.copy()
                a[:, idx] = 0
            return a

        w = self.weights
        xc = x - self.dtype.type(INPUT_CENTER)
        a1 = mask("conv1", np.maximum(conv2d_forward(xc, w["conv1.weight"], w["conv1.bias"], 1), 0))
        p1, arg1 = maxpool2_forward(a1)
        a2 = mask("conv2", np.maximum(conv2d_forward(p1, w["conv2.weight"], w["conv2.bias"], 1), 0))
        p2, arg2 = maxpool2_forward(a2)
        a3 = mask("conv3", np.maximum(conv2d_forward(p2, w["conv3.weight"], w["conv3.bias"], 1), 0))
        gap = a3.mean(axis=(2, 3))
        logits = gap @ w["head.weight"].T + w["head.bias"]
        return Activations(a1, a2, a3, gap, logits, p1, p2, arg1, arg2)

    def forward(self, image: np.ndarray, masked_units=None) -> Activations:
        acts = self.forward_batch(np.asarray(image)[None], masked_units)
        return Activations(*(a[0] if a is not None else None for a in
                             (acts.conv1, acts.conv2, acts.conv3, acts.gap, acts.logits,
                              acts.pool1, acts.pool2, acts.pool1_arg, acts.pool2_arg)))

    def logits_batch(self, images: np.ndarray, masked_units=None) -> np.ndarray:
        return self.forward_batch(images, masked_units).logits

    def predict(self, image: np.ndarray):
        """Argmax label (ties to the smaller index) and the logits."""
        logits = self.forward(image).logits
        return int(np.argmax(logits)), logits

    def predict_batch(self, images: np.ndarray, masked_units=None):
        logits = self.logits_batch(images, masked_units)
        return logits.argmax(axis=1), logits

    def backward_batch(self, images: np.ndarray, acts: Activations, dlogits: np.ndarray,
                       need_weight_grads: bool = True):
        """Backpropagate d(loss)/d(logits) to the input (and optionally weights).

        Returns (grad_images, grads) where grads maps weight names to arrays,
        or None when need_weight_grads is False. Gradients are summed over the
        batch for weights, per-sample for the input.
        """
        w = self.weights
        x = np.ascontiguousarray(images, dtype=self.dtype) - self.dtype.type(INPUT_CENTER)
        grads = {} if need_weight_grads else None
        if need_weight_grads:
            grads["head.weight"] = dlogits.T @ acts.gap
            grads["head.bias"] = dlogits.sum(axis=0)
        dgap = dlogits @ w["head.weight"]
        n_spatial = acts.conv3.shape[2] * acts.conv3.shape[3]
        dpre3 = np.broadcast_to((dgap / n_spatial)[:, :, None, None], acts.conv3.shape)
        dpre3 = dpre3 * (acts.conv3 > 0)
        dpool2, gw3, gb3 = conv2d_backward(acts.pool2, w["conv3.weight"], dpre3, 1,
                                           need_weight_grads=need_weight_grads)
        dpre2 = maxpool2_backward(dpool2, acts.pool2_arg) * (acts.conv2 > 0)
        dpool1, gw2, gb2 = conv2d_backward(acts.pool1, w["conv2.weight"], dpre2, 1,
                                           need_weight_grads=need_weight_grads)
        dpre1 = maxpool2_backward(dpool1, acts.pool1_arg) * (acts.conv1 > 0)
        dimage, gw1, gb1 = conv2d_backward(x, w["conv1.weight"], dpre1, 1,
                                           need_weight_grads=need_weight_grads)
        if need_weight_grads:
            grads.update({"conv3.weight": gw3, "conv3.bias": gb3,
                          "conv2.weight": gw2, "conv2.bias": gb2,
                          "conv1.weight": gw1, "conv1.bias": gb1})
        return dimage, grads


# --- scalar losses over logits ------------------------------------------------
# All take logits of shape (B, K) and a per-sample target/label array; they
# return per-sample values and exact d(value)/d(logits).

def margin_loss(logits: np.ndarray, targets: np.ndarray, kappa: float, scale: float):
    """Targeted attack loss: scale * max(max_{j != t} Z_j - Z_t, -kappa)."""
    z = np.asarray(logits)
    t = np.asarray(targets, dtype=np.intp)
    rows = np.arange(z.shape[0])
    masked = z.copy()
    masked[rows, t] = -np.inf
    raw = masked.max(axis=1) - z[rows, t]
    return scale * np.maximum(raw, -kappa)


def margin_loss_dlogits(logits: np.ndarray, targets: np.ndarray, kappa: float, scale: float):
    """Subgradient of margin_loss; zero on the flat -kappa branch."""
    z = np.asarray(logits)
    t = np.asarray(targets, dtype=np.intp)
    rows = np.arange(z.shape[0])
    masked = z.copy()
    masked[rows, t] = -np.inf
    runner = masked.argmax(axis=1)
    raw = masked[rows, runner] - z[rows, t]
    active = raw > -kappa
    d = np.zeros_like(z)
    d[rows, runner] = scale
    d[rows, t] = -scale
    d[~active] = 0
    return d


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray):
    z = np.asarray(logits)
    y = np.asarray(labels, dtype=np.intp)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return lse - z[np.arange(z.shape[0]), y]


def cross_entropy_dlogits(logits: np.ndarray, labels: np.ndarray):
    z = np.asarray(logits)
    y = np.asarray(labels, dtype=np.intp)
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    p = e / e.sum(axis=1, keepdims=True)
    p[np.arange(z.shape[0]), y] -= 1
    return p


@dataclass(frozen=True)
class TargetedMargin:
    """Loss f = c * max(max_{j != t} Z_j - Z_t, -kappa)."""
    target: int
    kappa: float = 1.0
    scale: float = 1.0

    def values(self, logits):
        t = np.full(logits.shape[0], self.target)
        return margin_loss(logits, t, self.kappa, self.scale)

    def dlogits(self, logits):
        t = np.full(logits.shape[0], self.target)
        return margin_loss_dlogits(logits, t, self.kappa, self.scale)


@dataclass(frozen=True)
class CrossEntropy:
    label: int

    def values(self, logits):
        return cross_entropy_loss(logits, np.full(logits.shape[0], self.label))

    def dlogits(self, logits):
        return cross_entropy_dlogits(logits, np.full(logits.shape[0], self.label))


@dataclass(frozen=True)
class Logit:
    """The bare logit of one class; gradient is a one-hot row."""
    index: int

    def values(self, logits):
        return logits[:, self.index]

    def dlogits(self, logits):
        d = np.zeros_like(logits)
        d[:, self.index] = 1
        return d


def _check_class_index(model: MicroCnn, idx: int, what: str):
    if not 0 <= idx < model.num_classes:
        raise ValueError(f"{what} index {idx} out of range for {model.num_classes} classes")


def input_gradient(model: MicroCnn, image: np.ndarray, loss) -> np.ndarray:
    """Exact gradient of the scalar loss at the input pixels."""
    if isinstance(loss, TargetedMargin):
        _check_class_index(model, loss.target, "target")
    elif isinstance(loss, CrossEntropy):
        _check_class_index(model, loss.label, "label")
    elif isinstance(loss, Logit):
        _check_class_index(model, loss.index, "class")
    x = np.asarray(image)[None]
    acts = model.forward_batch(x)
    dlogits = loss.dlogits(acts.logits)
    grad, _ = model.backward_batch(x, acts, dlogits, need_weight_grads=False)
    return grad[0]


def loss_gradients(model: MicroCnn, image: np.ndarray, loss):
    """(input gradient, weight gradients) of the scalar loss; used by checks."""
    x = np.asarray(image)[None]
    acts = model.forward_batch(x)
    dlogits = loss.dlogits(acts.logits)
    grad, wgrads = model.backward_batch(x, acts, dlogits, need_weight_grads=True)
    return grad[0], wgrads


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    lr: float = 0.08
    batch: int = 64
    seed: int = 0


def _dataset_arrays(dataset):
    if isinstance(dataset, tuple):
        images, labels = dataset
    else:
        images, labels = dataset.images, dataset.labels
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.intp)
    return images, labels


def train_sgd(model: MicroCnn, dataset, config: TrainConfig):
    """Minibatch SGD on softmax cross-entropy. Deterministic given the seed:
    fixed shuffle order, fixed batch walk. Returns (trained copy, history)."""
    images, labels = _dataset_arrays(dataset)
    if images.shape[0] == 0:
        raise ValueError("empty training dataset")
    if config.lr < 0:
        raise ValueError("learning rate must be non-negative")
    trained = model.copy()
    rng = np.random.default_rng(config.seed)
    n = images.shape[0]
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        total_correct = 0
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            xb, yb = images[idx], labels[idx]
            acts = trained.forward_batch(xb)
            losses = cross_entropy_loss(acts.logits, yb)
            total_loss += float(losses.sum())
            total_correct += int((acts.logits.argmax(axis=1) == yb).sum())
            dlogits = cross_entropy_dlogits(acts.logits, yb) / len(idx)
            _, grads = trained.backward_batch(xb, acts, dlogits.astype(trained.dtype))
            if config.lr > 0:
                for name, g in grads.items():
                    trained.weights[name] -= (config.lr * g).astype(trained.dtype)
        history.append({"epoch": epoch, "loss": total_loss / n, "accuracy": total_correct / n})
    return trained, history


def accuracy(model: MicroCnn, images: np.ndarray, labels: np.ndarray,
             masked_units=None, batch: int = 256) -> float:
    """Fraction of images whose argmax prediction equals the label."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    correct = 0
    for start in range(0, images.shape[0], batch):
        pred, _ = model.predict_batch(images[start:start + batch], masked_units)
        correct += int((pred == labels[start:start + batch]).sum())
    return correct / max(1, images.shape[0])
