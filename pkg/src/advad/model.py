"""The attacked classifier: pluggable interface plus a built-in small CNN.

The built-in network is deliberately minimal but convolutional so that class
activation mapping has something to look at:

    conv 3x3 (C_in -> 8, stride 1, pad 1) -> ReLU -> 2x2 average pool
    conv 3x3 (8 -> 16, pad 1) -> ReLU            (these activations feed CAM)
    global average pool -> dense (16 -> num_classes)

Parameter count: 3*3*C_in*8 + 8 + 3*3*8*16 + 16 + 16*K + K = 1392 + 17*K
for C_in = 3. Everything (forward, input gradients, training, CAM) is
hand-written numpy in float64; inference and gradients are pure functions of
the weights, so a trained model is safe to share across attack workers.

Classifiers consume byte-range tensors; internally the input is rescaled to
x/255 - 0.5 and gradients are chained back so that ``input_gradient`` is
always per unit of pixel value in [0, 255].
"""

from __future__ import annotations

import abc
import json
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imagecore import ImageTensor, MalformedFileError, ValueRange

LOSS_LOG1MP = "log1mp"
LOSS_CROSS_ENTROPY = "cross_entropy"
LOSS_KINDS = (LOSS_LOG1MP, LOSS_CROSS_ENTROPY)

ADVM_MAGIC = b"ADVM"
ADVM_VERSION = 1


class DegenerateClassError(ValueError):
    """An operation needs at least two classes."""


class NoCamSupportError(RuntimeError):
    """The classifier does not expose conv activations for CAM."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# softmax heads (stable forms; these are the scalars the guidance differentiates)

def softmax_prob(logits: np.ndarray, label: int) -> float:
    """p_f = exp(z_y - m) / sum_k exp(z_k - m), m = max logit."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max()
    e = np.exp(z - m)
    return float(e[label] / e.sum())


def log_one_minus_p(logits: np.ndarray, label: int) -> float:
    """log(1 - p_f) evaluated as log(sum_{k!=y} e^{z_k}) - log(sum_k e^{z_k}),
    each sum shifted by its own max so the result stays finite for any finite
    logits with K >= 2 (no 1 - p cancellation, no underflow to -inf)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise DegenerateClassError("log(1 - p) needs at least 2 classes")
    m = z.max()
    log_denom = m + np.log(np.exp(z - m).sum())
    others = np.delete(z, label)
    m2 = others.max()
    log_numer = m2 + np.log(np.exp(others - m2).sum())
    return float(log_numer - log_denom)


def _loss_value(logits: np.ndarray, label: int, loss_kind: str) -> float:
    if loss_kind == LOSS_LOG1MP:
        return log_one_minus_p(logits, label)
    if loss_kind == LOSS_CROSS_ENTROPY:
        z = np.asarray(logits, dtype=np.float64)
        m = z.max()
        return float(m + np.log(np.exp(z - m).sum()) - z[label])
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def _loss_logit_gradient(logits: np.ndarray, label: int, loss_kind: str) -> np.ndarray:
    """d(loss)/d(logits). For log(1-p): p_j * p_y / (1 - p_y) on j != y and
    -p_y on j = y, computed as r_j * p_y with r the softmax restricted to the
    non-label classes (both factors in (0, 1), so no blow-up as p_y -> 1)."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max()
    e = np.exp(z - m)
    p = e / e.sum()
    if loss_kind == LOSS_CROSS_ENTROPY:
        g = p.copy()
        g[label] -= 1.0
        return g
    if loss_kind == LOSS_LOG1MP:
        if z.shape[-1] < 2:
            raise DegenerateClassError("log(1 - p) needs at least 2 classes")
        others = np.delete(z, label)
        m2 = others.max()
        e2 = np.exp(others - m2)
        r = e2 / e2.sum()
        g = np.empty_like(p)
        g[np.arange(len(p)) != label] = r * p[label]
        g[label] = -p[label]
        return g
    raise ValueError(f"unknown loss kind {loss_kind!r}")


# ---------------------------------------------------------------------------
# classifier interface

@dataclass(frozen=True)
class Mask:
    """H x W weights in [0, 1], broadcast across channels by consumers."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"mask must be (H, W), got {self.values.shape}")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("mask values must lie in [0, 1]")


class Classifier(abc.ABC):
    """Forward logits + input gradients (+ optional CAM) over byte tensors."""

    num_classes: int

    @abc.abstractmethod
    def forward(self, img: ImageTensor) -> np.ndarray:
        """Logits, length num_classes. Deterministic and pure."""

    @abc.abstractmethod
    def value_and_input_gradient(self, img: ImageTensor, label: int,
                                 loss_kind: str) -> tuple[np.ndarray, ImageTensor]:
        """(logits, d(loss)/d(input)) with the gradient in byte-range units."""

    def input_gradient(self, img: ImageTensor, label: int, loss_kind: str) -> ImageTensor:
        return self.value_and_input_gradient(img, label, loss_kind)[1]

    def cam_mask(self, img: ImageTensor, label: int) -> Mask:
        raise NoCamSupportError(f"{type(self).__name__} exposes no conv activations")

    def predict(self, img: ImageTensor) -> int:
        return int(np.argmax(self.forward(img)))


def input_gradient(classifier: Classifier, img: ImageTensor, label: int,
                   loss_kind: str) -> ImageTensor:
    """Exact backpropagated gradient of the chosen scalar loss w.r.t. every
    input value, per unit of pixel value in [0, 255]."""
    return classifier.input_gradient(img, label, loss_kind)


def gradcam_mask(classifier: Classifier, img: ImageTensor, label: int) -> Mask:
    """Grad-CAM over the classifier's last conv activations, min-max
    normalized to [0, 1] (an all-zero map stays all zero)."""
    return classifier.cam_mask(img, label)


# ---------------------------------------------------------------------------
# conv plumbing (batched NHWC, 3x3, pad 1, stride 1)

def _im2col3(x: np.ndarray) -> np.ndarray:
    """(N,H,W,C) -> (N,H,W,3*3*C) patches, offset-major then channel."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    v = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (N,H,W,C,3,3)
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3)).reshape(n, h, w, 9 * c)


def _col2im3(dcols: np.ndarray, c: int) -> np.ndarray:
    """Adjoint of _im2col3: scatter-add patch gradients back to the input."""
    n, h, w, _ = dcols.shape
    d = dcols.reshape(n, h, w, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for a in range(3):
        for b in range(3):
            dxp[:, a:a + h, b:b + w, :] += d[:, :, :, a, b, :]
    return dxp[:, 1:h + 1, 1:w + 1, :]


def _avgpool2(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    h2, w2 = h - h % 2, w - w % 2
    return x[:, :h2, :w2, :].reshape(n, h2 // 2, 2, w2 // 2, 2, c).mean(axis=(2, 4))


def _avgpool2_grad(dp: np.ndarray, h: int, w: int) -> np.ndarray:
    n, hp, wp, c = dp.shape
    dx = np.zeros((n, h, w, c), dtype=dp.dtype)
    up = np.repeat(np.repeat(dp, 2, axis=1), 2, axis=2) * 0.25
    dx[:, :hp * 2, :wp * 2, :] = up
    return dx


# ---------------------------------------------------------------------------
# the built-in CNN

class BuiltinCnn(Classifier):

    CONV1_FILTERS = 8
    CONV2_FILTERS = 16

    def __init__(self, num_classes: int, in_channels: int = 3, seed: int = 0):
        if num_classes < 2:
            raise DegenerateClassError("classifier needs at least 2 classes")
        self.num_classes = int(num_classes)
        self.in_channels = int(in_channels)
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        f1, f2 = self.CONV1_FILTERS, self.CONV2_FILTERS
        self.w1 = rng.standard_normal((3, 3, in_channels, f1)) * np.sqrt(2.0 / (9 * in_channels))
        self.b1 = np.zeros(f1)
        self.w2 = rng.standard_normal((3, 3, f1, f2)) * np.sqrt(2.0 / (9 * f1))
        self.b2 = np.zeros(f2)
        self.w3 = rng.standard_normal((f2, num_classes)) * np.sqrt(2.0 / f2)
        self.b3 = np.zeros(num_classes)
        self.training_summary: dict | None = None

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3))

    def _check_shape(self, img: ImageTensor):
        if img.range_tag is not ValueRange.BYTE:
            raise ValueError("classifier consumes byte-range tensors")
        if img.channels != self.in_channels:
            raise ValueError(
                f"shape mismatch: model expects {self.in_channels} channels, got {img.channels}")

    # forward over a batch (N,H,W,C) of byte-range values; inputs are centered
    # and scaled to roughly unit magnitude so plain gradient descent conditions
    # well (the gradient returned to callers is still per byte unit)
    INPUT_SHIFT = 128.0
    INPUT_SCALE = 64.0

    def _forward_batch(self, x: np.ndarray, want_cache: bool = False):
        z = (x - self.INPUT_SHIFT) / self.INPUT_SCALE
        cols1 = _im2col3(z)
        c1 = cols1 @ self.w1.reshape(-1, self.CONV1_FILTERS) + self.b1
        r1 = np.maximum(c1, 0.0)
        p1 = _avgpool2(r1)
        cols2 = _im2col3(p1)
        c2 = cols2 @ self.w2.reshape(-1, self.CONV2_FILTERS) + self.b2
        r2 = np.maximum(c2, 0.0)
        g = r2.mean(axis=(1, 2))
        logits = g @ self.w3 + self.b3
        if not want_cache:
            return logits, None
        cache = {"x": x, "cols1": cols1, "c1": c1, "r1": r1,
                 "cols2": cols2, "c2": c2, "r2": r2, "g": g}
        return logits, cache

    def _backward_batch(self, cache: dict, dlogits: np.ndarray,
                        want_params: bool = False):
        """Backprop d(loss)/d(logits) to the byte-range input (and optionally
        to all parameters). Returns (dx, param_grads_or_None)."""
        f1, f2 = self.CONV1_FILTERS, self.CONV2_FILTERS
        r2 = cache["r2"]
        n, h2, w2, _ = r2.shape
        dg = dlogits @ self.w3.T
        dr2 = np.broadcast_to(dg[:, None, None, :] / (h2 * w2), r2.shape)
        dc2 = np.where(cache["c2"] > 0, dr2, 0.0)
        dcols2 = dc2 @ self.w2.reshape(-1, f2).T
        dp1 = _col2im3(dcols2, f1)
        h1, w1_ = cache["r1"].shape[1:3]
        dr1 = _avgpool2_grad(dp1, h1, w1_)
        dc1 = np.where(cache["c1"] > 0, dr1, 0.0)
        dcols1 = dc1 @ self.w1.reshape(-1, f1).T
        dz = _col2im3(dcols1, self.in_channels)
        dx = dz / self.INPUT_SCALE
        if not want_params:
            return dx, None
        grads = {
            "w3": cache["g"].T @ dlogits,
            "b3": dlogits.sum(axis=0),
            "w2": (cache["cols2"].reshape(-1, 9 * f1).T
                   @ dc2.reshape(-1, f2)).reshape(3, 3, f1, f2),
            "b2": dc2.sum(axis=(0, 1, 2)),
            "w1": (cache["cols1"].reshape(-1, 9 * self.in_channels).T
                   @ dc1.reshape(-1, f1)).reshape(3, 3, self.in_channels, f1),
            "b1": dc1.sum(axis=(0, 1, 2)),
        }
        return dx, grads

    def forward(self, img: ImageTensor) -> np.ndarray:
        self._check_shape(img)
        logits, _ = self._forward_batch(np.asarray(img.data, dtype=np.float64)[None])
        return logits[0]

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        logits, _ = self._forward_batch(np.asarray(x, dtype=np.float64))
        return logits

    def value_and_input_gradient(self, img: ImageTensor, label: int,
                                 loss_kind: str) -> tuple[np.ndarray, ImageTensor]:
        self._check_shape(img)
        x = np.asarray(img.data, dtype=np.float64)[None]
        logits, cache = self._forward_batch(x, want_cache=True)
        dlogits = _loss_logit_gradient(logits[0], label, loss_kind)[None]
        dx, _ = self._backward_batch(cache, dlogits)
        return logits[0], ImageTensor(dx[0], ValueRange.BYTE)

    def cam_mask(self, img: ImageTensor, label: int) -> Mask:
        self._check_shape(img)
        x = np.asarray(img.data, dtype=np.float64)[None]
        _, cache = self._forward_batch(x, want_cache=True)
        a = cache["r2"][0]                     # (H2,W2,16) last conv activations
        h2, w2, _ = a.shape
        # d(logit_label)/dA = w3[:,label]/(H2*W2) at every position; its global
        # average over positions is the per-channel CAM weight.
        weights = self.w3[:, label] / (h2 * w2)
        cam = np.maximum(a @ weights, 0.0)
        cam = _bilinear_resize(cam, img.height, img.width)
        lo, hi = cam.min(), cam.max()
        if hi == lo:
            values = np.zeros_like(cam) if hi == 0.0 else np.ones_like(cam)
        else:
            values = (cam - lo) / (hi - lo)
        return Mask(values)

    # --- checkpoint I/O ("ADVM": magic, u32 version, dims, float32 LE weights)

    def save(self, path) -> None:
        header = struct.pack("<4sIIIII", ADVM_MAGIC, ADVM_VERSION,
                             self.num_classes, self.in_channels,
                             self.CONV1_FILTERS, self.CONV2_FILTERS)
        with open(path, "wb") as f:
            f.write(header)
            for p in (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3):
                f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "BuiltinCnn":
        with open(path, "rb") as f:
            blob = f.read()
        head = struct.Struct("<4sIIIII")
        if len(blob) < head.size:
            raise MalformedFileError(f"{path}: truncated header")
        magic, version, k, cin, f1, f2 = head.unpack_from(blob)
        if magic != ADVM_MAGIC or version != ADVM_VERSION:
            raise MalformedFileError(f"{path}: bad magic/version {magic!r} v{version}")
        if (f1, f2) != (cls.CONV1_FILTERS, cls.CONV2_FILTERS):
            raise MalformedFileError(f"{path}: unexpected layer widths ({f1}, {f2})")
        model = cls(num_classes=k, in_channels=cin, seed=0)
        shapes = [(3, 3, cin, f1), (f1,), (3, 3, f1, f2), (f2,), (f2, k), (k,)]
        expected = sum(int(np.prod(s)) for s in shapes) * 4
        if len(blob) - head.size != expected:
            raise MalformedFileError(
                f"{path}: payload is {len(blob) - head.size} bytes, want {expected}")
        flat = np.frombuffer(blob, dtype="<f4", offset=head.size)
        offset = 0
        arrays = []
        for s in shapes:
            n = int(np.prod(s))
            arrays.append(flat[offset:offset + n].reshape(s).astype(np.float64))
            offset += n
        model.w1, model.b1, model.w2, model.b2, model.w3, model.b3 = arrays
        return model


def _bilinear_resize(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsampling of a 2-D map, endpoints aligned to corners."""
    h, w = a.shape
    if (h, w) == (out_h, out_w):
        return a.copy()
    ys = np.linspace(0.0, h - 1.0, out_h) if h > 1 else np.zeros(out_h)
    xs = np.linspace(0.0, w - 1.0, out_w) if w > 1 else np.zeros(out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = a[np.ix_(y0, x0)] * (1 - fx) + a[np.ix_(y0, x1)] * fx
    bot = a[np.ix_(y1, x0)] * (1 - fx) + a[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


# ---------------------------------------------------------------------------
# training

def train_reference(dataset, epochs: int, learning_rate: float, seed: int,
                    batch_size: int = 32, test_fraction: float = 0.2,
                    log_path=None) -> BuiltinCnn:
    """Train the built-in CNN with plain mini-batch gradient descent.

    Deterministic given the seed (initialization, split and batch order all
    come from one seeded generator). The 80/20 train/test split and the final
    accuracies are recorded on ``model.training_summary``.
    """
    from .data import train_test_split
    if len(dataset.samples) == 0:
        raise ValueError("dataset is empty")
    train, test, split = train_test_split(dataset, test_fraction=test_fraction, seed=seed)
    x_train = np.stack([img.data for img, _ in train.samples])
    y_train = np.array([lbl for _, lbl in train.samples])
    x_test = np.stack([img.data for img, _ in test.samples])
    y_test = np.array([lbl for _, lbl in test.samples])

    model = BuiltinCnn(dataset.num_classes, in_channels=x_train.shape[-1], seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    params = ("w1", "b1", "w2", "b2", "w3", "b3")
    log_lines = []
    n = len(x_train)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            xb, yb = x_train[idx], y_train[idx]
            with np.errstate(over="ignore", invalid="ignore"):
                logits, cache = model._forward_batch(xb, want_cache=True)
                m = logits.max(axis=1, keepdims=True)
                e = np.exp(logits - m)
                denom = e.sum(axis=1, keepdims=True)
                p = e / denom
                # logsumexp form of the NLL; finite even for saturated rows
                nll = (m[:, 0] + np.log(denom[:, 0])) - logits[np.arange(len(yb)), yb]
                loss = float(nll.mean())
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            dlogits = p
            dlogits[np.arange(len(yb)), yb] -= 1.0
            dlogits /= len(yb)
            _, grads = model._backward_batch(cache, dlogits, want_params=True)
            for name in params:
                weight = getattr(model, name)
                weight -= learning_rate * grads[name]
            epoch_loss += loss * len(yb)
        log_lines.append({"epoch": epoch, "loss": epoch_loss / n})

    def accuracy(x, y):
        preds = []
        for start in range(0, len(x), 256):
            preds.append(model.forward_batch(x[start:start + 256]).argmax(axis=1))
        return float((np.concatenate(preds) == y).mean())

    model.training_summary = {
        "epochs": epochs,
        "learning_rate": learning_rate,
        "seed": seed,
        "batch_size": batch_size,
        "train_accuracy": accuracy(x_train, y_train),
        "test_accuracy": accuracy(x_test, y_test),
        "split": split,
    }
    if log_path is not None:
        with open(log_path, "w") as f:
            for line in log_lines:
                f.write(json.dumps(line) + "\n")
            f.write(json.dumps({"final": model.training_summary["train_accuracy"],
                                "test": model.training_summary["test_accuracy"]}) + "\n")
    return model
