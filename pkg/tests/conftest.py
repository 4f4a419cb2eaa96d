"""Shared fixtures: the canonical synthetic set, one trained victim model
(expensive, built once per session), and small helper classifiers with
closed-form behavior."""

import numpy as np
import pytest

import advad
from advad.imagecore import ImageTensor, ValueRange
from advad.model import Classifier, Mask, _loss_logit_gradient

TRAIN_SEED = 1
DATA_SEED = 0


@pytest.fixture(scope="session")
def full_dataset():
    return advad.gen_synthetic(2, 500, size=32, seed=DATA_SEED)


@pytest.fixture(scope="session")
def trained_model(full_dataset):
    model = advad.train_reference(full_dataset, epochs=40, learning_rate=0.3,
                                  seed=TRAIN_SEED)
    assert model.training_summary["test_accuracy"] >= 0.95
    return model


@pytest.fixture(scope="session")
def test_samples(full_dataset):
    _, test, _ = advad.train_test_split(full_dataset, seed=TRAIN_SEED)
    return test.samples


@pytest.fixture(scope="session")
def tiny_dataset():
    return advad.gen_synthetic(2, 30, size=32, seed=3)


class LinearClassifier(Classifier):
    """logits = W @ flatten(x_byte) + b; gradients in closed form."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)   # (K, H*W*C)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.num_classes = self.weights.shape[0]

    def forward(self, img: ImageTensor) -> np.ndarray:
        return self.weights @ img.data.ravel() + self.bias

    def value_and_input_gradient(self, img, label, loss_kind):
        logits = self.forward(img)
        dlogits = _loss_logit_gradient(logits, label, loss_kind)
        grad = (dlogits @ self.weights).reshape(img.shape)
        return logits, ImageTensor(grad, ValueRange.BYTE)


class ConstantClassifier(Classifier):
    """Always emits the same logits; zero gradients."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float64)
        self.num_classes = len(self.logits)

    def forward(self, img):
        return self.logits.copy()

    def value_and_input_gradient(self, img, label, loss_kind):
        return self.logits.copy(), ImageTensor(np.zeros(img.shape), ValueRange.BYTE)


class NanGradientClassifier(ConstantClassifier):
    def value_and_input_gradient(self, img, label, loss_kind):
        g = np.full(img.shape, np.nan)
        return self.logits.copy(), ImageTensor(g, ValueRange.BYTE)

    def forward(self, img):
        return self.logits.copy()


@pytest.fixture
def linear_classifier_2x2():
    """2-class model on 2x2x3 images with hand-chosen weights."""
    w = np.array([[0.01, -0.02, 0.015, 0.0, 0.01, -0.01,
                   0.02, 0.005, -0.005, 0.01, 0.0, -0.02],
                  [-0.01, 0.02, -0.015, 0.005, -0.01, 0.01,
                   -0.02, -0.005, 0.005, -0.01, 0.005, 0.02]])
    return LinearClassifier(w, np.array([0.1, -0.1]))


def random_byte_image(rng, h=8, w=8, c=3) -> ImageTensor:
    return ImageTensor(rng.uniform(0.0, 255.0, size=(h, w, c)), ValueRange.BYTE)
