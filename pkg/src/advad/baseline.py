"""PGD baselines: the classic sign-step attack and the step-size-decay
variant whose per-step factor reuses the trajectory weights lambda_t, so its
schedule lines up with the diffusion attack it is compared against.

Classic PGD walks in byte range ([0, 255], budget 255*xi). The decay variant
walks in the unit range the trajectory algebra lives in, because its step
lambda_t * eta plays the role the projected guidance plays there; eta is the
initial-step factor. Both project every iterate onto the l-inf ball around
the original and clamp to the valid value range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import AttackResult
from .imagecore import ImageTensor, ValueRange, quantize_8bit
from .model import Classifier, LOSS_CROSS_ENTROPY
from .schedule import Schedule


@dataclass(frozen=True)
class BaselineConfig:
    xi: float = 8.0 / 255.0      # budget, byte units out of 255
    steps: int = 40
    step_size: float | None = None   # byte units; default 255*xi/10
    eta: float = 1e-4            # decay-variant initial factor (unit range)
    seed: int = 0
    random_start: bool = True

    def validate(self):
        if self.xi < 0:
            raise ValueError(f"xi must be nonnegative, got {self.xi}")
        if self.steps < 0:
            raise ValueError(f"steps must be nonnegative, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


def _finish(classifier: Classifier, x_adv_byte: np.ndarray, x_ori: ImageTensor,
            y_gt: int, clean_correct: bool, method: str, steps: int) -> AttackResult:
    raw = ImageTensor(x_adv_byte, ValueRange.BYTE)
    quant = quantize_8bit(raw)
    pred_raw = int(np.argmax(classifier.forward(raw)))
    pred_quant = int(np.argmax(classifier.forward(quant)))
    return AttackResult(
        x_adv_raw=raw, x_adv_quantized=quant,
        success_raw=pred_raw != y_gt, success_quantized=pred_quant != y_gt,
        clean_correct=clean_correct, guided_steps=steps, y_gt=int(y_gt),
        pred_raw=pred_raw, pred_quantized=pred_quant, method=method)


def pgd_attack(classifier: Classifier, x_ori: ImageTensor, y_gt: int,
               cfg: BaselineConfig, image_index: int = 0) -> AttackResult:
    """x <- clip(Pi_ball(x + step * sign(grad CE)), 0, 255), seeded random
    start inside the ball."""
    cfg.validate()
    if x_ori.range_tag is not ValueRange.BYTE:
        raise ValueError("pgd_attack takes the original image in byte range")
    xi_b = 255.0 * cfg.xi
    step = cfg.step_size if cfg.step_size is not None else xi_b / 10.0
    clean_correct = int(np.argmax(classifier.forward(x_ori))) == y_gt
    x0 = np.asarray(x_ori.data, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, image_index]))
    x = x0.copy()
    if cfg.random_start and xi_b > 0:
        x = x + rng.uniform(-xi_b, xi_b, size=x.shape)
        x = np.clip(np.clip(x, x0 - xi_b, x0 + xi_b), 0.0, 255.0)
    for _ in range(cfg.steps):
        grad = classifier.input_gradient(ImageTensor(x, ValueRange.BYTE),
                                         y_gt, LOSS_CROSS_ENTROPY).data
        x = x + step * np.sign(grad)
        x = np.clip(np.clip(x, x0 - xi_b, x0 + xi_b), 0.0, 255.0)
    return _finish(classifier, x, x_ori, y_gt, clean_correct, "pgd", cfg.steps)


def pgd_decay_attack(classifier: Classifier, x_ori: ImageTensor, y_gt: int,
                     cfg: BaselineConfig, s: Schedule,
                     image_index: int = 0) -> AttackResult:
    """x_{t-1} = Pi_ball(x_t + lambda_t * eta * sign(grad CE)), t = T..1, in
    unit range; lambda_t comes from the same schedule an aligned diffusion
    run would use."""
    cfg.validate()
    if x_ori.range_tag is not ValueRange.BYTE:
        raise ValueError("pgd_decay_attack takes the original image in byte range")
    xi_int = 2.0 * cfg.xi
    x0_unit = np.asarray(x_ori.data, dtype=np.float64) / 127.5 - 1.0
    x = x0_unit.copy()
    for t in range(s.T, 0, -1):
        x_byte = ImageTensor((x + 1.0) * 127.5, ValueRange.BYTE)
        grad_byte = classifier.input_gradient(x_byte, y_gt, LOSS_CROSS_ENTROPY).data
        x = x + s.lam[t] * cfg.eta * np.sign(127.5 * grad_byte)
        x = np.clip(np.clip(x, x0_unit - xi_int, x0_unit + xi_int), -1.0, 1.0)
    clean_correct = int(np.argmax(classifier.forward(x_ori))) == y_gt
    return _finish(classifier, (x + 1.0) * 127.5, x_ori, y_gt, clean_correct,
                   "pgd_decay", s.T)
