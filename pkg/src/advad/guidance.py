"""Per-step guidance crafting and noise-space projection.

Each step of the attack trajectory does three things:

1. predict the endpoint from the current state and the previous step's noise,
   x0_pred = (x_t - sqrt(1-alpha_t) * eps_prev) / sqrt(alpha_t),
2. push the fixed initial noise eps0 against the gradient of
   log(1 - p_f(label | x0_pred)), scaled by sqrt(1-alpha_t)  (and by an
   optional CAM mask),
3. clamp the result back into the l-inf ball of radius rho around eps0,
   which is what makes every certified bound downstream hold.

The classifier sees byte-range inputs, so the raw gradient is per byte unit.
``gradient_chain`` picks how much of the chain rule to apply on top of it:

* ``full``: multiply by 127.5/sqrt(alpha_t) (d(byte x0_pred)/d(x_t)) so the
  injected term is literally the gradient w.r.t. the unit-range state,
* ``x0_only``: use the byte-range gradient as-is; the projection absorbs
  constant factors anyway.
"""

from __future__ import annotations

import numpy as np

from .imagecore import ImageTensor, ValueRange
from .model import Classifier, Mask, LOSS_LOG1MP
from .schedule import ConstraintRadius, Schedule

CHAIN_FULL = "full"
CHAIN_X0_ONLY = "x0_only"
CHAIN_MODES = (CHAIN_FULL, CHAIN_X0_ONLY)


class StepRangeError(ValueError):
    """Step index outside 1..T."""


def _check_step(s: Schedule, t: int):
    if not 1 <= t <= s.T:
        raise StepRangeError(f"step t={t} outside 1..{s.T}")


def predict_x0(x_hat_t: ImageTensor, eps_prev: np.ndarray, s: Schedule, t: int) -> ImageTensor:
    """Endpoint prediction (x_t - sqrt(1-alpha_t) * eps_prev) / sqrt(alpha_t).

    ``eps_prev`` is the constrained noise of the *previous* (t+1) step; at the
    first step it is the initial noise itself.
    """
    if t == 0:
        return ImageTensor(x_hat_t.data.copy(), ValueRange.UNIT)
    _check_step(s, t)
    a = s.alpha[t]
    out = (x_hat_t.data - np.sqrt(1.0 - a) * eps_prev) / np.sqrt(a)
    return ImageTensor(out, ValueRange.UNIT)


def guidance_term(x_hat_t0_byte: ImageTensor, classifier: Classifier, y_gt: int,
                  s: Schedule, t: int, mask: Mask | None = None,
                  gradient_chain: str = CHAIN_FULL,
                  grad_byte: np.ndarray | None = None) -> np.ndarray:
    """The subtracted term G of the guidance update (eps' = eps0 - G):
    G = [m *] sqrt(1-alpha_t) * g with g the (chain-ruled) gradient of
    log(1 - p_f) at the byte-range endpoint prediction.

    ``grad_byte`` lets callers that already ran the classifier pass the raw
    byte-range gradient in instead of paying a second forward pass.
    """
    _check_step(s, t)
    if gradient_chain not in CHAIN_MODES:
        raise ValueError(f"unknown gradient_chain {gradient_chain!r}")
    if grad_byte is None:
        grad_byte = classifier.input_gradient(x_hat_t0_byte, y_gt, LOSS_LOG1MP).data
    a = s.alpha[t]
    scale = np.sqrt(1.0 - a)
    if gradient_chain == CHAIN_FULL:
        scale *= 127.5 / np.sqrt(a)
    g = scale * grad_byte
    if mask is not None:
        g = mask.values[:, :, None] * g
    return g


def amg_inject(eps0: np.ndarray, x_hat_t0: ImageTensor, classifier: Classifier,
               y_gt: int, s: Schedule, t: int, mask: Mask | None = None,
               gradient_chain: str = CHAIN_FULL) -> np.ndarray:
    """Inject adversarial guidance into the fixed noise:
    eps' = eps0 - [m *] sqrt(1-alpha_t) * grad(log(1 - p_f)).

    ``x_hat_t0`` must already be in byte range (that is what the classifier
    consumes). A dead gradient or an all-zero mask returns eps0 unchanged.
    """
    if x_hat_t0.range_tag is not ValueRange.BYTE:
        raise ValueError("amg_inject expects the endpoint prediction in byte range")
    if eps0.shape != x_hat_t0.shape:
        raise ValueError(f"shape mismatch: noise {eps0.shape} vs image {x_hat_t0.shape}")
    g = guidance_term(x_hat_t0, classifier, y_gt, s, t, mask=mask,
                      gradient_chain=gradient_chain)
    return eps0 - g


def pc_project(eps_prime: np.ndarray, eps0: np.ndarray,
               rho: ConstraintRadius) -> np.ndarray:
    """Per-element clamp of eps' into [eps0 - rho, eps0 + rho]. Elements
    already inside the ball pass through bit-for-bit."""
    if eps_prime.shape != eps0.shape:
        raise ValueError(f"shape mismatch: {eps_prime.shape} vs {eps0.shape}")
    r = rho.rho
    return np.minimum(np.maximum(eps_prime, eps0 - r), eps0 + r)


def clamp_delta(g: np.ndarray, rho: ConstraintRadius) -> np.ndarray:
    """Projection in delta space: delta_t = clip(G, -rho, rho), so that
    |delta_t| <= rho holds exactly and eps_hat = eps0 - delta_t lands on the
    same bits as amg_inject followed by pc_project."""
    return np.clip(g, -rho.rho, rho.rho)
