"""The non-parametric diffusion attack loops, with optional trajectory tracing.

Two modes share one core:

* ``advad``: guidance is crafted and projected at every step,
* ``advadx``: guidance runs only while the current endpoint prediction still
  classifies correctly (dynamic skipping), optionally scaled by a CAM mask,
  and the primary artifact is the raw floating-point output.

State representation. The textbook recursion updates the noisy state
x_{t-1} = sqrt(a_{t-1}) * x0_pred + sqrt(1-a_{t-1}) * eps_hat_t, which
amplifies per-step rounding by sqrt(a_{t-1}/a_t) (a factor of 1/sqrt(a_T),
~157 at T=1000, end to end). The engine instead iterates the endpoint
prediction itself,

    x0_pred_{t-1} = x0_pred_t + nsr_t * (delta_t - delta_{t+1}),

with nsr_t = sqrt(1-a_t)/sqrt(a_t) and delta_t = eps0 - eps_hat_t. This is
the same algebra (telescoping it back yields the textbook recursion term for
term), but with guidance disabled it is *bit-exact*: no drift, ever. The
noisy state is reconstructed as x_t = sqrt(a_t) * x0_pred_t +
sqrt(1-a_t) * eps_hat_{t+1} whenever a trace wants it.

Projection happens in delta space (delta_t = clip(G_t, -rho, rho)), so
|delta_t| <= rho holds exactly at every step; the resulting eps_hat lands on
the same bits as the amg_inject/pc_project composition.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .guidance import CHAIN_FULL, CHAIN_MODES
from .imagecore import (ImageTensor, ValueRange, advf_pack, advf_unpack,
                        quantize_8bit)
from .model import Classifier, LOSS_LOG1MP, softmax_prob
from .schedule import (DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, Schedule,
                       constraint_radius, make_schedule)

MODE_ADVAD = "advad"
MODE_ADVADX = "advadx"

PRECISIONS = {"f32": np.float32, "f64": np.float64}


class NonFiniteStateError(RuntimeError):
    """An intermediate trajectory state stopped being finite."""


@dataclass(frozen=True)
class AttackConfig:
    xi: float = 8.0 / 255.0        # budget, byte units out of 255
    T: int = 1000
    mode: str = MODE_ADVAD
    gradient_chain: str = CHAIN_FULL
    use_cam: bool = False
    seed: int = 0
    precision: str = "f64"
    trace: bool = False
    deep_trace: bool = False
    beta_min: float = DEFAULT_BETA_MIN
    beta_max: float = DEFAULT_BETA_MAX

    def validate(self):
        if self.xi < 0:
            raise ValueError(f"xi must be nonnegative, got {self.xi}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.mode not in (MODE_ADVAD, MODE_ADVADX):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.use_cam and self.mode != MODE_ADVADX:
            raise ValueError("use_cam requires mode=advadx")
        if self.gradient_chain not in CHAIN_MODES:
            raise ValueError(f"unknown gradient_chain {self.gradient_chain!r}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")

    @property
    def xi_internal(self) -> float:
        """Budget in the [-1, 1] trajectory range (byte diff d maps to d/127.5)."""
        return 2.0 * self.xi


@dataclass
class StepRecord:
    t: int
    p_f: float
    delta_linf: float
    lambda_t: float
    skipped: bool
    x0_pred_err: float | None = None   # ||x_adv - x0_pred_t||_inf, filled post-hoc

    def to_json(self) -> dict:
        return {"t": self.t, "p_f": self.p_f, "delta_linf": self.delta_linf,
                "lambda_t": self.lambda_t, "skipped": self.skipped}


@dataclass
class TrajectoryTrace:
    """Per-step records plus (optionally) the full tensors the verifiers need.

    Deep arrays are indexed by loop position i = T - t (the loop runs t from
    T down to 1). ``delta[i]`` is the post-projection delta at step t;
    ``x0_pred[i]`` is the endpoint prediction the classifier saw at step t.
    """

    T: int
    xi: float
    xi_internal: float
    rho: float
    precision: str
    schedule_summary: dict
    y_gt: int
    image_index: int
    steps: list = field(default_factory=list)
    running: dict | None = None
    eps0: np.ndarray | None = None
    delta: np.ndarray | None = None
    x0_pred: np.ndarray | None = None
    x_ori_unit: np.ndarray | None = None
    x_adv_unit: np.ndarray | None = None

    @property
    def is_deep(self) -> bool:
        return self.delta is not None

    def index_of(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"step t={t} outside 1..{self.T}")
        return self.T - t

    def delta_at(self, t: int) -> np.ndarray:
        """delta_t for t in 1..T+1 (delta_{T+1} is identically zero)."""
        if t == self.T + 1:
            return np.zeros_like(self.eps0)
        return self.delta[self.index_of(t)]

    def eps_hat_at(self, t: int) -> np.ndarray:
        return self.eps0 - self.delta_at(t)

    def x0_pred_at(self, t: int) -> np.ndarray:
        return self.x0_pred[self.index_of(t)]

    def x_hat_at(self, t: int, s: Schedule) -> np.ndarray:
        """Noisy state x_t = sqrt(a_t)*x0_pred_t + sqrt(1-a_t)*eps_hat_{t+1}."""
        a = s.alpha[t]
        return (np.sqrt(a) * self.x0_pred_at(t)
                + np.sqrt(1.0 - a) * self.eps_hat_at(t + 1))


@dataclass
class AttackResult:
    x_adv_raw: ImageTensor          # byte range, floating-valued (ideal scenario)
    x_adv_quantized: ImageTensor    # integer-valued
    success_raw: bool
    success_quantized: bool
    clean_correct: bool
    guided_steps: int
    y_gt: int
    pred_raw: int
    pred_quantized: int
    method: str
    metrics: dict | None = None       # attached by the metrics harness
    metrics_raw: dict | None = None   # same, against the unquantized output
    trace: TrajectoryTrace | None = None


# ---------------------------------------------------------------------------
# elementary trajectory ops (public, also used by tests and verifiers)

def forward_noise(x_ori: ImageTensor, eps0: np.ndarray, s: Schedule) -> ImageTensor:
    """x_T = sqrt(alpha_T) * x_ori + sqrt(1 - alpha_T) * eps0."""
    if x_ori.range_tag is not ValueRange.UNIT:
        raise ValueError("forward_noise expects a unit-range image")
    a = s.alpha[s.T]
    return ImageTensor(np.sqrt(a) * x_ori.data + np.sqrt(1.0 - a) * eps0,
                       ValueRange.UNIT)


def backward_step(x_hat_t: ImageTensor, eps_hat_t: np.ndarray, s: Schedule,
                  t: int) -> ImageTensor:
    """One deterministic backward step:
    x_{t-1} = sqrt(a_{t-1}) * (x_t - sqrt(1-a_t)*eps)/sqrt(a_t) + sqrt(1-a_{t-1})*eps."""
    from .guidance import _check_step
    _check_step(s, t)
    a_t, a_prev = s.alpha[t], s.alpha[t - 1]
    x0 = (x_hat_t.data - np.sqrt(1.0 - a_t) * eps_hat_t) / np.sqrt(a_t)
    return ImageTensor(np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps_hat_t,
                       ValueRange.UNIT)


# ---------------------------------------------------------------------------
# the attack core

def _attack_core(classifier: Classifier, x_ori: ImageTensor, y_gt: int,
                 cfg: AttackConfig, image_index: int, dynamic_skip: bool,
                 force_disable_guidance: bool = False) -> AttackResult:
    cfg.validate()
    if x_ori.range_tag is not ValueRange.BYTE:
        raise ValueError("attacks take the original image in byte range")
    dtype = PRECISIONS[cfg.precision]
    s = make_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    xi_int = cfg.xi_internal
    rho_w = dtype(constraint_radius(s, xi_int).rho)
    rho = float(rho_w)          # the radius the run actually enforces

    mask_arr = None
    if cfg.use_cam:
        mask_arr = classifier.cam_mask(x_ori, y_gt).values[:, :, None]

    clean_pred = int(np.argmax(classifier.forward(x_ori)))
    clean_correct = clean_pred == y_gt

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, image_index]))
    eps0 = rng.standard_normal(x_ori.shape).astype(dtype)
    x_ori_unit = (np.asarray(x_ori.data, dtype=np.float64) / 127.5 - 1.0).astype(dtype)

    # per-step coefficients; schedule math stays f64, casts happen once here
    nsr_w = s.nsr.astype(dtype)
    lam_w = s.lam.astype(dtype)
    sqrt_a = np.sqrt(s.alpha)
    sqrt_1ma = np.sqrt(1.0 - s.alpha)
    guide_scale = sqrt_1ma.copy()
    if cfg.gradient_chain == CHAIN_FULL:
        guide_scale *= 127.5 / sqrt_a

    want_trace = cfg.trace or cfg.deep_trace
    trace = None
    if want_trace:
        trace = TrajectoryTrace(T=cfg.T, xi=cfg.xi, xi_internal=xi_int, rho=rho,
                                precision=cfg.precision, schedule_summary=s.summary(),
                                y_gt=int(y_gt), image_index=int(image_index))
        run_premise_max = 0.0
        run_xhat_margin = -np.inf
        run_x0_margin = -np.inf
        # Theorem-1 per-step bound on the noisy state, clamped at zero (the
        # t=T value cancels to 0 algebraically and may round negative)
        xhat_bound = np.maximum((sqrt_a - sqrt_1ma / s.nsr[s.T]) * xi_int, 0.0)
    if cfg.deep_trace:
        trace.eps0 = eps0.copy()
        trace.x_ori_unit = x_ori_unit.copy()
        trace.delta = np.zeros((cfg.T,) + x_ori.shape, dtype=dtype)
        trace.x0_pred = np.empty((cfg.T,) + x_ori.shape, dtype=dtype)

    zeros = np.zeros_like(eps0)
    x0 = x_ori_unit.copy()          # x0_pred at t = T (exact: the fixed
    delta_prev = zeros              # trajectory predicts x_ori identically)
    prop1_sum = np.zeros_like(eps0)
    guided_steps = 0

    for i, t in enumerate(range(cfg.T, 0, -1)):
        if cfg.deep_trace:
            trace.x0_pred[i] = x0
        if want_trace:
            # loop entry: x0 is x0_pred_t, delta_prev is delta_{t+1}
            xhat_diff = sqrt_a[t] * (x0 - x_ori_unit) - sqrt_1ma[t] * delta_prev
            run_xhat_margin = max(run_xhat_margin,
                                  float(np.abs(xhat_diff).max() - xhat_bound[t]))
            run_x0_margin = max(run_x0_margin,
                                float(np.abs(x0 - x_ori_unit).max() - xi_int))

        x0_byte = ImageTensor((x0 + 1.0) * 127.5, ValueRange.BYTE)
        if force_disable_guidance:
            logits = classifier.forward(x0_byte)
            grad = None
            guided = False
        elif dynamic_skip:
            logits = classifier.forward(x0_byte)
            guided = int(np.argmax(logits)) == y_gt
            grad = (classifier.input_gradient(x0_byte, y_gt, LOSS_LOG1MP).data
                    if guided else None)
        else:
            logits, grad_img = classifier.value_and_input_gradient(
                x0_byte, y_gt, LOSS_LOG1MP)
            grad = grad_img.data
            guided = True
        p_f = softmax_prob(logits, y_gt)

        if guided:
            g = guide_scale[t] * grad
            if mask_arr is not None:
                g = mask_arr * g
            delta = np.clip(g.astype(dtype, copy=False), -rho_w, rho_w)
            guided_steps += 1
            prop1_sum += lam_w[t] * delta
        else:
            delta = zeros

        if delta is not zeros or delta_prev is not zeros:
            x0 = x0 + nsr_w[t] * (delta - delta_prev)
            if not np.isfinite(x0).all():
                raise NonFiniteStateError(
                    f"non-finite state at step t={t} (image {image_index})")

        if want_trace:
            run_premise_max = max(run_premise_max, float(np.abs(delta).max()))
            trace.steps.append(StepRecord(t=t, p_f=p_f,
                                          delta_linf=float(np.abs(delta).max()),
                                          lambda_t=float(s.lam[t]),
                                          skipped=not guided))
        if cfg.deep_trace and guided:
            trace.delta[i] = delta
        delta_prev = delta

    x_adv_unit = x0
    x_adv_raw = ImageTensor((x_adv_unit + 1.0) * 127.5, ValueRange.BYTE)
    x_adv_quant = quantize_8bit(x_adv_raw)
    pred_raw = int(np.argmax(classifier.forward(x_adv_raw)))
    pred_quant = int(np.argmax(classifier.forward(x_adv_quant)))

    if want_trace:
        trace.x_adv_unit = x_adv_unit.copy()
        if cfg.deep_trace:
            for i, rec in enumerate(trace.steps):
                rec.x0_pred_err = float(np.abs(x_adv_unit - trace.x0_pred[i]).max())
        trace.running = {
            "premise_linf_max": run_premise_max,
            "rho": rho,
            "premise_holds": run_premise_max <= rho,
            "xhat_bound_margin": run_xhat_margin,
            "x0_bound_margin": run_x0_margin,
            "prop1_residual": float(
                np.abs(x_adv_unit - (x_ori_unit + prop1_sum)).max()),
            "final_linf_unit": float(np.abs(x_adv_unit - x_ori_unit).max()),
        }

    return AttackResult(
        x_adv_raw=x_adv_raw, x_adv_quantized=x_adv_quant,
        success_raw=pred_raw != y_gt, success_quantized=pred_quant != y_gt,
        clean_correct=clean_correct, guided_steps=guided_steps,
        y_gt=int(y_gt), pred_raw=pred_raw, pred_quantized=pred_quant,
        method=MODE_ADVADX if dynamic_skip else MODE_ADVAD, trace=trace)


def advad_attack(classifier: Classifier, x_ori: ImageTensor, y_gt: int,
                 cfg: AttackConfig, image_index: int = 0,
                 force_disable_guidance: bool = False) -> AttackResult:
    """Run the full guided trajectory (guidance + projection at every step).

    ``force_disable_guidance`` is a test hook: it walks the identity
    trajectory (no guidance at all) while still recording probabilities.
    """
    if cfg.mode != MODE_ADVAD:
        cfg = dataclasses.replace(cfg, mode=MODE_ADVAD, use_cam=False)
    return _attack_core(classifier, x_ori, y_gt, cfg, image_index,
                        dynamic_skip=False,
                        force_disable_guidance=force_disable_guidance)


def advadx_attack(classifier: Classifier, x_ori: ImageTensor, y_gt: int,
                  cfg: AttackConfig, image_index: int = 0) -> AttackResult:
    """Dynamic variant: guidance and projection run only at steps where the
    endpoint prediction still classifies as y_gt; other steps keep eps0. The
    raw floating-point output is the primary artifact."""
    if cfg.mode != MODE_ADVADX:
        cfg = dataclasses.replace(cfg, mode=MODE_ADVADX)
    return _attack_core(classifier, x_ori, y_gt, cfg, image_index,
                        dynamic_skip=True)


def run_attack(classifier: Classifier, x_ori: ImageTensor, y_gt: int,
               cfg: AttackConfig, image_index: int = 0) -> AttackResult:
    if cfg.mode == MODE_ADVAD:
        return advad_attack(classifier, x_ori, y_gt, cfg, image_index)
    if cfg.mode == MODE_ADVADX:
        return advadx_attack(classifier, x_ori, y_gt, cfg, image_index)
    raise ValueError(f"unknown mode {cfg.mode!r}")


def effect_of_t_sweep(classifier: Classifier, dataset, t_list, cfg: AttackConfig):
    """Attack the dataset once per T and tabulate efficacy/strength per T."""
    from .metrics import l2_dist, psnr
    if len(t_list) == 0:
        raise ValueError("t_list must be nonempty")
    rows = []
    for T in t_list:
        run_cfg = dataclasses.replace(cfg, T=int(T))
        succ, l2s, psnrs = [], [], []
        for idx, (img, label) in enumerate(dataset.samples):
            res = advad_attack(classifier, img, label, run_cfg, image_index=idx)
            if not res.clean_correct:
                continue
            succ.append(res.success_raw)
            l2s.append(l2_dist(res.x_adv_quantized, img))
            psnrs.append(psnr(res.x_adv_quantized, img))
        rows.append({
            "T": int(T),
            "attacked": len(succ),
            "asr_raw": float(np.mean(succ)) if succ else 0.0,
            "l2_median": float(np.median(l2s)) if l2s else 0.0,
            "l2_mean": float(np.mean(l2s)) if l2s else 0.0,
            "psnr_mean": float(np.mean(psnrs)) if psnrs else 0.0,
        })
    return rows


# ---------------------------------------------------------------------------
# trace persistence (scalar records as JSON lines; deep tensors as
# concatenated ADVF records plus a JSON sidecar)

def write_step_records(trace: TrajectoryTrace, path) -> None:
    with open(path, "w") as f:
        for rec in trace.steps:
            f.write(json.dumps(rec.to_json()) + "\n")


def read_step_records(path) -> list:
    records = []
    with open(path) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                records.append(StepRecord(t=d["t"], p_f=d["p_f"],
                                          delta_linf=d["delta_linf"],
                                          lambda_t=d["lambda_t"],
                                          skipped=d["skipped"]))
    return records


def save_deep_trace(trace: TrajectoryTrace, blob_path, meta_path) -> None:
    """Record order: x_ori_unit, x_adv_unit, eps0, then per loop position i
    the pair (delta_i, x0_pred_i). Payloads are float32 (the ADVF container's
    element type); file-replay verification uses the f32 tolerance row."""
    if not trace.is_deep:
        raise ValueError("trace holds no deep tensors")
    with open(blob_path, "wb") as f:
        f.write(advf_pack(trace.x_ori_unit))
        f.write(advf_pack(trace.x_adv_unit))
        f.write(advf_pack(trace.eps0))
        for i in range(trace.T):
            f.write(advf_pack(trace.delta[i]))
            f.write(advf_pack(trace.x0_pred[i]))
    meta = {"T": trace.T, "xi": trace.xi, "xi_internal": trace.xi_internal,
            "rho": trace.rho, "precision": "f32",
            "schedule": trace.schedule_summary, "y_gt": trace.y_gt,
            "image_index": trace.image_index,
            "steps": [rec.to_json() for rec in trace.steps]}
    with open(meta_path, "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)


def load_deep_trace(blob_path, meta_path) -> TrajectoryTrace:
    with open(meta_path) as f:
        meta = json.load(f)
    T = meta["T"]
    trace = TrajectoryTrace(T=T, xi=meta["xi"], xi_internal=meta["xi_internal"],
                            rho=meta["rho"], precision=meta["precision"],
                            schedule_summary=meta["schedule"], y_gt=meta["y_gt"],
                            image_index=meta["image_index"])
    trace.steps = [StepRecord(t=d["t"], p_f=d["p_f"], delta_linf=d["delta_linf"],
                              lambda_t=d["lambda_t"], skipped=d["skipped"])
                   for d in meta["steps"]]
    with open(blob_path, "rb") as f:
        blob = f.read()
    trace.x_ori_unit, offset = advf_unpack(blob, 0)
    trace.x_adv_unit, offset = advf_unpack(blob, offset)
    trace.eps0, offset = advf_unpack(blob, offset)
    shape = (T,) + trace.eps0.shape
    trace.delta = np.empty(shape, dtype=np.float32)
    trace.x0_pred = np.empty(shape, dtype=np.float32)
    for i in range(T):
        trace.delta[i], offset = advf_unpack(blob, offset)
        trace.x0_pred[i], offset = advf_unpack(blob, offset)
    if offset != len(blob):
        raise ValueError(f"{blob_path}: {len(blob) - offset} trailing bytes")
    return trace
