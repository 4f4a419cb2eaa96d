"""Imperceptible adversarial attacks as a non-parametric diffusion process.

A fixed noise is attached to the original image, and at every backward step a
classifier-gradient guidance term nudges that noise while an exact l-inf
projection keeps it inside a certified ball, so the endpoint of the process
is an adversarial example provably within the pixel budget. Includes the
dynamic-skipping extreme variant, runtime verification of the certified
bounds, imperceptibility metrics, PGD baselines, a trainable built-in CNN,
and a CLI.
"""

from .baseline import BaselineConfig, pgd_attack, pgd_decay_attack
from .data import Dataset, gen_synthetic, load_png_dir, train_test_split
from .engine import (AttackConfig, AttackResult, StepRecord, TrajectoryTrace,
                     advad_attack, advadx_attack, backward_step,
                     effect_of_t_sweep, forward_noise, run_attack)
from .guidance import amg_inject, pc_project, predict_x0
from .imagecore import (ImageTensor, ValueRange, quantize_8bit, read_png,
                        read_raw_float, to_byte_range, to_unit_range,
                        write_png, write_raw_float)
from .metrics import MetricsRow, asr, l2_dist, linf_dist, psnr, ssim
from .model import (BuiltinCnn, Classifier, Mask, gradcam_mask, input_gradient,
                    log_one_minus_p, softmax_prob, train_reference)
from .schedule import ConstraintRadius, Schedule, constraint_radius, make_schedule
from .verify import (VerificationReport, check_prop1, check_prop2,
                     check_theorem1, decay_stats, verify_trace)

__version__ = "0.1.0"
