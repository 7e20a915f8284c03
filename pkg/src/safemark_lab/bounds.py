"""Closed-form information bounds for a B-bit watermark channel.

All entropies are in bits. The message W is uniform on {0,1}^B, so H(W) = B.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

SOFT_MI_THRESHOLD = 7 / 8


@dataclass(frozen=True)
class BoundReport:
    name: str
    b_bits: int
    input_quantity: float
    bound_value: float
    vacuous: bool = False

    def row(self) -> tuple:
        return (self.name, self.b_bits, self.input_quantity, self.bound_value, self.vacuous)


def _check_prob(name: str, p: float) -> float:
    p = float(p)
    if not (0.0 <= p <= 1.0) or math.isnan(p):
        raise ValueError(f"{name} must lie in [0, 1], got {p}")
    return p


def _check_bits(b_bits: int) -> int:
    if int(b_bits) != b_bits or b_bits < 1:
        raise ValueError(f"message length must be a positive integer, got {b_bits}")
    return int(b_bits)


def binary_entropy(p: float) -> float:
    p = _check_prob("p", p)
    if p in (0.0, 1.0):
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def fano_block_error_lower_bound(mi_bits: float, b_bits: int) -> float:
    """Smallest block error rate compatible with ``mi_bits`` of channel information."""
    b = _check_bits(b_bits)
    if mi_bits < 0:
        raise ValueError(f"mutual information cannot be negative, got {mi_bits}")
    return max(0.0, 1.0 - (mi_bits + 1.0) / b)


def acc_to_mi_lower_bound(acc_bar: float, b_bits: int) -> float:
    """Information guaranteed by average bit accuracy ``acc_bar``.

    Below 0.5 accuracy the formula still evaluates but says nothing useful:
    a decoder that flips every bit would do better.
    """
    b = _check_bits(b_bits)
    acc_bar = _check_prob("acc_bar", acc_bar)
    return b * (1.0 - binary_entropy(1.0 - acc_bar))


def tau_capacity_bound(tau: float, b_bits: int) -> float:
    tau = _check_prob("tau", tau)
    if tau < 0.5:
        raise ValueError(f"tau must lie in [0.5, 1], got {tau}")
    return acc_to_mi_lower_bound(tau, b_bits)


def calibration_hard_from_soft(soft_acc: float) -> tuple[float, bool]:
    """Hard bit accuracy implied by soft accuracy, and whether it is vacuous (< 1/2)."""
    soft_acc = _check_prob("soft_acc", soft_acc)
    hard = 4.0 * soft_acc - 3.0
    return hard, hard < 0.5


def soft_mi_lower_bound(tau: float, b_bits: int) -> float:
    b = _check_bits(b_bits)
    tau = _check_prob("tau", tau)
    if tau < SOFT_MI_THRESHOLD:
        raise ValueError(f"bound vacuous below 7/8 (tau={tau})")
    return b * (1.0 - binary_entropy(min(1.0, 4.0 * (1.0 - tau))))


def iid_block_error(acc_per_bit: float, b_bits: int) -> float:
    b = _check_bits(b_bits)
    acc_per_bit = _check_prob("acc_per_bit", acc_per_bit)
    return 1.0 - acc_per_bit**b


# report builders used by the CLI


def report_h2(p: float) -> BoundReport:
    return BoundReport("binary_entropy", 1, p, binary_entropy(p))


def report_acc_mi(acc: float, b: int) -> BoundReport:
    return BoundReport("acc_to_mi", b, acc, acc_to_mi_lower_bound(acc, b), vacuous=acc < 0.5)


def report_fano(mi: float, b: int) -> BoundReport:
    value = fano_block_error_lower_bound(mi, b)
    return BoundReport("fano_block_error", b, mi, value, vacuous=value <= 0.0)


def report_capacity(tau: float, b: int) -> BoundReport:
    return BoundReport("tau_capacity", b, tau, tau_capacity_bound(tau, b))


def report_calibration(soft: float) -> BoundReport:
    hard, vac = calibration_hard_from_soft(soft)
    return BoundReport("calibration_hard_from_soft", 1, soft, hard, vacuous=vac)


def report_soft_mi(tau: float, b: int) -> BoundReport:
    if tau < SOFT_MI_THRESHOLD:
        return BoundReport("soft_mi", b, tau, 0.0, vacuous=True)
    return BoundReport("soft_mi", b, tau, soft_mi_lower_bound(tau, b))


def report_iid(acc: float, b: int) -> BoundReport:
    return BoundReport("iid_block_error", b, acc, iid_block_error(acc, b))


def remark_reports(acc: float = 0.9, b: int = 64) -> list[BoundReport]:
    """The accuracy / information / block-error chain at one operating point."""
    mi = acc_to_mi_lower_bound(acc, b)
    return [
        report_h2(round(1.0 - acc, 12)),
        report_acc_mi(acc, b),
        report_fano(mi, b),
        report_iid(acc, b),
    ]
