"""Finite-step entry into the inactive hinge phase, on instances where the assumptions can be checked.

The instances are one-dimensional with a quadratic soft-accuracy surrogate
``acc(theta) = 1 - a (theta - opt)^2`` and an optional quadratic semantic
pull towards ``anchor``. For these the smoothness constant is exact
(``2a``) and the gradient floor, alignment and gradient cap are certified
by dense sampling of the interval the iterates stay in.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

SAMPLES = 20001


@dataclass(frozen=True)
class ConvergenceInstance:
    tau: float
    theta0: float
    eta: float
    L: float
    mu: float
    c: float
    M: float
    lambda_wm: float = 1.0
    lambda_sem: float = 0.0
    curvature: float = 1.0
    optimum: float = 1.0
    anchor: float | None = None

    @property
    def sem_anchor(self) -> float:
        return self.theta0 if self.anchor is None else self.anchor

    def soft_acc(self, theta: float) -> float:
        return 1.0 - self.curvature * (theta - self.optimum) ** 2

    def grad_acc(self, theta):
        return -2.0 * self.curvature * (np.asarray(theta) - self.optimum)

    def gap(self, theta: float) -> float:
        """tau - acc; the hinge is max(0, gap)."""
        return self.tau - self.soft_acc(theta)

    def loss_wm(self, theta: float) -> float:
        return max(0.0, self.gap(theta))

    def active(self, theta):
        return self.tau - (1.0 - self.curvature * (np.asarray(theta) - self.optimum) ** 2) > 0

    def grad_wm(self, theta):
        return np.where(self.active(theta), -self.grad_acc(theta), 0.0)

    def grad_sem(self, theta):
        return np.asarray(theta) - self.sem_anchor

    def grad_total(self, theta):
        return self.lambda_wm * self.grad_wm(theta) + self.lambda_sem * self.grad_sem(theta)

    def max_step(self) -> float:
        return self.c * self.mu**2 / (self.L * self.M**2)

    def domain(self) -> tuple[float, float]:
        pts = [self.theta0, self.optimum, self.sem_anchor]
        return min(pts), max(pts)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> ConvergenceInstance:
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown instance keys {sorted(unknown)}")
        return cls(**doc)


def reference_instance() -> ConvergenceInstance:
    """acc = 1 - (theta - 1)^2, tau = 0.96, theta0 = 0, pure hinge."""
    return ConvergenceInstance(tau=0.96, theta0=0.0, eta=0.02, L=2.0, mu=0.4, c=1.0, M=2.0)


def _grid(inst: ConvergenceInstance, n: int = SAMPLES) -> np.ndarray:
    lo, hi = inst.domain()
    return np.linspace(lo, hi, n)


def certified_constants(inst: ConvergenceInstance, n: int = SAMPLES) -> dict[str, float]:
    """Tightest constants the sampled domain supports (L is exact for the quadratic)."""
    th = _grid(inst, n)
    act = inst.active(th)
    out = {"L": 2.0 * inst.curvature}
    if act.any():
        ga = np.abs(inst.grad_acc(th[act]))
        # the active set is open; its boundary value is the infimum
        r = math.sqrt(max(0.0, (1.0 - inst.tau) / inst.curvature))
        out["mu"] = float(min(ga.min(), 2.0 * inst.curvature * r))
        gw = inst.grad_wm(th[act])
        gt = inst.grad_total(th[act])
        out["c"] = float(np.min(gw * gt / (gw * gw)))
    else:
        out["mu"] = float("inf")
        out["c"] = float("inf")
    out["M"] = float(np.max(np.abs(inst.grad_total(th))))
    return out


def check_instance(inst: ConvergenceInstance, n: int = SAMPLES) -> list[str]:
    """Assumption violations for ``inst``; empty means every assumption holds."""
    problems = []
    cert = certified_constants(inst, n)
    if inst.L < cert["L"] - 1e-12:
        problems.append(f"L={inst.L} below curvature bound {cert['L']}")
    if inst.mu <= 0 or inst.mu > cert["mu"] + 1e-12:
        problems.append(f"mu={inst.mu} exceeds active-phase gradient floor {cert['mu']}")
    if inst.c <= 0 or inst.c > cert["c"] + 1e-12:
        problems.append(f"c={inst.c} exceeds alignment {cert['c']}")
    if inst.M < cert["M"] - 1e-12:
        problems.append(f"M={inst.M} below gradient cap {cert['M']}")
    if inst.eta <= 0 or inst.eta > inst.max_step() * (1 + 1e-12):
        problems.append(f"eta={inst.eta} exceeds c mu^2/(L M^2) = {inst.max_step()}")
    return problems


def budget(inst: ConvergenceInstance) -> int:
    """Step budget ceil(2 L_wm(theta0) / (eta c mu^2))."""
    denom = inst.eta * inst.c * inst.mu**2
    if denom <= 0:
        raise ValueError("eta * c * mu^2 must be positive")
    # round first so 600.0000000000001 does not become 601
    return int(math.ceil(round(2.0 * inst.loss_wm(inst.theta0) / denom, 9)))


@dataclass
class GDResult:
    hitting_time: int | None
    t_max: int
    trajectory: list[tuple[float, float, float]]
    descent_ok: bool
    min_descent_margin: float
    in_domain: bool
    active: list[bool] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.hitting_time is not None and self.hitting_time <= self.t_max and self.descent_ok and self.in_domain


def run_gd(inst: ConvergenceInstance, extra_steps: int = 0) -> GDResult:
    """Plain gradient descent until the hinge switches off (or the budget runs out).

    ``extra_steps`` continues past the hitting time so re-activation can be observed.
    """
    t_max = budget(inst)
    drop = inst.eta * inst.c * inst.mu**2 / 2.0
    lo, hi = inst.domain()
    theta = float(inst.theta0)
    traj = [(theta, inst.loss_wm(theta), inst.soft_acc(theta))]
    active = [bool(inst.active(theta))]
    hit = 0 if not active[0] else None
    margin = float("inf")
    in_domain = True
    t = 0
    while t < t_max + 1 + extra_steps:
        if hit is not None and t >= hit + extra_steps:
            break
        prev_active = bool(inst.active(theta))
        prev_loss = inst.loss_wm(theta)
        theta = theta - inst.eta * float(inst.grad_total(theta))
        t += 1
        in_domain &= lo - 1e-12 <= theta <= hi + 1e-12
        if prev_active:
            # the descent inequality is checked on the unclipped gap
            margin = min(margin, prev_loss - drop - inst.gap(theta))
        traj.append((theta, inst.loss_wm(theta), inst.soft_acc(theta)))
        active.append(bool(inst.active(theta)))
        if hit is None and not active[-1]:
            hit = t
    if margin == float("inf"):
        margin = 0.0
    return GDResult(hit, t_max, traj, margin >= -1e-12, margin, in_domain, active)


def hitting_time_closed_form(inst: ConvergenceInstance) -> int:
    """Pure-hinge quadratic: theta_t - opt = (1 - 2 a eta)^t (theta0 - opt)."""
    if inst.lambda_sem != 0:
        raise ValueError("closed form only covers the pure hinge")
    r = math.sqrt((1.0 - inst.tau) / inst.curvature)
    d0 = abs(inst.theta0 - inst.optimum)
    if d0 <= r:
        return 0
    q = abs(1.0 - 2.0 * inst.curvature * inst.eta * inst.lambda_wm)
    t = 0
    d = d0
    while d > r:
        d *= q
        t += 1
    return t


def make_instance(
    tau: float,
    theta0: float,
    lambda_wm: float = 1.0,
    lambda_sem: float = 0.0,
    curvature: float = 1.0,
    optimum: float = 1.0,
    anchor: float | None = None,
    step_fraction: float = 1.0,
) -> ConvergenceInstance:
    """Instance with certified constants and eta = step_fraction * c mu^2 / (L M^2)."""
    probe = ConvergenceInstance(tau, theta0, 1.0, 1.0, 1.0, 1.0, 1.0, lambda_wm, lambda_sem, curvature, optimum, anchor)
    cert = certified_constants(probe)
    if math.isinf(cert["mu"]):
        # the hinge is never active: the descent bound is vacuous, so any positive constants certify it
        cert.update(mu=1.0, c=1.0, M=max(cert["M"], 1.0))
    inst = replace(probe, L=cert["L"], mu=cert["mu"], c=cert["c"], M=cert["M"])
    return replace(inst, eta=step_fraction * inst.max_step())


def random_family(count: int, seed: int) -> list[ConvergenceInstance]:
    """Seeded instances: tau in [0.9, 0.999], start on either side of the optimum, eta at its maximum.

    Every third instance adds a weak semantic pull that keeps the alignment constant positive.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        tau = float(rng.uniform(0.9, 0.999))
        side = -1.0 if rng.random() < 0.5 else 1.0
        r = math.sqrt(1.0 - tau)
        theta0 = 1.0 + side * float(rng.uniform(r + 0.05, 1.5))
        lam_wm = float(rng.uniform(0.5, 2.0))
        lam_sem = 0.0
        if i % 3 == 2:
            # alignment stays >= half of lambda_wm when the pull is at most r * lambda_wm / |theta0 - 1|
            lam_sem = float(rng.uniform(0.1, 1.0)) * r * lam_wm / abs(theta0 - 1.0)
        out.append(make_instance(tau, theta0, lam_wm, lam_sem))
    return out


def family_rows(instances: Sequence[ConvergenceInstance]) -> list[dict]:
    rows = []
    for i, inst in enumerate(instances):
        problems = check_instance(inst)
        res = run_gd(inst)
        rows.append(
            {
                "instance_id": i,
                "T_max": res.t_max,
                "hitting_time": res.hitting_time,
                "min_descent_margin": res.min_descent_margin,
                "pass": bool(res.passed and not problems),
            }
        )
    return rows


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    cols = ["instance_id", "T_max", "hitting_time", "min_descent_margin", "pass"]
    wr.writerow(cols)
    for r in rows:
        wr.writerow([_cell(r[c]) for c in cols])
    return buf.getvalue()


@dataclass(frozen=True)
class PhaseSummary:
    first_inactive_step: int | None
    reactivation_count: int


def phase_tracker(records: Iterable) -> PhaseSummary:
    """First inactive step and number of inactive -> active relapses.

    Accepts training step records (``hinge_active`` attribute) or plain booleans.
    """
    records = list(records)
    if not records:
        raise ValueError("no step records")
    flags = [bool(getattr(r, "hinge_active", r)) for r in records]
    steps = [getattr(r, "step", i) for i, r in enumerate(records)]
    first = next((steps[i] for i, a in enumerate(flags) if not a), None)
    relapses = sum(1 for prev, cur in zip(flags, flags[1:]) if not prev and cur)
    return PhaseSummary(first, relapses)
