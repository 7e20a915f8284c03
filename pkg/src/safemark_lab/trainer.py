"""Watermark-preserving fine-tuning of the toy editor.

Each step edits a minibatch of watermarked images with both the frozen and
the trainable editor, measures L1 drift from the frozen output and the soft
bit accuracy of the trainable output, and descends on

    lambda_sem * L_sem + lambda_wm * max(0, tau - soft_acc)

Gradients reach the editor only through its final output.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import codec
from . import grad as G
from .codec import WatermarkKey
from .editor import Prompt, edit, edit_var, param_hash

STEP_COLUMNS = ("step", "loss_sem", "loss_wm", "loss_total", "soft_acc", "hard_acc", "hinge_active", "lr")


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    tau: float = 1.0
    lambda_sem: float = 1.0
    lambda_wm: float = 1.0
    eta: float = 0.1
    schedule: dict = field(default_factory=lambda: {"kind": "step", "step_size": 200, "gamma": 0.5})
    steps: int = 500
    batch: int = 8
    seed: int = 0
    optimizer: dict = field(default_factory=lambda: {"kind": "sgd"})
    fixed_message: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.lambda_sem < 0 or self.lambda_wm < 0:
            raise ValueError("loss weights must be non-negative")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")
        kind = self.schedule.get("kind")
        if kind == "step":
            if int(self.schedule.get("step_size", 0)) < 1 or float(self.schedule.get("gamma", 0)) <= 0:
                raise ValueError("step schedule needs step_size >= 1 and gamma > 0")
        elif kind != "constant":
            raise ValueError(f"unknown schedule kind {kind!r}")
        okind = self.optimizer.get("kind")
        if okind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {okind!r}")

    def lr(self, step: int) -> float:
        if self.schedule["kind"] == "step":
            return self.eta * float(self.schedule["gamma"]) ** (step // int(self.schedule["step_size"]))
        return self.eta

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def full_scale(cls) -> TrainConfig:
        """Large-model settings: Adam at 8e-6 with StepLR(step_size=1, gamma=1.3), tau = 1."""
        return cls(
            tau=1.0,
            lambda_sem=3.0,
            lambda_wm=1.0,
            eta=8e-6,
            schedule={"kind": "step", "step_size": 1, "gamma": 1.3},
            optimizer={"kind": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
        )


@dataclass
class StepRecord:
    step: int
    loss_sem: float
    loss_wm: float
    loss_total: float
    soft_acc: float
    hard_acc: float
    hinge_active: bool
    lr: float = 0.0

    def row(self) -> list:
        return [self.step, self.loss_sem, self.loss_wm, self.loss_total, self.soft_acc, self.hard_acc, int(self.hinge_active), self.lr]


# ---------------------------------------------------------------------------
# losses


def semantic_loss(x_ref: np.ndarray, x_edit: np.ndarray) -> float:
    """Per-element mean absolute difference."""
    x_ref, x_edit = np.asarray(x_ref, float), np.asarray(x_edit, float)
    if x_ref.shape != x_edit.shape:
        raise ValueError(f"shape mismatch: {x_ref.shape} vs {x_edit.shape}")
    return float(np.mean(np.abs(x_ref - x_edit)))


def semantic_loss_var(x_ref: np.ndarray, x_edit: G.Var) -> G.Var:
    if np.shape(x_ref) != x_edit.shape:
        raise ValueError(f"shape mismatch: {np.shape(x_ref)} vs {x_edit.shape}")
    return G.mean(G.abs_(G.sub(x_edit.tape.const(x_ref), x_edit)))


def watermark_hinge(soft_acc: float, tau: float) -> float:
    return max(0.0, tau - soft_acc)


@dataclass
class BatchGraph:
    tape: G.Tape
    loss_sem: G.Var
    loss_wm: G.Var
    loss_total: G.Var
    soft_acc: G.Var
    hard_acc: float
    edited: list[np.ndarray]


def batch_graph(
    theta: G.ParamVector,
    theta0: G.ParamVector,
    key: WatermarkKey,
    x_orig: np.ndarray,
    w: np.ndarray,
    prompt_ids: np.ndarray,
    prompts: list[Prompt],
    config: TrainConfig,
    noise_seed: int = 0,
) -> BatchGraph:
    """Forward pass for one minibatch of watermarked images, recorded on a fresh tape."""
    tape = G.Tape()
    n = x_orig.shape[0]
    sem_terms, soft_terms, edited = [], [], []
    correct = 0
    for p in prompts:
        idx = np.flatnonzero(prompt_ids == p.id)
        if idx.size == 0:
            continue
        xg = x_orig[idx]
        x_ref = edit(theta0, xg, p, noise_seed)
        x_edit = edit_var(tape, theta, xg, p, noise_seed)
        edited.append(x_edit.value)
        w_soft = codec.decode_soft_var(key, x_edit)
        correct += int((codec.harden(w_soft.value) == w[idx]).sum())
        frac = idx.size / n
        sem_terms.append(G.scalar_mul(semantic_loss_var(x_ref, x_edit), frac))
        soft_terms.append(G.scalar_mul(codec.soft_accuracy_var(w[idx], w_soft), frac))
    loss_sem = sem_terms[0]
    for t in sem_terms[1:]:
        loss_sem = G.add(loss_sem, t)
    soft = soft_terms[0]
    for t in soft_terms[1:]:
        soft = G.add(soft, t)
    loss_wm = G.hinge(G.sub(tape.const(config.tau), soft))
    total = G.add(G.scalar_mul(loss_sem, config.lambda_sem), G.scalar_mul(loss_wm, config.lambda_wm))
    return BatchGraph(tape, loss_sem, loss_wm, total, soft, correct / w.size, edited)


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def step(self, values: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        return values - lr * grad


class Adam:
    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, values: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return values - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig, size: int):
    opt = config.optimizer
    if opt["kind"] == "sgd":
        return SGD()
    return Adam(size, float(opt.get("beta1", 0.9)), float(opt.get("beta2", 0.999)), float(opt.get("eps", 1e-8)))


def train_step(
    theta: G.ParamVector,
    theta0: G.ParamVector,
    key: WatermarkKey,
    x_orig: np.ndarray,
    w: np.ndarray,
    prompt_ids: np.ndarray,
    prompts: list[Prompt],
    config: TrainConfig,
    step: int = 0,
    optimizer=None,
) -> tuple[G.ParamVector, StepRecord]:
    """One descent step on a minibatch; returns the updated parameters and the pre-update metrics."""
    graph = batch_graph(theta, theta0, key, x_orig, w, prompt_ids, prompts, config)
    total = graph.loss_total.item()
    if not math.isfinite(total):
        raise TrainingAborted(step, f"non-finite loss {total}")
    grad = G.backward(graph.tape, graph.loss_total, theta)
    if not np.all(np.isfinite(grad.values)):
        raise TrainingAborted(step, "non-finite gradient")
    lr = config.lr(step)
    optimizer = optimizer or SGD()
    new_theta = theta.with_values(optimizer.step(theta.values, grad.values, lr))
    soft = graph.soft_acc.item()
    rec = StepRecord(
        step=step,
        loss_sem=graph.loss_sem.item(),
        loss_wm=graph.loss_wm.item(),
        loss_total=total,
        soft_acc=soft,
        hard_acc=graph.hard_acc,
        hinge_active=soft < config.tau,
        lr=lr,
    )
    return new_theta, rec


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunReport:
    config: dict
    records: list[StepRecord]
    initial: dict
    final: dict
    theta_hash: str
    aborted_at: int | None = None

    def steps_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(STEP_COLUMNS)
        for r in self.records:
            wr.writerow([_fmt(v) for v in r.row()])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "config": self.config,
            "steps_run": len(self.records),
            "aborted_at": self.aborted_at,
            "initial": self.initial,
            "final": self.final,
            "theta_sha256": self.theta_hash,
        }


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def batch_schedule(n_images: int, n_prompts: int, config: TrainConfig, key: WatermarkKey):
    """Yield (indices, messages, prompt ids) per step, deterministic in config.seed."""
    rng = np.random.default_rng([config.seed, 1])
    fixed = codec.random_messages(np.random.default_rng([config.seed, 2]), n_images, key.b_bits)
    order = np.array([], dtype=np.int64)
    for _ in range(config.steps):
        if order.size < config.batch:
            order = np.concatenate([order, rng.permutation(n_images)])
        idx, order = order[: config.batch], order[config.batch :]
        if config.fixed_message:
            w = fixed[idx]
        else:
            w = codec.random_messages(rng, idx.size, key.b_bits)
        pid = rng.integers(0, n_prompts, size=idx.size)
        yield idx, w, pid


def run_training(
    dataset: np.ndarray,
    prompts: list[Prompt],
    theta0: G.ParamVector,
    key: WatermarkKey,
    config: TrainConfig,
    eval_seed: int = 0,
    log=None,
) -> tuple[RunReport, G.ParamVector]:
    """Full training run over a stack of clean (N, H, W, C) images."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    theta = theta0.with_values(theta0.values.copy())
    initial = evaluate(theta, theta0, key, dataset, prompts, eval_seed)
    opt = make_optimizer(config, theta.values.size)
    records: list[StepRecord] = []
    aborted = None
    for step, (idx, w, pid) in enumerate(batch_schedule(len(dataset), len(prompts), config, key)):
        x_orig = codec.embed(key, dataset[idx], w)
        try:
            theta, rec = train_step(theta, theta0, key, x_orig, w, pid, prompts, config, step, opt)
        except TrainingAborted as exc:
            aborted = exc.step
            if log:
                log(f"aborted: {exc}")
            break
        records.append(rec)
        if log and (step % 50 == 0 or step == config.steps - 1):
            log(f"step {step}: total={rec.loss_total:.5f} sem={rec.loss_sem:.5f} soft={rec.soft_acc:.4f} hard={rec.hard_acc:.4f}")
    final = evaluate(theta, theta0, key, dataset, prompts, eval_seed)
    report = RunReport(asdict(config), records, initial, final, param_hash(theta), aborted)
    return report, theta


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def eval_messages(key: WatermarkKey, n: int, seed: int) -> np.ndarray:
    return codec.random_messages(np.random.default_rng([seed, 7]), n, key.b_bits)


def evaluate(
    theta: G.ParamVector,
    theta0: G.ParamVector,
    key: WatermarkKey,
    dataset: np.ndarray,
    prompts: list[Prompt],
    seed: int = 0,
) -> dict:
    """Original / Mani / SafeMark bit accuracy per prompt plus the edit-fidelity gap.

    Every image is watermarked with a message drawn from ``seed`` and edited
    under every prompt.
    """
    w = eval_messages(key, len(dataset), seed)
    x_wm = codec.embed(key, dataset, w)
    original = float((codec.harden(codec.decode_soft(key, x_wm)) == w).mean())
    per_prompt = {}
    totals = {"mani_acc": [], "safemark_acc": [], "sem_gap_l1": [], "mse": []}
    for p in prompts:
        mani = edit(theta0, x_wm, p)
        safe = edit(theta, x_wm, p)
        mani_acc = float((codec.harden(codec.decode_soft(key, mani)) == w).mean())
        safe_acc = float((codec.harden(codec.decode_soft(key, safe)) == w).mean())
        gap = float(np.mean(np.abs(safe - mani)))
        per_prompt[p.label] = {
            "original_acc": original,
            "mani_acc": mani_acc,
            "safemark_acc": safe_acc,
            "sem_gap_l1": gap,
            "psnr_vs_mani": _finite(psnr(safe, mani)),
            "safemark_soft_acc": codec.soft_accuracy(w, codec.decode_soft(key, safe)),
        }
        totals["mani_acc"].append(mani_acc)
        totals["safemark_acc"].append(safe_acc)
        totals["sem_gap_l1"].append(gap)
        totals["mse"].append(float(np.mean((safe - mani) ** 2)))
    mse = float(np.mean(totals["mse"]))
    return {
        "original_acc": original,
        "mani_acc": float(np.mean(totals["mani_acc"])),
        "safemark_acc": float(np.mean(totals["safemark_acc"])),
        "sem_gap_l1": float(np.mean(totals["sem_gap_l1"])),
        "psnr_vs_mani": _finite(10.0 * math.log10(1.0 / mse) if mse > 0 else float("inf")),
        "per_prompt": per_prompt,
    }


def _finite(v: float) -> float | None:
    """JSON has no infinity; identical outputs report PSNR as null."""
    return v if math.isfinite(v) else None


def write_run(report: RunReport, theta: G.ParamVector, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "steps.csv").write_text(report.steps_csv())
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    theta.save(out / "theta.ckpt")
