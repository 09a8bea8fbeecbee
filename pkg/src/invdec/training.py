"""Adam, the training loop, and evaluation.

Everything is deterministic given the seed: batch order comes from the
"shuffle" stream, dropout from the per-stack dropout streams, and init from
the "init" stream, so two runs with one seed produce bit-identical
parameters and records (wall-clock timings aside).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .model import ForwardTrace, ModelConfig, ModelParams, forward, init_params
from .rng import RngPool
from .tensor import GradTape, Parameter, backward, mse, zero_grads


class TrainingDiverged(RuntimeError):
    """Loss or an intermediate went non-finite."""


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(params: list[Parameter], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for p in params:
        if p.name in state.m:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        state.m[p.name] = np.zeros_like(p.data)
        state.v[p.name] = np.zeros_like(p.data)
    return state


def adam_step(state: AdamState, params: list[Parameter]) -> None:
    """One bias-corrected Adam update, in place, from current .grad buffers."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p in params:
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, and patience must be positive")
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")


@dataclass
class RunRecord:
    """Per-epoch history plus the early-stopping outcome."""

    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def comparable(self) -> dict:
        """Everything except wall-clock timings, for determinism checks."""
        return {
            "rows": [{k: v for k, v in r.items() if k != "seconds"} for r in self.rows],
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
        }

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.write(json.dumps(
                {"best_epoch": self.best_epoch, "stopped_early": self.stopped_early},
                sort_keys=True,
            ) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "RunRecord":
        rec = cls()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                if "epoch" in obj:
                    rec.rows.append(obj)
                else:
                    rec.best_epoch = obj.get("best_epoch", 0)
                    rec.stopped_early = obj.get("stopped_early", False)
        return rec


def stack_windows(windows) -> tuple[np.ndarray, np.ndarray]:
    xs = np.stack([w.x.data for w in windows])
    ys = np.stack([w.y.data for w in windows])
    return xs, ys


def evaluate(params: ModelParams, cfg: ModelConfig, windows, batch_size: int = 256) -> dict:
    """Mean squared and absolute error over all samples, horizon steps, and
    variables, in normalized units. Flat float64 accumulation."""
    if not windows:
        raise ValueError("evaluate needs at least one window")
    xs, ys = stack_windows(windows)
    sq_sum = 0.0
    abs_sum = 0.0
    count = 0
    for lo in range(0, len(xs), batch_size):
        xb = xs[lo : lo + batch_size]
        yb = ys[lo : lo + batch_size]
        pred, _ = forward(xb, params, cfg, training=False, want_trace=False)
        diff = pred.data - yb
        sq_sum += float((diff * diff).sum())
        abs_sum += float(np.abs(diff).sum())
        count += diff.size
    return {"mse": sq_sum / count, "mae": abs_sum / count, "n": len(xs)}


def _first_non_finite(trace: ForwardTrace, loss_val: float) -> str:
    order = [
        ("embedded", trace.embedded),
        ("encoded", trace.encoded),
        ("pooled", trace.pooled),
        ("variate_tokens", trace.variate_tokens),
        ("decoded", trace.decoded),
        ("broadcast", trace.broadcast),
        ("fused", trace.fused),
    ]
    for name, t in order:
        if t is not None and not np.isfinite(t.data).all():
            return name
    return "loss" if not np.isfinite(loss_val) else "prediction"


def train(
    cfg: ModelConfig,
    tcfg: TrainConfig,
    train_windows,
    val_windows,
    params: ModelParams | None = None,
) -> tuple[ModelParams, RunRecord]:
    """Minimize forecast MSE with Adam; validate once per epoch; stop after
    `patience` epochs without a validation improvement; return the best
    parameters seen."""
    if params is None:
        params = init_params(cfg, seed=tcfg.seed)
    plist = params.parameters()
    rngs = RngPool(tcfg.seed)
    shuffle = rngs.get("shuffle")
    adam = init_adam(plist, lr=tcfg.lr)

    xs, ys = stack_windows(train_windows)
    n = len(xs)
    record = RunRecord()
    best_mse = np.inf
    best_snap = params.snapshot()
    best_epoch = 0
    bad_epochs = 0

    for epoch in range(1, tcfg.max_epochs + 1):
        t0 = time.perf_counter()
        perm = shuffle.permutation(n)
        loss_sum = 0.0
        for lo in range(0, n, tcfg.batch_size):
            sel = perm[lo : lo + tcfg.batch_size]
            xb, yb = xs[sel], ys[sel]
            with GradTape() as tape:
                pred, _ = forward(xb, params, cfg, training=True, rngs=rngs, want_trace=False)
                loss = mse(pred, yb)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                _, trace = forward(xb, params, cfg, training=False, want_trace=True)
                raise TrainingDiverged(
                    f"non-finite {_first_non_finite(trace, loss_val)} at epoch {epoch}, "
                    f"step {lo // tcfg.batch_size}"
                )
            zero_grads(plist)
            backward(loss, tape)
            adam_step(adam, plist)
            loss_sum += loss_val * len(sel)
        metrics = evaluate(params, cfg, val_windows, tcfg.eval_batch_size)
        record.rows.append({
            "epoch": epoch,
            "train_loss": loss_sum / n,
            "val_mse": metrics["mse"],
            "val_mae": metrics["mae"],
            "seconds": time.perf_counter() - t0,
        })
        if metrics["mse"] < best_mse:
            best_mse = metrics["mse"]
            best_snap = params.snapshot()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= tcfg.patience:
                record.stopped_early = True
                break

    params.restore(best_snap)
    record.best_epoch = best_epoch
    return params, record
