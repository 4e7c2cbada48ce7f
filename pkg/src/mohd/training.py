"""Language-model pretraining: combined objective, AdamW with cosine decay
and linear warmup, periodic evaluation perplexity, and checkpointing.

Runs are fully deterministic given a config and seed: batches are derived
statelessly from (seed, step), so a run resumed from a checkpoint replays
exactly the batches the uninterrupted run would have seen.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .autodiff import Tensor, add, log_softmax, neg, no_grad, take_pairs
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_to_dict
from .data import batch_at, eval_batches, load_windows, split_holdout
from .model import build_model
from .routing import balance_loss_scores

Array = np.ndarray

HOLDOUT_FRACTION = 0.05
WARMUP_FRACTION = 0.05
LR_FLOOR = 0.1  # cosine decays to this fraction of the peak rate
EVAL_MAX_BATCHES = 32  # cap on periodic-eval work; the subset is fixed per run


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; diagnostics were dumped to ``dump_path``."""

    def __init__(self, message: str, dump_path: str):
        super().__init__(message)
        self.dump_path = dump_path


def cross_entropy(logits: Tensor, targets: Array) -> Tensor:
    """Mean next-token cross entropy over a flat (tokens, vocab) batch."""
    targets = np.asarray(targets).reshape(-1)
    if targets.min() < 0 or targets.max() >= logits.shape[-1]:
        raise ValueError("target id outside the vocabulary")
    return neg(take_pairs(log_softmax(logits, axis=-1), targets).mean())


def total_loss(
    logits: Tensor, targets: Array, router_scores: Iterable[Tensor], beta: float
) -> tuple[Tensor, float, float]:
    """Cross entropy plus the balance penalty of every routed component.

    Returns the scalar loss tensor along with the plain cross-entropy and
    balance values for logging.
    """
    loss = cross_entropy(logits, targets)
    ce = loss.item()
    balance = 0.0
    for scores in router_scores:
        term = balance_loss_scores(scores, beta)
        balance += term.item()
        loss = add(loss, term)
    return loss, ce, balance


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    """Linear warmup then cosine decay to ``LR_FLOOR`` of the peak."""
    warmup = max(1, int(round(WARMUP_FRACTION * total_steps)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * (LR_FLOOR + (1.0 - LR_FLOOR) * 0.5 * (1.0 + math.cos(math.pi * progress)))


class AdamW:
    """Adam with decoupled weight decay; 1-D tensors (norm gains) are not decayed."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.1,
    ):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr_t: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if p.data.ndim >= 2 and self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr_t * update


@dataclass
class TrainResult:
    metrics: list[dict]
    model: object
    final_eval_ppl: float


def eval_ppl(model, batches: list[tuple[Array, Array]]) -> float:
    """exp(mean cross entropy) over a held-out batch list, gradient-free."""
    batches = list(batches)
    if not batches:
        raise ValueError("evaluation stream is empty")
    total_nll = 0.0
    total_tokens = 0
    with no_grad():
        for xb, yb in batches:
            logits, _ = model.forward(xb)
            ce = cross_entropy(logits, yb.reshape(-1)).item()
            total_nll += ce * yb.size
            total_tokens += yb.size
    return math.exp(total_nll / total_tokens)


def write_metrics_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "ce", "balance", "eval_ppl"])
        for row in rows:
            ppl = row["eval_ppl"]
            writer.writerow(
                [row["step"], repr(row["ce"]), repr(row["balance"]),
                 "" if ppl is None else repr(ppl)]
            )


def _dump_divergence(path: str, step: int, batch: Array, model) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"non-finite loss at step {step}\n")
        fh.write(f"batch shape {batch.shape}, first row: {batch[0].tolist()}\n")
        fh.write("parameter L2 norms:\n")
        for name, p in model.params().items():
            fh.write(f"  {name} = {float(np.linalg.norm(p.data))!r}\n")


def train(cfg: RunConfig, resume: str | None = None, log=None) -> TrainResult:
    """Run the training loop described by ``cfg``.

    Emits ``metrics.csv`` plus a checkpoint every ``eval_interval`` steps
    (and at the final step) under ``checkpoint_dir``. ``resume`` restores
    model weights, optimizer moments, and the step counter from an earlier
    checkpoint of the same config.
    """
    tcfg = cfg.train
    if not os.path.isfile(tcfg.corpus):
        raise ConfigError(f"train.corpus: cannot read corpus file {tcfg.corpus}")
    inputs, targets = load_windows(tcfg.corpus, tcfg.seq_len)
    (tr_in, tr_tg), (ev_in, ev_tg) = split_holdout(inputs, targets, HOLDOUT_FRACTION)
    holdout = eval_batches(ev_in, ev_tg, tcfg.batch_size)[:EVAL_MAX_BATCHES]

    model = build_model(cfg.model, tcfg.seed)
    opt = AdamW(model.params(), tcfg.lr)
    trainer_rng = np.random.default_rng(tcfg.seed)
    start_step = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state(ckpt.model)
        opt.m = {k: v.copy() for k, v in ckpt.moments_m.items()}
        opt.v = {k: v.copy() for k, v in ckpt.moments_v.items()}
        opt.t = ckpt.step
        start_step = ckpt.step
        trainer_rng.bit_generator.state = ckpt.rng_state

    os.makedirs(tcfg.checkpoint_dir, exist_ok=True)
    beta = cfg.model.balance_beta
    metrics: list[dict] = []
    final_ppl = math.nan

    for step in range(start_step, tcfg.steps):
        xb, yb = batch_at(tr_in, tr_tg, tcfg.batch_size, tcfg.seed, step)
        logits, scores = model.forward(xb)
        loss, ce, balance = total_loss(logits, yb.reshape(-1), scores, beta)
        if not math.isfinite(loss.item()):
            dump = os.path.join(tcfg.checkpoint_dir, f"diverged_step{step + 1}.txt")
            _dump_divergence(dump, step + 1, xb, model)
            raise TrainingDiverged(
                f"loss is not finite at step {step + 1}; diagnostics in {dump}", dump
            )
        opt.zero_grad()
        loss.backward()
        opt.step(lr_at(step, tcfg.steps, tcfg.lr))

        row = {"step": step + 1, "ce": ce, "balance": balance, "eval_ppl": None}
        if (step + 1) % tcfg.eval_interval == 0 or step + 1 == tcfg.steps:
            row["eval_ppl"] = final_ppl = eval_ppl(model, holdout)
            _save(cfg, model, opt, trainer_rng, step + 1, tcfg.checkpoint_dir)
        metrics.append(row)
        if log is not None:
            log(row)

    write_metrics_csv(os.path.join(tcfg.checkpoint_dir, "metrics.csv"), metrics)
    return TrainResult(metrics=metrics, model=model, final_eval_ppl=final_ppl)


def _save(cfg, model, opt, trainer_rng, step, out_dir) -> None:
    save_checkpoint(
        os.path.join(out_dir, f"step_{step:06d}.ckpt"),
        config=config_to_dict(cfg),
        step=step,
        rng_state=trainer_rng.bit_generator.state,
        model=model.state(),
        moments_m=opt.m,
        moments_v=opt.v,
    )


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild the trained model captured in a checkpoint."""
    from .config import config_from_dict

    cfg = config_from_dict(ckpt.config)
    model = build_model(cfg.model, cfg.train.seed)
    try:
        model.load_state(ckpt.model)
    except (KeyError, ValueError) as exc:
        from .checkpoint import CheckpointError

        raise CheckpointError(f"checkpoint does not match its config: {exc}") from None
    return model, cfg
