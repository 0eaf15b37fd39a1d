"""Adagrad training loop with global-norm clipping and periodic evaluation."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .estimators import EstimatorConfig, estimate
from .model import GradientBuffer, copy_params, save_checkpoint
from .rewards import RewardConfig, main_reward, rouge_l_f1
from .samplers import RamlSampler, derive_rng, greedy_decode_batch

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "loss_proxy", "rougeL", "main_reward", "exact_match", "masked_frac", "wall_ms")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    lr: float = 0.1
    clip: float = 4.0
    batch_size: int = 32
    max_steps: int = 20000
    eval_interval: int = 250
    seed: int = 0
    target_reward: Optional[float] = None
    eval_limit: Optional[int] = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not self.clip > 0:
            raise ValueError("clip norm must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class MetricsRecord:
    step: int
    loss_proxy: float
    rougeL: float
    main_reward: float
    exact_match: float
    masked_frac: float
    wall_ms: float

    def row(self):
        return [self.step, repr(self.loss_proxy), repr(self.rougeL), repr(self.main_reward),
                repr(self.exact_match), repr(self.masked_frac), f"{self.wall_ms:.3f}"]


@dataclass
class TrainResult:
    best_params: dict
    best_step: int
    best_reward: float
    history: list
    steps_to_target: Optional[int]
    mean_step_ms: float
    final_params: dict


class Adagrad:
    """theta -= lr * g / sqrt(G + eps), G += g**2, after clipping g to ``clip``."""

    def __init__(self, params, eps: float = 1e-8):
        self.accum = {k: np.zeros_like(v) for k, v in params.items()}
        self.eps = eps

    def step(self, params, grads: dict, lr: float, clip: float) -> float:
        """Apply one update in place; returns the pre-clipping gradient norm."""
        return adagrad_step(params, grads, self.accum, lr, clip, self.eps)


def clip_by_global_norm(grads: dict, clip: float):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if not np.isfinite(norm):
        raise TrainingDiverged(f"non-finite gradient norm {norm}")
    if norm > clip:
        scale = clip / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


def adagrad_step(params, grads: dict, accum: dict, lr: float, clip: float, eps: float = 1e-8) -> float:
    if accum.keys() != params.keys():
        raise ValueError("optimizer state does not match parameters")
    grads, norm = clip_by_global_norm(grads, clip)
    for k, p in params.items():
        g = grads[k]
        accum[k] += g * g
        p -= lr * g / np.sqrt(accum[k] + eps)
    return norm


def evaluate(model, params, examples, reward_config: Optional[RewardConfig] = None) -> dict:
    """Greedy decode every example; mean ROUGE-L F1, main reward and exact match."""
    reward_config = reward_config or RewardConfig()
    if not examples:
        return {"rougeL": 0.0, "main_reward": 0.0, "exact_match": 0.0, "n": 0}
    eos = reward_config.eos_id
    decoded = greedy_decode_batch(model, params, [ex.x for ex in examples], reward_config)
    rl = [rouge_l_f1(z, ex.y, eos) for z, ex in zip(decoded, examples)]
    mr = [main_reward(z, ex.y, eos) for z, ex in zip(decoded, examples)]
    em = [float(tuple(z) == tuple(ex.y)) for z, ex in zip(decoded, examples)]
    return {"rougeL": float(np.mean(rl)), "main_reward": float(np.mean(mr)),
            "exact_match": float(np.mean(em)), "n": len(examples)}


def content_tokens(examples, vocab_size: int, eos_id) -> list:
    used = sorted({t for ex in examples for t in ex.y if t != eos_id})
    return used or list(range(vocab_size))


def train(model, params, config: TrainConfig, train_set, valid_set,
          metrics_path=None, checkpoint_path=None, dump_path=None) -> TrainResult:
    """Optimise ``params`` in place; keep the best validation-main-reward copy.

    Stops early once validation main reward reaches ``config.target_reward``.
    """
    est = config.estimator
    opt = Adagrad(params)
    buffer = GradientBuffer.zeros_like(params)
    raml = None
    if est.regime == "raml":
        raml = RamlSampler(est.raml, content_tokens(train_set, model.vocab_size, est.reward.eos_id),
                           est.reward.eos_id, seed=config.seed)
    eval_set = valid_set if config.eval_limit is None else valid_set[:config.eval_limit]
    history = []
    best = (-1.0, 0, copy_params(params))
    steps_to_target = None
    step_times = []
    order = np.arange(len(train_set))
    pos = len(order)
    epoch = -1
    losses, masked, total = [], 0, 0
    t_start = time.perf_counter()
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)

    def record(step):
        nonlocal best, steps_to_target, losses, masked, total
        metrics = evaluate(model, params, eval_set, est.reward)
        rec = MetricsRecord(step, float(np.mean(losses)) if losses else 0.0, metrics["rougeL"],
                            metrics["main_reward"], metrics["exact_match"],
                            1.0 - masked / total if total else 0.0,
                            (time.perf_counter() - t_start) * 1000.0)
        if not all(np.isfinite(v) for v in (rec.loss_proxy, rec.rougeL, rec.main_reward)):
            raise TrainingDiverged(f"non-finite metrics at step {step}")
        history.append(rec)
        if writer is not None:
            writer.writerow(rec.row())
            fh.flush()
        if rec.main_reward > best[0]:
            best = (rec.main_reward, step, copy_params(params))
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, params, config.seed,
                                {"step": step, "main_reward": rec.main_reward,
                                 "reward": asdict(est.reward)})
        if (config.target_reward is not None and steps_to_target is None
                and rec.main_reward >= config.target_reward):
            steps_to_target = step
        log.info("step %d loss %.4f rougeL %.4f reward %.4f exact %.3f", step, rec.loss_proxy,
                 rec.rougeL, rec.main_reward, rec.exact_match)
        losses, masked, total = [], 0, 0

    try:
        record(0)
        for step in range(1, config.max_steps + 1):
            if pos + config.batch_size > len(order):
                epoch += 1
                order = derive_rng(config.seed, epoch, 0).permutation(len(train_set))
                pos = 0
            batch = [train_set[i] for i in order[pos:pos + config.batch_size]]
            pos += config.batch_size
            t0 = time.perf_counter()
            buffer.reset()
            reports = estimate(model, params, batch, est, derive_rng(config.seed, epoch, step), buffer, raml)
            grads = {k: g / buffer.count for k, g in buffer.grads.items()}
            try:
                opt.step(params, grads, config.lr, config.clip)
            except TrainingDiverged:
                if dump_path is not None:
                    save_checkpoint(dump_path, model, params, config.seed, {"step": step, "diverged": True})
                raise
            step_times.append(time.perf_counter() - t0)
            loss = float(np.mean([r.loss_proxy for r in reports]))
            if not np.isfinite(loss):
                if dump_path is not None:
                    save_checkpoint(dump_path, model, params, config.seed, {"step": step, "diverged": True})
                raise TrainingDiverged(f"non-finite loss at step {step}")
            losses.append(loss)
            masked += sum(r.masked_steps for r in reports)
            total += sum(r.total_steps for r in reports)
            if step % config.eval_interval == 0 or step == config.max_steps:
                record(step)
                if steps_to_target is not None:
                    break
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(best[2], best[1], best[0], history, steps_to_target,
                       1000.0 * float(np.mean(step_times)) if step_times else 0.0, params)


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        return [MetricsRecord(int(r[0]), *map(float, r[1:])) for r in reader]


def metrics_path_for(directory) -> Path:
    return Path(directory) / "metrics.csv"
