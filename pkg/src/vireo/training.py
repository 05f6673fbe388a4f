"""Optimizer, schedule, synthetic task, and the convergence experiment.

The synthetic task plants class-keyed feature offsets (along each class's
text-embedding direction) inside seeded stripe-and-rectangle label maps,
so the text-matching head can actually learn the segmentation. Training
images stay in the "clean" condition; evaluation images span shifted
conditions and may contain classes absent from the training labels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor, scale
from .errors import ConfigError
from .model import IGNORE_ID, ModelConfig, VireoModel
from .providers import (
    FeatureStack,
    ProviderConfig,
    TextBank,
    _keyed_rng,
    synth_features,
    synth_text_bank,
)

SEEN_LABELS = ["road", "building", "car", "sky", "person", "tree",
               "fence", "pole", "rider", "bus", "train", "wall"]
UNSEEN_LABELS = ["bicycle", "sign", "water", "bridge", "animal", "rock"]
EVAL_CONDITIONS = ("clean", "noisy", "dim")


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    weight_decay: float = 0.05
    eps: float = 1e-8
    betas: tuple[float, float] = (0.9, 0.999)
    total_iters: int = 300
    poly_power: float = 0.9
    seed: int = 0
    lambda_coarse: float = 0.4
    batch_size: int = 2

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.total_iters < 1:
            raise ConfigError("total_iters must be >= 1")
        if self.poly_power <= 0:
            raise ConfigError("poly_power must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def poly_lr(t: int, cfg: TrainConfig) -> float:
    """lr0 * (1 - t/total)^power; t past the end clamps to zero."""
    if t < 0:
        raise ConfigError(f"iteration {t} negative")
    if t >= cfg.total_iters:
        return 0.0
    return cfg.lr0 * (1.0 - t / cfg.total_iters) ** cfg.poly_power


class AdamW:
    """Decoupled-weight-decay Adam over named tensors.

    Frozen tensors are rejected at registration; decay multiplies the
    parameter directly and never flows through the moment estimates.
    """

    def __init__(self, named_params, cfg: TrainConfig):
        self.cfg = cfg
        self.params: list[tuple[str, Tensor]] = []
        for name, p in named_params:
            if not p.requires_grad:
                raise ConfigError(f"frozen tensor {name} must not enter the optimizer")
            self.params.append((name, p))
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.t = 0

    def registered_ids(self) -> set[int]:
        return {id(p.data) for _, p in self.params} | {id(p) for _, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        beta1, beta2 = self.cfg.betas
        self.t += 1
        bias1 = 1.0 - beta1 ** self.t
        bias2 = 1.0 - beta2 ** self.t
        for i, (name, p) in enumerate(self.params):
            grad = p.grad
            if grad is None:
                grad = np.zeros_like(p.data)
            elif grad.shape != p.data.shape:
                raise ConfigError(f"gradient shape {grad.shape} does not match "
                                  f"parameter {name} {p.data.shape}")
            p.data = p.data * (1.0 - lr * self.cfg.weight_decay)
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad * grad
            m_hat = self.m[i] / bias1
            v_hat = self.v[i] / bias2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.cfg.eps)


# -- synthetic task ----------------------------------------------------------


@dataclass
class TaskConfig:
    k_seen: int = 6
    k_unseen: int = 3
    h: int = 16
    w: int = 16
    d: int = 16
    d_depth: int = 8
    layers: int = 6
    n_train: int = 2  # matches the default batch size, keeping the trace per-batch stable
    n_eval: int = 6
    offset: float = 0.5
    noise: float = 1.0  # scale on the base features; offset/noise sets the pixel SNR
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.k_seen <= len(SEEN_LABELS):
            raise ConfigError(f"k_seen must be in 1..{len(SEEN_LABELS)}")
        if not 0 <= self.k_unseen <= len(UNSEEN_LABELS):
            raise ConfigError(f"k_unseen must be in 0..{len(UNSEEN_LABELS)}")


@dataclass
class EvalItem:
    image_id: str
    condition: str


class SyntheticTask:
    """Seeded segmentation toy problem with a seen/unseen class split."""

    def __init__(self, config: TaskConfig):
        config.validate()
        self.config = config
        self.seen_classes = SEEN_LABELS[:config.k_seen]
        self.unseen_classes = UNSEEN_LABELS[:config.k_unseen]
        self.all_classes = self.seen_classes + self.unseen_classes
        self.train_bank = synth_text_bank(self.seen_classes, seed=config.seed, d=config.d)
        self.eval_bank = synth_text_bank(self.all_classes, seed=config.seed, d=config.d)
        self.train_ids = [f"train{i:03d}" for i in range(config.n_train)]
        self.eval_items = [
            EvalItem(f"eval{i:03d}", EVAL_CONDITIONS[i % len(EVAL_CONDITIONS)])
            for i in range(config.n_eval)
        ]
        self._labels: dict[str, np.ndarray] = {}
        self._stacks: dict[str, FeatureStack] = {}
        for image_id in self.train_ids:
            self._labels[image_id] = self._make_labels(image_id, seen_only=True)
            self._stacks[image_id] = self._make_stack(image_id, "clean")
        for item in self.eval_items:
            self._labels[item.image_id] = self._make_labels(item.image_id, seen_only=False)
            self._stacks[item.image_id] = self._make_stack(item.image_id, item.condition)

    def labels(self, image_id: str) -> np.ndarray:
        return self._labels[image_id]

    def stack(self, image_id: str) -> FeatureStack:
        return self._stacks[image_id]

    def labels_for_bank(self, image_id: str, bank: TextBank) -> np.ndarray:
        """Class ids outside the bank's vocabulary become ignore pixels."""
        labels = self._labels[image_id]
        return np.where(labels < bank.num_classes, labels, IGNORE_ID)

    def snapshot_providers(self) -> dict[str, bytes]:
        return {image_id: stack.snapshot() for image_id, stack in self._stacks.items()}

    def _make_labels(self, image_id: str, seen_only: bool) -> np.ndarray:
        cfg = self.config
        k = cfg.k_seen if seen_only else cfg.k_seen + cfg.k_unseen
        rng = _keyed_rng("labels", cfg.seed, image_id)
        labels = np.zeros((cfg.h, cfg.w), dtype=np.int64)
        # stripes cover the canvas, rectangles overwrite patches
        n_stripes = min(int(rng.integers(3, 6)), cfg.w)
        bounds = np.sort(rng.choice(np.arange(1, cfg.w), size=n_stripes - 1, replace=False))
        stripe_classes = rng.integers(0, k, size=n_stripes)
        start = 0
        for stripe, end in enumerate(list(bounds) + [cfg.w]):
            labels[:, start:end] = stripe_classes[stripe]
            start = end
        for _ in range(int(rng.integers(2, 4))):
            ch = int(rng.integers(2, max(3, cfg.h // 2)))
            cw = int(rng.integers(2, max(3, cfg.w // 2)))
            ch, cw = min(ch, cfg.h), min(cw, cfg.w)
            y = int(rng.integers(0, cfg.h - ch + 1))
            x = int(rng.integers(0, cfg.w - cw + 1))
            labels[y:y + ch, x:x + cw] = int(rng.integers(0, k))
        return labels

    def _make_stack(self, image_id: str, condition: str) -> FeatureStack:
        cfg = self.config
        provider = ProviderConfig(layers=cfg.layers, h=cfg.h, w=cfg.w, d=cfg.d,
                                  d_depth=cfg.d_depth)
        base = synth_features(image_id, provider, seed=cfg.seed)
        labels = self._labels[image_id]
        directions = self.eval_bank.embeddings.data  # row per class, unit norm
        offset_map = cfg.offset * directions[labels]  # [h, w, d]
        visual: dict[int, Tensor] = {}
        for layer, tensor in base.visual.items():
            arr = cfg.noise * tensor.data + offset_map
            if condition == "noisy":
                noise_rng = _keyed_rng("cond-noise", cfg.seed, image_id, layer)
                arr = arr + 0.5 * noise_rng.standard_normal(arr.shape)
            elif condition == "dim":
                arr = arr * 0.6
            visual[layer] = Tensor(arr)
        return FeatureStack(image_id=image_id, visual=visual, depth=base.depth,
                            d=cfg.d, d_depth=cfg.d_depth)


# -- training loop -----------------------------------------------------------


@dataclass
class TraceRow:
    iteration: int
    loss_total: float
    loss_coarse: float
    loss_final: float
    lr: float


@dataclass
class TrainResult:
    trace: list[TraceRow]
    model: VireoModel
    initial_final_loss: float
    final_total_loss: float


def model_config_for_task(task_cfg: TaskConfig, use_coarse_prior: bool = True,
                          n_prompts: int = 16) -> ModelConfig:
    return ModelConfig(layers=task_cfg.layers, d=task_cfg.d, d_depth=task_cfg.d_depth,
                       n_prompts=n_prompts, use_coarse_prior=use_coarse_prior)


def train_run(model: VireoModel, task: SyntheticTask, cfg: TrainConfig) -> TrainResult:
    """Deterministic training loop; asserts the frozen-provider contract at exit."""
    cfg.validate()
    optimizer = AdamW(model.named_parameters(), cfg)
    frozen_before = task.snapshot_providers()
    bank_before = task.train_bank.embeddings.data.tobytes()
    for image_id, stack in task._stacks.items():
        for t in list(stack.visual.values()) + list(stack.depth.values()):
            if id(t) in optimizer.registered_ids():
                raise ConfigError(f"provider tensor of {image_id} leaked into the optimizer")

    trace: list[TraceRow] = []
    ids = task.train_ids
    for t in range(cfg.total_iters):
        lr = poly_lr(t, cfg)
        optimizer.zero_grad()
        batch = [ids[(t * cfg.batch_size + j) % len(ids)] for j in range(cfg.batch_size)]
        total = None
        final_sum = 0.0
        coarse_sum = 0.0
        for image_id in batch:
            out = model.forward(task.stack(image_id), task.train_bank,
                                labels=task.labels(image_id),
                                coarse_weight=cfg.lambda_coarse)
            final_sum += out.final_loss.item()
            coarse_sum += out.aux_loss.item() if out.aux_loss is not None else 0.0
            total = out.total_loss if total is None else total + out.total_loss
        loss = scale(total, 1.0 / len(batch))
        if not math.isfinite(loss.item()):
            culprit = model.diagnose_nonfinite(loss) or "unknown"
            raise RuntimeError(f"non-finite loss at iteration {t}; first "
                               f"non-finite op: {culprit}")
        loss.backward()
        optimizer.step(lr)
        trace.append(TraceRow(iteration=t, loss_total=loss.item(),
                              loss_coarse=coarse_sum / len(batch),
                              loss_final=final_sum / len(batch), lr=lr))

    frozen_after = task.snapshot_providers()
    if frozen_after != frozen_before:
        changed = [k for k in frozen_before if frozen_after[k] != frozen_before[k]]
        raise RuntimeError(f"frozen provider features changed during training: {changed}")
    if task.train_bank.embeddings.data.tobytes() != bank_before:
        raise RuntimeError("frozen text embeddings changed during training")
    return TrainResult(trace=trace, model=model,
                       initial_final_loss=trace[0].loss_final,
                       final_total_loss=trace[-1].loss_total)


def write_trace_csv(trace: list[TraceRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "loss_total", "loss_coarse", "loss_final", "lr"])
        for row in trace:
            writer.writerow([row.iteration, repr(row.loss_total), repr(row.loss_coarse),
                             repr(row.loss_final), repr(row.lr)])


# -- convergence experiment ---------------------------------------------------


@dataclass
class ConvergenceRow:
    variant: str
    seed: int
    iters_to_tau: int | None


@dataclass
class ConvergenceReport:
    rows: list[ConvergenceRow]
    tau_fraction: float
    median_with: float
    median_without: float
    traces: dict[tuple[str, int], list[TraceRow]] = field(default_factory=dict)


def iterations_to_threshold(trace: list[TraceRow], tau: float) -> int | None:
    for row in trace:
        if row.loss_final < tau:
            return row.iteration
    return None


def gradient_norm_into_prompts(model: VireoModel, task: SyntheticTask,
                               cfg: TrainConfig, coarse_weight: float) -> float:
    """L2 norm of the step-1 gradient over every prompt-stack parameter."""
    model.zero_grads()
    batch = task.train_ids[:cfg.batch_size]
    total = None
    for image_id in batch:
        out = model.forward(task.stack(image_id), task.train_bank,
                            labels=task.labels(image_id), coarse_weight=coarse_weight)
        total = out.total_loss if total is None else total + out.total_loss
    scale(total, 1.0 / len(batch)).backward()
    sq = 0.0
    for _, p in model.prompt_state.named_parameters():
        if p.grad is not None:
            sq += float(np.sum(p.grad * p.grad))
    return math.sqrt(sq)


def convergence_experiment(task_cfg: TaskConfig, train_cfg: TrainConfig,
                           seeds: list[int], tau_fraction: float = 0.6) -> ConvergenceReport:
    """Iterations until the prediction loss falls below tau, with and without
    the coarse prior, per seed; medians compare the two variants."""
    if len(seeds) < 5:
        raise ConfigError(f"experiment needs at least 5 seeds, got {len(seeds)}")
    rows: list[ConvergenceRow] = []
    traces: dict[tuple[str, int], list[TraceRow]] = {}
    for seed in seeds:
        task = SyntheticTask(replace(task_cfg, seed=seed))
        for variant, use_coarse in (("cmpe", True), ("baseline", False)):
            cfg = replace(train_cfg, seed=seed,
                          lambda_coarse=train_cfg.lambda_coarse if use_coarse else 0.0)
            model = VireoModel(model_config_for_task(task.config, use_coarse), seed=seed)
            result = train_run(model, task, cfg)
            tau = tau_fraction * result.trace[0].loss_final
            rows.append(ConvergenceRow(variant=variant, seed=seed,
                                       iters_to_tau=iterations_to_threshold(result.trace, tau)))
            traces[(variant, seed)] = result.trace

    def median(variant: str) -> float:
        vals = [float("inf") if r.iters_to_tau is None else float(r.iters_to_tau)
                for r in rows if r.variant == variant]
        return float(np.median(vals))

    return ConvergenceReport(rows=rows, tau_fraction=tau_fraction,
                             median_with=median("cmpe"), median_without=median("baseline"),
                             traces=traces)


def write_convergence_csv(report: ConvergenceReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "seed", "iters_to_tau"])
        for row in report.rows:
            writer.writerow([row.variant, row.seed,
                             "not_reached" if row.iters_to_tau is None else row.iters_to_tau])
