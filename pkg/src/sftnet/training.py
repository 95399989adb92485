"""Two-stage training: supervised synthetic stage, then depth-only fine-tuning.

Stage 1 trains everything end to end on synthetic frames with an adaptive
moment optimizer, minimizing the sum of a warp term (mean squared error over
all 2*h*w*bs registration elements) and a depth term (over h*w*bs elements).
Stage 2 freezes the main block and fine-tunes only the adaptation block on
real depth with plain SGD at a small fixed learning rate; pixels with invalid
sensor depth are excluded from the loss.

One trainer owns the model exclusively; batch order is a pure function of the
seed, so runs are reproducible.
"""

from __future__ import annotations

import copy
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import NormalizationSpec
from .model.network import SfTNet, save_checkpoint

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Stage1Config:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.9
    epochs: int = 40
    batch_size: int = 7
    seed: int = 0
    supervise_main_depth: bool = True
    max_steps: int | None = None
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("hyperparameters must be non-negative (batch size >= 1)")


@dataclass(frozen=True)
class Stage2Config:
    learning_rate: float = 1e-5
    epochs: int = 10
    batch_size: int = 7
    seed: int = 0
    max_steps: int | None = None
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("hyperparameters must be non-negative (batch size >= 1)")


@dataclass(frozen=True)
class LossReport:
    """Loss terms for one batch or one epoch aggregate.

    l1 is the warp term, l2 the depth term on the refined output, l2_main the
    optional auxiliary depth term on the main block's first estimate. total is
    the optimized objective.
    """

    l1: float
    l2: float
    total: float
    l2_main: float = 0.0


def loss_synthetic(pred, target, supervise_main_depth: bool = False) -> LossReport:
    """Supervised loss on synthetic data.

    pred is (rho_hat, eta_hat, rho_refined); target is (rho, eta); all torch
    tensors with channels first. The depth term applies to the refined output;
    with supervise_main_depth the main block's depth estimate is supervised as
    an equal-weight extra term (recorded separately so l1 + l2 stays the
    published two-term form).
    """
    tensor, report = _synthetic_objective(pred, target, supervise_main_depth)
    return report


def _synthetic_objective(pred, target, supervise_main_depth: bool):
    rho_hat, eta_hat, rho_refined = pred
    rho, eta = target
    if eta_hat.shape != eta.shape:
        raise ValueError(f"warp shape mismatch: {tuple(eta_hat.shape)} vs {tuple(eta.shape)}")
    if rho_refined.shape != rho.shape or rho_hat.shape != rho.shape:
        raise ValueError(
            f"depth shape mismatch: {tuple(rho_hat.shape)}/{tuple(rho_refined.shape)} "
            f"vs {tuple(rho.shape)}"
        )
    l1 = torch.mean((eta_hat - eta) ** 2)
    l2 = torch.mean((rho_refined - rho) ** 2)
    total = l1 + l2
    l2_main = torch.zeros((), dtype=l1.dtype)
    if supervise_main_depth:
        l2_main = torch.mean((rho_hat - rho) ** 2)
        total = total + l2_main
    report = LossReport(
        l1=float(l1.detach()),
        l2=float(l2.detach()),
        total=float(total.detach()),
        l2_main=float(l2_main.detach()),
    )
    return total, report


def loss_real(pred_rho_refined: torch.Tensor, target_rho: torch.Tensor,
              valid: torch.Tensor) -> LossReport:
    tensor, report = _real_objective(pred_rho_refined, target_rho, valid)
    return report


def _real_objective(pred_rho_refined, target_rho, valid):
    if pred_rho_refined.shape != target_rho.shape or valid.shape != target_rho.shape:
        raise ValueError("prediction, target, and validity mask must share a shape")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid depth pixels in the entire batch")
    sq = (pred_rho_refined - target_rho) ** 2
    l2 = (sq * valid).sum() / n_valid
    report = LossReport(l1=0.0, l2=float(l2.detach()), total=float(l2.detach()))
    return l2, report


@dataclass
class TrainingData:
    """In-memory training arrays, already normalized to the network's ranges.

    warp_norm is None for depth-only (real RGB-D) datasets; valid marks
    pixels carrying usable depth supervision.
    """

    rgb: np.ndarray          # (N, h, w, 3) float32 in [0, 1]
    depth_norm: np.ndarray   # (N, h, w) float32
    valid: np.ndarray        # (N, h, w) bool
    norm_spec: NormalizationSpec
    warp_norm: np.ndarray | None = None  # (N, h, w, 2) float32

    def __len__(self) -> int:
        return len(self.rgb)

    def batch(self, indices: np.ndarray) -> dict[str, torch.Tensor]:
        out = {
            "rgb": torch.from_numpy(
                np.ascontiguousarray(self.rgb[indices].transpose(0, 3, 1, 2))
            ),
            "depth": torch.from_numpy(self.depth_norm[indices][:, None]),
            "valid": torch.from_numpy(self.valid[indices][:, None]),
        }
        if self.warp_norm is not None:
            out["warp"] = torch.from_numpy(
                np.ascontiguousarray(self.warp_norm[indices].transpose(0, 3, 1, 2))
            )
        return out


def as_training_data(dataset) -> TrainingData:
    if isinstance(dataset, TrainingData):
        return dataset
    from .datagen.dataset import load_training_arrays

    return load_training_arrays(dataset)


@dataclass
class StepRecord:
    stage: int
    epoch: int
    step: int
    report: LossReport


@dataclass
class TrainingHistory:
    steps: list[StepRecord] = field(default_factory=list)

    def epoch_totals(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for s in self.steps:
            by_epoch.setdefault(s.epoch, []).append(s.report.total)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for s in self.steps:
                fh.write(json.dumps({
                    "stage": s.stage, "epoch": s.epoch, "step": s.step,
                    **asdict(s.report),
                }) + "\n")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def train_stage1(model: SfTNet, dataset, config: Stage1Config) -> tuple[SfTNet, TrainingHistory]:
    """End-to-end supervised training of both blocks on synthetic frames."""
    data = as_training_data(dataset)
    if data.warp_norm is None:
        raise ValueError("stage 1 requires registration (warp) ground truth")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2)
    )
    history = TrainingHistory()
    global_step = 0
    for epoch in range(config.epochs):
        model.train()
        for indices in _batches(len(data), config.batch_size, rng):
            if config.max_steps is not None and global_step >= config.max_steps:
                break
            batch = data.batch(indices)
            optimizer.zero_grad()
            main_out, refined = model(batch["rgb"])
            objective, report = _synthetic_objective(
                (main_out[:, 0:1], main_out[:, 1:3], refined),
                (batch["depth"], batch["warp"]),
                config.supervise_main_depth,
            )
            objective.backward()
            optimizer.step()
            history.steps.append(StepRecord(1, epoch, global_step, report))
            global_step += 1
        if config.checkpoint_dir is not None:
            path = Path(config.checkpoint_dir)
            path.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, path / f"stage1_epoch{epoch:04d}.pt", data.norm_spec)
        if config.max_steps is not None and global_step >= config.max_steps:
            break
    model.provenance["stage1"] = {
        "epochs": config.epochs, "steps": global_step, "seed": config.seed,
    }
    model.eval()
    return model, history


def finetune_stage2(model: SfTNet, dataset, config: Stage2Config) -> tuple[SfTNet, TrainingHistory]:
    """Fine-tune only the adaptation block on depth-only data.

    The main block is frozen: its parameters receive no updates and its batch
    norm layers keep (and use) their running statistics.
    """
    data = as_training_data(dataset)
    if "stage1" not in model.provenance:
        warnings.warn("fine-tuning a model with no prior stage-1 training", stacklevel=2)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    for p in model.main_block.parameters():
        p.requires_grad_(False)
    optimizer = torch.optim.SGD(model.adaptation_block.parameters(), lr=config.learning_rate)
    history = TrainingHistory()
    global_step = 0
    for epoch in range(config.epochs):
        model.adaptation_block.train()
        model.main_block.eval()
        for indices in _batches(len(data), config.batch_size, rng):
            if config.max_steps is not None and global_step >= config.max_steps:
                break
            batch = data.batch(indices)
            optimizer.zero_grad()
            _, refined = model(batch["rgb"])
            objective, report = _real_objective(refined, batch["depth"], batch["valid"])
            objective.backward()
            optimizer.step()
            history.steps.append(StepRecord(2, epoch, global_step, report))
            global_step += 1
        if config.checkpoint_dir is not None:
            path = Path(config.checkpoint_dir)
            path.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, path / f"stage2_epoch{epoch:04d}.pt", data.norm_spec)
        if config.max_steps is not None and global_step >= config.max_steps:
            break
    for p in model.main_block.parameters():
        p.requires_grad_(True)
    model.provenance["stage2"] = {
        "epochs": config.epochs, "steps": global_step, "seed": config.seed,
    }
    model.eval()
    return model, history


def evaluate_synthetic_loss(model: SfTNet, dataset, batch_size: int = 7,
                            supervise_main_depth: bool = True) -> LossReport:
    """Dataset-average stage-1 loss in inference mode."""
    data = as_training_data(dataset)
    if data.warp_norm is None:
        raise ValueError("synthetic loss needs warp ground truth")
    model.eval()
    sums = np.zeros(4)
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            indices = np.arange(start, min(start + batch_size, len(data)))
            batch = data.batch(indices)
            main_out, refined = model(batch["rgb"])
            _, rep = _synthetic_objective(
                (main_out[:, 0:1], main_out[:, 1:3], refined),
                (batch["depth"], batch["warp"]),
                supervise_main_depth,
            )
            sums += len(indices) * np.array([rep.l1, rep.l2, rep.total, rep.l2_main])
    l1, l2, total, l2_main = sums / len(data)
    return LossReport(l1=l1, l2=l2, total=total, l2_main=l2_main)


@dataclass
class GradientCheckResult:
    parameter: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


def finite_difference_check(
    model: SfTNet,
    rgb: torch.Tensor,
    depth: torch.Tensor,
    warp: torch.Tensor,
    n_weights: int = 20,
    step: float = 1e-6,
    seed: int = 0,
    min_grad: float = 1e-7,
) -> list[GradientCheckResult]:
    """Compare analytic gradients of the stage-1 loss with central differences.

    Runs on a double-precision copy of the model in inference mode (batch norm
    uses running statistics, so the loss is a smooth function of the weights).
    Sampled entries with analytic gradient below min_grad are skipped: their
    relative error is dominated by roundoff, not by gradient correctness.
    """
    model = copy.deepcopy(model).double().eval()
    rgb, depth, warp = rgb.double(), depth.double(), warp.double()

    def objective():
        main_out, refined = model(rgb)
        loss, _ = _synthetic_objective(
            (main_out[:, 0:1], main_out[:, 1:3], refined), (depth, warp), True
        )
        return loss

    loss = objective()
    loss.backward()
    params = [(name, p) for name, p in model.named_parameters() if p.grad is not None]
    rng = np.random.default_rng(seed)
    results: list[GradientCheckResult] = []
    attempts = 0
    with torch.no_grad():
        while len(results) < n_weights and attempts < 50 * n_weights:
            attempts += 1
            name, p = params[rng.integers(len(params))]
            idx = int(rng.integers(p.numel()))
            g = float(p.grad.flatten()[idx])
            if abs(g) < min_grad:
                continue
            flat = p.data.flatten()
            orig = float(flat[idx])
            flat[idx] = orig + step
            f_plus = float(objective())
            flat[idx] = orig - step
            f_minus = float(objective())
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            rel = abs(g - numeric) / max(abs(g), abs(numeric), 1e-12)
            results.append(GradientCheckResult(name, idx, g, numeric, rel))
    if len(results) < n_weights:
        raise RuntimeError(
            f"could only sample {len(results)} weights with non-negligible gradients"
        )
    return results
