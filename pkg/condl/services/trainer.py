"""Adam training over generated pairs, with checkpointing and an overfit diagnostic."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from condl.config import MatchingConfig, ModelConfig, TrainConfig
from condl.engine import Tape, Tensor, backward, scale
from condl.schemas import TrainRunEcho

from .analytics import AnalyticsTracker, NullAnalytics
from .checkpoint import (
    capture_model,
    checkpoint_name,
    latest_checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .dataset import DatasetError, load_pair, open_dataset
from .files import write_atomic_sync
from .geometry import GridSpec, PointSet, project_points, sample_grid
from .matching import contrastive_loss, descriptor_pair, grid_accuracy, similarity_matrix
from .model import ModelParams, extract_feature_batch, init_model, pair_tensor
from .synthgen import SamplePair

LOGGER = logging.getLogger(__name__)

LOSS_HEADER = "step,epoch,loss"
OVERFIT_LOSS_THRESHOLD = 0.05


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str) -> None:
        super().__init__(f"non-finite gradient in parameter {name}; Adam step aborted")
        self.name = name


class EmptyBatchError(ValueError):
    """No pair of the batch kept enough valid correspondences."""


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(tensor.data, dtype=np.float32) for name, tensor in params.named_parameters()},
            v={name: np.zeros_like(tensor.data, dtype=np.float32) for name, tensor in params.named_parameters()},
        )


@dataclass
class OverfitReport:
    steps: int
    losses: List[float]
    final_loss: float
    accuracy: float
    converged: bool


@dataclass
class TrainResult:
    checkpoint: Path
    steps: int
    losses: List[float]


def adam_step(params: ModelParams, state: OptimizerState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update of every parameter; gradients are cleared afterwards."""

    grads: Dict[str, np.ndarray] = {}
    for name, tensor in params.named_parameters():
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(name)
        grads[name] = grad.astype(np.float64)

    state.t += 1
    correction1 = 1.0 - cfg.beta1**state.t
    correction2 = 1.0 - cfg.beta2**state.t
    for name, tensor in params.named_parameters():
        g = grads[name]
        m = cfg.beta1 * state.m[name].astype(np.float64) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name].astype(np.float64) + (1.0 - cfg.beta2) * g * g
        state.m[name] = m.astype(np.float32)
        state.v[name] = v.astype(np.float32)
        update = cfg.lr * (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
        tensor.data = (tensor.data.astype(np.float64) - update).astype(tensor.data.dtype)
        tensor.grad = None


def grid_seed(seed: int, step: int, index: int) -> int:
    return int(np.random.default_rng([seed, step, index]).integers(0, 2**31 - 1))


def valid_correspondences(pair: SamplePair, cfg: TrainConfig, seed: int) -> Tuple[PointSet, PointSet]:
    """Noisy grid in A and its ground-truth projection in B, restricted to points landing inside B."""

    spec = GridSpec(cfg.grid_rows, cfg.grid_cols, pair.width, pair.height, cfg.noise_amplitude, seed)
    pts_a = sample_grid(spec)
    projected, finite = project_points(pair.h_ab, pts_a)
    inside = finite & np.all(np.isfinite(projected), axis=1)
    safe = np.where(inside[:, None], projected, 0.0)
    inside &= (safe[:, 0] >= 0) & (safe[:, 0] <= pair.width - 1)
    inside &= (safe[:, 1] >= 0) & (safe[:, 1] <= pair.height - 1)
    return pts_a.subset(inside), PointSet(safe[inside])


def pair_loss(
    params: ModelParams,
    pair: SamplePair,
    pts_a: PointSet,
    pts_b: PointSet,
    matching: MatchingConfig,
    training: bool = True,
) -> Tensor:
    fa, fb = extract_feature_batch(params, pair_tensor(pair.image_a, pair.image_b), training)
    da, db = descriptor_pair(fa, fb, pts_a, pts_b, normalize=matching.normalize_descriptors)
    return contrastive_loss(similarity_matrix(da, db, matching.temperature))


def train_step(
    params: ModelParams,
    state: OptimizerState,
    batch: Sequence[SamplePair],
    cfg: TrainConfig,
    matching: Optional[MatchingConfig] = None,
) -> float:
    """One optimizer step over ``batch``; returns the mean loss of the kept pairs.

    Each pair is its own forward pass (A and B share batch statistics) and its
    gradient is scaled by ``1 / kept`` before the single Adam update.
    """

    matching = matching or MatchingConfig()
    if not batch:
        raise EmptyBatchError("train_step received an empty batch")

    step = state.t
    prepared: List[Tuple[SamplePair, PointSet, PointSet]] = []
    for index, pair in enumerate(batch):
        if (pair.width, pair.height) != (cfg.image_size, cfg.image_size):
            raise ValueError(
                f"pair {pair.pair_id} is {pair.width}×{pair.height}, training expects {cfg.image_size}×{cfg.image_size}"
            )
        pts_a, pts_b = valid_correspondences(pair, cfg, grid_seed(cfg.seed, step, index))
        if len(pts_a) < cfg.min_correspondences:
            LOGGER.warning(
                "pair_skipped",
                extra={"pair_id": pair.pair_id, "step": step, "correspondences": len(pts_a)},
            )
            continue
        prepared.append((pair, pts_a, pts_b))
    if not prepared:
        raise EmptyBatchError(
            f"no pair in the batch kept {cfg.min_correspondences} valid correspondences at step {step}"
        )

    weight = 1.0 / len(prepared)
    total = 0.0
    for pair, pts_a, pts_b in prepared:
        with Tape() as tape:
            loss = pair_loss(params, pair, pts_a, pts_b, matching)
            backward(scale(loss, weight), tape)
        total += loss.item()

    adam_step(params, state, cfg)
    return total * weight


def _loss_rows(path: Path, up_to_step: int) -> str:
    """Header plus the rows of ``path`` with ``step <= up_to_step``."""

    kept = [LOSS_HEADER]
    if path.exists():
        with path.open("r", encoding="utf-8", newline="") as handle:
            for row in csv.DictReader(handle):
                if int(row["step"]) <= up_to_step:
                    kept.append(f"{row['step']},{row['epoch']},{row['loss']}")
    return "\n".join(kept) + "\n"


def _epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(count)


def train(
    dataset_dir: Path,
    cfg: TrainConfig,
    out_dir: Path,
    *,
    model_cfg: Optional[ModelConfig] = None,
    matching: Optional[MatchingConfig] = None,
    resume: bool = False,
    analytics: AnalyticsTracker | NullAnalytics | None = None,
) -> TrainResult:
    """Epoch loop with seeded shuffling; writes ``loss.csv`` and ``step_NNNNNN.cndl`` files.

    Steps and epochs are numbered from 1. Resuming restarts after the latest
    checkpoint and drops loss rows logged past it.
    """

    analytics = analytics or NullAnalytics()
    matching = matching or MatchingConfig()
    index = open_dataset(dataset_dir)
    if index.manifest is None or not index.ids:
        raise DatasetError(f"dataset {dataset_dir} is empty")
    if (index.manifest.width, index.manifest.height) != (cfg.image_size, cfg.image_size):
        raise ValueError(
            f"dataset images are {index.manifest.width}×{index.manifest.height}, "
            f"training.image_size is {cfg.image_size}"
        )

    out_dir.mkdir(parents=True, exist_ok=True)
    loss_path = out_dir / "loss.csv"
    count = len(index.ids)
    steps_per_epoch = math.ceil(count / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs

    params: ModelParams
    state: OptimizerState
    tail: Deque[float] = deque(maxlen=cfg.loss_tail)
    start = 0
    latest = latest_checkpoint(out_dir) if resume else None
    if latest is not None:
        ckpt = load_checkpoint(latest)
        params = model_from_checkpoint(ckpt)
        state = OptimizerState(m=dict(ckpt.adam_m), v=dict(ckpt.adam_v), t=ckpt.adam_t)
        matching = MatchingConfig(
            **{**asdict(matching), "temperature": ckpt.temperature, "normalize_descriptors": ckpt.normalize_descriptors}
        )
        tail.extend(ckpt.loss_tail)
        start = ckpt.step
        write_atomic_sync(loss_path, _loss_rows(loss_path, start).encode("utf-8"))
        LOGGER.info("training_resumed", extra={"checkpoint": str(latest), "step": start})
    else:
        if resume:
            LOGGER.info("training_resume_without_checkpoint", extra={"path": str(out_dir)})
        params = init_model(model_cfg or ModelConfig())
        state = OptimizerState.fresh(params)
        write_atomic_sync(loss_path, (LOSS_HEADER + "\n").encode("utf-8"))

    echo = TrainRunEcho(
        dataset=str(dataset_dir),
        dataset_count=count,
        steps_per_epoch=steps_per_epoch,
        training=asdict(cfg),
        model=asdict(params.config),
        matching=asdict(matching),
    )
    write_atomic_sync(out_dir / "train_config.json", echo.model_dump_json(indent=2).encode("utf-8"))

    def _save(step: int) -> Path:
        if not params.is_finite():
            raise FloatingPointError(f"non-finite parameter values at step {step}")
        path = out_dir / checkpoint_name(step)
        save_checkpoint(
            capture_model(
                params,
                matching,
                adam_m=state.m,
                adam_v=state.v,
                step=step,
                adam_t=state.t,
                loss_tail=list(tail),
            ),
            path,
        )
        return path

    losses: List[float] = []
    last_path = latest
    order: Optional[np.ndarray] = None
    order_epoch = -1
    for step_index in range(start, total_steps):
        epoch = step_index // steps_per_epoch
        position = step_index % steps_per_epoch
        if epoch != order_epoch:
            order = _epoch_order(cfg.seed, epoch, count)
            order_epoch = epoch
        assert order is not None
        ids = order[position * cfg.batch_size : (position + 1) * cfg.batch_size]
        batch = [load_pair(dataset_dir, int(pair_id), index.manifest) for pair_id in ids]

        with analytics.track_time("train_step"):
            loss = train_step(params, state, batch, cfg, matching)
        step = step_index + 1
        losses.append(loss)
        tail.append(loss)
        with loss_path.open("a", encoding="utf-8") as handle:
            handle.write(f"{step},{epoch + 1},{loss!r}\n")
        LOGGER.info("train_step", extra={"step": step, "epoch": epoch + 1, "loss": loss})

        if step % cfg.checkpoint_every == 0 or step == total_steps:
            last_path = _save(step)

    if last_path is None:
        last_path = _save(start)
    analytics.flush()
    LOGGER.info("training_finished", extra={"steps": total_steps, "checkpoint": str(last_path)})
    return TrainResult(checkpoint=last_path, steps=total_steps, losses=losses)


def overfit_check(
    pair: SamplePair,
    cfg: TrainConfig,
    max_steps: int,
    *,
    model_cfg: Optional[ModelConfig] = None,
    matching: Optional[MatchingConfig] = None,
    threshold: float = OVERFIT_LOSS_THRESHOLD,
) -> OverfitReport:
    """Train a fresh model on one pair until its loss drops below ``threshold``."""

    matching = matching or MatchingConfig()
    params = init_model(model_cfg or ModelConfig())
    state = OptimizerState.fresh(params)
    losses: List[float] = []
    converged = False
    for _ in range(max_steps):
        loss = train_step(params, state, [pair], cfg, matching)
        losses.append(loss)
        if loss < threshold:
            converged = True
            break

    snapshot = params.clone()
    pts_a, pts_b = valid_correspondences(pair, cfg, grid_seed(cfg.seed, state.t, 0))
    fa, fb = extract_feature_batch(snapshot, pair_tensor(pair.image_a, pair.image_b), training=True)
    da, db = descriptor_pair(fa, fb, pts_a, pts_b, normalize=matching.normalize_descriptors)
    accuracy = grid_accuracy(similarity_matrix(da, db, matching.temperature))

    report = OverfitReport(
        steps=len(losses),
        losses=losses,
        final_loss=losses[-1] if losses else math.nan,
        accuracy=accuracy,
        converged=converged,
    )
    LOGGER.info(
        "overfit_finished",
        extra={"steps": report.steps, "loss": report.final_loss, "accuracy": accuracy, "converged": converged},
    )
    return report


def loss_log(path: Path) -> List[Tuple[int, int, float]]:
    """Parse ``loss.csv`` into ``(step, epoch, loss)`` rows."""

    text = path.read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    return [(int(row["step"]), int(row["epoch"]), float(row["loss"])) for row in reader]
