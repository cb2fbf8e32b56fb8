from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

CONFIG_PATH = Path("config/settings.yaml")
EXAMPLE_CONFIG_PATH = Path("config/settings.example.yaml")

FloatRange = Tuple[float, float]
IntRange = Tuple[int, int]


def resolve_config_path(explicit: Optional[Path] = None) -> Path:
    if explicit is not None:
        return explicit
    if CONFIG_PATH.exists():
        return CONFIG_PATH
    return EXAMPLE_CONFIG_PATH


def _ordered(name: str, bounds: Tuple[float, float]) -> None:
    lo, hi = bounds
    if lo > hi:
        raise ValueError(f"{name}: range must be ordered lo <= hi, got ({lo}, {hi})")


def _pair(value: Any, default: Tuple[Any, Any], cast: type) -> Tuple[Any, Any]:
    if value is None:
        return default
    lo, hi = value
    return cast(lo), cast(hi)


@dataclass
class LoggingConfig:
    level: str = "INFO"
    file: Optional[Path] = None


@dataclass
class ModelConfig:
    blocks: int = 6
    channels: int = 64
    kernel: int = 3
    norm: bool = True
    seed: int = 0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.blocks < 1:
            raise ValueError(f"model.blocks must be >= 1, got {self.blocks}")
        if self.channels < 4:
            raise ValueError(f"model.channels must be >= 4, got {self.channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"model.kernel must be odd, got {self.kernel}")

    @classmethod
    def full_size(cls, seed: int = 0) -> "ModelConfig":
        """Ten blocks with 128 channels."""

        return cls(blocks=10, channels=128, seed=seed)


@dataclass
class MatchingConfig:
    temperature: float = 1.0
    normalize_descriptors: bool = False
    stride_px: int = 4
    mutual_only: bool = False
    score_min: Optional[float] = None
    max_similarity_entries: int = 64_000_000

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError(f"matching.temperature must be positive, got {self.temperature}")
        if self.stride_px < 1:
            raise ValueError(f"matching.stride_px must be >= 1, got {self.stride_px}")
        if self.max_similarity_entries < 1:
            raise ValueError("matching.max_similarity_entries must be positive")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    grid_rows: int = 16
    grid_cols: int = 16
    noise_amplitude: float = 0.25
    epochs: int = 30
    seed: int = 0
    image_size: int = 128
    checkpoint_every: int = 500
    min_correspondences: int = 8
    loss_tail: int = 100

    def __post_init__(self) -> None:
        # lr == 0 is accepted: it freezes the model for diagnostics.
        if self.lr < 0:
            raise ValueError(f"training.lr must be >= 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"training betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0:
            raise ValueError("training.eps must be positive")
        if self.batch_size < 1:
            raise ValueError("training.batch_size must be >= 1")
        if self.grid_rows < 2 or self.grid_cols < 2:
            raise ValueError("training grid must be at least 2×2")
        if not 0 <= self.noise_amplitude <= 0.5:
            raise ValueError("training.noise_amplitude must lie in [0, 0.5] cells")
        if self.epochs < 0 or self.checkpoint_every < 1:
            raise ValueError("training.epochs must be >= 0 and checkpoint_every >= 1")


@dataclass
class DistortionConfig:
    max_corner_shift: float = 0.15
    illumination_gain_range: FloatRange = (0.5, 1.5)
    n_shadows: IntRange = (0, 2)
    shadow_alpha_range: FloatRange = (0.2, 0.6)
    n_highlights: IntRange = (0, 2)
    highlight_strength: FloatRange = (0.2, 0.6)
    n_occluders: IntRange = (0, 1)
    occluder_size_range: FloatRange = (0.02, 0.08)
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.max_corner_shift <= 0.4:
            raise ValueError(f"max_corner_shift must lie in [0, 0.4], got {self.max_corner_shift}")
        for name in (
            "illumination_gain_range",
            "n_shadows",
            "shadow_alpha_range",
            "n_highlights",
            "highlight_strength",
            "n_occluders",
            "occluder_size_range",
        ):
            _ordered(name, getattr(self, name))
        lo, hi = self.illumination_gain_range
        if lo < 0.1 or hi > 3:
            raise ValueError("illumination_gain_range must satisfy 0.1 <= lo <= hi <= 3")
        for name in ("shadow_alpha_range", "highlight_strength"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi > 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("n_shadows", "n_highlights", "n_occluders"):
            if getattr(self, name)[0] < 0:
                raise ValueError(f"{name} must be non-negative")
        lo, hi = self.occluder_size_range
        if lo <= 0 or hi > 0.3:
            raise ValueError("occluder_size_range must lie in (0, 0.3]")
        if not 0 <= self.noise_sigma <= 1:
            raise ValueError("noise_sigma must lie in [0, 1]")

    @classmethod
    def disabled(cls, seed: int = 0) -> "DistortionConfig":
        """No warp and no photometric change."""

        return cls(
            max_corner_shift=0.0,
            illumination_gain_range=(1.0, 1.0),
            n_shadows=(0, 0),
            n_highlights=(0, 0),
            n_occluders=(0, 0),
            noise_sigma=0.0,
            seed=seed,
        )

    @classmethod
    def mild(cls, seed: int = 0) -> "DistortionConfig":
        return cls(
            max_corner_shift=0.08,
            illumination_gain_range=(0.8, 1.2),
            n_shadows=(0, 1),
            shadow_alpha_range=(0.1, 0.3),
            n_highlights=(0, 1),
            highlight_strength=(0.1, 0.3),
            n_occluders=(0, 0),
            noise_sigma=0.005,
            seed=seed,
        )

    def with_seed(self, seed: int) -> "DistortionConfig":
        return replace(self, seed=seed)

    def digest(self) -> str:
        """Stable digest of the distribution parameters (seed excluded)."""

        payload = asdict(self)
        payload.pop("seed")
        encoded = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(encoded).hexdigest()[:16]


@dataclass
class SynthesisConfig:
    image_size: int = 128
    train_count: int = 2000
    test_count: int = 200
    seed: int = 0
    distortion: DistortionConfig = field(default_factory=DistortionConfig)

    def __post_init__(self) -> None:
        if self.image_size < 16:
            raise ValueError("synthesis.image_size must be >= 16")


@dataclass
class RansacConfig:
    threshold_px: float = 3.0
    max_iters: int = 2000
    confidence: float = 0.995
    seed: int = 0

    def __post_init__(self) -> None:
        if self.threshold_px <= 0:
            raise ValueError("ransac threshold_px must be positive")
        if self.max_iters < 1:
            raise ValueError("ransac max_iters must be >= 1")
        if not 0 < self.confidence < 1:
            raise ValueError("ransac confidence must lie in (0, 1)")


@dataclass
class EvaluationConfig:
    stride_px: int = 4
    mutual: bool = False
    score_min: Optional[float] = None
    ransac: RansacConfig = field(default_factory=RansacConfig)
    thresholds: Tuple[float, ...] = (0.1, 1.0, 10.0)
    max_mce_px: float = 50.0
    n_bins: int = 101
    mce_average: bool = False
    workers: int = 1

    def __post_init__(self) -> None:
        if self.stride_px < 1:
            raise ValueError("evaluation.stride_px must be >= 1")
        if list(self.thresholds) != sorted(self.thresholds):
            raise ValueError("evaluation.thresholds must be sorted ascending")
        if self.n_bins < 2:
            raise ValueError("evaluation.n_bins must be >= 2")
        if self.workers < 1:
            raise ValueError("evaluation.workers must be >= 1")


@dataclass
class Settings:
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    @classmethod
    def load(cls, path: Path) -> "Settings":
        with path.open("r", encoding="utf-8") as config_file:
            data: Dict[str, Any] = yaml.safe_load(config_file) or {}
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Settings":
        logging_cfg = data.get("logging", {}) or {}
        logging_config = LoggingConfig(
            level=str(logging_cfg.get("level", "INFO")),
            file=Path(logging_cfg["file"]) if logging_cfg.get("file") else None,
        )

        model_cfg = data.get("model", {}) or {}
        model = ModelConfig(
            blocks=int(model_cfg.get("blocks", 6)),
            channels=int(model_cfg.get("channels", 64)),
            kernel=int(model_cfg.get("kernel", 3)),
            norm=bool(model_cfg.get("norm", True)),
            seed=int(model_cfg.get("seed", 0)),
            bn_momentum=float(model_cfg.get("bn_momentum", 0.1)),
            bn_eps=float(model_cfg.get("bn_eps", 1e-5)),
        )

        matching_cfg = data.get("matching", {}) or {}
        score_min = matching_cfg.get("score_min")
        matching = MatchingConfig(
            temperature=float(matching_cfg.get("temperature", 1.0)),
            normalize_descriptors=bool(matching_cfg.get("normalize_descriptors", False)),
            stride_px=int(matching_cfg.get("stride_px", 4)),
            mutual_only=bool(matching_cfg.get("mutual_only", False)),
            score_min=float(score_min) if score_min is not None else None,
            max_similarity_entries=int(matching_cfg.get("max_similarity_entries", 64_000_000)),
        )

        train_cfg = data.get("training", {}) or {}
        grid = train_cfg.get("grid", [16, 16])
        training = TrainConfig(
            lr=float(train_cfg.get("lr", 1e-3)),
            beta1=float(train_cfg.get("beta1", 0.9)),
            beta2=float(train_cfg.get("beta2", 0.999)),
            eps=float(train_cfg.get("eps", 1e-8)),
            batch_size=int(train_cfg.get("batch_size", 16)),
            grid_rows=int(grid[0]),
            grid_cols=int(grid[1]),
            noise_amplitude=float(train_cfg.get("noise_amplitude", 0.25)),
            epochs=int(train_cfg.get("epochs", 30)),
            seed=int(train_cfg.get("seed", 0)),
            image_size=int(train_cfg.get("image_size", 128)),
            checkpoint_every=int(train_cfg.get("checkpoint_every", 500)),
            min_correspondences=int(train_cfg.get("min_correspondences", 8)),
            loss_tail=int(train_cfg.get("loss_tail", 100)),
        )

        synth_cfg = data.get("synthesis", {}) or {}
        dist_cfg = synth_cfg.get("distortion", {}) or {}
        defaults = DistortionConfig()
        distortion = DistortionConfig(
            max_corner_shift=float(dist_cfg.get("max_corner_shift", defaults.max_corner_shift)),
            illumination_gain_range=_pair(
                dist_cfg.get("illumination_gain_range"), defaults.illumination_gain_range, float
            ),
            n_shadows=_pair(dist_cfg.get("n_shadows"), defaults.n_shadows, int),
            shadow_alpha_range=_pair(dist_cfg.get("shadow_alpha_range"), defaults.shadow_alpha_range, float),
            n_highlights=_pair(dist_cfg.get("n_highlights"), defaults.n_highlights, int),
            highlight_strength=_pair(dist_cfg.get("highlight_strength"), defaults.highlight_strength, float),
            n_occluders=_pair(dist_cfg.get("n_occluders"), defaults.n_occluders, int),
            occluder_size_range=_pair(
                dist_cfg.get("occluder_size_range"), defaults.occluder_size_range, float
            ),
            noise_sigma=float(dist_cfg.get("noise_sigma", defaults.noise_sigma)),
            seed=int(synth_cfg.get("seed", 0)),
        )
        synthesis = SynthesisConfig(
            image_size=int(synth_cfg.get("image_size", 128)),
            train_count=int(synth_cfg.get("train_count", 2000)),
            test_count=int(synth_cfg.get("test_count", 200)),
            seed=int(synth_cfg.get("seed", 0)),
            distortion=distortion,
        )

        eval_cfg = data.get("evaluation", {}) or {}
        ransac_cfg = eval_cfg.get("ransac", {}) or {}
        eval_score_min = eval_cfg.get("score_min")
        evaluation = EvaluationConfig(
            stride_px=int(eval_cfg.get("stride_px", 4)),
            mutual=bool(eval_cfg.get("mutual", False)),
            score_min=float(eval_score_min) if eval_score_min is not None else None,
            ransac=RansacConfig(
                threshold_px=float(ransac_cfg.get("threshold_px", 3.0)),
                max_iters=int(ransac_cfg.get("max_iters", 2000)),
                confidence=float(ransac_cfg.get("confidence", 0.995)),
                seed=int(ransac_cfg.get("seed", 0)),
            ),
            thresholds=tuple(float(t) for t in eval_cfg.get("thresholds", (0.1, 1.0, 10.0))),
            max_mce_px=float(eval_cfg.get("max_mce_px", 50.0)),
            n_bins=int(eval_cfg.get("n_bins", 101)),
            mce_average=bool(eval_cfg.get("mce_average", False)),
            workers=int(eval_cfg.get("workers", 1)),
        )

        return cls(
            logging=logging_config,
            model=model,
            matching=matching,
            training=training,
            synthesis=synthesis,
            evaluation=evaluation,
        )
