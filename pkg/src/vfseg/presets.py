"""Model configurations shared by both parties.

Every shape either party relies on derives from one ModelConfig, so a
negotiated preset pins the whole geometry of the exchange.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import ConfigurationError, ValidationError

STAGES = 5
DEFAULT_SEGMENTS = (25, 50, 75, 150, 200)


@dataclass(frozen=True)
class ModelConfig:
    name: str
    input_size: int                      # square inputs, H == W
    stage_blocks: tuple[int, ...]        # conv blocks per stage
    stage_widths: tuple[int, ...]        # channels per stage
    segments: tuple[int, ...] = DEFAULT_SEGMENTS
    in_channels: int = 3
    batch_norm: bool = True

    def __post_init__(self) -> None:
        if len(self.stage_blocks) != STAGES or len(self.stage_widths) != STAGES:
            raise ConfigurationError(f"{self.name}: exactly {STAGES} stages required")
        if len(self.segments) != STAGES:
            raise ConfigurationError(f"{self.name}: one segment length per stage required")
        if any(s < 1 for s in self.segments):
            raise ValidationError(f"{self.name}: segment lengths must be positive")
        if self.input_size % 32 != 0 or self.input_size <= 0:
            raise ConfigurationError(
                f"{self.name}: input size {self.input_size} must be a positive multiple of 32"
            )

    @property
    def feature_count(self) -> int:
        """Feature vector length crossing the party boundary per sample."""
        return sum(self.segments)

    @property
    def input_features(self) -> int:
        return self.in_channels * self.input_size * self.input_size

    def skip_shapes(self) -> list[tuple[int, int, int]]:
        """Per-sample (C, H, W) of each stage's pooled output, shallow to deep."""
        return [
            (self.stage_widths[i],
             self.input_size >> (i + 1),
             self.input_size >> (i + 1))
            for i in range(STAGES)
        ]

    def skip_sizes(self) -> list[int]:
        return [c * h * w for c, h, w in self.skip_shapes()]

    def segment_offsets(self) -> list[int]:
        offsets = [0]
        for s in self.segments:
            offsets.append(offsets[-1] + s)
        return offsets


PRESETS: dict[str, ModelConfig] = {
    "vgg16": ModelConfig(
        name="vgg16",
        input_size=128,
        stage_blocks=(2, 2, 3, 3, 3),
        stage_widths=(64, 128, 256, 512, 512),
    ),
    "tiny": ModelConfig(
        name="tiny",
        input_size=64,
        stage_blocks=(2, 2, 2, 2, 2),
        stage_widths=(8, 16, 32, 64, 64),
    ),
}


def config_for(preset: str, *, segments: tuple[int, ...] | None = None,
               batch_norm: bool | None = None) -> ModelConfig:
    """Look up a preset, optionally overriding segment split or batch norm."""
    if preset not in PRESETS:
        raise ConfigurationError(
            f"unknown preset '{preset}' (available: {', '.join(sorted(PRESETS))})"
        )
    cfg = PRESETS[preset]
    if segments is not None:
        cfg = replace(cfg, segments=tuple(int(s) for s in segments))
    if batch_norm is not None:
        cfg = replace(cfg, batch_norm=batch_norm)
    return cfg


def scale_segments(total: int) -> tuple[int, ...]:
    """Split a feature budget across the five stages in the default 1:2:3:6:8
    proportions using largest remainders; every stage gets at least one slot."""
    if total < STAGES:
        raise ValidationError(
            f"feature count {total} too small: need at least one per stage ({STAGES})"
        )
    weights = DEFAULT_SEGMENTS
    wsum = sum(weights)
    raw = [total * w / wsum for w in weights]
    base = [max(1, int(r)) for r in raw]
    while sum(base) > total:
        i = max(range(STAGES), key=lambda j: base[j])
        base[i] -= 1
    remainders = sorted(range(STAGES), key=lambda j: raw[j] - base[j], reverse=True)
    k = 0
    while sum(base) < total:
        base[remainders[k % STAGES]] += 1
        k += 1
    return tuple(base)
