"""Pipeline thresholds and reproducibility knobs."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, replace


@dataclass(frozen=True)
class PipelineConfig:
    tau_w: float = 0.15          # view-graph reliability threshold
    tau_gs: float = 0.5          # GSI threshold for erroneous tracks
    xi: float = 0.2              # erroneous-track ratio flagging a community
    eps_r: float = 0.15          # rotation consistency bound, radians
    eps_t: float = 0.35          # translation-direction consistency bound, radians
    min_tracks_per_view: int = 30
    min_common_images: int = 20
    cell_size: float = 64.0
    seed: int = 0
    resolution: float = 1.0      # Louvain resolution
    min_pnp_matches: int = 12
    ransac_threshold: float = 4.0  # px
    ransac_confidence: float = 0.9999
    ransac_max_iters: int = 500
    threads: int = 1

    def __post_init__(self):
        if not (0.0 <= self.tau_w <= 1.0 and 0.0 <= self.tau_gs <= 1.0 and 0.0 <= self.xi <= 1.0):
            raise ValueError("tau_w, tau_gs, xi must lie in [0, 1]")
        if not (0.0 <= self.eps_r <= math.pi and 0.0 <= self.eps_t <= math.pi):
            raise ValueError("angle thresholds must lie in [0, pi]")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")

    @classmethod
    def noisy_preset(cls, **overrides) -> "PipelineConfig":
        """Regime for noisy, unordered collections."""
        return cls(tau_w=0.05, tau_gs=0.65, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **kw) -> "PipelineConfig":
        return replace(self, **kw)
