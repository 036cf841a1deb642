"""Pinned experiment protocols shared by the scripts and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .cli import TrainSettings
from .synthetic_data import SceneSpec


@dataclass(frozen=True)
class AblationProtocol:
    """No-RESA vs RESA vs RESA+APE on position-ambiguous synthetic scenes.

    All lanes look identical, so which class a lane belongs to is decided by
    where it sits. The last fifth of the scenes is held out and scored at a
    2 px threshold (20 px would accept almost any guess on a 32 px wide image).
    """

    scene: SceneSpec = field(
        default_factory=lambda: SceneSpec(position_ambiguity=True, image_noise=0.05, noise=0.1, vp_jitter=2.0)
    )
    count: int = 200
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    settings: TrainSettings = field(
        default_factory=lambda: TrainSettings(epochs=60, lr=0.05, threshold_px=2.0, val_fraction=0.2, eval_every=60)
    )

    def quick(self) -> "AblationProtocol":
        """Same shape at smoke-test size."""
        return replace(
            self, count=40, seeds=(0,),
            settings=replace(self.settings, epochs=3, eval_every=3),
        )


ABLATION = AblationProtocol()
