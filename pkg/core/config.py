from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Final

from dotenv import load_dotenv

logger: logging.Logger = logging.getLogger(__name__)

_ENV_PATH: Final[Path] = Path(__file__).resolve().parent.parent / ".env"
load_dotenv(_ENV_PATH)


def _float_tuple(raw: str) -> tuple[float, ...]:
    return tuple(float(part) for part in raw.split(",") if part.strip())


class Settings:

    TOOL_VERSION: str = "1.0.0"

    # Reproducibility
    SEED: int = int(os.getenv("MCBM_SEED", "0"))
    LOG_LEVEL: str = os.getenv("MCBM_LOG_LEVEL", "INFO")

    # Synthetic data
    FEATURE_NOISE: float = float(os.getenv("MCBM_FEATURE_NOISE", "0.1"))
    CLONE_FLIP_RATE: float = float(os.getenv("MCBM_CLONE_FLIP_RATE", "0.02"))

    # Training
    ALPHA: float = float(os.getenv("MCBM_ALPHA", "1.0"))
    EPOCHS: int = int(os.getenv("MCBM_EPOCHS", "50"))
    LEARNING_RATE: float = float(os.getenv("MCBM_LEARNING_RATE", "0.5"))
    BATCH_SIZE: int = int(os.getenv("MCBM_BATCH_SIZE", "64"))

    # Information-theoretic analysis
    EXACT_MAX_CONCEPTS: int = int(os.getenv("MCBM_EXACT_MAX_CONCEPTS", "16"))
    EXACT_MAX_CLASSES: int = int(os.getenv("MCBM_EXACT_MAX_CLASSES", "8"))
    EXACT_MAX_SUPPORT: int = int(os.getenv("MCBM_EXACT_MAX_SUPPORT", str(1 << 22)))
    KL_FLOOR: float = float(os.getenv("MCBM_KL_FLOOR", "1e-9"))
    EPSILON_BINS: tuple[float, ...] = _float_tuple(
        os.getenv("MCBM_EPSILON_BINS", "0,0.25,0.5,0.75,1")
    )

    def __repr__(self) -> str:
        return (
            f"Settings(version={self.TOOL_VERSION}, seed={self.SEED}, "
            f"epochs={self.EPOCHS}, lr={self.LEARNING_RATE}, alpha={self.ALPHA})"
        )


settings: Final[Settings] = Settings()
