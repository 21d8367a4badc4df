"""Configuration management for dmri-metsc."""

import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

# Load .env file if present
load_dotenv()


def _env_flag(name: str) -> bool:
    return os.getenv(name, "").strip().lower() in {"1", "true", "yes", "on"}


class Config:
    """Process-wide defaults for the toolkit."""

    # Reproducibility and parallelism
    METSC_SEED: int = int(os.getenv("METSC_SEED", "0"))
    METSC_WORKERS: int = int(os.getenv("METSC_WORKERS", "1"))

    # NODDI fixed diffusivities (mm^2/s)
    METSC_D_PAR: float = float(os.getenv("METSC_D_PAR", "1.7e-3"))
    METSC_D_ISO: float = float(os.getenv("METSC_D_ISO", "3.0e-3"))

    # Output and logging
    METSC_OUTPUT_DIR: str = os.getenv("METSC_OUTPUT_DIR", "./metsc_out")
    METSC_LOG_LEVEL: str = os.getenv("METSC_LOG_LEVEL", "INFO")

    # Switch training/ablation defaults to the published run sizes
    METSC_FULL_SCALE: bool = _env_flag("METSC_FULL_SCALE")

    @classmethod
    def get_default_seed(cls) -> int:
        """Get default random seed."""
        return cls.METSC_SEED

    @classmethod
    def get_default_workers(cls) -> int:
        """Get default worker count, at least 1."""
        return max(1, cls.METSC_WORKERS)

    @classmethod
    def get_default_d_par(cls) -> float:
        """Get default parallel diffusivity."""
        return cls.METSC_D_PAR

    @classmethod
    def get_default_d_iso(cls) -> float:
        """Get default isotropic (CSF) diffusivity."""
        return cls.METSC_D_ISO

    @classmethod
    def get_output_dir(cls, override: Optional[str] = None) -> Path:
        """Get the output directory, preferring an explicit override."""
        return Path(override or cls.METSC_OUTPUT_DIR)

    @classmethod
    def get_log_level(cls) -> str:
        """Get the logging level name."""
        return cls.METSC_LOG_LEVEL.upper()

    @classmethod
    def full_scale(cls) -> bool:
        """Check whether published-scale run sizes are requested."""
        return bool(cls.METSC_FULL_SCALE)

    @classmethod
    def get_default_epochs(cls) -> int:
        """Get default training epochs (desk scale unless full scale is on)."""
        return 2000 if cls.full_scale() else 200

    @classmethod
    def get_default_warmup_epochs(cls) -> int:
        """Get default cosine warm-up length in epochs."""
        return 200 if cls.full_scale() else 20
