"""Inversion-driven continual self-supervised learning lab.

Thin wrapper over the C++ extension module.
"""

from invcoss._core import (
    Encoder,
    Generator,
    RunningStats,
    bundle_read,
    bundle_write,
    diversity,
    make_modality,
    repulsive_loss,
    sample_mask,
    tv_loss,
    __version__,
)

__all__ = [
    "Encoder",
    "Generator",
    "RunningStats",
    "bundle_read",
    "bundle_write",
    "diversity",
    "make_modality",
    "repulsive_loss",
    "sample_mask",
    "tv_loss",
    "__version__",
]
