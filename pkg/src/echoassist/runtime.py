"""Process-level CPU tuning shared by training and serving."""

from __future__ import annotations

import os

import torch

_configured = False


def configure_cpu(num_threads: "int | None" = None, force: bool = False):
    """Pin thread counts and flush denormals. Denormal flushing matters:
    freshly initialized networks produce subnormal gradients that can slow
    CPU convolutions several-fold."""
    global _configured
    if _configured and not force:
        return
    torch.set_num_threads(num_threads or os.cpu_count() or 1)
    torch.set_flush_denormal(True)
    _configured = True


def bf16_supported() -> bool:
    try:
        x = torch.randn(4, 4, dtype=torch.bfloat16)
        (x @ x).sum().item()
        return True
    except RuntimeError:
        return False
