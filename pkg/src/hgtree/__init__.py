"""Autoregressive tree-skeleton generation with an hourglass transformer."""

from __future__ import annotations

__version__ = "0.1.0"
