"""LLM-driven Earth-observation workflow engine with tool creation."""

from __future__ import annotations

__version__ = "0.1.0"
