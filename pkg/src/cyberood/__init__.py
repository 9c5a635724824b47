"""OOD monitoring for behavior-tree cyber-defense agents in a simulated network."""

from __future__ import annotations

__version__ = "0.1.0"
