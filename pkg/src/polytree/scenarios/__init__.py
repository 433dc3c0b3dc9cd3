"""Shipped scenario files."""

from pathlib import Path

SCENARIO_DIR = Path(__file__).resolve().parent
NAMES = ("pendulum_wall", "bouncing_ball", "planar_pushing")


def scenario_path(name: str) -> Path:
    """Resolve a shipped scenario by name (with or without ``.json``) or return ``name`` as a path."""
    stem = name[:-5] if name.endswith(".json") else name
    if stem in NAMES:
        return SCENARIO_DIR / f"{stem}.json"
    return Path(name)


def load(name: str):
    from ..pwa import PWASystem

    return PWASystem.load(scenario_path(name))
