"""Packaged fixtures: taxi tables, project P, registries and the main verifier."""
from importlib.resources import files
from pathlib import Path


def fixture_path(*parts: str) -> Path:
    return Path(str(files(__name__).joinpath(*parts)))
