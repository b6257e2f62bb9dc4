"""JSON schemas for the files written by the command line tools."""
import json
from importlib import resources

NAMES = ("scale", "fit", "simulate", "study_config", "study_record")


def load_schema(name: str) -> dict:
    if name not in NAMES:
        raise KeyError(f"unknown schema {name!r}; known: {NAMES}")
    return json.loads(resources.files(__name__).joinpath(f"{name}.schema.json").read_text())
