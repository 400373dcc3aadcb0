from __future__ import annotations

import os
import re
from pathlib import Path
from typing import Annotated

from pydantic import BeforeValidator

PROJECT_FOLDER = Path(__file__).resolve().parent.parent.parent

NS_PER_SEC = 1_000_000_000

RATE_UNITS = {"": 1, "k": 10**3, "m": 10**6, "g": 10**9, "t": 10**12}
SIZE_UNITS = {"": 1, "k": 10**3, "m": 10**6, "g": 10**9}
TIME_UNITS = {"ns": 1, "us": 10**3, "ms": 10**6, "s": 10**9}

_RATE_RE = re.compile(r"^\s*([\d.]+)\s*([kmgt]?)(?:bps|b/s)?\s*$", re.I)
_SIZE_RE = re.compile(r"^\s*([\d.]+)\s*([kmg]?)(?:b|bytes?)?\s*$", re.I)
_TIME_RE = re.compile(r"^\s*([\d.]+)\s*(ns|us|ms|s)?\s*$", re.I)


def _scaled(value: str, scale: int) -> int:
    if "." in value:
        whole, _, frac = value.partition(".")
        return int(whole or 0) * scale + int(frac) * scale // 10 ** len(frac)
    return int(value) * scale


def parse_rate(value: object) -> object:
    if isinstance(value, str):
        match = _RATE_RE.match(value)
        if not match:
            raise ValueError(f"cannot parse rate {value!r}")
        return _scaled(match[1], RATE_UNITS[match[2].lower()])
    return value


def parse_size(value: object) -> object:
    if isinstance(value, str):
        match = _SIZE_RE.match(value)
        if not match:
            raise ValueError(f"cannot parse size {value!r}")
        return _scaled(match[1], SIZE_UNITS[match[2].lower()])
    return value


def parse_duration(value: object) -> object:
    if isinstance(value, str):
        match = _TIME_RE.match(value)
        if not match:
            raise ValueError(f"cannot parse duration {value!r}")
        return _scaled(match[1], TIME_UNITS[(match[2] or "ns").lower()])
    return value


Rate = Annotated[int, BeforeValidator(parse_rate)]
Size = Annotated[int, BeforeValidator(parse_size)]
Duration = Annotated[int, BeforeValidator(parse_duration)]


class Registry:
    def __init__(self, project_folder: Path = PROJECT_FOLDER) -> None:
        self.project_folder = project_folder

        self.resources_folder: Path = project_folder / "resources"
        self.scenarios_folder = self.resources_folder / "scenarios"
        self.cdf_folder = self.resources_folder / "cdf"
        self.default_cdf = self.cdf_folder / "websearch_synthetic.tsv"

        self.log_folder = project_folder / "logs"
        self.output_root = Path(
            os.environ.get("TMSIM_OUTPUT_ROOT", project_folder / "runs")
        )

    def scenario_files(self) -> list[Path]:
        return sorted(self.scenarios_folder.glob("*.json"))

    def find_scenario(self, name_or_path: str) -> Path:
        path = Path(name_or_path)
        if path.exists():
            return path
        candidate = self.scenarios_folder / f"{name_or_path}.json"
        if candidate.exists():
            return candidate
        raise FileNotFoundError(f"scenario {name_or_path!r} not found")

    def resolve_resource(self, relative: str) -> Path:
        path = Path(relative)
        if path.is_absolute() or path.exists():
            return path
        return self.project_folder / path
