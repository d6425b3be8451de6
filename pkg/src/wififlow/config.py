"""Pipeline configuration: defaults, flat ``key = value`` files and overrides."""
from __future__ import annotations

import datetime as dt
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .cluster import INIT_METHODS
from .bylocation import HAC_INPUTS


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    # paths
    input: str = ""
    registry: str = ""
    calendar: str = ""
    out: str = "out"
    scenario: str = ""
    # seeds and parallelism
    seed: Optional[int] = None
    threads: int = 1
    restarts: int = 20
    kmeans_init: str = "k-means++"
    # ingest and preprocessing
    pre_coalesced: bool = False
    tz_offset: int = 0
    coalesce_gap: int = 180
    merge_threshold: int = 21600
    min_span: int = 300
    max_stay: int = 57600
    # perspectives
    time_k: int = 4
    person_k: int = 8
    time_buildings: str = "all"
    time_elbow_kmax: int = 10
    person_elbow_kmax: int = 0
    silhouette_sample: int = 2000
    curve_buildings: str = "Mall"
    dominant_threshold: float = 0.55
    windows: str = "Morning=6-10,Midday=11-14,Evening=18-22"
    hac_input: str = "dissimilarity"
    cut_fraction: float = 0.75
    # synthetic data
    devices: int = 5000
    days: int = 28
    start_date: str = "2024-01-01"
    ph_days: str = "10,24"

    # keys that tune speed only and never change an artifact
    RUNTIME_ONLY = ("threads",)

    @staticmethod
    def key_of(name: str) -> str:
        return name.replace("_", "-")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def set(self, key: str, raw) -> None:
        name = key.strip().replace("-", "_")
        ftypes = {f.name: f.type for f in fields(self)}
        if name not in ftypes:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(self, name, _coerce(name, ftypes[name], raw))

    def validate(self) -> "PipelineConfig":
        positive = ("threads", "restarts", "coalesce_gap", "merge_threshold", "min_span", "max_stay",
                    "time_k", "person_k", "devices", "days", "silhouette_sample")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{self.key_of(name)} must be positive")
        if not 0 < self.dominant_threshold < 1:
            raise ConfigError("dominant-threshold must lie in (0, 1)")
        if not 0 < self.cut_fraction <= 1:
            raise ConfigError("cut-fraction must lie in (0, 1]")
        if self.hac_input not in HAC_INPUTS:
            raise ConfigError(f"hac-input must be one of {HAC_INPUTS}")
        if self.kmeans_init not in INIT_METHODS:
            raise ConfigError(f"kmeans-init must be one of {INIT_METHODS}")
        self.window_table()
        self.ph_day_list()
        try:
            dt.date.fromisoformat(self.start_date)
        except ValueError:
            raise ConfigError(f"bad start-date {self.start_date!r}") from None
        return self

    def window_table(self) -> dict[str, tuple[int, int]]:
        out = {}
        try:
            for part in self.windows.split(","):
                name, span = part.split("=")
                lo, hi = (int(x) for x in span.split("-"))
                if not 0 <= lo < hi <= 24:
                    raise ValueError
                out[name.strip()] = (lo, hi)
        except ValueError:
            raise ConfigError(f"bad windows {self.windows!r}; expected Name=from-to,...") from None
        if not out:
            raise ConfigError("no windows configured")
        return out

    def ph_day_list(self) -> list[int]:
        try:
            return [int(x) for x in self.ph_days.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"bad ph-days {self.ph_days!r}") from None

    def as_dict(self) -> dict:
        return {self.key_of(f.name): getattr(self, f.name) for f in fields(self)}

    def digest(self) -> str:
        """Hash of every setting that can influence an artifact."""
        d = {k: v for k, v in self.as_dict().items() if k not in self.RUNTIME_ONLY}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _coerce(name: str, ftype, raw):
    if raw is None:
        return None
    t = str(ftype)
    text = str(raw).strip()
    try:
        if t in ("bool", "<class 'bool'>"):
            if isinstance(raw, bool):
                return raw
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if "int" in t:
            return int(text)
        if "float" in t:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {name.replace('_', '-')}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: Optional[Path] = None, overrides: Optional[dict] = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        for k, v in parse_config_text(Path(path).read_text(), str(path)).items():
            cfg.set(k, v)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg.set(k, v)
    return cfg.validate()
