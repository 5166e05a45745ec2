"""Flat ``key = value`` pipeline configuration with dotted keys.

Blank lines and lines starting with ``#`` are ignored. Relative paths are
resolved against the directory of the config file. Values are typed after the
built-in defaults; ``eval.thresholds`` is a comma-separated list.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

DEFAULTS: dict[str, Any] = {
    "paths.train": "",
    "paths.test": "",
    "paths.ground_truth": "",
    "paths.output": "out",
    "pca.n_components": 20,
    "knn.k": 9,
    "hgcn.classes": 64,
    "hgcn.hidden": 32,
    "hgcn.epochs": 200,
    "hgcn.lr": 1.0,
    "hgcn.weight_decay": 5e-4,
    "hgcn.seed": 0,
    "cltree.eps": 0.0,  # 0 selects 1 / (2 * n_training_images)
    "detector.p_z_given_e": 0.39,
    "detector.p_z_given_not_e": 0.0,
    "fabmap.match_threshold": 0.999,
    "fabmap.new_place_prior": 0.1,
    "fabmap.motion": "uniform",
    "fabmap.sigma": 0.0,
    "eval.thresholds": tuple(round(0.05 * i, 2) for i in range(20)) + (0.99, 0.999),
}

PATH_KEYS = ("paths.train", "paths.test", "paths.ground_truth", "paths.output")


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str) -> Any:
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw


@dataclass(frozen=True)
class PipelineConfig:
    values: Mapping[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def path(self, key: str) -> Path:
        value = self.values[key]
        if not value:
            raise ConfigError(f"{key} is not set")
        return Path(value)

    @property
    def output_dir(self) -> Path:
        return self.path("paths.output")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]], base_dir: Path | None = None) -> "PipelineConfig":
        values = dict(DEFAULTS)
        for key, raw in pairs:
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw)
        if base_dir is not None:
            for key in PATH_KEYS:
                if values[key] and not Path(values[key]).is_absolute():
                    values[key] = str(base_dir / values[key])
        cfg = cls(values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        v = self.values
        checks = [
            (v["pca.n_components"] >= 1, "pca.n_components must be >= 1"),
            (v["knn.k"] >= 1, "knn.k must be >= 1"),
            (v["hgcn.classes"] >= 1, "hgcn.classes must be >= 1"),
            (v["hgcn.hidden"] >= 1, "hgcn.hidden must be >= 1"),
            (v["hgcn.epochs"] >= 0, "hgcn.epochs must be >= 0"),
            (v["hgcn.lr"] > 0, "hgcn.lr must be > 0"),
            (0 <= v["cltree.eps"] < 0.5, "cltree.eps must lie in [0, 0.5)"),
            (v["fabmap.motion"] in ("uniform", "neighbor"), "fabmap.motion must be uniform or neighbor"),
            (0 <= v["fabmap.sigma"] <= 0.5, "fabmap.sigma must lie in [0, 0.5]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


def parse_lines(lines: Iterable[str], source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> PipelineConfig:
    pairs: list[tuple[str, str]] = []
    base = None
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        pairs = parse_lines(text.splitlines(), str(path))
        base = path.parent
    pairs += parse_lines(overrides, "--set")
    return PipelineConfig.from_pairs(pairs, base)


def dump_config(values: Mapping[str, Any]) -> str:
    lines = []
    for key in DEFAULTS:
        if key not in values:
            continue
        v = values[key]
        lines.append(f"{key} = {','.join(repr(float(x)) for x in v) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"
