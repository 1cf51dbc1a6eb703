"""Layered configuration: TOML-style file with [pipeline], [backends] and [paths] sections, then flag overrides.

Relative paths in a config file resolve against the file's directory;
relative paths given as flags resolve against the working directory.
Shipped presets (``egoschema.defaults`` etc.) are found by name.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from keytree.backends import BackendConfig
from keytree.errors import ConfigError
from keytree.pipeline import PipelineConfig

PRESET_DIR = Path(__file__).parent / "presets"
DEMO_DIR = Path(__file__).parent / "demo"
DEMO_CONFIG = DEMO_DIR / "demo.toml"

_PIPELINE_KEYS = {f.name for f in fields(PipelineConfig)}
_BACKEND_ALIASES = {"llm": "llm_endpoint", "model": "model_name"}
_BACKEND_KEYS = {f.name for f in fields(BackendConfig)}
_PATH_KEYS = {"asset_dir", "dataset", "examples", "out_dir"}


@dataclass
class CliConfig:
    pipeline: PipelineConfig
    backends: BackendConfig
    paths: dict[str, Path] = field(default_factory=dict)
    # the backend specs with file paths made absolute, used to build backends
    resolved_backends: BackendConfig | None = None
    source: str | None = None

    def echo(self) -> dict:
        """Effective configuration as written into run records (paths as the user gave them)."""
        return {"pipeline": self.pipeline.to_dict(), "backends": self.backends.to_dict()}


def available_presets() -> list[str]:
    return sorted(p.name for p in PRESET_DIR.glob("*.defaults"))


def resolve_config_path(name: str) -> Path:
    p = Path(name)
    if p.is_file():
        return p
    for cand in (PRESET_DIR / name, PRESET_DIR / f"{name}.defaults"):
        if cand.is_file():
            return cand
    raise ConfigError(f"config file {name!r} not found (presets: {', '.join(available_presets())})")


def read_config_file(path: Path) -> dict:
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror or e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config {path} is not valid TOML: {e}") from None
    unknown = set(data) - {"pipeline", "backends", "paths"}
    if unknown:
        raise ConfigError(f"unknown config section(s) {sorted(unknown)} in {path}")
    return data


def _absolutize_spec(spec: str, base: Path) -> str:
    for prefix in ("store:", "mock:"):
        if spec.startswith(prefix):
            rest = spec[len(prefix):]
            if prefix == "mock:" and rest.startswith("keyword"):
                return spec
            p = Path(rest or ".")
            return prefix + str(p if p.is_absolute() else (base / p).resolve())
    return spec


def build_config(
    config: str | None = None,
    pipeline_overrides: dict | None = None,
    backend_overrides: dict | None = None,
    path_overrides: dict | None = None,
) -> CliConfig:
    """Merge defaults < config file < overrides. Override values of ``None`` are ignored."""
    pipe: dict = {}
    back: dict = {}
    back_base: dict[str, Path] = {}
    paths: dict[str, Path] = {}
    source = None
    cwd = Path.cwd()
    if config:
        cfg_path = resolve_config_path(config)
        source = str(cfg_path)
        base = cfg_path.resolve().parent
        data = read_config_file(cfg_path)
        for key, val in data.get("pipeline", {}).items():
            if key not in _PIPELINE_KEYS:
                raise ConfigError(f"unknown [pipeline] key {key!r}")
            pipe[key] = val
        for key, val in data.get("backends", {}).items():
            key = _BACKEND_ALIASES.get(key, key)
            if key not in _BACKEND_KEYS:
                raise ConfigError(f"unknown [backends] key {key!r}")
            back[key] = val
            back_base[key] = base
        for key, val in data.get("paths", {}).items():
            if key not in _PATH_KEYS:
                raise ConfigError(f"unknown [paths] key {key!r}")
            paths[key] = (base / str(val)).resolve()
    for key, val in (pipeline_overrides or {}).items():
        if val is not None:
            pipe[key] = val
    for key, val in (backend_overrides or {}).items():
        if val is not None:
            back[_BACKEND_ALIASES.get(key, key)] = val
            back_base[_BACKEND_ALIASES.get(key, key)] = cwd
    for key, val in (path_overrides or {}).items():
        if val is not None:
            paths[key] = (cwd / str(val)).resolve()

    if "captioner" not in back and "asset_dir" in paths:
        back["captioner"] = f"store:{paths['asset_dir']}"
        back_base["captioner"] = cwd

    try:
        pipeline = PipelineConfig(**pipe)
        backends = BackendConfig(**back)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    resolved = dict(back)
    for key in ("llm_endpoint", "captioner"):
        if key in resolved:
            resolved[key] = _absolutize_spec(resolved[key], back_base[key])
    return CliConfig(pipeline, backends, paths, BackendConfig(**resolved), source)
