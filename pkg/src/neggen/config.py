"""Pipeline configuration: TOML file plus environment overrides for endpoints and secrets."""
from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from neggen import backends
from neggen.negimage import FilterConfig
from neggen.negtext import STRATEGIES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    path: str = "samples.jsonl"
    image_root: str = ""  # empty: directory of the dataset file
    substitutions: str = "substitutions.json"
    seed_pairs: str = "seed_pairs.jsonl"
    seed_triplets: str = "seed_triplets.jsonl"


@dataclass(frozen=True)
class TextConfig:
    strategies: tuple[str, ...] = STRATEGIES
    temperature: float = 0.7
    max_tokens: int = 512
    retries: int = 3
    llm_foil_count: int = 2
    recombination_count: int = 10
    incontext_k: int = 3
    incontext_count: int = 2
    incontext_pool: int = 20  # free-form pairs generated from the summary
    triplet_stage_size: int = 20
    triplet_per_call: int = 20
    echo_rate: float = 0.0  # mock only


@dataclass(frozen=True)
class AssemblyConfig:
    k: int = 3
    separator: str = ". "
    options: tuple[str, ...] = ("text", "generated", "pair")


@dataclass(frozen=True)
class BackendConfig:
    text_url: str = ""
    image_url: str = ""
    scorer_url: str = ""
    image_mode: str = "local"
    timeout: float = 120.0


@dataclass(frozen=True)
class PipelineConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    text: TextConfig = field(default_factory=TextConfig)
    filters: FilterConfig = field(default_factory=FilterConfig)
    assembly: AssemblyConfig = field(default_factory=AssemblyConfig)
    backends: BackendConfig = field(default_factory=BackendConfig)
    seed: int = 0
    out: str = "out"
    cache: str = ".neggen-cache"
    max_inflight: int = 4
    base_dir: str = "."  # relative paths in the file resolve against this

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def dataset_path(self) -> Path:
        return self.resolve(self.dataset.path)

    @property
    def image_root(self) -> Path:
        return self.resolve(self.dataset.image_root) if self.dataset.image_root else self.dataset_path.parent

    def section(self, name: str) -> dict:
        """Plain-dict view of one section, used for cache keys."""
        return asdict(getattr(self, name))


_SECTIONS = {"dataset": DatasetConfig, "text": TextConfig, "filters": FilterConfig,
             "assembly": AssemblyConfig, "backends": BackendConfig}
_FILTER_KEYS = {"box": "box_threshold", "image": "image_threshold", "region": "region_threshold",
                "crop": "crop_factor", "skip_region": "skip_region"}
_TOP = {"seed": int, "out": str, "cache": str, "max_inflight": int}


def _build(cls, table: dict, section: str):
    if section == "filters":
        table = {_FILTER_KEYS.get(k, k): v for k, v in table.items()}
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in table.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def config_from_dict(data: dict, base_dir: str = ".") -> PipelineConfig:
    kw: dict = {"base_dir": str(base_dir)}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            kw[key] = _build(_SECTIONS[key], value, key)
        elif key in _TOP:
            if not isinstance(value, _TOP[key]) or isinstance(value, bool):
                raise ConfigError(f"{key} must be {_TOP[key].__name__}")
            kw[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return PipelineConfig(**kw)


def apply_env(cfg: PipelineConfig, env=None) -> PipelineConfig:
    env = os.environ if env is None else env
    b = cfg.backends
    b = replace(b, text_url=env.get(backends.TEXT_URL_ENV) or b.text_url,
                image_url=env.get(backends.IMAGE_URL_ENV) or b.image_url,
                scorer_url=env.get(backends.SCORER_URL_ENV) or b.scorer_url)
    return replace(cfg, backends=b)


def load_config(path=None, env=None) -> PipelineConfig:
    if path is None:
        return apply_env(PipelineConfig(), env)
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return apply_env(config_from_dict(data, str(path.parent)), env)


def validate_config(cfg: PipelineConfig, *, check_files: bool = True) -> list[str]:
    """Problems with ``cfg``; an empty list means valid."""
    problems = []
    bad = [s for s in cfg.text.strategies if s not in STRATEGIES]
    if bad:
        problems.append(f"unknown strategies {bad}; valid: {', '.join(STRATEGIES)}")
    if cfg.assembly.k < 1:
        problems.append("assembly.k must be >= 1")
    bad_opts = [o for o in cfg.assembly.options if o not in AssemblyConfig.options]
    if bad_opts:
        problems.append(f"unknown assembly options {bad_opts}")
    if cfg.text.retries < 0:
        problems.append("text.retries must be >= 0")
    if not 0 <= cfg.text.echo_rate <= 1:
        problems.append("text.echo_rate must be in [0, 1]")
    if cfg.max_inflight < 1:
        problems.append("max_inflight must be >= 1")
    if cfg.backends.image_mode not in ("local", "remote"):
        problems.append("backends.image_mode must be 'local' or 'remote'")
    if check_files:
        ds = cfg.dataset
        for name, value in (("dataset.path", ds.path), ("dataset.substitutions", ds.substitutions)):
            if not cfg.resolve(value).is_file():
                problems.append(f"{name} not found: {cfg.resolve(value)}")
        for name, value, strategy in (("dataset.seed_pairs", ds.seed_pairs, "incontext_summary"),
                                      ("dataset.seed_triplets", ds.seed_triplets, None)):
            if (strategy is None or strategy in cfg.text.strategies) and value and not cfg.resolve(value).is_file():
                problems.append(f"{name} not found: {cfg.resolve(value)}")
    return problems
