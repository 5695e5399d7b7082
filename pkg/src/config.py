"""
Configuration for Robust Lasso.

Resolution order: built-in dataclass defaults < YAML config file < flags.
The resolved tree is frozen and serialized into every output artifact.

Sections:
- synthetic: generator defaults (means, sigma, counts, box halfwidth, seed)
- plasso: rank tolerance, lambda_min_ratio, CV folds, IPOD iterations
- tdca: k neighbors, similarity, restart probability, walk tolerance, embedding
- classify: SVM regularization and solver pass limit
- bench: repeats, ratio grid, pipeline split
- logging: level and optional log file
"""

import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from src.errors import ConfigError

logger = logging.getLogger('RobustLasso.Config')

THREADS_ENV = 'ROBUST_LASSO_THREADS'


@dataclass(frozen=True)
class SyntheticSection:
    class_means: tuple = ((1.0, 1.0), (2.0, 2.0), (3.0, 3.0))
    class_std: float = 0.1
    per_class_count: int = 100
    outlier_count_per_class: int = 30
    outlier_box_halfwidth: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class PLassoSection:
    rank_tolerance: float = 1e-10
    lambda_min_ratio: float = 1e-6
    intercept: bool = True
    folds: int = 5
    cv_max_candidates: Optional[int] = 40
    ipod_max_iter: int = 100


@dataclass(frozen=True)
class TDCASection:
    k_neighbors: int = 10
    similarity: str = 'inner'
    normalize: bool = True
    restart_prob: float = 0.5
    walk_tol: float = 1e-10
    walk_max_iter: int = 10000
    dim: int = 8
    init_std: float = 0.1
    lbfgs_memory: int = 10
    lbfgs_gtol: float = 1e-6
    lbfgs_max_iter: int = 500
    truncate_above: int = 10000
    truncate_threshold: float = 1e-6
    seed: int = 0


@dataclass(frozen=True)
class ClassifySection:
    reg_c: float = 1.0
    max_iter: int = 1000
    seed: int = 0


@dataclass(frozen=True)
class BenchSection:
    repeats: int = 10
    ratios: tuple = (0.1, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5)
    test_fraction: float = 0.3
    seed: int = 0


@dataclass(frozen=True)
class LoggingSection:
    level: str = 'INFO'
    file: Optional[str] = None


@dataclass(frozen=True)
class RobustLassoConfig:
    """Fully resolved configuration tree."""
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    plasso: PLassoSection = field(default_factory=PLassoSection)
    tdca: TDCASection = field(default_factory=TDCASection)
    classify: ClassifySection = field(default_factory=ClassifySection)
    bench: BenchSection = field(default_factory=BenchSection)
    logging: LoggingSection = field(default_factory=LoggingSection)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def with_section(self, name: str, **overrides) -> 'RobustLassoConfig':
        """Return a copy with some keys of one section replaced (flag layer)."""
        overrides = {k: v for k, v in overrides.items() if v is not None}
        if not overrides:
            return self
        section = getattr(self, name)
        return replace(self, **{name: _build_section(type(section), name, overrides, base=section)})


SECTIONS = {f.name: f.default_factory for f in fields(RobustLassoConfig)}


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _coerce(name: str, default, value):
    """Coerce a YAML value to the type of the section default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _build_section(cls, section_name: str, values: dict, base=None):
    base = base if base is not None else cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section_name}]: {', '.join(unknown)}")
    resolved = {}
    for key, value in values.items():
        default = getattr(base, key)
        if value is None or default is None:
            resolved[key] = value
        else:
            resolved[key] = _coerce(f"{section_name}.{key}", default, value)
    return replace(base, **resolved)


def validate_config(cfg: RobustLassoConfig) -> RobustLassoConfig:
    """Range checks that do not depend on data."""
    t, p, c, b = cfg.tdca, cfg.plasso, cfg.classify, cfg.bench
    if t.k_neighbors < 1:
        raise ConfigError(f"tdca.k_neighbors must be >= 1, got {t.k_neighbors}")
    if t.similarity not in ('inner', 'heat'):
        raise ConfigError(f"tdca.similarity must be 'inner' or 'heat', got {t.similarity!r}")
    if not 0 < t.restart_prob <= 1:
        raise ConfigError(f"tdca.restart_prob must be in (0, 1], got {t.restart_prob}")
    if t.dim < 1:
        raise ConfigError(f"tdca.dim must be >= 1, got {t.dim}")
    if p.folds < 2:
        raise ConfigError(f"plasso.folds must be >= 2, got {p.folds}")
    if not 0 < p.lambda_min_ratio < 1:
        raise ConfigError(f"plasso.lambda_min_ratio must be in (0, 1), got {p.lambda_min_ratio}")
    if c.reg_c <= 0:
        raise ConfigError("regularization must be positive")
    if c.max_iter < 1:
        raise ConfigError(f"classify.max_iter must be >= 1, got {c.max_iter}")
    if b.repeats < 1:
        raise ConfigError(f"bench.repeats must be >= 1, got {b.repeats}")
    if not 0 < b.test_fraction < 1:
        raise ConfigError(f"bench.test_fraction must be in (0, 1), got {b.test_fraction}")
    if cfg.logging.level.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR'):
        raise ConfigError(f"logging.level: unknown level {cfg.logging.level!r}")
    return cfg


def load_config(path=None) -> RobustLassoConfig:
    """
    Load the configuration tree.

    Args:
        path: YAML file; None returns the built-in defaults

    Raises:
        ConfigError: unreadable file, unknown section/key or bad value type
    """
    if path is None:
        return validate_config(RobustLassoConfig())

    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")

    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")

    sections = {}
    for name, factory in SECTIONS.items():
        values = raw.get(name) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"section [{name}] must be a mapping")
        sections[name] = _build_section(type(factory()), name, values)

    logger.debug(f"Loaded config from {path}")
    return validate_config(RobustLassoConfig(**sections))


def thread_limit(default: Optional[int] = None) -> int:
    """Worker thread cap from ROBUST_LASSO_THREADS (falls back to the CPU count)."""
    value = os.environ.get(THREADS_ENV)
    if value is None or value.strip() == '':
        return default or os.cpu_count() or 1
    try:
        threads = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    return threads
