"""TOML run configuration."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .pipeline import Ablation, Caps, CategorySpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "scripted"
    script: Path | None = None
    model: str = "gpt-4o"
    base_url: str | None = None
    concurrency: int = 4
    temperature: float = 0.2
    seed: int | None = 0


@dataclass(frozen=True)
class DataConfig:
    mode: str = "fixture"
    ndc: Path | None = None
    labels: Path | None = None
    prescriptions: Path | None = None
    cache_dir: Path | None = None
    index: Path | None = None


@dataclass(frozen=True)
class RunConfig:
    source: Path
    categories: tuple[CategorySpec, ...]
    outcomes: tuple[str, ...]
    backend: BackendConfig = field(default_factory=BackendConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: Ablation = field(default_factory=Ablation)
    caps: Caps = field(default_factory=Caps)
    output_dir: Path = Path("malade-out")

    def validate(self) -> RunConfig:
        where = str(self.source)
        if self.backend.kind not in ("scripted", "live"):
            raise ConfigError(f"{where}: backend.kind must be 'scripted' or 'live'")
        if self.backend.kind == "scripted":
            if self.backend.script is None:
                raise ConfigError(f"{where}: a scripted backend needs backend.script")
            if not self.backend.script.is_file():
                raise ConfigError(f"{where}: script file not found: {self.backend.script}")
        if self.data.mode not in ("fixture", "live"):
            raise ConfigError(f"{where}: data.mode must be 'fixture' or 'live'")
        if self.data.mode == "fixture":
            for key in ("ndc", "labels"):
                if getattr(self.data, key) is None:
                    raise ConfigError(f"{where}: fixture mode needs data.{key}")
        if self.data.prescriptions is None:
            raise ConfigError(f"{where}: data.prescriptions is required")
        if not self.categories:
            raise ConfigError(f"{where}: no [[categories]] declared")
        if not self.outcomes:
            raise ConfigError(f"{where}: no outcomes declared")
        names = [c.name for c in self.categories]
        if len(set(names)) != len(names):
            raise ConfigError(f"{where}: duplicate category names")
        return self


def _path(base: Path, value: Any) -> Path | None:
    if value is None:
        return None
    p = Path(str(value)).expanduser()
    return p if p.is_absolute() else base / p


def _category(raw: dict[str, Any], where: str) -> CategorySpec:
    try:
        subs = tuple(_category(s, where) for s in raw.get("subcategories", []))
        return CategorySpec(
            name=str(raw["name"]),
            search_terms=tuple(raw.get("search_terms", ())),
            display=str(raw.get("display", "")),
            subcategories=subs,
        )
    except KeyError as exc:
        raise ConfigError(f"{where}: category is missing {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _section(doc: dict[str, Any], name: str, known: set[str], where: str) -> dict[str, Any]:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"{where}: [{name}] must be a table")
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    return sec


def load_config(path: str | Path, *, validate: bool = True) -> RunConfig:
    """Parse a config file; relative paths resolve against its directory."""
    path = Path(path)
    where = str(path)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{where}: file not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    base = path.parent.resolve()

    b = _section(doc, "backend", {"kind", "script", "model", "base_url", "concurrency", "temperature", "seed"}, where)
    d = _section(doc, "data", {"mode", "ndc", "labels", "prescriptions", "cache_dir", "index"}, where)
    a = _section(doc, "ablation", {"critics", "rag"}, where)
    c = _section(doc, "caps", {"max_steps", "critic_rounds", "parallelism", "representatives"}, where)

    try:
        backend = BackendConfig(
            kind=b.get("kind", "scripted"),
            script=_path(base, b.get("script")),
            model=b.get("model", "gpt-4o"),
            base_url=b.get("base_url"),
            concurrency=int(b.get("concurrency", 4)),
            temperature=float(b.get("temperature", 0.2)),
            seed=b.get("seed", 0),
        )
        data = DataConfig(
            mode=d.get("mode", "fixture"),
            ndc=_path(base, d.get("ndc")),
            labels=_path(base, d.get("labels")),
            prescriptions=_path(base, d.get("prescriptions")),
            cache_dir=_path(base, d.get("cache_dir")),
            index=_path(base, d.get("index")),
        )
        rounds = c.get("critic_rounds", 5)
        caps = Caps(
            max_steps=int(c.get("max_steps", 64)),
            critic_rounds=None if rounds in (0, None) else int(rounds),
            parallelism=int(c.get("parallelism", 4)),
            representatives=int(c.get("representatives", 3)),
        )
        ablation = Ablation(critics=bool(a.get("critics", True)), rag=bool(a.get("rag", True)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None

    cats = doc.get("categories", [])
    if not isinstance(cats, list):
        raise ConfigError(f"{where}: categories must be an array of tables")
    outcomes = doc.get("outcomes", [])
    if not isinstance(outcomes, list) or not all(isinstance(o, str) and o.strip() for o in outcomes):
        raise ConfigError(f"{where}: outcomes must be a list of non-empty strings")
    out = _path(base, doc.get("output_dir")) or Path("malade-out")
    cfg = RunConfig(
        source=path,
        categories=tuple(_category(x, where) for x in cats),
        outcomes=tuple(outcomes),
        backend=backend,
        data=data,
        ablation=ablation,
        caps=caps,
        output_dir=out,
    )
    return cfg.validate() if validate else cfg


def with_overrides(cfg: RunConfig, **kw: Any) -> RunConfig:
    """Apply command-line overrides; ``None`` values leave the config untouched."""
    caps = cfg.caps
    for key in ("max_steps", "critic_rounds", "parallelism"):
        if kw.get(key) is not None:
            caps = replace(caps, **{key: kw[key]})
    ablation = cfg.ablation
    if kw.get("no_critics"):
        ablation = replace(ablation, critics=False)
    if kw.get("no_rag"):
        ablation = replace(ablation, rag=False)
    backend = cfg.backend
    if kw.get("script") is not None:
        backend = replace(backend, script=Path(kw["script"]), kind="scripted")
    out = Path(kw["output_dir"]) if kw.get("output_dir") is not None else cfg.output_dir
    return replace(cfg, caps=caps, ablation=ablation, backend=backend, output_dir=out).validate()
