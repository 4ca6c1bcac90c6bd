"""Run configuration: INI files with one section per command, overridable by flags."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields, replace

COMMANDS = ("estimate", "msm", "simulate")


class ConfigError(ValueError):
    pass


def _split(text: str, sep: str = ",") -> list[str]:
    return [t.strip() for t in text.split(sep) if t.strip()]


@dataclass(frozen=True)
class RunConfig:
    command: str = "estimate"
    # estimate
    data: str | None = None
    covariates: tuple[str, ...] = ()
    exposure: str = "a"
    outcome: str = "y"
    group: str | None = None
    q_formula: str = "y ~ 1 + a"
    g_formula: str = "a ~ 1"
    direct_effect: bool = True
    interventions: tuple[str, ...] = ()
    contrasts: tuple[tuple[str, str], ...] = ()
    kn: str = "identity"
    truncation: tuple[float, float] = (0.005, 0.995)
    ci_level: float = 0.95
    outcome_scale: str = "auto"
    method: str = "tmle"
    msm_formula: str | None = None
    msm_modifiers: tuple[str, ...] = ()
    # msm
    effects: str | None = None
    formula: str = "1 + k"
    weights: str = "invvar"
    # simulate
    regimes: tuple[str, ...] = ("correct_both",)
    ns: tuple[int, ...] = (500,)
    betas: tuple[float, ...] = (1.0,)
    estimands: tuple[str, ...] = ("direct", "oers")
    replicates: int = 5000
    seed: int = 20240101
    workers: int | None = None
    # shared
    output: str | None = None

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.method not in ("tmle", "aipw"):
            raise ConfigError(f"method must be 'tmle' or 'aipw', got {self.method!r}")
        if self.weights not in ("invvar", "uniform"):
            raise ConfigError(f"weights must be 'invvar' or 'uniform', got {self.weights!r}")

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "contrasts":
                v = [list(c) for c in v]
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, record: dict) -> "RunConfig":
        """Inverse of ``to_dict``, e.g. to rerun from the config embedded in an output file."""
        kwargs = {}
        for f in fields(cls):
            if f.name not in record:
                continue
            v = record[f.name]
            if f.name == "contrasts":
                v = tuple(tuple(c) for c in v)
            elif isinstance(v, list):
                v = tuple(v)
            kwargs[f.name] = v
        return cls(**kwargs)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        section = {}
        for f in fields(self):
            if f.name == "command":
                continue
            v = getattr(self, f.name)
            if v is None:
                continue
            section[f.name] = _format(f.name, v)
        cp[self.command] = section
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, command: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from None
        values = dict(cp[command]) if cp.has_section(command) else {}
        return cls.from_mapping(command, values)

    @classmethod
    def from_mapping(cls, command: str, values: dict[str, str]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {"command": command}
        for key, raw in values.items():
            if key not in known or key == "command":
                raise ConfigError(f"unknown config key {key!r} in section [{command}]")
            kwargs[key] = _parse(key, raw)
        return cls(**kwargs)

    def override(self, **flags) -> "RunConfig":
        """Apply command-line values (strings or already-typed) over file values."""
        changes = {}
        for k, v in flags.items():
            if v is None:
                continue
            changes[k] = _parse(k, v) if isinstance(v, str) else v
        return replace(self, **changes)


_TUPLE_STR = {"covariates", "interventions", "msm_modifiers", "regimes", "estimands"}
_TUPLE_INT = {"ns"}
_TUPLE_FLOAT = {"betas", "truncation"}
_INT = {"replicates", "seed", "workers"}
_FLOAT = {"ci_level"}
_BOOL = {"direct_effect"}


def _format(key: str, v) -> str:
    if key == "contrasts":
        return "; ".join(f"{a} vs {b}" for a, b in v)
    if key in _TUPLE_STR:
        return "; ".join(v) if key == "interventions" else ", ".join(v)
    if key in _TUPLE_INT | _TUPLE_FLOAT:
        return ", ".join(repr(x) for x in v)
    if key in _BOOL:
        return "true" if v else "false"
    return str(v)


def _parse(key: str, raw: str):
    raw = raw.strip()
    try:
        if key == "contrasts":
            pairs = []
            for item in _split(raw, ";"):
                a, sep, b = item.partition(" vs ")
                if not sep:
                    raise ConfigError(f"contrast {item!r} must read '<rule> vs <rule>'")
                pairs.append((a.strip(), b.strip()))
            return tuple(pairs)
        if key == "interventions":
            return tuple(_split(raw, ";"))
        if key in _TUPLE_STR:
            return tuple(_split(raw))
        if key in _TUPLE_INT:
            return tuple(int(x) for x in _split(raw))
        if key in _TUPLE_FLOAT:
            out = tuple(float(x) for x in _split(raw))
            if key == "truncation" and len(out) != 2:
                raise ConfigError("truncation needs two values 'lo, hi'")
            return out
        if key in _INT:
            return int(raw)
        if key in _FLOAT:
            return float(raw)
        if key in _BOOL:
            if raw.lower() not in ("true", "false", "yes", "no", "1", "0"):
                raise ConfigError(f"{key} must be true or false, got {raw!r}")
            return raw.lower() in ("true", "yes", "1")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw or None
