"""Run configuration: plain-text sections of key = value lines.

Sections: [model] (coefficients, definitions, scaling), [grid]
(torus resolution, x-lattice), [mc] (epsilon, sample counts, seeds),
[functional] (the path functional h), [output].  Keys outside [model]
are validated against a fixed vocabulary; inside [model] unreserved keys
define named constants/expressions.  Values keep their raw string form;
consumers parse numbers as needed.  Command-line flags override config
keys, and every override is echoed in the JSON provenance block.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

_SECTION_KEYS = {
    "grid": {"n", "x_lattice", "scheme"},
    "mc": {"eps", "eps_ladder", "n", "dt", "seed", "window", "T", "threads",
           "zmax", "knots"},
    "functional": {"kind", "expr", "center", "width", "height"},
    "output": {"dir"},
}

KNOWN_SECTIONS = {"model"} | set(_SECTION_KEYS)


def parse_config_text(text, origin="<config>"):
    """Parse sections-of-key=value text into {section: {key: value}}."""
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in KNOWN_SECTIONS:
                raise ConfigError(f"{origin}:{lineno}: unknown section [{name}]")
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', "
                              f"got {line!r}")
        if current is None:
            raise ConfigError(f"{origin}:{lineno}: key outside any section")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if value.startswith('"') and value.endswith('"') and len(value) >= 2:
            value = value[1:-1]
        sect_name = [k for k, v in sections.items() if v is current][0]
        if sect_name != "model" and key not in _SECTION_KEYS[sect_name]:
            raise ConfigError(
                f"{origin}:{lineno}: unknown key {key!r} in [{sect_name}] "
                f"(known: {sorted(_SECTION_KEYS[sect_name])})")
        if key in current:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        current[key] = value
    return sections


def load_config(path):
    with open(path) as fh:
        return parse_config_text(fh.read(), origin=str(path))


def parse_lattice(text):
    """Either 'lo:hi:count' or a comma-separated list of values."""
    text = str(text).strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"x_lattice range must be lo:hi:count, got {text!r}")
        lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
        if count < 1 or hi < lo:
            raise ConfigError(f"bad lattice range {text!r}")
        return np.linspace(lo, hi, count)
    try:
        return np.array([float(p) for p in text.split(",") if p.strip()])
    except ValueError:
        raise ConfigError(f"cannot parse lattice {text!r}") from None


@dataclass
class RunConfig:
    """Typed view over the parsed sections, with defaults."""

    model: dict
    grid_n: int = 256
    x_lattice: np.ndarray = None
    scheme: str = "spectral"
    eps: float = 0.25
    eps_ladder: list = None
    n: int = 10000
    dt: float = None            # None = auto (delta^2/10)
    seed: int = 0
    window: float = None        # None = auto (sqrt(eps))
    T: float = 1.0
    threads: int = 1
    zmax: float = 12.0
    knots: int = 64
    functional: dict = field(default_factory=dict)
    out_dir: str = "out"
    overrides: dict = field(default_factory=dict)

    @classmethod
    def from_sections(cls, sections, overrides=None):
        if "model" not in sections:
            raise ConfigError("config needs a [model] section")
        cfg = cls(model=dict(sections["model"]))
        grid = sections.get("grid", {})
        if "n" in grid:
            cfg.grid_n = int(grid["n"])
        if "x_lattice" in grid:
            cfg.x_lattice = parse_lattice(grid["x_lattice"])
        if "scheme" in grid:
            if grid["scheme"] not in ("fd2", "spectral"):
                raise ConfigError(f"unknown scheme {grid['scheme']!r}")
            cfg.scheme = grid["scheme"]
        mcs = sections.get("mc", {})
        try:
            if "eps" in mcs:
                cfg.eps = float(mcs["eps"])
            if "eps_ladder" in mcs:
                cfg.eps_ladder = [float(v) for v in mcs["eps_ladder"].split(",")]
            if "n" in mcs:
                cfg.n = int(mcs["n"])
            if "dt" in mcs and mcs["dt"] != "auto":
                cfg.dt = float(mcs["dt"])
            if "seed" in mcs:
                cfg.seed = int(mcs["seed"])
            if "window" in mcs and mcs["window"] != "auto":
                cfg.window = float(mcs["window"])
            if "T" in mcs:
                cfg.T = float(mcs["T"])
            if "threads" in mcs:
                cfg.threads = int(mcs["threads"])
            if "zmax" in mcs:
                cfg.zmax = float(mcs["zmax"])
            if "knots" in mcs:
                cfg.knots = int(mcs["knots"])
        except ValueError as e:
            raise ConfigError(f"bad [mc] value: {e}") from None
        cfg.functional = dict(sections.get("functional", {}))
        cfg.out_dir = sections.get("output", {}).get("dir", "out")
        for key, value in (overrides or {}).items():
            if value is not None:
                setattr(cfg, key, value)
                cfg.overrides[key] = value if not isinstance(value, np.ndarray) \
                    else value.tolist()
        return cfg

    def build_functional(self, d=1):
        from . import mc as mc_mod
        kind = self.functional.get("kind", "terminal")
        if kind == "terminal":
            if "expr" not in self.functional:
                raise ConfigError("[functional] kind=terminal needs expr")
            return mc_mod.TerminalCost(self.functional["expr"], d=d)
        if kind == "running":
            if "expr" not in self.functional:
                raise ConfigError("[functional] kind=running needs expr")
            return mc_mod.RunningCost(self.functional["expr"], d=d)
        if kind == "smoothed_indicator":
            try:
                center = float(self.functional.get("center", 0.0))
                width = float(self.functional.get("width", 0.25))
                height = float(self.functional.get("height", 1.0))
            except ValueError as e:
                raise ConfigError(f"bad [functional] value: {e}") from None
            return mc_mod.SmoothedIndicator(center, width, height, d=d)
        raise ConfigError(f"unknown functional kind {kind!r}")
