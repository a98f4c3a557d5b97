"""Pipeline configuration and its ``key = value`` text format.

Keys carry dotted section prefixes, e.g. ``solver.lambda = 0.75``. Lines
starting with ``#`` are comments. Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from . import phantom as phantom_mod
from .phantom import PhantomSpec, default_phantom
from .relaxfit import FitConfig
from .srrecon import SolverConfig

SWEEP_N_TE = (4, 5, 6, 8, 10, 18)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolSettings:
    n_te: int = 6
    te_min: float = 90.0
    te_max: float = 298.0
    te_list: tuple[float, ...] = ()  # overrides n_te/te_min/te_max when set
    in_plane_spacing: tuple[float, float] = (1.13, 1.13)
    slice_thickness: float = 3.0
    gap_fraction: float = 0.1
    slice_fwhm: float = 0.0  # 0 means equal to slice_thickness
    orientations: tuple[str, ...] = ("axial", "coronal", "sagittal")
    noise_sigma: float = 0.0
    kspace_truncation: float = 0.75
    first_echo_offset: float = 0.1
    n_offset_echoes: int = 1
    tr: float = 1200.0


@dataclass(frozen=True)
class AnalysisSettings:
    roi_margin: int = -1
    r_min: int = 0  # 0: derived from the phantom vial radius and voxel size
    r_max: int = 0
    n_expected: int = 3
    reference: str = "truth"  # truth | se | mese
    haste_orientation: str = "coronal"


@dataclass(frozen=True)
class PipelineConfig:
    phantom: PhantomSpec = field(default_factory=default_phantom)
    grid_dims: tuple[int, int, int] = (96, 96, 48)
    hr_spacing: float = 1.1
    supersample: int = 4
    protocol: ProtocolSettings = field(default_factory=ProtocolSettings)
    solver: SolverConfig = field(default_factory=SolverConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    reference_fit: FitConfig = field(default_factory=lambda: FitConfig(skip_first_n=0))
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)
    seeds: tuple[int, ...] = (0,)
    sweep_n_te: tuple[int, ...] = SWEEP_N_TE
    threads: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.analysis.reference not in ("truth", "se", "mese"):
            raise ConfigError(f"analysis.reference must be truth, se or mese, got {self.analysis.reference!r}")
        if self.analysis.roi_margin not in (-1, 0, 1):
            raise ConfigError("analysis.roi_margin must be -1, 0 or 1")
        if not 0 < self.protocol.kspace_truncation <= 1:
            raise ConfigError("protocol.kspace_truncation must lie in (0, 1]")
        self.fit.check_echo_count(len(self.te_list()))

    @property
    def repeats(self) -> int:
        return len(self.seeds)

    def te_list(self, n_te: int | None = None) -> list[float]:
        from .acquire import te_schedule

        p = self.protocol
        if n_te is None and p.te_list:
            return list(p.te_list)
        return te_schedule(n_te or p.n_te, p.te_min, p.te_max)

    def with_repeats(self, repeats: int, base_seed: int | None = None) -> "PipelineConfig":
        base = self.seeds[0] if base_seed is None else base_seed
        return replace(self, seeds=tuple(base + i for i in range(repeats)))


def _tuple(cast):
    return lambda raw: tuple(cast(x.strip()) for x in raw.split(",") if x.strip())


_ORIENT = _tuple(str)

# key -> (section attribute or None, field name, parser)
_KEYS = {
    "grid.dims": (None, "grid_dims", _tuple(int)),
    "grid.spacing": (None, "hr_spacing", float),
    "grid.supersample": (None, "supersample", int),
    "run.seeds": (None, "seeds", _tuple(int)),
    "run.sweep_n_te": (None, "sweep_n_te", _tuple(int)),
    "run.threads": (None, "threads", int),
    "protocol.n_te": ("protocol", "n_te", int),
    "protocol.te_min": ("protocol", "te_min", float),
    "protocol.te_max": ("protocol", "te_max", float),
    "protocol.te_list": ("protocol", "te_list", _tuple(float)),
    "protocol.in_plane_spacing": ("protocol", "in_plane_spacing", _tuple(float)),
    "protocol.slice_thickness": ("protocol", "slice_thickness", float),
    "protocol.gap_fraction": ("protocol", "gap_fraction", float),
    "protocol.slice_fwhm": ("protocol", "slice_fwhm", float),
    "protocol.orientations": ("protocol", "orientations", _ORIENT),
    "protocol.noise_sigma": ("protocol", "noise_sigma", float),
    "protocol.kspace_truncation": ("protocol", "kspace_truncation", float),
    "protocol.first_echo_offset": ("protocol", "first_echo_offset", float),
    "protocol.n_offset_echoes": ("protocol", "n_offset_echoes", int),
    "protocol.tr": ("protocol", "tr", float),
    "solver.lambda": ("solver", "lam", float),
    "solver.max_iters": ("solver", "max_iters", int),
    "solver.rel_tol": ("solver", "rel_tol", float),
    "solver.operator_norm_iters": ("solver", "operator_norm_iters", int),
    "solver.tv_epsilon": ("solver", "tv_epsilon", float),
    "fit.skip_first_n": ("fit", "skip_first_n", int),
    "fit.t2_bounds": ("fit", "t2_bounds", _tuple(float)),
    "fit.m0_bounds": ("fit", "m0_bounds", _tuple(float)),
    "fit.max_iters": ("fit", "max_iters", int),
    "fit.ftol": ("fit", "ftol", float),
    "fit.signal_floor": ("fit", "signal_floor", float),
    "analysis.roi_margin": ("analysis", "roi_margin", int),
    "analysis.r_min": ("analysis", "r_min", int),
    "analysis.r_max": ("analysis", "r_max", int),
    "analysis.n_expected": ("analysis", "n_expected", int),
    "analysis.reference": ("analysis", "reference", str),
    "analysis.haste_orientation": ("analysis", "haste_orientation", str),
}


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key = key.strip()
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        values[key] = raw.strip()
    return values


def from_values(values: dict[str, str], base: PipelineConfig | None = None) -> PipelineConfig:
    """Apply parsed ``key -> raw string`` pairs on top of ``base``."""
    base = base or PipelineConfig()
    top: dict = {}
    sections: dict[str, dict] = {}
    phantom_values = {}
    for key, raw in values.items():
        if key.startswith("phantom."):
            phantom_values[key] = raw
            continue
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        section, name, parse = _KEYS[key]
        try:
            value = parse(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None
        if section is None:
            top[name] = value
        else:
            sections.setdefault(section, {})[name] = value
    try:
        if phantom_values:
            top["phantom"] = phantom_mod.from_config(phantom_values, base=base.phantom)
        for section, kw in sections.items():
            top[section] = replace(getattr(base, section), **kw)
        return replace(base, **top)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return from_values(parse_lines(text, str(path)), base)


def to_values(cfg: PipelineConfig) -> dict[str, str]:
    """Flatten ``cfg`` back to ``key -> raw string`` (round-trips through :func:`from_values`)."""
    out = dict(phantom_mod.to_config(cfg.phantom))
    for key, (section, name, _) in _KEYS.items():
        obj = cfg if section is None else getattr(cfg, section)
        value = getattr(obj, name)
        if isinstance(value, tuple):
            out[key] = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        else:
            out[key] = repr(value) if isinstance(value, float) else str(value)
    return out


def dump_config(cfg: PipelineConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_values(cfg).items())

