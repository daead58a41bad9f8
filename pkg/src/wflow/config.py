"""Declarative run configuration: INI sections, typed schema, overrides.

Precedence, lowest first: schema defaults, the config file, ``WFL_<SECTION>__<KEY>``
environment variables, then command-line flags.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SCENARIOS = ("simulate", "covariance", "invert", "regularize", "picard", "peano", "arratia")


def _opt_float(s):
    s = str(s).strip()
    return None if s.lower() in ("", "none", "inf") else float(s)


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _choice(*opts):
    def conv(s):
        s = str(s).strip()
        if s not in opts:
            raise ValueError(f"{s!r} not in {opts}")
        return s

    return conv


# section -> key -> (converter, default)
COMMON = {
    "run": {
        "scenario": (_choice(*SCENARIOS), None),
        "seed": (int, 0),
        "paths": (int, 100),
        "threads": (int, 1),
        "out": (str, "out"),
        "stride": (int, 1),
    },
    "kernel": {
        "alpha": (float, 3.0),
        "k_max": (_opt_float, None),
        "dk": (float, 0.1),
        "f_scale": (float, 1.0),
        "tail_tol": (float, 1e-6),
    },
    "phi": {
        "variant": (_choice("constant", "gaussian"), "gaussian"),
        "scale": (float, 1.0),
        "M": (_opt_float, None),
    },
}

SIM = {
    "sim": {
        "T": (float, 0.2),
        "dt": (float, 0.01),
        "n": (int, 64),
        "truncation_M": (_opt_float, None),
        "monotone_repair": (_choice("off", "project", "reject"), "project"),
        "antithetic": (_bool, False),
        "g_lo": (float, -1.0),
        "g_hi": (float, 1.0),
    },
}

DRIFT = {
    "drift": {
        "variant": (_choice("zero", "constant", "b1", "b2", "b3", "b4", "peano", "spectral"), "zero"),
        "a": (str, "tanh"),
        "scale": (float, 1.0),
        "width": (float, 0.5),
        "eta_hat": (float, 0.25),
        "constant": (float, 0.0),
        "eta": (float, 2.0),
        "delta": (float, 2.0 / 3.0),
        "lambda_envelope": (float, 2.0),
    },
}

HIST = {"histogram": {"x_min": (float, -4.0), "x_max": (float, 4.0), "bins": (int, 40)}}

SCHEMAS = {
    "simulate": {**COMMON, **SIM, **DRIFT},
    "covariance": {**COMMON, **SIM},
    "invert": {
        **COMMON, **SIM, **DRIFT,
        "invert": {"mode": (_choice("constant", "general"), "constant"), "width": (float, 1.0), "levels": (int, 3)},
    },
    "regularize": {
        **COMMON,
        "regularize": {
            "delta": (float, 2.0 / 3.0), "s0": (float, 0.5), "bins": (int, 10),
            "eps_max_pow": (int, 1), "eps_min_pow": (int, 8), "s_points": (int, 1201),
        },
    },
    "picard": {
        **COMMON, **HIST,
        "sim": {"T": (float, 1.0), "dt": (float, 0.01)},
        "picard": {
            "J": (int, 10_000), "tol": (float, 1e-3), "max_iter": (int, 10), "a_sup": (float, 0.5),
            "xi_scale": (float, 0.5),
        },
    },
    "peano": {
        **COMMON, **HIST,
        "sim": {"T": (float, 1.0), "dt": (float, 0.01), "n": (int, 64)},
        "peano": {"eps": (float, 1e-6)},
    },
    "arratia": {
        **COMMON,
        "sim": {"T": (float, 1.0), "dt": (float, 0.01), "n": (int, 8), "g_lo": (float, 0.0), "g_hi": (float, 0.5)},
    },
}


@dataclass
class RunConfig:
    scenario: str
    values: dict = field(default_factory=dict)  # section -> key -> typed value

    def get(self, section, key):
        return self.values[section][key]

    def __getitem__(self, section):
        return self.values[section]

    # -- serialisation --------------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for sec in sorted(self.values):
            cp[sec] = {k: _fmt(v) for k, v in sorted(self.values[sec].items())}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, scenario=None, env=None, overrides=None) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse config: {e}") from None
        raw = {s: dict(cp[s]) for s in cp.sections()}
        return build(raw, scenario, env, overrides)

    def digest(self) -> str:
        """Hash of the resolved config; the output directory is excluded so relocated runs match."""
        vals = {s: dict(kv) for s, kv in self.values.items()}
        vals["run"].pop("out", None)
        return hashlib.sha256(RunConfig(self.scenario, vals).to_ini().encode()).hexdigest()[:16]


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for k, v in environ.items():
        if k.startswith("WFL_") and "__" in k:
            sec, key = k[4:].split("__", 1)
            out.setdefault(sec.lower(), {})[key] = v
    return out


def _match_key(schema_sec, key):
    # environment variables are upper-cased; match keys case-insensitively
    for k in schema_sec:
        if k.lower() == key.lower():
            return k
    return None


def build(raw: dict, scenario=None, env=None, overrides=None) -> RunConfig:
    """Merge raw layers and validate against the scenario schema."""
    raw = {s: dict(kv) for s, kv in raw.items()}
    file_scen = raw.get("run", {}).get("scenario")
    if scenario is None:
        scenario = file_scen
    if scenario is None:
        raise ConfigError("no scenario given (use a subcommand or [run] scenario)")
    if scenario not in SCHEMAS:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of {', '.join(SCENARIOS)}")
    if file_scen is not None and file_scen != scenario:
        raise ConfigError(f"config is for scenario {file_scen!r}, not {scenario!r}")
    schema = SCHEMAS[scenario]
    layers = [raw]
    if env:
        layers.append(env)
    if overrides:
        layers.append(overrides)
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in schema.items()}
    for layer in layers:
        for sec, kv in layer.items():
            if sec not in schema:
                raise ConfigError(f"section [{sec}] is not valid for scenario {scenario!r}")
            for key, val in kv.items():
                k = _match_key(schema[sec], key)
                if k is None:
                    raise ConfigError(f"unknown key {sec}.{key} for scenario {scenario!r}")
                conv = schema[sec][k][0]
                try:
                    values[sec][k] = conv(val) if isinstance(val, str) else val
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"bad value for {sec}.{k}: {e}") from None
    values["run"]["scenario"] = scenario
    cfg = RunConfig(scenario, values)
    validate(cfg)
    return cfg


def parse_set(items) -> dict:
    out = {}
    for it in items or []:
        if "=" not in it or "." not in it.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {it!r}")
        lhs, v = it.split("=", 1)
        sec, key = lhs.split(".", 1)
        out.setdefault(sec, {})[key] = v
    return out


def validate(cfg: RunConfig):
    r = cfg["run"]
    if r["paths"] < 1 or r["threads"] < 1 or r["stride"] < 1:
        raise ConfigError("run.paths, run.threads and run.stride must be positive")
    k = cfg["kernel"]
    if k["alpha"] <= 0 or k["dk"] <= 0 or k["f_scale"] < 0:
        raise ConfigError("kernel.alpha and kernel.dk must be positive, f_scale non-negative")
    p = cfg["phi"]
    if p["scale"] <= 0 or (p["M"] is not None and p["M"] <= 0):
        raise ConfigError("phi.scale and phi.M must be positive")
    if "sim" in cfg.values:
        s = cfg["sim"]
        if s.get("T", 0) < 0 or s.get("dt", 1) <= 0:
            raise ConfigError("sim.T must be >= 0 and sim.dt > 0")
        if "n" in s and s["n"] < 2:
            raise ConfigError("sim.n must be at least 2")
        if "g_lo" in s and not s["g_lo"] < s["g_hi"]:
            raise ConfigError("sim.g_lo must be below sim.g_hi")
    if "histogram" in cfg.values:
        h = cfg["histogram"]
        if not h["x_min"] < h["x_max"] or h["bins"] < 1:
            raise ConfigError("histogram needs x_min < x_max and bins >= 1")


def load(path=None, scenario=None, environ=None, overrides=None) -> RunConfig:
    text = ""
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
    return RunConfig.from_ini(text, scenario, env_overrides(environ), overrides)


# -- builders ------------------------------------------------------------------


def decay_from(cfg: RunConfig):
    from .kernels import SpectralDecay

    k = cfg["kernel"]
    try:
        if k["k_max"] is None:
            return SpectralDecay.from_tail(k["alpha"], k["dk"], k["tail_tol"], scale=k["f_scale"])
        return SpectralDecay(k["alpha"], k["k_max"], k["dk"], scale=k["f_scale"])
    except ConfigError:
        raise
    except Exception as e:  # pragma: no cover - defensive
        raise ConfigError(str(e)) from None


def kernel_from(cfg: RunConfig):
    from .kernels import MassKernel

    p = cfg["phi"]
    if p["variant"] == "constant":
        return MassKernel.constant()
    return MassKernel("gaussian", scale=p["scale"], M=p["M"])


def drift_from(cfg: RunConfig, decay=None):
    from .drift import DriftSpec, HolderCusp, SpectralDriftSpec, make_drift

    d = cfg["drift"]
    if d["variant"] == "spectral":
        spec = SpectralDriftSpec.with_envelope(d["eta"], d["delta"], decay, d["lambda_envelope"],
                                               HolderCusp(-0.5, 0.5, 0.5, d["delta"])).validate()
        return DriftSpec("spectral", spectral=spec, name="spectral")
    return make_drift(d["variant"], d["a"], d["scale"], d["eta_hat"], d["width"], d["constant"])


def sim_from(cfg: RunConfig, decay=None, kernel=None):
    from .dynamics import SimConfig

    s, r = cfg["sim"], cfg["run"]
    return SimConfig(
        T=s["T"], dt=s["dt"], n=s["n"], decay=decay or decay_from(cfg), kernel=kernel or kernel_from(cfg),
        truncation_M=s.get("truncation_M"), monotone_repair=s.get("monotone_repair", "project"),
        seed=r["seed"], paths=r["paths"], antithetic=s.get("antithetic", False), threads=r["threads"],
    )


def initial_from(cfg: RunConfig):
    from .state import QuantileState, u_grid

    s = cfg["sim"]
    u = u_grid(s["n"])
    return QuantileState(s["g_lo"] + (s["g_hi"] - s["g_lo"]) * u)
