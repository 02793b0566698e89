"""Pipeline configuration: JSON file, then environment overrides, then flags.

Environment overrides are named ``BRIDGEGRID_<SECTION>_<KEY>`` (for example
``BRIDGEGRID_JOB_WORKERS=4``).  Values are parsed as JSON when possible and
taken as plain strings otherwise.
"""

import copy
import dataclasses
import json
import os

from ..errors import ConfigError
from ..ptycho.simulate import SimulationSpec
from ..ptycho.types import ObjectConstraints, SolverConfig

_SOLVER_FIELDS = [f.name for f in dataclasses.fields(SolverConfig) if f.name != "allreduce_variant"]
_SIM_FIELDS = [f.name for f in dataclasses.fields(SimulationSpec)]
_CONSTRAINT_FIELDS = [f.name for f in dataclasses.fields(ObjectConstraints)]

DEFAULTS = {
    "server": {"contact_dir": None, "port": 0, "host": "127.0.0.1"},
    "job": {"workers": 1, "allreduce_variant": "TREE", "timeout": 600.0, "mode": "process"},
    "solver": {},
    "data": {"path": None, "simulate": None},
    "stream": {"interval": 0.0, "replay": None, "iterations": None},
}

SECTIONS = {
    "server": set(DEFAULTS["server"]),
    "job": set(DEFAULTS["job"]),
    "solver": set(_SOLVER_FIELDS),
    "data": set(DEFAULTS["data"]),
    "stream": set(DEFAULTS["stream"]),
}

ENV_PREFIX = "BRIDGEGRID_"


def _check_keys(section, values):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = sorted(set(values) - SECTIONS[section])
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {', '.join(unknown)}")


def _env_value(text):
    try:
        return json.loads(text)
    except ValueError:
        return text


def env_overrides(environ=None):
    """Config fragments taken from ``BRIDGEGRID_<SECTION>_<KEY>`` variables."""
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, sep, key = rest.partition("_")
        if not sep or section not in SECTIONS:
            continue  # runtime variables such as BRIDGEGRID_SERVER / BRIDGEGRID_TOKEN
        if key not in SECTIONS[section]:
            raise ConfigError(f"environment variable {name} names unknown key {key!r}")
        out.setdefault(section, {})[key] = _env_value(value)
    return out


@dataclasses.dataclass
class PipelineConfig:
    server: dict
    job: dict
    solver: dict
    data: dict
    stream: dict

    def solver_config(self):
        """SolverConfig with the job's allreduce variant applied."""
        fields = dict(self.solver)
        fields["allreduce_variant"] = self.job["allreduce_variant"]
        return SolverConfig(**fields)

    def simulation_spec(self):
        sim = self.data.get("simulate")
        return None if sim is None else SimulationSpec(**sim)

    def to_dict(self):
        return dataclasses.asdict(self)


def _validate(raw):
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    for section, values in raw.items():
        _check_keys(section, values)

    job = raw["job"]
    if not isinstance(job["workers"], int) or job["workers"] < 1:
        raise ConfigError(f"job.workers must be a positive integer, got {job['workers']!r}")
    if str(job["allreduce_variant"]).upper() not in ("TREE", "RING"):
        raise ConfigError(f"job.allreduce_variant must be TREE or RING, got {job['allreduce_variant']!r}")
    job["allreduce_variant"] = str(job["allreduce_variant"]).upper()
    if job["mode"] not in ("process", "thread"):
        raise ConfigError(f"job.mode must be 'process' or 'thread', got {job['mode']!r}")
    if job["timeout"] is not None and not float(job["timeout"]) > 0:
        raise ConfigError("job.timeout must be positive")

    port = raw["server"]["port"]
    if not isinstance(port, int) or not 0 <= port < 65536:
        raise ConfigError(f"server.port must be an integer in [0, 65535], got {port!r}")

    constraints = raw["solver"].get("constraints")
    if constraints is not None:
        if not isinstance(constraints, dict):
            raise ConfigError("solver.constraints must be an object")
        bad = sorted(set(constraints) - set(_CONSTRAINT_FIELDS))
        if bad:
            raise ConfigError(f"unknown key(s) in solver.constraints: {', '.join(bad)}")
    sim = raw["data"].get("simulate")
    if sim is not None:
        if not isinstance(sim, dict):
            raise ConfigError("data.simulate must be an object")
        bad = sorted(set(sim) - set(_SIM_FIELDS))
        if bad:
            raise ConfigError(f"unknown key(s) in data.simulate: {', '.join(bad)}")
    if float(raw["stream"]["interval"]) < 0:
        raise ConfigError("stream.interval must be >= 0")

    cfg = PipelineConfig(**raw)
    try:
        cfg.solver_config()
        cfg.simulation_spec()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def merge(base, fragment):
    out = copy.deepcopy(base)
    for section, values in fragment.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r}")
        _check_keys(section, values)
        out.setdefault(section, {}).update(values)
    return out


def load_config(path=None, environ=None, overrides=None):
    """Defaults <- JSON file <- environment <- ``overrides`` (from flags)."""
    raw = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}") from None
        try:
            data = json.loads(text)
        except ValueError as exc:
            raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        raw = merge(raw, data)
    raw = merge(raw, env_overrides(environ))
    if overrides:
        raw = merge(raw, overrides)
    return _validate(raw)
