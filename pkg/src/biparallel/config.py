"""Run configuration: TOML file, environment overrides, validation.

Every key lives in a section.  Environment variables named
``BIPARALLEL_<SECTION>__<KEY>`` override file values; the value is read as a
TOML literal when possible (``0.5``, ``[0, 1]``, ``true``) and as a bare
string otherwise.
"""

from __future__ import annotations

import copy
import difflib
import os
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ParseError, ValidationError

ENV_PREFIX = "BIPARALLEL_"

_pos = lambda v: v > 0
_nonneg = lambda v: v >= 0
_range = lambda v: len(v) == 2 and v[0] < v[1]


def _one_of(*opts):
    f = lambda v: v in opts
    f.options = opts
    return f


# section -> key -> (type, default, check or None, description)
SCHEMA = {
    "geometry": {
        "preset": (str, "flat", _one_of("flat", "linear-wrap", "log-spiral", "sampled", "expression"),
                   "wrap-angle family"),
        "c": (float, 0.5, None, "wrap parameter of linear-wrap and log-spiral"),
        "path": (str, "", None, "z r Theta rows for the sampled preset"),
        "expression": (str, "", None, "Theta(z, r) for the expression preset"),
    },
    "domain": {
        "z_range": (list, [0.0, 1.0], _range, "axial extent"),
        "r_range": (list, [1.0, 2.0], _range, "radial extent (r > 0)"),
    },
    "physics": {
        "nu": (float, 1.0, _pos, "kinematic viscosity"),
        "omega": (float, 0.0, _nonneg, "angular velocity"),
        "n_blades": (int, 8, _pos, "number of blades"),
    },
    "discretization": {
        "h": (float, 0.125, lambda v: 0 < v <= 1, "mesh size"),
        "m": (int, 4, lambda v: v >= 2, "number of stream layers"),
        "element": (str, "P2-P1", _one_of("P2-P1", "P1-P1"), "velocity-pressure pair"),
        "eta": (float, 1e-8, _pos, "penalty parameter"),
        "quad_order": (int, 0, _nonneg, "quadrature order, 0 for automatic"),
    },
    "iteration": {
        "tol": (float, 1e-6, _pos, "sweep increment tolerance"),
        "max_sweeps": (int, 30, _pos, "sweep budget"),
        "layer_tol": (float, 1e-11, _pos, "per-surface nonlinear tolerance"),
        "layer_max_iterations": (int, 50, _pos, "per-surface iteration budget"),
        "scheme": (str, "picard", _one_of("picard", "newton"), "per-surface linearisation"),
        "ordering": (str, "jacobi", _one_of("jacobi", "gauss-seidel"), "sweep ordering"),
        "init": (str, "zero", _one_of("zero", "averaged"), "initial stack"),
        "acceleration": (str, "anderson", _one_of("anderson", "none"), "sweep acceleration"),
        "anderson_depth": (int, 5, _pos, "mixing window"),
        "blade_pressure": (str, "extrapolate", _one_of("extrapolate", "corrected"), "face coupling pressure"),
        "ghost": (str, "opposite", _one_of("opposite", "periodic"), "value beyond a blade face"),
    },
    "case": {
        "kind": (str, "manufactured", _one_of("manufactured", "physical"), "boundary data source"),
        "amp_psi": (float, 0.5, None, "stream-function amplitude of the manufactured field"),
        "amp_phi": (float, 0.5, None, "cross-passage amplitude of the manufactured field"),
        "inlet_pressure": (float, 0.0, None, "p0 on the inlet for physical runs"),
    },
    "output": {
        "directory": (str, "biparallel-out", None, "output directory"),
        "threads": (int, 1, _pos, "thread budget"),
        "vtk": (bool, True, None, "write VTK files"),
    },
}


def defaults():
    return {s: {k: copy.deepcopy(v[1]) for k, v in keys.items()} for s, keys in SCHEMA.items()}


def _suggest(name, options):
    m = difflib.get_close_matches(name, list(options), n=1, cutoff=0.0)
    return m[0] if m else None


def _coerce(field, typ, value):
    if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if typ is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if typ is list and isinstance(value, list):
        try:
            return [float(v) for v in value]
        except (TypeError, ValueError):
            raise ValidationError(field, "expected a list of numbers") from None
    if typ in (str, bool) and isinstance(value, typ):
        return value
    raise ValidationError(field, f"expected {typ.__name__}, got {type(value).__name__}")


def validate(raw):
    """Merge ``raw`` over the defaults and check every value."""
    out = defaults()
    for section, body in raw.items():
        if section not in SCHEMA:
            raise ValidationError(section, "unknown section", _suggest(section, SCHEMA))
        if not isinstance(body, dict):
            raise ValidationError(section, "expected a table")
        for key, value in body.items():
            field = f"{section}.{key}"
            if key not in SCHEMA[section]:
                raise ValidationError(field, "unknown key", f"{section}.{_suggest(key, SCHEMA[section])}")
            typ, _, check, _ = SCHEMA[section][key]
            value = _coerce(field, typ, value)
            if check is not None and not check(value):
                opts = getattr(check, "options", None)
                msg = f"must be one of {', '.join(opts)}" if opts else f"value {value!r} out of range"
                raise ValidationError(field, msg)
            out[section][key] = value
    if out["domain"]["r_range"][0] <= 0:
        raise ValidationError("domain.r_range", "radii must be positive")
    g = out["geometry"]
    if g["preset"] == "sampled" and not g["path"]:
        raise ValidationError("geometry.path", "required for the sampled preset")
    if g["preset"] == "expression" and not g["expression"]:
        raise ValidationError("geometry.expression", "required for the expression preset")
    return out


def _env_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    raw = {}
    for name, text in environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name[len(ENV_PREFIX):]:
            continue
        section, key = name[len(ENV_PREFIX):].lower().split("__", 1)
        raw.setdefault(section, {})[key] = _env_value(text)
    return raw


def merge(base, extra):
    out = copy.deepcopy(base)
    for s, body in extra.items():
        out.setdefault(s, {}).update(body)
    return out


def parse_text(text, environ=None):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(getattr(exc, "msg", str(exc)), getattr(exc, "lineno", None), getattr(exc, "colno", None)) from None
    return validate(merge(raw, env_overrides(environ)))


def parse_config(path, environ=None):
    """Read, override from the environment, validate and fill defaults."""
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read(), environ)


def dumps(cfg):
    """Render a resolved config back to TOML text (for echoing into outputs)."""
    lines = []
    for section, body in cfg.items():
        lines.append(f"[{section}]")
        for k, v in body.items():
            if isinstance(v, bool):
                lit = "true" if v else "false"
            elif isinstance(v, str):
                lit = '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
            elif isinstance(v, list):
                lit = "[" + ", ".join(repr(float(x)) for x in v) + "]"
            else:
                lit = repr(v)
            lines.append(f"{k} = {lit}")
        lines.append("")
    return "\n".join(lines)
