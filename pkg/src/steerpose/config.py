"""Versioned ``key=value`` run configuration.

Blank lines and ``#`` comments are ignored. ``version`` is mandatory and
unknown keys are errors, so typos never pass silently. Network levels use
indexed keys such as ``network.level0.even = 4,2,1``.
"""
from __future__ import annotations

import re

from .errors import ConfigError, ValidationError

CONFIG_VERSION = 1


def _ints(s):
    return tuple(int(v) for v in s.split(","))


def _bool(s):
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _strs(s):
    return tuple(v.strip() for v in s.split(",") if v.strip())


SCHEMA = {
    "version": (int, CONFIG_VERSION),
    # network
    "network.head": (str, "pseudovector"),
    "network.head_kernel_size": (int, 1),
    "network.input_size": (int, 16),
    "network.norm_eps": (float, 1e-5),
    "network.levels": (int, 2),
    # phantom
    "phantom.size": (int, 32),
    "phantom.voxel_size": (float, 6.0),
    "phantom.asymmetry_strength": (float, 0.05),
    "phantom.random_pose": (_bool, False),
    "phantom.max_shift_mm": (float, 0.0),
    # training
    "train.steps": (int, 2000),
    "train.lr": (float, 1e-2),
    "train.momentum": (float, 0.99),
    "train.weight_decay": (float, 3e-5),
    "train.beta": (float, 1.0),
    "train.grad_eps": (float, 1e-4),
    "train.clip_norm": (float, 1.0),
    "train.n_phantoms": (int, 32),
    "train.fill": (float, 0.6),
    # slice simulation
    "sim.n_seeds": (int, 50),
    "sim.orientations": (_strs, ("sagittal", "coronal", "axial")),
    "sim.rot_min_deg": (float, 2.0),
    "sim.rot_max_deg": (float, 5.0),
    "sim.trans_min_mm": (float, 0.0),
    "sim.trans_max_mm": (float, 2.0),
    "sim.brain_scale": (float, 0.7),
    # scan loop
    "scan.n_steps": (int, 100),
    "scan.size": (int, 32),
    "scan.voxel_size": (float, 6.0),
    "scan.spin_sigma_mm": (float, 3.0),
    "scan.deadline_ms": (float, 1000.0),
    "scan.orientation": (str, "axial"),
}

LEVEL_KEYS = {
    "even": (_ints, (4, 2, 1)),
    "odd": (_ints, (4, 2, 1)),
    "convs": (int, 1),
    "kernel_size": (int, 5),
    "radial_level": (int, None),
    "pool": (int, 2),
}
_LEVEL_RE = re.compile(r"^network\.level(\d+)\.(\w+)$")


def _lookup(key):
    if key in SCHEMA:
        return SCHEMA[key]
    m = _LEVEL_RE.match(key)
    if m and m.group(2) in LEVEL_KEYS:
        return LEVEL_KEYS[m.group(2)]
    return None


def parse_config(text: str) -> dict:
    """Parse config text into a dict holding only the keys that were set."""
    out, seen = {}, {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw.strip()!r}", line=n)
        key, val = (s.strip() for s in line.split("=", 1))
        entry = _lookup(key)
        if entry is None:
            raise ConfigError(f"unknown key {key!r}", line=n)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", line=n)
        try:
            out[key] = entry[0](val)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", line=n) from None
        seen[key] = n
    if not out:
        raise ConfigError("empty config (a version line is required)")
    if "version" not in out:
        raise ConfigError("missing version key")
    if out["version"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {out['version']}", line=seen["version"])
    return out


def load_config(path) -> dict:
    with open(path) as fh:
        return parse_config(fh.read())


def get(cfg: dict, key: str):
    """Value of ``key`` or its schema default."""
    if key in cfg:
        return cfg[key]
    entry = _lookup(key)
    if entry is None:
        raise KeyError(key)
    return entry[1]


def network_spec(cfg: dict):
    from .network import LevelSpec, NetworkSpec

    n = get(cfg, "network.levels")
    if n < 1:
        raise ValidationError("network.levels must be positive")
    levels = []
    for i in range(n):
        kw = {}
        for name, (_, default) in LEVEL_KEYS.items():
            key = f"network.level{i}.{name}"
            kw[name] = cfg.get(key, default if default is not None else i + 2)
        levels.append(LevelSpec(**kw))
    stray = [k for k in cfg if (m := _LEVEL_RE.match(k)) and int(m.group(1)) >= n]
    if stray:
        raise ConfigError(f"keys for levels beyond network.levels={n}: {', '.join(sorted(stray))}")
    return NetworkSpec(levels=tuple(levels), head=get(cfg, "network.head"),
                       head_kernel_size=get(cfg, "network.head_kernel_size"),
                       input_size=get(cfg, "network.input_size"), norm_eps=get(cfg, "network.norm_eps"))


def network_config_text(spec) -> str:
    """Config text that reproduces ``spec`` through :func:`network_spec`."""
    lines = [f"version={CONFIG_VERSION}", f"network.head={spec.head}",
             f"network.head_kernel_size={spec.head_kernel_size}", f"network.input_size={spec.input_size}",
             f"network.norm_eps={spec.norm_eps!r}", f"network.levels={len(spec.levels)}"]
    for i, lv in enumerate(spec.levels):
        lines += [f"network.level{i}.even={','.join(map(str, lv.even))}",
                  f"network.level{i}.odd={','.join(map(str, lv.odd))}",
                  f"network.level{i}.convs={lv.convs}", f"network.level{i}.kernel_size={lv.kernel_size}",
                  f"network.level{i}.radial_level={lv.radial_level}", f"network.level{i}.pool={lv.pool}"]
    return "\n".join(lines) + "\n"
