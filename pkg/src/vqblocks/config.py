"""Flat key=value config files with CLI overrides.

One `key=value` per line, `#` starts a comment, whitespace is trimmed.
Values stay strings until a typed getter pulls them out; unknown keys are
rejected up front so typos in experiment files fail loudly.
"""

from __future__ import annotations


class ConfigError(Exception):
    pass


KNOWN_KEYS = {
    # dataset
    "dataset", "image_size", "channels", "n_images", "data_seed", "classes",
    # stage-1 model
    "downsample", "window", "dims", "depths", "heads", "latent_dim",
    "codebook_size", "beta",
    # stage-2 model
    "block_size", "halo", "prior_layers", "prior_dim", "prior_heads", "conditional",
    # training
    "steps", "batch_size", "lr", "seed",
    # sampling
    "t_steps", "temperature", "confidence_noise",
}


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    try:
        with open(path) as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def apply_overrides(cfg: dict[str, str], overrides: list[str]) -> dict[str, str]:
    out = dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key '{key}'")
        out[key] = value
    return out


def _get(cfg, key, default, cast, what):
    if key not in cfg:
        return default
    try:
        return cast(cfg[key])
    except ValueError as exc:
        raise ConfigError(f"config key '{key}' must be {what}: {cfg[key]!r}") from exc


def get_int(cfg, key, default=None):
    return _get(cfg, key, default, int, "an integer")


def get_float(cfg, key, default=None):
    return _get(cfg, key, default, float, "a number")


def get_str(cfg, key, default=None):
    return cfg.get(key, default)


def get_bool(cfg, key, default=False):
    if key not in cfg:
        return default
    v = cfg[key].lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no"):
        return False
    raise ConfigError(f"config key '{key}' must be a boolean: {cfg[key]!r}")


def get_int_tuple(cfg, key, default=None):
    if key not in cfg:
        return default
    try:
        return tuple(int(v) for v in cfg[key].split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"config key '{key}' must be comma-separated ints") from exc


def get_str_tuple(cfg, key, default=None):
    if key not in cfg:
        return default
    return tuple(v.strip() for v in cfg[key].split(",") if v.strip())
