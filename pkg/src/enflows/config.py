"""Key-value experiment configuration: ``[section]`` blocks of ``key = value`` lines.

Command-line overrides use dotted keys (``train.lr=1e-3``). Every key is
typed by :data:`SCHEMA`; energy parameters of the selected system have no
defaults and must be given explicitly.
"""
import configparser
from importlib import resources

REQUIRED = object()

SCHEMA = {
    "system": {
        "name": (str, "dw4"),  # dw4 | lj13 | molecule
        "n_particles": (int, REQUIRED),
        "dim": (int, REQUIRED),
    },
    "dw4": {"a": (float, REQUIRED), "b": (float, REQUIRED), "c": (float, REQUIRED),
            "d0": (float, REQUIRED), "tau": (float, REQUIRED)},
    "lj13": {"eps": (float, REQUIRED), "r_m": (float, REQUIRED), "tau": (float, REQUIRED),
             "oscillator": (float, REQUIRED)},
    "data": {
        "n_train": (int, 100),
        "n_val": (int, 1000),
        "n_test": (int, 1000),
        "seed": (int, 0),
        "train_file": (str, ""),
        "val_file": (str, ""),
        "test_file": (str, ""),
    },
    "mcmc": {
        "chains": (int, 1000),
        "burn_in": (int, 2000),
        "thinning": (int, 50),
        "proposal_std": (float, 0.2),
        "init_scale": (float, 2.0),
    },
    "model": {
        "variant": (str, "enf"),
        "hidden": (int, 32),
        "layers": (int, 3),
        "edge_mode": (str, "inferred"),
        "coord_offset": (float, 1.0),
        "lifter_hidden": (int, 32),
        "lifter_layers": (int, 2),
        "n_ord": (int, 0),
        "cat_classes": (str, ""),  # comma-separated class counts, e.g. "5"
        "seed": (int, 0),
    },
    "train": {
        "preset": (str, "dw4"),
        "lr": (float, 5e-4),
        "batch_size": (int, 100),
        "epochs": (int, 10),
        "steps": (int, 20),
        "trace": (str, "hutchinson"),
        "probes": (int, 1),
        "seed": (int, 0),
        "weight_decay": (float, 1e-12),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "adam_eps": (float, 1e-8),
        "clip_norm": (float, 100.0),
        "micro_batch": (int, 0),
        "val_every": (int, 1),
        "val_trace": (str, "hutchinson"),
        "val_steps": (int, 0),
        "augment_rotations": (bool, False),
    },
    "eval": {
        "split": (str, "test"),
        "steps": (int, 100),
        "trace": (str, "hutchinson"),
        "passes": (int, 3),
        "seed": (int, 0),
        "batch_size": (int, 100),
        "samples": (int, 0),
        "bins": (int, 100),
    },
    "sample": {
        "num": (int, 100),
        "steps": (int, 100),
        "seed": (int, 0),
    },
}

SYSTEM_SECTIONS = {"dw4": "dw4", "lj13": "lj13"}


class ConfigError(ValueError):
    pass


def _convert(kind, raw, where):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_overrides(items):
    out = []
    for item in items or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        section, name = key.strip().split(".", 1)
        out.append((section, name, value))
    return out


def load_config(text=None, path=None, overrides=()):
    """Parse, apply overrides and type-check; returns ``{section: {key: value}}``."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        if path is not None:
            with open(path) as fh:
                parser.read_file(fh, source=str(path))
        elif text is not None:
            parser.read_string(text, source="<config>")
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    for section, name, value in parse_overrides(overrides):
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value)

    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")

    cfg, missing = {}, []
    system = parser.get("system", "name", fallback=SCHEMA["system"]["name"][1]).strip()
    for section, keys in SCHEMA.items():
        needed = section in ("system",) or SYSTEM_SECTIONS.get(system) == section
        cfg[section] = {}
        for key, (kind, default) in keys.items():
            if parser.has_option(section, key):
                cfg[section][key] = _convert(kind, parser.get(section, key), f"{section}.{key}")
            elif default is REQUIRED:
                if needed and not (section == "system" and system == "molecule"):
                    missing.append(f"{section}.{key}")
            else:
                cfg[section][key] = default
    if missing:
        raise ConfigError("missing required config keys: " + ", ".join(missing))
    if system not in ("dw4", "lj13", "molecule"):
        raise ConfigError(f"system.name must be dw4, lj13 or molecule, got {system!r}")
    return cfg


def render_config(cfg):
    lines = []
    for section, values in cfg.items():
        if not values:
            continue
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in values.items())
        lines.append("")
    return "\n".join(lines)


def reference_config(name):
    """Text of a shipped reference config (``dw4`` or ``lj13``)."""
    try:
        return resources.files("enflows").joinpath(f"data/{name}.cfg").read_text()
    except FileNotFoundError:
        raise ConfigError(f"no shipped config named {name!r}") from None


def cat_classes(cfg):
    raw = cfg["model"]["cat_classes"].strip()
    return tuple(int(k) for k in raw.split(",") if k.strip()) if raw else ()
