"""Typed run configuration read from a flat INI file.

Every section and key is declared in :data:`SCHEMA`.  Unknown sections or
keys are errors.  Values are parsed to the declared type, and a bad value
names its field in the error message.  Command-line overrides use
``section.key=value`` and are recorded separately so run metadata can list them.
"""

import configparser
from dataclasses import dataclass, field

from .errors import ConfigError


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(kind):
    def parse(text):
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(kind(p) for p in parts)
    parse.__name__ = f"list of {kind.__name__}"
    return parse


_floats = _list(float)
_ints = _list(int)

# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "name": (str, "run"),
        "seed": (int, 0),
    },
    "dataset": {
        "generator": (str, "gsm_textures"),
        "n": (int, 1000),
        "shape": (_ints, (1, 32, 32)),
        "seed": (int, 1),
        "n_test": (int, 200),
        "test_seed": (int, 1001),
        "gsm_spectrum_exponent": (float, 2.0),
        "gsm_tau0": (float, 0.05),
        "gsm_ratio": (float, 2.0),
        "gsm_levels": (int, 4),
        "gsm_beta": (float, 0.0),
        "gsm_offset": (float, 0.0),
        "dl_rmin": (float, 1.0),
        "dl_rmax": (float, 16.0),
        "dl_exponent": (float, 3.0),
    },
    "operator": {
        "kind": (str, "identity"),
        "keep": (float, 0.7),
        "mask_seed": (int, 0),
        "group": (str, "circular_shifts"),
        "group_stride": (int, 1),
    },
    "measurement": {
        "sigma_n": (float, 0.075),
        "master_seed": (int, 7),
        "test_master_seed": (int, 8),
    },
    "model": {
        "features": (int, 16),
        "depth": (int, 4),
        "kernel": (int, 3),
        "residual": (_bool, True),
        "seed": (int, 0),
    },
    "loss": {
        "mode": (str, "ne-sure"),
        "w_sure": (float, 1.0),
        "w_ei": (float, 1.0),
        "delta": (float, 1e-3),
        "probe": (str, "rademacher"),
        "alpha_min": (float, 0.05),
        "alpha_max": (float, 1.0),
        "mu_max": (float, 1.0),
        "sigma_t_min": (float, 0.005),
        "sigma_t_max": (float, 0.15),
        "ei_sigma_min": (float, 0.01),
    },
    "optimizer": {
        "lr": (float, 2e-3),
        "lr_schedule": (str, "cosine"),
        "batch_size": (int, 32),
        "steps": (int, 2000),
        "checkpoint_every": (int, 500),
        "seed": (int, 3),
    },
    "schedule": {
        "sigma_min": (float, 0.0),
        "sigma_max": (float, 0.0),
        "gamma": (float, 7.0),
        "K": (int, 25),
        "heun": (_bool, True),
        "noise_rule": (str, "exact"),
        "seed": (int, 0),
        "n_samples": (int, 16),
    },
    "eval": {
        "sigma_eval": (_floats, (0.02, 0.05, 0.075)),
        "sigma_ref": (float, 0.0),
        "ssim": (_bool, True),
        "spectrum": (_bool, True),
        "histogram": (_bool, True),
        "patch_size": (int, 4),
        "bins": (int, 32),
    },
    "oracle": {
        "tau0": (float, 0.05),
        "ratio": (float, 2.0),
        "levels": (int, 8),
        "beta": (float, 2.0),
        "dim": (int, 16),
        "sigmas": (_floats, (0.2, 0.1, 0.05, 0.025)),
        "sigma_ratio": (float, 0.5),
        "n_points": (int, 2000),
        "sure_draws": (int, 20000),
        "sure_sigma": (float, 0.1),
    },
    "bench": {
        "n_values": (_ints, (500, 1000, 5000, 15000)),
        "sigma_t": (_floats, (0.02, 0.05, 0.1)),
        "n_test": (int, 1000),
    },
}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict
    source_text: str = ""
    overrides: dict = field(default_factory=dict)

    def __getitem__(self, section):
        return self.values[section]

    def get(self, dotted):
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    @property
    def name(self):
        return self.values["run"]["name"]

    def echo(self):
        """Canonical text of every resolved field, defaults included."""
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {_format(self.values[section][k])}" for k in keys]
            lines.append("")
        return "\n".join(lines)

    def as_dict(self):
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in kv.items()}
                for s, kv in self.values.items()}


def _parse_value(section, key, text):
    parser, _ = SCHEMA[section][key]
    try:
        return parser(text.strip())
    except ValueError as exc:
        kind = getattr(parser, "__name__", "value")
        raise ConfigError(f"[{section}] {key}: expected {kind}, got {text!r} ({exc})") from None


def parse_config(text, overrides=()):
    """Parse INI ``text`` and apply ``section.key=value`` ``overrides``."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"[{section}] {key}: unknown key")
            values[section][key] = _parse_value(section, key, raw)
    applied = {}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"override {dotted!r}: unknown field")
        values[section][key] = _parse_value(section, key, raw)
        applied[dotted.strip()] = raw.strip()
    cfg = RunConfig(values, text, applied)
    validate(cfg)
    return cfg


def load_config(path, overrides=()):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)


def default_config(overrides=()):
    return parse_config("", overrides)


def validate(cfg):
    v = cfg.values
    ds = v["dataset"]
    if ds["generator"] not in ("gsm_textures", "dead_leaves"):
        raise ConfigError("[dataset] generator: must be gsm_textures or dead_leaves")
    if len(ds["shape"]) != 3 or min(ds["shape"]) < 1:
        raise ConfigError("[dataset] shape: expected three positive integers C, H, W")
    if ds["n"] < 0 or ds["n_test"] < 0:
        raise ConfigError("[dataset] n, n_test: must be non-negative")
    op = v["operator"]
    if op["kind"] not in ("identity", "inpaint_mask", "bayer_cfa"):
        raise ConfigError("[operator] kind: must be identity, inpaint_mask or bayer_cfa")
    if op["kind"] == "bayer_cfa" and ds["shape"][0] != 3:
        raise ConfigError("[operator] kind: bayer_cfa needs a 3-channel [dataset] shape")
    if not 0 < op["keep"] <= 1:
        raise ConfigError("[operator] keep: must lie in (0, 1]")
    if op["group"] not in ("circular_shifts", "rotations90", "flips", "rotations90+flips"):
        raise ConfigError("[operator] group: unknown transform group")
    if v["measurement"]["sigma_n"] < 0:
        raise ConfigError("[measurement] sigma_n: must be non-negative")
    loss = v["loss"]
    if loss["mode"] not in ("supervised", "sure", "ne-sure", "ne-sure+ei"):
        raise ConfigError("[loss] mode: must be supervised, sure, ne-sure or ne-sure+ei")
    if not 0 < loss["alpha_min"] <= loss["alpha_max"] <= 1:
        raise ConfigError("[loss] alpha_min, alpha_max: need 0 < alpha_min <= alpha_max <= 1")
    if not 0 < loss["delta"] <= 1e-2:
        raise ConfigError("[loss] delta: must lie in (0, 1e-2]")
    if loss["probe"] not in ("rademacher", "gaussian"):
        raise ConfigError("[loss] probe: must be rademacher or gaussian")
    if loss["w_sure"] < 0 or loss["w_ei"] < 0 or loss["w_sure"] + loss["w_ei"] == 0:
        raise ConfigError("[loss] w_sure, w_ei: non-negative and not both zero")
    o = v["optimizer"]
    if o["lr"] <= 0 or o["batch_size"] < 1 or o["steps"] < 0 or o["checkpoint_every"] < 0:
        raise ConfigError("[optimizer] lr > 0, batch_size >= 1, steps >= 0, checkpoint_every >= 0 required")
    if o["lr_schedule"] not in ("constant", "cosine"):
        raise ConfigError("[optimizer] lr_schedule: must be constant or cosine")
    sc = v["schedule"]
    if sc["K"] < 2 or sc["gamma"] < 1 or sc["noise_rule"] not in ("exact", "euler"):
        raise ConfigError("[schedule] K >= 2, gamma >= 1, noise_rule in {exact, euler} required")
    if any(s <= 0 for s in v["eval"]["sigma_eval"]):
        raise ConfigError("[eval] sigma_eval: noise levels must be positive")
    if v["eval"]["sigma_ref"] < 0:
        raise ConfigError("[eval] sigma_ref: must be non-negative (0 means direct evaluation)")
    return cfg
