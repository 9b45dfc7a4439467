"""Pipeline configuration: an INI file with fixed sections and known keys.

Every stage hashes only the sections that influence its output, so changing
a decoder setting does not invalidate cached features.  The ``[paths]``
section never enters a hash: moving a corpus does not change what the
stages compute from it.
"""

from __future__ import annotations

import configparser
import hashlib
from pathlib import Path

DEFAULTS = {
    "pcanet": {
        "patch_side": "7",
        "filters": "8",
        "pool_window": "2",
        "pool_stride": "2",
        "blocks": "4",
        "frame_cap": "200",
        "normalize": "false",
    },
    "lstm": {
        "hidden": "64",
        "lr": "0.5",
        "weight_decay": "0.001",
        "momentum": "0.8",
        "iterations": "10000",
        "seed": "0",
        "scaling": "auto",
        "bptt_horizon": "none",
    },
    "tandem": {
        "floor": "1e-8",
        "delta_window": "2",
        "views": "0",
    },
    "hmm": {
        "states_per_word": "4",
        "max_mixtures": "15",
        "schedule": "auto",
        "variance_floor_ratio": "1e-4",
        "em_iters": "20",
        "passes_per_split": "4",
        "grammar_mode": "phrase_list",
        "seed": "0",
    },
    "paths": {
        "corpus": "",
        "train": "",
        "test": "",
        "grammar": "",
        "viseme_map": "",
    },
}

# sections whose values determine each stage's output
STAGE_SECTIONS = {
    "pcanet": ("pcanet",),
    "lstm": ("pcanet", "lstm"),
    "tandem": ("pcanet", "lstm", "tandem"),
    "hmm": ("pcanet", "lstm", "tandem", "hmm"),
}
# keys that pick an output location rather than change its contents
_UNHASHED = {("tandem", "views")}

_CORPUS_FILES = {"train": "train.tsv", "test": "test.tsv", "grammar": "grammar.txt",
                 "viseme_map": "visemes.tsv"}


class ConfigError(ValueError):
    pass


def _boolean(text):
    try:
        return configparser.ConfigParser.BOOLEAN_STATES[text.lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {text!r}") from None


class PipelineConfig:
    """Resolved configuration; ``values[section][key]`` holds strings."""

    def __init__(self, values, base_dir="."):
        self.values = values
        self.base_dir = Path(base_dir)

    # ---------------------------------------------------------------- loading

    @classmethod
    def load(cls, path=None, overrides=()):
        values = {s: dict(kv) for s, kv in DEFAULTS.items()}
        base = Path(".")
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                with open(path, encoding="utf-8") as fh:
                    parser.read_file(fh)
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
            for section in parser.sections():
                for key, val in parser.items(section):
                    _set(values, section, key, val, where=str(path))
            base = Path(path).parent
        for item in overrides:
            name, sep, val = item.partition("=")
            section, dot, key = name.partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} is not section.key=value")
            _set(values, section.strip(), key.strip(), val.strip(), where="--set")
        cfg = cls(values, base)
        cfg.validate()
        return cfg

    def validate(self):
        try:
            self.pcanet_config()
            self.train_config(1.0)
            self.tandem_params()
            self.views()
            self.hmm_params()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    # ---------------------------------------------------------------- rendering

    def to_ini(self):
        lines = []
        for section in DEFAULTS:
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in self.values[section].items()]
            lines.append("")
        return "\n".join(lines)

    def write(self, path):
        Path(path).write_text(self.to_ini(), encoding="utf-8")

    def hash(self, stage):
        """Short digest of the sections feeding ``stage``."""
        h = hashlib.sha256()
        for section in STAGE_SECTIONS[stage]:
            for key in sorted(self.values[section]):
                if (section, key) not in _UNHASHED:
                    h.update(f"{section}.{key}={self.values[section][key]}\n".encode())
        return h.hexdigest()[:16]

    # ---------------------------------------------------------------- typed views

    def get(self, section, key):
        return self.values[section][key]

    def pcanet_config(self):
        from .pcanet import PcanetConfig
        p = self.values["pcanet"]
        return PcanetConfig(patch_side=int(p["patch_side"]), filters=int(p["filters"]),
                            pool_window=int(p["pool_window"]),
                            pool_stride=int(p["pool_stride"]), blocks=int(p["blocks"]),
                            frame_cap=int(p["frame_cap"]),
                            normalize=_boolean(p["normalize"]))

    def scaling(self, height, width):
        raw = self.values["lstm"]["scaling"]
        if raw == "auto":
            return self.pcanet_config().input_scaling(height, width)
        return float(raw)

    def train_config(self, scaling):
        from .lstm import TrainConfig
        p = self.values["lstm"]
        if p["scaling"] != "auto" and float(p["scaling"]) <= 0:
            raise ValueError("lstm.scaling must be positive or auto")
        horizon = None if p["bptt_horizon"] == "none" else int(p["bptt_horizon"])
        return TrainConfig(learning_rate=float(p["lr"]), weight_decay=float(p["weight_decay"]),
                           momentum=float(p["momentum"]), max_iterations=int(p["iterations"]),
                           bptt_horizon=horizon, hidden_dim=int(p["hidden"]),
                           scaling=scaling, seed=int(p["seed"]))

    def tandem_params(self):
        p = self.values["tandem"]
        floor, window = float(p["floor"]), int(p["delta_window"])
        if not 0 < floor < 1:
            raise ValueError("tandem.floor must be in (0, 1)")
        if window < 1:
            raise ValueError("tandem.delta_window must be >= 1")
        return floor, window

    def views(self):
        from .tandem import order_views
        raw = self.values["tandem"]["views"].replace(",", " ").split()
        if not raw:
            raise ValueError("tandem.views is empty")
        return order_views(int(v) for v in raw)

    def hmm_params(self):
        from .gmmhmm import mixture_schedule
        p = self.values["hmm"]
        max_mix = int(p["max_mixtures"])
        if not 1 <= max_mix <= 15:
            raise ValueError("hmm.max_mixtures must be in [1, 15]")
        if p["schedule"] == "auto":
            schedule = mixture_schedule(max_mix)
        else:
            schedule = [int(v) for v in p["schedule"].replace(",", " ").split()]
            if (not schedule or schedule[0] != 1 or schedule[-1] != max_mix
                    or any(b <= a for a, b in zip(schedule, schedule[1:]))):
                raise ValueError("hmm.schedule must rise strictly from 1 to max_mixtures")
        if p["grammar_mode"] not in ("phrase_list", "word_loop"):
            raise ValueError("hmm.grammar_mode must be phrase_list or word_loop")
        return {"n_states": int(p["states_per_word"]), "schedule": schedule,
                "floor_ratio": float(p["variance_floor_ratio"]),
                "max_iters": int(p["em_iters"]),
                "passes_per_split": int(p["passes_per_split"]), "seed": int(p["seed"])}

    def path(self, key, override=None):
        """Resolve a [paths] entry; ``corpus`` supplies defaults for the others."""
        if override:
            return Path(override)
        raw = self.values["paths"].get(key, "")
        if raw:
            return self.base_dir / raw
        corpus = self.values["paths"]["corpus"]
        if corpus and key in _CORPUS_FILES:
            return self.base_dir / corpus / _CORPUS_FILES[key]
        return None


def _set(values, section, key, val, where):
    if section not in DEFAULTS:
        raise ConfigError(f"{where}: unknown section [{section}]")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
    values[section][key] = val.strip()
