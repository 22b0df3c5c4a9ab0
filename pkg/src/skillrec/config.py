"""Run configuration: an INI-style ``key = value`` file with sections.

Every key has a typed default; the defaults are the published
hyperparameters (d=512, 4 layers, 6 local + 2 global heads, M=40, L=2,
lambda=0.2, mu=0.4, batch 32, Adam lr 0.001 annealed by 0.8 every 3 epochs,
dropout 0.1, 30 epochs, 200 recall / 3 ranking negatives).  Unknown
sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
from pathlib import Path
from typing import Any

from .errors import ConfigError

# (section, key) -> default; the default's type is the key's type
DEFAULTS: dict[str, dict[str, Any]] = {
    "synth": {
        "num_skills": 20,
        "num_titles": 10,
        "num_jds": 2000,
        "num_users": 2000,
        "items_min": 4,
        "items_max": 8,
        "phrases_per_skill": 4,
        "neighbor_noise": 0.1,
        "click_temperature": 10.0,
        "clicks_per_user": 8,
        "dominant_mass": 0.5,
        "background_concentration": 0.3,
    },
    "model": {
        "d": 512,
        "num_layers": 4,
        "n_local": 6,
        "n_global": 2,
        "d_ff": 0,  # 0 means 4 * d
        "max_items": 40,
        "num_neighbors": 2,
    },
    "recall": {
        "lambda": 0.2,
        "mu": 0.4,
        "alpha": 0.2,
        "energy_sign": 1.0,
        "negatives": 200,
        "ks": "20,40,60,80,100",
        "candidates": 100,
    },
    "rank": {
        "negatives": 3,
        "max_epochs": 30,
    },
    "train": {
        "seed": 0,
        "batch_size": 32,
        "lr": 0.001,
        "lr_anneal_factor": 0.8,
        "lr_anneal_every": 3,
        "max_epochs": 30,
        "dropout": 0.1,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "test_fraction": 0.2,
        "threads": 1,
    },
}


def _coerce(section: str, key: str, raw: Any) -> Any:
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            return str(raw).strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(str(raw).strip())
        if isinstance(default, float):
            return float(str(raw).strip())
        return str(raw).strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None


class RunConfig:
    """Typed, validated view of a configuration file plus overrides."""

    def __init__(self, values: dict[str, dict[str, Any]] | None = None):
        self.values = {s: dict(keys) for s, keys in DEFAULTS.items()}
        for section, keys in (values or {}).items():
            for key, raw in keys.items():
                self.set(section, key, raw)

    def set(self, section: str, key: str, raw: Any) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        self.values[section][key] = _coerce(section, key, raw)

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @classmethod
    def from_text(cls, text: str, overrides: dict[str, dict[str, Any]] | None = None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        values = {s: dict(parser.items(s)) for s in parser.sections()}
        cfg = cls(values)
        for section, keys in (overrides or {}).items():
            for key, raw in keys.items():
                cfg.set(section, key, raw)
        return cfg

    @classmethod
    def from_file(cls, path, overrides=None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"), overrides)

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section, keys in self.values.items():
            parser[section] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in keys.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {s: dict(sorted(k.items())) for s, k in sorted(self.values.items())}

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.to_dict() == other.to_dict()

    # -- builders ------------------------------------------------------------

    @property
    def ks(self) -> tuple[int, ...]:
        return tuple(int(k) for k in str(self.get("recall", "ks")).split(",") if k.strip())

    def synth_config(self):
        from .synth import SynthConfig

        s = self["synth"]
        return SynthConfig(
            num_skills=s["num_skills"], num_titles=s["num_titles"], num_jds=s["num_jds"], num_users=s["num_users"],
            items_per_jd=(s["items_min"], s["items_max"]), phrases_per_skill=s["phrases_per_skill"],
            neighbor_noise=s["neighbor_noise"], click_temperature=s["click_temperature"],
            clicks_per_user=s["clicks_per_user"], dominant_mass=s["dominant_mass"],
            background_concentration=s["background_concentration"], seed=self.get("train", "seed"),
            max_items=self.get("model", "max_items"),
        )

    def model_overrides(self) -> dict:
        m = self["model"]
        return {
            "d": m["d"], "num_layers": m["num_layers"], "n_local": m["n_local"], "n_global": m["n_global"],
            "d_ff": m["d_ff"] or None, "dropout": self.get("train", "dropout"),
            "max_items": m["max_items"], "num_neighbors": m["num_neighbors"],
        }

    def train_config(self, stage: str = "recall"):
        from .training import TrainConfig

        t = self["train"]
        return TrainConfig(
            stage=stage,
            batch_size=t["batch_size"],
            lr=t["lr"],
            lr_anneal_factor=t["lr_anneal_factor"],
            lr_anneal_every=t["lr_anneal_every"],
            max_epochs=t["max_epochs"] if stage == "recall" else self.get("rank", "max_epochs"),
            dropout=t["dropout"],
            seed=t["seed"],
            betas=(t["adam_beta1"], t["adam_beta2"]),
            adam_eps=t["adam_eps"],
            recall_negatives=self.get("recall", "negatives"),
            rank_negatives=self.get("rank", "negatives"),
            test_fraction=t["test_fraction"],
            eval_ks=self.ks,
            threads=t["threads"],
        )

    def loss_config(self):
        from .recall import RecallLossConfig

        r = self["recall"]
        return RecallLossConfig(lam=r["lambda"], mu=r["mu"], alpha=r["alpha"], energy_sign=r["energy_sign"])
