"""Experiment configuration: one JSON document, schema-checked before any work starts."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema

from .codec import DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_BITS, WatermarkKey
from .distort import DistortionSpec, default_grid
from .editor import DEFAULT_PROMPTS, PROMPT_LIBRARY, EditorGeometry, Prompt, prompt_table
from .synth import KINDS
from .trainer import TrainConfig

DEFAULT_KEY_SEED = 0x5AFE


def schema() -> dict:
    return json.loads(resources.files("safemark_lab").joinpath("experiment.schema.json").read_text())


def default_document() -> dict:
    train = TrainConfig()
    return {
        "seed": 0,
        "key": {"seed": DEFAULT_KEY_SEED, "b_bits": DEFAULT_BITS, "alpha": DEFAULT_ALPHA, "beta": DEFAULT_BETA},
        "prompts": list(DEFAULT_PROMPTS),
        "editor": {"kernel": 5, "residual": [8, 8]},
        "synth": {"count": 100, "size": [32, 32], "channels": 3, "kinds": list(KINDS)},
        "train": {
            "tau": train.tau,
            "lambda_sem": train.lambda_sem,
            "lambda_wm": train.lambda_wm,
            "eta": train.eta,
            "schedule": train.schedule,
            "steps": train.steps,
            "batch": train.batch,
            "optimizer": train.optimizer,
            "fixed_message": train.fixed_message,
        },
        "distortions": [d.to_json() for d in default_grid()],
        "convergence": {"family_count": 50, "family_seed": 0},
    }


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("schedule", "optimizer"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    doc: dict

    @classmethod
    def from_document(cls, doc: dict | None = None, seed: int | None = None) -> ExperimentConfig:
        doc = doc or {}
        try:
            jsonschema.validate(doc, schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from None
        full = _merge(default_document(), doc)
        if seed is not None:
            full["seed"] = seed
        cfg = cls(full)
        cfg.key, cfg.prompts, cfg.train, cfg.grid  # fail early on semantic errors
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, seed: int | None = None) -> ExperimentConfig:
        if path is None:
            return cls.from_document({}, seed)
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_document(doc, seed)

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    @property
    def key(self) -> WatermarkKey:
        return WatermarkKey.from_json(self.doc["key"])

    @property
    def prompts(self) -> list[Prompt]:
        entries = self.doc["prompts"]
        if all(isinstance(e, str) for e in entries):
            return prompt_table(entries)
        table = []
        for i, e in enumerate(entries):
            if isinstance(e, str):
                base = PROMPT_LIBRARY[e]
                e = {**base.to_json(), "id": i}
            table.append(Prompt.from_json({**e, "id": i}))
        return table

    @property
    def geometry(self) -> EditorGeometry:
        ed = self.doc["editor"]
        return EditorGeometry(int(self.doc["synth"]["channels"]), int(ed["kernel"]), tuple(ed["residual"]))

    @property
    def train(self) -> TrainConfig:
        t = dict(self.doc["train"])
        t.setdefault("seed", self.seed)
        return TrainConfig.from_dict(t)

    @property
    def grid(self) -> list[DistortionSpec]:
        return [DistortionSpec.from_json(d) for d in self.doc["distortions"]]

    @property
    def synth(self) -> dict:
        s = dict(self.doc["synth"])
        s.setdefault("seed", self.seed)
        return s

    @property
    def eval_seed(self) -> int:
        return int(self.doc.get("eval_seed", self.seed))

    def with_train(self, **overrides) -> ExperimentConfig:
        doc = copy.deepcopy(self.doc)
        doc["train"].update(overrides)
        return ExperimentConfig(doc)

    def canonical(self) -> str:
        return json.dumps(self.doc, sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()
