"""Run configuration: one JSON document with scene, sampling, network, loss and train sections.

Example::

    {
      "scene": {"preset": "long_tailed", "seed": 7},
      "sampling": {"strategy": "gbs", "k": 512, "cell_size": 2.0, "train_ratio": 0.05, "seed": 0},
      "network": {"base_channels": 4},
      "loss": {"lambda": 1.0, "tail_threshold": 0.05, "weight_truncation": 0.05,
               "class_weighting": "on"},
      "train": {"epochs": 100, "learning_rate": 0.005, "seed": 0}
    }

``scene`` is either a scene description (see :class:`SceneSpec`), a preset
name with overrides, or ``{"path": ..., "format": ...}`` pointing at a
saved cloud. Unknown keys are rejected with the offending name.
"""

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .experiments import Experiment
from .network import NetworkConfig
from .pipeline import TrainConfig
from .pointcloud import SceneSpec, generate_synthetic_scene, load_cloud, long_tailed_scene_spec
from .sampling import GridBalancedSampler, RandomSampler

SECTIONS = ("scene", "sampling", "network", "loss", "train")
PRESETS = {"long_tailed": long_tailed_scene_spec}
SAMPLING_KEYS = {"strategy", "k", "cell_size", "train_ratio", "seed", "n_samples",
                 "hide_eval_labels"}
LOSS_KEYS = {"lambda": "lam", "tail_threshold": "tail_threshold",
             "weight_truncation": "weight_truncation", "class_weighting": "class_weighting"}


class ConfigError(ValueError):
    pass


def _check_keys(section, data, allowed):
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {unknown}")


def _switch(value, name):
    if isinstance(value, bool):
        return value
    if value in ("on", "off"):
        return value == "on"
    raise ConfigError(f"{name} must be true/false or 'on'/'off', got {value!r}")


@dataclass
class RunConfig:
    scene: dict = field(default_factory=lambda: {"preset": "long_tailed"})
    sampling: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, data, base_dir="."):
        _check_keys("run config", data, SECTIONS)
        cfg = cls(**{k: dict(data.get(k, {})) for k in SECTIONS if k in data},
                  base_dir=Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path) as fh:
            return cls.from_dict(json.load(fh), base_dir=path.parent)

    def to_dict(self):
        return {k: getattr(self, k) for k in SECTIONS}

    def validate(self):
        _check_keys("sampling", self.sampling, SAMPLING_KEYS)
        if self.sampling.get("strategy", "gbs") not in ("gbs", "rs"):
            raise ConfigError("sampling.strategy must be 'gbs' or 'rs'")
        _check_keys("network", self.network, [f.name for f in fields(NetworkConfig)])
        _check_keys("loss", self.loss, LOSS_KEYS)
        train_keys = [f.name for f in fields(TrainConfig)
                      if f.name not in LOSS_KEYS.values()]
        _check_keys("train", self.train, train_keys)
        self.train_config()
        self.net_config(2, 1)

    # -- builders --------------------------------------------------------

    def scene_spec(self):
        scene = dict(self.scene)
        if "path" in scene:
            return None
        preset = scene.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"scene.preset must be one of {sorted(PRESETS)}")
            try:
                return PRESETS[preset](**scene)
            except TypeError as exc:
                raise ConfigError(f"scene: {exc}") from exc
        try:
            spec = SceneSpec.from_dict(scene)
        except TypeError as exc:
            raise ConfigError(f"scene: {exc}") from exc
        spec.validate()
        return spec

    def cloud(self):
        if "path" in self.scene:
            _check_keys("scene", self.scene, {"path", "format"})
            return load_cloud(self.base_dir / self.scene["path"], self.scene.get("format"))
        return generate_synthetic_scene(self.scene_spec())

    def net_config(self, classes, bands):
        net = dict(self.network)
        net.setdefault("classes", classes)
        net.setdefault("bands", bands)
        if "k" in self.sampling:
            net.setdefault("receptive_field", int(self.sampling["k"]))
        return NetworkConfig(**net)

    def train_config(self):
        kw = dict(self.train)
        for key, attr in LOSS_KEYS.items():
            if key in self.loss:
                value = self.loss[key]
                kw[attr] = _switch(value, key) if key == "class_weighting" else value
        for toggle in ("msff", "msl", "ltl"):
            if toggle in kw:
                kw[toggle] = _switch(kw[toggle], toggle)
        try:
            return TrainConfig(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from exc

    def sampler(self, seed=None):
        s = self.sampling
        seed = s.get("seed", 0) if seed is None else seed
        k = int(s.get("k", 4096))
        if s.get("strategy", "gbs") == "rs":
            return RandomSampler(n_samples=int(s.get("n_samples", 16)), k=k, seed=seed)
        return GridBalancedSampler(k=k, train_ratio=s.get("train_ratio", 0.05),
                                   cell_size=s.get("cell_size"), seed=seed)

    def experiment(self, cloud=None):
        cloud = self.cloud() if cloud is None else cloud
        s = self.sampling
        return Experiment(cloud, self.net_config(cloud.n_classes, cloud.n_bands),
                          self.train_config(), k=int(s.get("k", 4096)),
                          train_ratio=s.get("train_ratio", 0.05), cell_size=s.get("cell_size"),
                          hide_eval_labels=bool(s.get("hide_eval_labels", False)))
