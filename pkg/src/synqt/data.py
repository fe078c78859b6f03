"""Seeded synthetic classification images.

One Gaussian template per class, samples are template plus scaled noise.
Train and test splits draw from separate substreams, so they never share a
sample.  Difficulty is set by the noise scale.
"""

import hashlib
from dataclasses import dataclass, asdict

from .backbone import ConfigError
from .rng import Rng


@dataclass
class DataConfig:
    num_classes: int = 8
    per_class: int = 64
    test_per_class: int = 16
    noise: float = 2.0
    image_size: int = 16
    channels: int = 3
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.per_class < 1 or self.test_per_class < 1:
            raise ConfigError("need at least one sample per class per split")
        if self.noise < 0:
            raise ConfigError("noise scale must be non-negative")
        return self


class SyntheticDataset:
    def __init__(self, cfg):
        cfg.validate()
        self.cfg = cfg
        shape = (cfg.image_size, cfg.image_size, cfg.channels)
        root = Rng(cfg.seed).child("data")
        tmpl_rng = root.child("templates")
        self.templates = [tmpl_rng.normal(shape) for _ in range(cfg.num_classes)]
        self.train = self._split(root.child("train"), cfg.per_class, shape)
        self.test = self._split(root.child("test"), cfg.test_per_class, shape)

    def _split(self, rng, per_class, shape):
        samples = []
        for label in range(self.cfg.num_classes):
            for _ in range(per_class):
                samples.append((self.templates[label] + self.cfg.noise * rng.normal(shape),
                                label))
        return samples

    def fingerprint(self):
        h = hashlib.sha256(repr(sorted(asdict(self.cfg).items())).encode())
        for img, label in self.train + self.test:
            h.update(img.tobytes())
            h.update(bytes([label]))
        return h.hexdigest()
