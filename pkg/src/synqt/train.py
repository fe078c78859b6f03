"""Config-driven training runs, reports, and the multi-arm comparison.

A run is a pure function of its config: the dataset, the frozen backbone,
parameter init, shuffling and feature dropping all draw from named
substreams of the config seed, so identical configs reproduce identical
reports byte for byte.
"""

import configparser
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import kernels
from .accounting import Scheme, activation_ledger, count_params, flop_count, synqt_scheme
from .backbone import BackboneConfig, ConfigError, build_backbone, forward_collect
from .blocks import SynqtConfig
from .checkpoint import serialize
from .data import DataConfig, SyntheticDataset
from .head import HeadConfig, dropfeat
from .models import LinearProbe, RandomQueryProbe, SynqtModel
from .optim import AdamW, cosine_lr
from .rng import Rng
from .tensor import Tape, add, backward, scale


class RunError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(
        image_size=16, patch_size=4, depth=4, width=32, heads=4))
    synqt: SynqtConfig = field(default_factory=lambda: SynqtConfig(
        tokens=4, hidden=16, qkv_hidden=4))
    head: HeadConfig = field(default_factory=lambda: HeadConfig(
        num_classes=8, hidden=16))
    data: DataConfig = field(default_factory=DataConfig)
    epochs: int = 12
    batch_size: int = 64
    base_lr: float = 1e-2
    weight_decay: float = 1e-4
    warmup_frac: float = 0.1
    seed: int = 0
    variant: str = "synqt"

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be positive")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ConfigError("learning rate must be positive, decay non-negative")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("warmup fraction must be in [0, 1)")
        if self.variant not in ("synqt", "linear", "random_query"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        self.synqt.validate(self.backbone.width)
        self.head.validate()
        self.data.validate()
        if self.data.image_size != self.backbone.image_size \
                or self.data.channels != self.backbone.channels:
            raise ConfigError("dataset geometry does not match the backbone")
        if self.head.num_classes != self.data.num_classes:
            raise ConfigError("head classes do not match the dataset")
        return self

    def to_dict(self):
        return asdict(self)


_SECTION_TYPES = {
    "backbone": BackboneConfig,
    "synqt": SynqtConfig,
    "head": HeadConfig,
    "data": DataConfig,
}


def _coerce(text, annotation):
    if annotation is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {text!r}")
    return annotation(text)


def load_config(path):
    """Parse the flat ``key = value`` sections into a TrainConfig."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    kwargs = {}
    for section, cls in _SECTION_TYPES.items():
        if not parser.has_section(section):
            continue
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in parser.items(section):
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            annotation = {"int": int, "float": float, "bool": bool,
                          "str": str}[types[key]] if isinstance(types[key], str) \
                else types[key]
            values[key] = _coerce(raw, annotation)
        kwargs[section] = cls(**values)
    train_fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)
                    if f.name not in _SECTION_TYPES}
    if parser.has_section("train"):
        for key, raw in parser.items("train"):
            if key not in train_fields:
                raise ConfigError(f"unknown key {key!r} in section [train]")
            annotation = {"int": int, "float": float, "bool": bool,
                          "str": str}[train_fields[key]] \
                if isinstance(train_fields[key], str) else train_fields[key]
            kwargs[key] = _coerce(raw, annotation)
    return TrainConfig(**kwargs).validate()


def build_model(cfg, bb, rng):
    if cfg.variant == "synqt":
        return SynqtModel(bb, cfg.synqt, cfg.head, rng)
    if cfg.variant == "linear":
        return LinearProbe(bb, cfg.head.num_classes, rng)
    if cfg.variant == "random_query":
        return RandomQueryProbe(bb, cfg.head.num_classes, rng)
    raise ConfigError(f"unknown variant {cfg.variant!r}")


def _accuracy(model, samples, caches):
    hits = 0
    for i, (img, label) in enumerate(samples):
        logits = model.logits(img, cache=caches[i])
        hits += int(np.argmax(logits.data[0]) == label)
    return hits / len(samples)


def _sampled_grad_check(model, img, label, rng, coords=3, eps=1e-5):
    """Cheap post-run probe: finite differences on a few coordinates."""
    names = sorted(model.trainable())
    picks = [names[i] for i in rng.integers(0, len(names), size=min(4, len(names)))]
    params = model.trainable()

    def f():
        return model.loss(img, label)

    with Tape() as tape:
        loss = f()
        gm = backward(loss, tape)
    worst = 0.0
    for name in picks:
        p = params[name]
        analytic = gm[p].data.reshape(-1) if p in gm else np.zeros(p.numel)
        flat = p.data.reshape(-1)
        for j in rng.integers(0, flat.size, size=min(coords, flat.size)):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = f().item()
            flat[j] = orig - eps
            f_minus = f().item()
            flat[j] = orig
            num = (f_plus - f_minus) / (2 * eps)
            rel = abs(analytic[j] - num) / (abs(analytic[j]) + abs(num) + 1e-12)
            worst = max(worst, rel)
    return worst


def _scheme_for(cfg):
    if cfg.variant == "synqt":
        scheme = synqt_scheme(cfg.backbone, n=cfg.synqt.tokens,
                              hidden=cfg.synqt.hidden,
                              qkv_hidden=cfg.synqt.qkv_hidden,
                              num_classes=cfg.head.num_classes)
        scheme.synqt = cfg.synqt
        return scheme
    # the probe arms store and train exactly a linear head
    return Scheme(kind="linear_probe", arch=cfg.backbone,
                  num_classes=cfg.head.num_classes)


def train(cfg):
    """Run one configuration to completion and report it."""
    cfg.validate()
    ds = SyntheticDataset(cfg.data)
    bb = build_backbone(cfg.backbone, Rng(cfg.seed).child("backbone-init"))
    run_rng = Rng(cfg.seed).child(f"run:{cfg.variant}")
    model = build_model(cfg, bb, run_rng.child("init"))
    uses_mask = isinstance(model, SynqtModel)

    caches_train = [model.sample_cache(img) for img, _ in ds.train]
    caches_test = [model.sample_cache(img) for img, _ in ds.test]

    opt = AdamW(model.trainable(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    n_train = len(ds.train)
    steps_per_epoch = math.ceil(n_train / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup = int(round(cfg.warmup_frac * total_steps))

    mask_rng = run_rng.child("dropfeat")
    losses = []
    step = 0
    for epoch in range(cfg.epochs):
        order = run_rng.child(f"shuffle{epoch}").permutation(n_train)
        for b0 in range(0, n_train, cfg.batch_size):
            batch = order[b0:b0 + cfg.batch_size]
            with Tape() as tape:
                total = None
                for idx in batch:
                    img, label = ds.train[idx]
                    mask = None
                    if uses_mask:
                        mask = dropfeat(mask_rng, cfg.synqt.dropfeat_p,
                                        cfg.backbone.depth, train_mode=True,
                                        num_features=model.head.num_features)
                    loss = model.loss(img, label, mask=mask,
                                      cache=caches_train[idx])
                    total = loss if total is None else add(total, loss)
                total = scale(total, 1.0 / len(batch))
                value = total.item()
                if not math.isfinite(value):
                    raise RunError(f"loss diverged at step {step}", step=step)
                grad_map = backward(total, tape)
            lr_t = cosine_lr(step, total_steps, cfg.base_lr, warmup)
            opt.step(grad_map, lr_t)
            losses.append(value)
            step += 1

    train_acc = _accuracy(model, ds.train, caches_train)
    test_acc = _accuracy(model, ds.test, caches_test)

    check_img, check_label = ds.train[0]
    probe_rng = run_rng.child("gradcheck")

    class _Probe:
        # closes over the sample cache so the probe reruns cheaply
        def __init__(self, inner, cache):
            self.inner = inner
            self.cache = cache

        def trainable(self):
            return self.inner.trainable()

        def loss(self, img, label):
            return self.inner.loss(img, label, cache=self.cache)

    grad_probe = _sampled_grad_check(_Probe(model, caches_train[0]),
                                     check_img, check_label, probe_rng)

    scheme = _scheme_for(cfg)
    ledgers = {
        "params": count_params(scheme).to_dict(),
        "activations": activation_ledger(scheme, cfg.batch_size).to_dict(),
        "flops": flop_count(scheme).to_dict(),
    }
    blob, _ = serialize(model.trainable())
    report = {
        "config": cfg.to_dict(),
        "variant": cfg.variant,
        "seed": cfg.seed,
        "backend": kernels.BACKEND,
        "steps": total_steps,
        "final_train_accuracy": train_acc,
        "final_test_accuracy": test_acc,
        "loss_curve": losses,
        "ledgers": ledgers,
        "grad_check_max_rel_error": grad_probe,
        "dataset_fingerprint": ds.fingerprint(),
        "checkpoint_sha256": hashlib.sha256(blob).hexdigest(),
    }
    return RunReport(report, model)


class RunReport:
    def __init__(self, payload, model=None):
        self.payload = payload
        self.model = model

    def __getitem__(self, key):
        return self.payload[key]

    def to_json(self):
        return json.dumps(self.payload, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json())


ARM_BUILDERS = {
    "linear": {"variant": "linear"},
    "random_query": {"variant": "random_query"},
    "synqt": {"variant": "synqt"},
    "synqt_nodrop": {"variant": "synqt", "synqt.dropfeat_p": 0.0},
    "synqt_no_prompt": {"variant": "synqt", "synqt.use_prompt": False},
    "synqt_no_last_output": {"variant": "synqt", "synqt.use_last_output": False},
    "synqt_simple_average": {"variant": "synqt", "head.aggregation": "simple_average"},
    "synqt_fixed_weights": {"variant": "synqt", "head.aggregation": "fixed"},
    "synqt_no_projection": {"variant": "synqt", "head.projection": "none"},
    "synqt_independent_projection": {"variant": "synqt",
                                     "head.projection": "independent"},
    "synqt_no_h": {"variant": "synqt", "head.use_h": False},
    "synqt_no_att": {"variant": "synqt", "head.use_att": False},
    "synqt_no_ffn": {"variant": "synqt", "head.use_ffn": False},
}


def arm_config(cfg, arm, seed=None, overrides=None):
    if arm not in ARM_BUILDERS:
        raise ConfigError(f"unknown arm {arm!r}")
    new = dataclasses.replace(
        cfg,
        backbone=dataclasses.replace(cfg.backbone),
        synqt=dataclasses.replace(cfg.synqt),
        head=dataclasses.replace(cfg.head),
        data=dataclasses.replace(cfg.data),
    )
    spec = dict(ARM_BUILDERS[arm])
    if overrides:
        spec.update(overrides)
    for key, value in spec.items():
        if "." in key:
            section, name = key.split(".", 1)
            setattr(getattr(new, section), name, value)
        else:
            setattr(new, key, value)
    if seed is not None:
        new.seed = seed
    return new.validate()


def compare(cfg, arms, seeds, lr_grid=None, scale_grid=None):
    """Train every (arm, seed) pair and tabulate accuracies.

    An optional grid over base learning rate and the two scale factors adds
    extra arms named after their settings.
    """
    jobs = [(arm, {}) for arm in arms]
    for lr in lr_grid or []:
        for s in scale_grid or []:
            jobs.append((f"synqt@lr={lr:g},s={s:g}",
                         {"variant": "synqt", "base_lr": lr,
                          "synqt.attn_scale": s, "synqt.ffn_scale": s}))
    table = {}
    for name, overrides in jobs:
        base_arm = "synqt" if name not in ARM_BUILDERS else name
        rows = {}
        for seed in seeds:
            run_cfg = arm_config(cfg, base_arm, seed=seed, overrides=overrides)
            report = train(run_cfg)
            rows[str(seed)] = {
                "train_accuracy": report["final_train_accuracy"],
                "test_accuracy": report["final_test_accuracy"],
            }
        table[name] = {
            "seeds": rows,
            "mean_test_accuracy": float(np.mean(
                [r["test_accuracy"] for r in rows.values()])),
            "mean_train_accuracy": float(np.mean(
                [r["train_accuracy"] for r in rows.values()])),
        }
    return table
