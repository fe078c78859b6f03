"""Conditional classification head.

Every extracted feature is token-mean-pooled, pushed through one shared
bottleneck projection, and aggregated with per-sample sigmoid weights
generated from the final block's output (whose own weight is pinned to 1).
During training, randomly dropped features are rescaled by 1/(1-p) so the
aggregate stays unbiased; inference keeps everything.
"""

from dataclasses import dataclass

import numpy as np

from .backbone import ConfigError
from .tensor import (Tensor, add, concat_rows, cross_entropy, gelu, layernorm,
                     matmul, mean_rows, mul, parameter, sigmoid, slice_rows)


@dataclass
class HeadConfig:
    num_classes: int = 8
    hidden: int = 48                  # bottleneck width shared with the blocks
    projection: str = "shared"        # shared | independent | none
    aggregation: str = "conditional"  # conditional | fixed | simple_average
    use_att: bool = True
    use_ffn: bool = True
    use_h: bool = True

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.projection not in ("shared", "independent", "none"):
            raise ConfigError(f"unknown projection mode {self.projection!r}")
        if self.aggregation not in ("conditional", "fixed", "simple_average"):
            raise ConfigError(f"unknown aggregation mode {self.aggregation!r}")
        if not (self.use_att or self.use_ffn or self.use_h):
            raise ConfigError("head needs at least one feature group")
        return self

    def num_features(self, depth):
        per_block = int(self.use_att) + int(self.use_ffn) + int(self.use_h)
        return per_block * depth


class HeadParams:
    """Shared projection + conditional weight generator + classifier MLP."""

    def __init__(self, rng, width, depth, cfg, init_std=0.02):
        d, dh, classes = width, cfg.hidden, cfg.num_classes
        self.cfg = cfg
        self.num_features = cfg.num_features(depth)
        # the conditioning feature (final block output) is gated at constant 1
        self.num_gated = self.num_features - (1 if cfg.use_h else 0)

        def w(shape):
            return parameter(rng.trunc_normal(shape, std=init_std))

        def zeros(shape):
            return parameter(np.zeros(shape))

        def ones(shape):
            return parameter(np.ones(shape))

        def proj():
            return (w((d, dh)), zeros((1, dh)), w((dh, d)), zeros((1, d)))

        if cfg.projection == "shared":
            self.proj = proj()
        elif cfg.projection == "independent":
            self.proj_list = [proj() for _ in range(self.num_features)]
        if cfg.aggregation == "conditional":
            self.gen_w = w((d, self.num_gated))
            self.gen_b = zeros((1, self.num_gated))
        elif cfg.aggregation == "fixed":
            self.fixed_logits = zeros((1, self.num_gated))
        self.ln_gamma, self.ln_beta = ones((1, d)), zeros((1, d))
        self.w_cls1, self.b_cls1 = w((d, dh)), zeros((1, dh))
        self.w_cls2, self.b_cls2 = w((dh, classes)), zeros((1, classes))

    def named(self, prefix="head"):
        out = {}
        for name, value in vars(self).items():
            if name == "cfg" or not isinstance(value, (Tensor, tuple, list)):
                continue
            if isinstance(value, Tensor):
                out[f"{prefix}.{name}"] = value
            elif name == "proj":
                for part, t in zip(("w_down", "b_down", "w_up", "b_up"), value):
                    out[f"{prefix}.proj.{part}"] = t
            elif name == "proj_list":
                for i, group in enumerate(value):
                    for part, t in zip(("w_down", "b_down", "w_up", "b_up"), group):
                        out[f"{prefix}.proj{i:02d}.{part}"] = t
        return out

    def tensors(self):
        return list(self.named().values())


@dataclass
class DropMask:
    """Per-feature keep flags; the conditioning feature is always kept and
    eval mode keeps everything with no rescale."""
    keep: np.ndarray
    p: float
    train_mode: bool

    @property
    def rescale(self):
        return 1.0 / (1.0 - self.p) if self.train_mode and self.p > 0 else 1.0


def dropfeat(rng, p, blocks, train_mode, num_features=None, cond_index=None):
    """Sample a keep mask over the 3*blocks features (feature-major order)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"drop probability {p} must be in [0, 1)")
    total = 3 * blocks if num_features is None else num_features
    cond = total - 1 if cond_index is None else cond_index
    if train_mode and p > 0:
        keep = rng.keep_mask(1.0 - p, total)
    else:
        keep = np.ones(total, dtype=bool)
    keep[cond] = True
    return DropMask(keep=keep, p=p, train_mode=train_mode)


def condition_vector(h_l):
    """Mean over the final block's query tokens -> (1, d)."""
    return mean_rows(h_l)


def conditional_weights(params, c):
    """Sigmoid gate per non-conditioning feature, generated from ``c``."""
    return sigmoid(add(matmul(c, params.gen_w), params.gen_b))


def _bottleneck(x, group):
    w_down, b_down, w_up, b_up = group
    return add(matmul(gelu(add(matmul(x, w_down), b_down)), w_up), b_up)


def _project_all(params, pooled_rows):
    """Project the stacked pooled features.  Shared mode runs one batched
    bottleneck over the whole matrix; independent mode runs one per row."""
    cfg = params.cfg
    if cfg.projection == "none":
        return pooled_rows
    if cfg.projection == "shared":
        return _bottleneck(pooled_rows, params.proj)
    rows = [_bottleneck(slice_rows(pooled_rows, i, i + 1), params.proj_list[i])
            for i in range(pooled_rows.shape[0])]
    return concat_rows(rows)


def _classify(params, agg):
    z = layernorm(agg, params.ln_gamma, params.ln_beta)
    hidden = gelu(add(matmul(z, params.w_cls1), params.b_cls1))
    return add(matmul(hidden, params.w_cls2), params.b_cls2)


def head_forward(params, bundle, mask=None):
    """Pool, project, gate-aggregate and classify one feature bundle."""
    cfg = params.cfg
    feats = bundle.ordered(use_att=cfg.use_att, use_ffn=cfg.use_ffn, use_h=cfg.use_h)
    if len(feats) != params.num_features:
        raise ValueError(f"bundle has {len(feats)} features, head expects "
                         f"{params.num_features}")
    if mask is None:
        mask = DropMask(keep=np.ones(len(feats), dtype=bool), p=0.0, train_mode=False)
    pooled = concat_rows([mean_rows(t) for _, t in feats])
    projected = _project_all(params, pooled)

    if cfg.aggregation == "simple_average":
        raw = np.where(mask.keep, mask.rescale, 0.0)
        raw[-1] = 1.0  # conditioning slot: never dropped, never rescaled
        coeffs = Tensor((raw / len(feats)).reshape(1, -1))
        return _classify(params, matmul(coeffs, projected))

    if cfg.aggregation == "conditional":
        weights = conditional_weights(params, condition_vector(bundle.h[-1]))
    else:
        weights = sigmoid(params.fixed_logits)
    total = len(feats)
    if cfg.use_h:
        gated = slice_rows(projected, 0, total - 1)
        pinned = slice_rows(projected, total - 1, total)
        keep = mask.keep[:-1]
    else:
        gated, pinned = projected, None
        keep = mask.keep
    mask_row = Tensor((keep * mask.rescale).reshape(1, -1))
    agg = matmul(mul(weights, mask_row), gated)
    if pinned is not None:
        agg = add(agg, pinned)
    return _classify(params, agg)


def head_loss(params, bundle, label, mask=None):
    return cross_entropy(head_forward(params, bundle, mask), label)


def dump_feature_weights(params, bundle):
    """Per-sample feature weights as records {name, group, layer, value},
    grouped h / att / ffn and ordered by layer; the conditioning feature
    reports its pinned constant 1."""
    cfg = params.cfg
    feats = bundle.ordered(use_att=cfg.use_att, use_ffn=cfg.use_ffn, use_h=cfg.use_h)
    names = [name for name, _ in feats]
    if cfg.aggregation == "simple_average":
        values = {name: 1.0 / len(feats) for name in names}
    else:
        if cfg.aggregation == "conditional":
            w = conditional_weights(params, condition_vector(bundle.h[-1])).data[0]
        else:
            w = sigmoid(params.fixed_logits).data[0]
        if cfg.use_h:
            values = dict(zip(names[:-1], w))
            values[names[-1]] = 1.0
        else:
            values = dict(zip(names, w))
    records = []
    for group in ("h", "att", "ffn"):
        for name, _ in feats:
            g, layer = name.split(".")
            if g != group:
                continue
            records.append({"name": name, "group": group, "layer": int(layer),
                            "value": float(values[name])})
    return records
