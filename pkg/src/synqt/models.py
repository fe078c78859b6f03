"""Model assemblies used by the harness and the accounting oracles.

The main model wires the synthesis/extraction stack into the conditional
head.  The baseline arms (linear probe, random frozen queries, LoRA at one
layer, a fully trainable backbone) exist to compare accuracy orderings and
to validate the analytic activation ledgers against the tape.
"""

from dataclasses import dataclass

import numpy as np

from .backbone import (apply_block, build_backbone, embed_tokens,
                       forward_collect, kem_view, multihead_attention)
from .blocks import (FeatureBundle, QsmParams, kem_forward, kem_keys_values,
                     stack_forward)
from .head import HeadParams, head_forward
from .tensor import (add, concat_rows, cross_entropy, frozen, gelu, layernorm,
                     matmul, mean_rows, parameter, slice_rows)


@dataclass
class SampleCache:
    """Constant per-sample values reusable across steps: the feature stack
    and, where applicable, the frozen keys/values or a pooled feature."""
    features: object = None
    kem_kv: list = None
    feature_row: object = None


class SynqtModel:
    def __init__(self, bb, cfg, head_cfg, rng, init_std=0.02):
        cfg.validate(bb.config.width)
        head_cfg.validate()
        self.backbone = bb
        self.cfg = cfg
        self.head_cfg = head_cfg
        init = rng.child("synqt")
        self.qsm = [QsmParams(init, bb.config.width, cfg, init_std=init_std)
                    for _ in range(bb.config.depth)]
        self.head = HeadParams(init.child("head"), bb.config.width,
                               bb.config.depth, head_cfg, init_std=init_std)

    def sample_cache(self, image):
        features = forward_collect(self.backbone, image)
        kv = [kem_keys_values(kem_view(self.backbone, i + 1), features.xs[i])
              for i in range(self.backbone.config.depth)]
        return SampleCache(features=features, kem_kv=kv)

    def bundle(self, image, features=None, cache=None):
        if cache is not None:
            return stack_forward(self.backbone, self.qsm, image, self.cfg,
                                 features=cache.features, kem_kv=cache.kem_kv)
        return stack_forward(self.backbone, self.qsm, image, self.cfg,
                             features=features)

    def logits(self, image, mask=None, features=None, cache=None):
        return head_forward(self.head, self.bundle(image, features, cache), mask)

    def loss(self, image, label, mask=None, features=None, cache=None):
        return cross_entropy(self.logits(image, mask, features, cache), label)

    def named_params(self):
        out = {}
        for i, p in enumerate(self.qsm, start=1):
            out.update(p.named(f"qsm{i:02d}"))
        out.update(self.head.named())
        return out

    def trainable(self):
        return self.named_params()


class LinearProbe:
    """Trainable linear classifier on the register token of the final output."""

    def __init__(self, bb, num_classes, rng):
        self.backbone = bb
        init = rng.child("probe")
        d = bb.config.width
        self.w = parameter(init.trunc_normal((d, num_classes), std=0.02))
        self.b = parameter(np.zeros((1, num_classes)))

    def feature(self, image, features=None):
        if features is None:
            features = forward_collect(self.backbone, image)
        return slice_rows(features.x_final, 0, 1)

    def sample_cache(self, image):
        return SampleCache(feature_row=self.feature(image))

    def logits(self, image, mask=None, features=None, cache=None):
        feat = cache.feature_row if cache is not None \
            else self.feature(image, features)
        return add(matmul(feat, self.w), self.b)

    def loss(self, image, label, mask=None, features=None, cache=None):
        return cross_entropy(self.logits(image, features=features, cache=cache),
                             label)

    def trainable(self):
        return {"probe.w": self.w, "probe.b": self.b}


class RandomQueryProbe:
    """Frozen random queries mine the features; a linear classifier reads the
    simple average of the pooled bundle.  This is the no-synthesis arm of the
    component comparison."""

    def __init__(self, bb, num_classes, rng):
        self.backbone = bb
        init = rng.child("random_query")
        d = bb.config.width
        # four query tokens per block, matching the default synthesis width
        self.queries = [frozen(init.trunc_normal((4, d), std=0.02))
                        for _ in range(bb.config.depth)]
        self.w = parameter(init.trunc_normal((d, num_classes), std=0.02))
        self.b = parameter(np.zeros((1, num_classes)))

    def bundle(self, image, features=None):
        if features is None:
            features = forward_collect(self.backbone, image)
        f_att, f_ffn, h_out = [], [], []
        for i in range(self.backbone.config.depth):
            h_i, a_i, f_i = kem_forward(kem_view(self.backbone, i + 1),
                                        self.queries[i], features.xs[i])
            h_out.append(h_i)
            f_att.append(a_i)
            f_ffn.append(f_i)
        return FeatureBundle(f_att=f_att, f_ffn=f_ffn, h=h_out,
                             queries=list(self.queries))

    def feature(self, image, features=None):
        bundle = self.bundle(image, features)
        pooled = [mean_rows(t) for _, t in bundle.ordered()]
        return mean_rows(concat_rows(pooled))

    def sample_cache(self, image):
        return SampleCache(feature_row=self.feature(image))

    def logits(self, image, mask=None, features=None, cache=None):
        feat = cache.feature_row if cache is not None \
            else self.feature(image, features)
        return add(matmul(feat, self.w), self.b)

    def loss(self, image, label, mask=None, features=None, cache=None):
        return cross_entropy(self.logits(image, features=features, cache=cache),
                             label)

    def trainable(self):
        return {"probe.w": self.w, "probe.b": self.b}


class FullFinetune:
    """Every backbone weight trainable; classifier on the register token."""

    def __init__(self, config, num_classes, rng):
        self.backbone = build_backbone(config, rng, trainable=True)
        init = rng.child("head")
        self.w = parameter(init.trunc_normal((config.width, num_classes), std=0.02))
        self.b = parameter(np.zeros((1, num_classes)))

    def logits(self, image, mask=None, features=None):
        x = embed_tokens(self.backbone, image)
        for bw in self.backbone.blocks:
            x = apply_block(bw, x, self.backbone.config.heads)
        return add(matmul(slice_rows(x, 0, 1), self.w), self.b)

    def loss(self, image, label, mask=None, features=None):
        return cross_entropy(self.logits(image), label)

    def trainable(self):
        out = dict(self.backbone.named_params())
        out.update({"head.w": self.w, "head.b": self.b})
        return out


def _apply_block_lora(bw, x, heads, a_q, b_q, a_v, b_v):
    """Transformer block with low-rank deltas added to the q and v projections."""
    u = layernorm(x, bw.ln1_gamma, bw.ln1_beta)
    q = add(add(matmul(u, bw.wq), bw.bq), matmul(matmul(u, a_q), b_q))
    k = add(matmul(u, bw.wk), bw.bk)
    v = add(add(matmul(u, bw.wv), bw.bv), matmul(matmul(u, a_v), b_v))
    att = multihead_attention(q, k, v, heads)
    x = add(x, add(matmul(att, bw.wo), bw.bo))
    w = layernorm(x, bw.ln2_gamma, bw.ln2_beta)
    hdn = gelu(add(matmul(w, bw.w1), bw.b1))
    return add(x, add(matmul(hdn, bw.w2), bw.b2))


class LoraAtLayer:
    """LoRA on the q/v projections of a single block, plus a linear head."""

    def __init__(self, bb, layer, rank, num_classes, rng):
        if not 1 <= layer <= bb.config.depth:
            raise IndexError(f"layer {layer} out of range 1..{bb.config.depth}")
        self.backbone = bb
        self.layer = layer
        self.rank = rank
        d = bb.config.width
        init = rng.child(f"lora{layer}")
        self.a_q = parameter(init.trunc_normal((d, rank), std=0.02))
        self.b_q = parameter(np.zeros((rank, d)))
        self.a_v = parameter(init.trunc_normal((d, rank), std=0.02))
        self.b_v = parameter(np.zeros((rank, d)))
        self.w = parameter(init.trunc_normal((d, num_classes), std=0.02))
        self.b = parameter(np.zeros((1, num_classes)))

    def logits(self, image, mask=None, features=None):
        x = embed_tokens(self.backbone, image)
        heads = self.backbone.config.heads
        for i, bw in enumerate(self.backbone.blocks, start=1):
            if i == self.layer:
                x = _apply_block_lora(bw, x, heads, self.a_q, self.b_q,
                                      self.a_v, self.b_v)
            else:
                x = apply_block(bw, x, heads)
        return add(matmul(slice_rows(x, 0, 1), self.w), self.b)

    def loss(self, image, label, mask=None, features=None):
        return cross_entropy(self.logits(image), label)

    def trainable(self):
        return {"lora.a_q": self.a_q, "lora.b_q": self.b_q,
                "lora.a_v": self.a_v, "lora.b_v": self.b_v,
                "head.w": self.w, "head.b": self.b}
