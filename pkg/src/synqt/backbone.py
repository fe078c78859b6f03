"""A frozen toy vision transformer.

The backbone exists to be mined, not trained: ``forward_collect`` runs a
gradient-free pass and returns the token sequence entering each block
(X_1 .. X_l), and ``kem_view`` exposes read-only handles onto a block's
weights so the extraction modules can reuse them.
"""

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .checkpoint import restore_into
from .rng import Rng
from .tensor import (Tensor, ShapeError, add, concat_cols, concat_rows, gelu,
                     layernorm, matmul, scale, slice_cols, softmax_rows)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int
    patch_size: int
    depth: int
    width: int
    heads: int
    mlp_ratio: int = 4
    num_register_tokens: int = 1
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image size {self.image_size} not divisible by "
                              f"patch size {self.patch_size}")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by "
                              f"{self.heads} heads")
        for name in ("image_size", "patch_size", "depth", "width", "heads",
                     "mlp_ratio", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.num_register_tokens < 1:
            raise ConfigError("at least one register token is required")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def tokens(self):
        return self.num_patches + self.num_register_tokens

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def toy_config(**overrides):
    """Desk-scale defaults: 16px images, 4px patches, 4 blocks of width 32."""
    base = dict(image_size=16, patch_size=4, depth=4, width=32, heads=4)
    base.update(overrides)
    return BackboneConfig(**base)


def vit_b16_config(**overrides):
    """ViT-B/16 geometry, instantiable for counting without trained weights."""
    base = dict(image_size=224, patch_size=16, depth=12, width=768, heads=12)
    base.update(overrides)
    return BackboneConfig(**base)


@dataclass
class BlockWeights:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self):
        return [getattr(self, f.name) for f in self.__dataclass_fields__.values()]

    def named(self, prefix):
        return {f"{prefix}.{f.name}": getattr(self, f.name)
                for f in self.__dataclass_fields__.values()}


@dataclass
class FrozenBackbone:
    config: BackboneConfig
    patch_w: Tensor
    patch_b: Tensor
    cls: Tensor
    pos: Tensor
    blocks: list

    def named_params(self):
        out = {"patch.w": self.patch_w, "patch.b": self.patch_b,
               "cls": self.cls, "pos": self.pos}
        for i, blk in enumerate(self.blocks, start=1):
            out.update(blk.named(f"block{i:02d}"))
        return out

    def tensors(self):
        return list(self.named_params().values())


@dataclass
class FeatureStack:
    """xs[i-1] is the input to block i; x_final is the output of block l."""
    xs: list
    x_final: Tensor


@dataclass
class KemView:
    """Read-only handle onto one block's weights for reuse by extraction."""
    index: int
    block: BlockWeights
    heads: int

    def tensors(self):
        return self.block.tensors()


def _make_block(rng, d, mlp_hidden, make):
    def w(shape):
        return make(rng.trunc_normal(shape, std=0.02))

    def zeros(shape):
        return make(np.zeros(shape))

    def ones(shape):
        return make(np.ones(shape))

    return BlockWeights(
        ln1_gamma=ones((1, d)), ln1_beta=zeros((1, d)),
        wq=w((d, d)), bq=zeros((1, d)),
        wk=w((d, d)), bk=zeros((1, d)),
        wv=w((d, d)), bv=zeros((1, d)),
        wo=w((d, d)), bo=zeros((1, d)),
        ln2_gamma=ones((1, d)), ln2_beta=zeros((1, d)),
        w1=w((d, mlp_hidden)), b1=zeros((1, mlp_hidden)),
        w2=w((mlp_hidden, d)), b2=zeros((1, d)),
    )


def build_backbone(config, rng=None, checkpoint=None, trainable=False):
    """Deterministically initialized (or checkpoint-loaded) backbone.

    ``trainable=True`` builds the same structure with gradient-enabled
    weights; it exists for the accounting oracles, the default is frozen.
    """
    from .tensor import frozen as frozen_param, parameter

    make = parameter if trainable else frozen_param
    rng = rng if rng is not None else Rng(0)
    init = rng.child("backbone")
    d = config.width
    backbone = FrozenBackbone(
        config=config,
        patch_w=make(init.trunc_normal((config.patch_dim, d), std=0.02)),
        patch_b=make(np.zeros((1, d))),
        cls=make(init.trunc_normal((config.num_register_tokens, d), std=0.02)),
        pos=make(init.trunc_normal((config.tokens, d), std=0.02)),
        blocks=[_make_block(init, d, config.mlp_ratio * d, make)
                for _ in range(config.depth)],
    )
    if checkpoint is not None:
        restore_into(backbone.named_params(), checkpoint)
    return backbone


def patchify(image, config):
    """(H, W, C) image -> (num_patches, patch_dim) row-major patch matrix."""
    arr = np.asarray(getattr(image, "data", image), dtype=np.float64)
    expect = (config.image_size, config.image_size, config.channels)
    if arr.shape != expect:
        raise ShapeError(f"image shape {arr.shape} does not match {expect}")
    ps = config.patch_size
    g = config.grid
    rows = []
    for py in range(g):
        for px in range(g):
            rows.append(arr[py * ps:(py + 1) * ps, px * ps:(px + 1) * ps, :].reshape(-1))
    return np.stack(rows, axis=0)


def embed_tokens(backbone, image):
    """Patch projection, register-token prepend, positional add -> X_1."""
    p0 = Tensor(patchify(image, backbone.config))
    pe = add(matmul(p0, backbone.patch_w), backbone.patch_b)
    tok = concat_rows([backbone.cls, pe])
    return add(tok, backbone.pos)


def multihead_attention(q, k, v, heads):
    """Scaled dot-product attention with column-sliced heads.

    Single-head calls skip the slicing; retained-scalar counts are identical
    either way.
    """
    d = q.shape[1]
    if d % heads != 0:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    hd = d // heads
    sc = 1.0 / math.sqrt(hd)
    if heads == 1:
        probs = softmax_rows(scale(matmul(q, k, transpose_b=True), sc))
        return matmul(probs, v)
    outs = []
    for h in range(heads):
        qh = slice_cols(q, h * hd, (h + 1) * hd)
        kh = slice_cols(k, h * hd, (h + 1) * hd)
        vh = slice_cols(v, h * hd, (h + 1) * hd)
        probs = softmax_rows(scale(matmul(qh, kh, transpose_b=True), sc))
        outs.append(matmul(probs, vh))
    return concat_cols(outs)


def apply_block(bw, x, heads):
    """Pre-LN transformer block: x + Attn(LN(x)), then x + FFN(LN(x))."""
    u = layernorm(x, bw.ln1_gamma, bw.ln1_beta)
    q = add(matmul(u, bw.wq), bw.bq)
    k = add(matmul(u, bw.wk), bw.bk)
    v = add(matmul(u, bw.wv), bw.bv)
    att = multihead_attention(q, k, v, heads)
    x = add(x, add(matmul(att, bw.wo), bw.bo))
    w = layernorm(x, bw.ln2_gamma, bw.ln2_beta)
    hdn = gelu(add(matmul(w, bw.w1), bw.b1))
    return add(x, add(matmul(hdn, bw.w2), bw.b2))


def forward_collect(backbone, image):
    """Inputs to every block, gathered without any gradient recording.

    All backbone weights are gradient-free, so even under an active tape this
    adds zero nodes and zero retained scalars.
    """
    x = embed_tokens(backbone, image)
    xs = [x]
    for bw in backbone.blocks:
        x = apply_block(bw, x, backbone.config.heads)
        xs.append(x)
    return FeatureStack(xs=xs[:-1], x_final=xs[-1])


def kem_view(backbone, i):
    """Read-only view of block i's weights (1-based, 1 <= i <= depth)."""
    if not 1 <= i <= backbone.config.depth:
        raise IndexError(f"block index {i} out of range 1..{backbone.config.depth}")
    return KemView(index=i, block=backbone.blocks[i - 1], heads=backbone.config.heads)
