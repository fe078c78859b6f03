"""Per-block query synthesis (trainable) and knowledge extraction (frozen).

A synthesis block turns the previous block's synthesized query into a new
one using only its own small parameters -- it never reads backbone features,
which is what keeps the backbone's activations out of backward storage.  An
extraction block then lets that query attend over the frozen features X_i
with the backbone's own reused weights.
"""

import json
from dataclasses import dataclass, asdict

import numpy as np

from .backbone import ConfigError, forward_collect, kem_view, multihead_attention
from .tensor import Tensor, add, gelu, layernorm, matmul, parameter, scale


@dataclass
class SynqtConfig:
    tokens: int = 4            # query token count n
    hidden: int = 48           # bottleneck width of input/FFN projections
    qkv_hidden: int = 8        # bottleneck width of the q/k/v projections
    attn_scale: float = 1.0    # s' in {0.1, 1}
    ffn_scale: float = 1.0     # s'' in {0.1, 1}
    dropfeat_p: float = 0.1
    use_prompt: bool = True        # ablation: drop the per-block prompt
    use_last_output: bool = True   # ablation: zero the previous query instead

    def validate(self, width):
        if self.tokens < 1:
            raise ConfigError("tokens must be >= 1")
        if not 1 <= self.hidden < width:
            raise ConfigError(f"hidden {self.hidden} must be in [1, {width})")
        if not 1 <= self.qkv_hidden < width:
            raise ConfigError(f"qkv_hidden {self.qkv_hidden} must be in [1, {width})")
        if self.attn_scale <= 0 or self.ffn_scale <= 0:
            raise ConfigError("scale factors must be positive")
        if not 0.0 <= self.dropfeat_p < 1.0:
            raise ConfigError(f"dropfeat_p {self.dropfeat_p} must be in [0, 1)")
        return self

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


class QsmParams:
    """Trainable weights of one query-synthesis block.

    ``init_std`` defaults to the usual 0.02; finite-difference checking uses
    a larger spread so the attention-logit path carries gradients big enough
    for central differences to resolve.
    """

    def __init__(self, rng, width, cfg, init_std=0.02):
        n, dh, qh = cfg.tokens, cfg.hidden, cfg.qkv_hidden
        d = width

        def w(shape):
            return parameter(rng.trunc_normal(shape, std=init_std))

        def zeros(shape):
            return parameter(np.zeros(shape))

        def ones(shape):
            return parameter(np.ones(shape))

        self.prompt = w((n, d)) if cfg.use_prompt else None
        self.w_down, self.b_down = w((d, dh)), zeros((1, dh))
        self.w_up, self.b_up = w((dh, d)), zeros((1, d))
        self.ln_attn_gamma, self.ln_attn_beta = ones((1, d)), zeros((1, d))
        for name in ("q", "k", "v"):
            setattr(self, f"w_down_{name}", w((d, qh)))
            setattr(self, f"b_down_{name}", zeros((1, qh)))
            setattr(self, f"w_up_{name}", w((qh, d)))
            # a key output bias shifts every softmax row uniformly, so its
            # gradient is identically zero; it is omitted as dead weight
            setattr(self, f"b_up_{name}", zeros((1, d)) if name != "k" else None)
        self.ln_ffn_gamma, self.ln_ffn_beta = ones((1, d)), zeros((1, d))
        self.w_ffn_down, self.b_ffn_down = w((d, dh)), zeros((1, dh))
        self.w_ffn_up, self.b_ffn_up = w((dh, d)), zeros((1, d))

    def named(self, prefix):
        out = {}
        for name, value in vars(self).items():
            if value is not None:
                out[f"{prefix}.{name}"] = value
        return out

    def tensors(self):
        return [v for v in vars(self).values() if v is not None]


def _bottleneck(x, w_down, b_down, w_up, b_up):
    return add(matmul(add(matmul(x, w_down), b_down), w_up), b_up)


def _qkv_projection(z_norm, params, which):
    w_down = getattr(params, f"w_down_{which}")
    b_down = getattr(params, f"b_down_{which}")
    w_up = getattr(params, f"w_up_{which}")
    b_up = getattr(params, f"b_up_{which}")
    out = matmul(gelu(add(matmul(z_norm, w_down), b_down)), w_up)
    return add(out, b_up) if b_up is not None else out


def qsm_forward(params, h_prev, cfg):
    """Synthesize the next query from the previous one and the block prompt.

    z' = up(down(h_prev + prompt)); single-head attention over the query
    tokens scaled by s'; bottleneck FFN scaled by s''; residuals throughout.
    """
    if params.prompt is not None:
        z0 = add(h_prev, params.prompt)
    else:
        z0 = h_prev
    z_prime = _bottleneck(z0, params.w_down, params.b_down, params.w_up, params.b_up)
    z_norm = layernorm(z_prime, params.ln_attn_gamma, params.ln_attn_beta)
    q = _qkv_projection(z_norm, params, "q")
    k = _qkv_projection(z_norm, params, "k")
    v = _qkv_projection(z_norm, params, "v")
    att = multihead_attention(q, k, v, heads=1)
    z_second = add(scale(att, cfg.attn_scale), z_prime)
    f_norm = layernorm(z_second, params.ln_ffn_gamma, params.ln_ffn_beta)
    # bottleneck FFN: down -> GELU -> up
    h1 = add(matmul(f_norm, params.w_ffn_down), params.b_ffn_down)
    h2 = add(matmul(gelu(h1), params.w_ffn_up), params.b_ffn_up)
    return add(scale(h2, cfg.ffn_scale), z_second)


def kem_keys_values(view, x_i):
    """Frozen keys/values of block i over its input features.

    These depend only on (weights, features), never on anything trainable,
    so callers may compute them once per sample and reuse them across steps.
    """
    bw = view.block
    kn = layernorm(x_i, bw.ln1_gamma, bw.ln1_beta)
    k = add(matmul(kn, bw.wk), bw.bk)
    v = add(matmul(kn, bw.wv), bw.bv)
    return k, v


def kem_forward(view, h_hat, x_i, kv=None):
    """Query-only extraction with block i's frozen weights.

    The query path normalizes and projects the synthesized tokens; keys and
    values come from the frozen features, so they carry no gradient and the
    only stored activations are the ones backward needs on the query side.
    """
    if h_hat.shape[1] != x_i.shape[1]:
        raise ValueError(f"width mismatch: query {h_hat.shape} vs features {x_i.shape}")
    bw = view.block
    qn = layernorm(h_hat, bw.ln1_gamma, bw.ln1_beta)
    q = add(matmul(qn, bw.wq), bw.bq)
    k, v = kv if kv is not None else kem_keys_values(view, x_i)
    att = multihead_attention(q, k, v, view.heads)
    f_att = add(matmul(att, bw.wo), bw.bo)
    e = add(f_att, h_hat)
    en = layernorm(e, bw.ln2_gamma, bw.ln2_beta)
    f_ffn = add(matmul(gelu(add(matmul(en, bw.w1), bw.b1)), bw.w2), bw.b2)
    h = add(f_ffn, e)
    return h, f_att, f_ffn


@dataclass
class FeatureBundle:
    """Per-block extracted features plus the synthesized queries that made them."""
    f_att: list
    f_ffn: list
    h: list
    queries: list

    @property
    def depth(self):
        return len(self.h)

    def ordered(self, use_att=True, use_ffn=True, use_h=True):
        """Canonical feature order: (F_att_i, F_ffn_i, H_i) per block, so the
        final block's H lands last and serves as the conditioning feature."""
        out = []
        for i in range(self.depth):
            if use_att:
                out.append((f"att.{i + 1}", self.f_att[i]))
            if use_ffn:
                out.append((f"ffn.{i + 1}", self.f_ffn[i]))
            if use_h:
                out.append((f"h.{i + 1}", self.h[i]))
        return out


def stack_forward(bb, qsm_params, image, cfg, features=None, kem_kv=None):
    """Run every synthesis/extraction pair over one image.

    The query chain is self-contained: block i's synthesis input is block
    i-1's synthesized query (zeros for block 1), never an extraction output,
    so perturbing any X_j leaves every synthesized query unchanged.
    """
    if len(qsm_params) != bb.config.depth:
        raise ValueError(f"need one QSM per block: {len(qsm_params)} vs "
                         f"depth {bb.config.depth}")
    if features is None:
        features = forward_collect(bb, image)
    n, d = cfg.tokens, bb.config.width
    h_prev = Tensor(np.zeros((n, d)))
    f_att, f_ffn, h_out, queries = [], [], [], []
    for i in range(bb.config.depth):
        h_hat = qsm_forward(qsm_params[i], h_prev, cfg)
        h_i, f_att_i, f_ffn_i = kem_forward(
            kem_view(bb, i + 1), h_hat, features.xs[i],
            kv=kem_kv[i] if kem_kv is not None else None)
        queries.append(h_hat)
        h_out.append(h_i)
        f_att.append(f_att_i)
        f_ffn.append(f_ffn_i)
        if cfg.use_last_output:
            h_prev = h_hat
        else:
            h_prev = Tensor(np.zeros((n, d)))
    return FeatureBundle(f_att=f_att, f_ffn=f_ffn, h=h_out, queries=queries)
