"""Independent high-precision difference-quotient oracle for the full model.

The difference quotients rerun a separate, plain-NumPy transcription of the
forward pass in 80-bit extended precision.  That keeps the oracle off the
tape's code path and pushes the quotient's rounding floor about three
decades below float64, so even weakly-coupled coordinates are resolvable at
the pinned step size.  Blocks upstream of a perturbed parameter are reused
from cache; only the affected suffix of the stack is recomputed.
"""

import numpy as np

from . import kernels
from .backbone import forward_collect

LD = np.longdouble
LN_EPS = 1e-6


def _ln(x, gamma, beta):
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + LD(LN_EPS)) * gamma + beta


def _gelu(x):
    c, a = LD(kernels.GELU_C), LD(kernels.GELU_A)
    return 0.5 * x * (1.0 + np.tanh(c * (x + a * x ** 3)))


def _softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _attention(q, k, v, heads):
    nq, d = q.shape
    hd = d // heads
    sc = 1.0 / np.sqrt(LD(hd))
    if heads == 1:
        probs = _softmax(q @ k.T * sc)
        return probs @ v
    qh = np.ascontiguousarray(q.reshape(nq, heads, hd).transpose(1, 0, 2))
    kh = np.ascontiguousarray(k.reshape(k.shape[0], heads, hd).transpose(1, 0, 2))
    vh = np.ascontiguousarray(v.reshape(v.shape[0], heads, hd).transpose(1, 0, 2))
    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * sc
    e = np.exp(scores - scores.max(axis=2, keepdims=True))
    probs = e / e.sum(axis=2, keepdims=True)
    out = np.matmul(probs, vh)
    return out.transpose(1, 0, 2).reshape(nq, d)


class _HpParams:
    """Longdouble copies of a model's parameters, keyed like the model."""

    def __init__(self, named):
        self.values = {name: t.data.astype(LD) for name, t in named.items()}

    def __getitem__(self, name):
        return self.values[name]


def _qsm(hp, prefix, h_prev, cfg):
    p = hp[f"{prefix}.prompt"] if cfg.use_prompt else None
    z0 = h_prev + p if p is not None else h_prev
    z_prime = (z0 @ hp[f"{prefix}.w_down"] + hp[f"{prefix}.b_down"]) \
        @ hp[f"{prefix}.w_up"] + hp[f"{prefix}.b_up"]
    zn = _ln(z_prime, hp[f"{prefix}.ln_attn_gamma"], hp[f"{prefix}.ln_attn_beta"])

    def proj(which):
        out = _gelu(zn @ hp[f"{prefix}.w_down_{which}"]
                    + hp[f"{prefix}.b_down_{which}"]) @ hp[f"{prefix}.w_up_{which}"]
        if which != "k":
            out = out + hp[f"{prefix}.b_up_{which}"]
        return out

    att = _attention(proj("q"), proj("k"), proj("v"), heads=1)
    z_second = LD(cfg.attn_scale) * att + z_prime
    fn = _ln(z_second, hp[f"{prefix}.ln_ffn_gamma"], hp[f"{prefix}.ln_ffn_beta"])
    ffn = _gelu(fn @ hp[f"{prefix}.w_ffn_down"] + hp[f"{prefix}.b_ffn_down"]) \
        @ hp[f"{prefix}.w_ffn_up"] + hp[f"{prefix}.b_ffn_up"]
    return LD(cfg.ffn_scale) * ffn + z_second


def _kem(bw, h_hat, k, v, heads):
    # keys/values over the frozen features are parameter-independent and
    # arrive precomputed
    qn = _ln(h_hat, bw["ln1_gamma"], bw["ln1_beta"])
    q = qn @ bw["wq"] + bw["bq"]
    f_att = _attention(q, k, v, heads) @ bw["wo"] + bw["bo"]
    e = f_att + h_hat
    en = _ln(e, bw["ln2_gamma"], bw["ln2_beta"])
    f_ffn = _gelu(en @ bw["w1"] + bw["b1"]) @ bw["w2"] + bw["b2"]
    return f_ffn + e, f_att, f_ffn


def _head_loss(hp, pooled_rows, h_l_mean, cfg, label):
    down, bd = hp["head.proj.w_down"], hp["head.proj.b_down"]
    up, bu = hp["head.proj.w_up"], hp["head.proj.b_up"]
    projected = _gelu(pooled_rows @ down + bd) @ up + bu
    weights = _sigmoid(h_l_mean @ hp["head.gen_w"] + hp["head.gen_b"])
    agg = weights @ projected[:-1, :] + projected[-1:, :]
    z = _ln(agg, hp["head.ln_gamma"], hp["head.ln_beta"])
    logits = _gelu(z @ hp["head.w_cls1"] + hp["head.b_cls1"]) \
        @ hp["head.w_cls2"] + hp["head.b_cls2"]
    row = logits[0]
    hi = row.max()
    return hi + np.log(np.exp(row - hi).sum()) - row[label]


class HpLoss:
    """Cached-suffix evaluation of the full loss in extended precision.

    Supports the default configuration (shared projection, conditional
    aggregation, all feature groups, evaluation-mode masking).
    """

    def __init__(self, model, image, label, features=None):
        cfg = model.cfg
        if model.head_cfg.aggregation != "conditional" \
                or model.head_cfg.projection != "shared" \
                or not (model.head_cfg.use_att and model.head_cfg.use_ffn
                        and model.head_cfg.use_h):
            raise ValueError("high-precision oracle covers the default head only")
        self.model = model
        self.cfg = cfg
        self.label = int(label)
        self.depth = model.backbone.config.depth
        self.heads = model.backbone.config.heads
        if features is None:
            features = forward_collect(model.backbone, image)
        self.blocks = [{name.split(".")[-1]: t.data.astype(LD)
                        for name, t in bw.named("b").items()}
                       for bw in model.backbone.blocks]
        self.keys, self.values_kv = [], []
        for bw, x in zip(self.blocks, features.xs):
            kn = _ln(x.data.astype(LD), bw["ln1_gamma"], bw["ln1_beta"])
            self.keys.append(kn @ bw["wk"] + bw["bk"])
            self.values_kv.append(kn @ bw["wv"] + bw["bv"])
        self.hp = _HpParams(model.named_params())

    def loss_from_block(self, first_block, cache=None):
        """Recompute synthesis/extraction from ``first_block`` (0-based) on,
        reusing cached earlier outputs, then the head and the loss."""
        cfg = self.cfg
        n, d = cfg.tokens, self.model.backbone.config.width
        queries = list(cache["queries"][:first_block]) if cache else []
        pooled = list(cache["pooled"][:3 * first_block]) if cache else []
        h_prev = queries[-1] if queries else np.zeros((n, d), dtype=LD)
        if not cfg.use_last_output:
            h_prev = np.zeros((n, d), dtype=LD)
        h_last = cache["h_last"] if cache and first_block == self.depth else None
        for i in range(first_block, self.depth):
            h_hat = _qsm(self.hp, f"qsm{i + 1:02d}", h_prev, cfg)
            h_i, f_att, f_ffn = _kem(self.blocks[i], h_hat, self.keys[i],
                                     self.values_kv[i], self.heads)
            pooled.extend([f_att.mean(axis=0), f_ffn.mean(axis=0), h_i.mean(axis=0)])
            h_prev = h_hat if cfg.use_last_output else np.zeros((n, d), dtype=LD)
            queries.append(h_hat)
            if i == self.depth - 1:
                h_last = h_i
        rows = np.stack(pooled, axis=0)
        # bundle order is (att, ffn, h) per block, so h of the last block --
        # the conditioning feature -- is already the final row
        state = {"queries": queries, "pooled": pooled, "h_last": h_last}
        value = _head_loss(self.hp.values, rows, h_last.mean(axis=0)[None, :],
                           self.cfg, self.label)
        return value, state

    def block_of(self, name):
        """Index of the first stack block a parameter influences; head
        parameters influence nothing before the head itself."""
        if name.startswith("qsm"):
            return int(name[3:5]) - 1
        return self.depth


def full_grad_check(model, image, label, features=None, eps=1e-5):
    """Max of |analytic - central| / (|analytic| + |central| + 1e-12) over
    every element of every trainable tensor.

    Analytic gradients come from the tape; the central differences come from
    the extended-precision mirror above.
    """
    from .tensor import Tape, backward

    if features is None:
        features = forward_collect(model.backbone, image)
    with Tape() as tape:
        loss = model.loss(image, label, features=features)
        grad_map = backward(loss, tape)

    hp_loss = HpLoss(model, image, label, features=features)
    base_value, cache = hp_loss.loss_from_block(0)
    mismatch = abs(float(base_value) - loss.item())
    if mismatch > 1e-9 * max(1.0, abs(loss.item())):
        raise AssertionError(f"precision mirror disagrees with the model: "
                             f"{float(base_value)} vs {loss.item()}")

    eps = LD(eps)
    worst = 0.0
    for name, p in model.named_params().items():
        analytic = grad_map[p].data.reshape(-1) if p in grad_map \
            else np.zeros(p.numel)
        hp_flat = hp_loss.hp.values[name].reshape(-1)
        start = hp_loss.block_of(name)
        for i in range(hp_flat.size):
            orig = hp_flat[i]
            hp_flat[i] = orig + eps
            f_plus, _ = hp_loss.loss_from_block(start, cache)
            hp_flat[i] = orig - eps
            f_minus, _ = hp_loss.loss_from_block(start, cache)
            hp_flat[i] = orig
            numeric = float((f_plus - f_minus) / (2 * eps))
            a = float(analytic[i])
            rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, rel)
    return worst
