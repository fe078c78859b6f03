"""Analytic ledgers: trainable parameters, backward-retained activation
scalars, and inference cost per tuning scheme.

The activation model counts exactly what the gradient tape counts: values a
primitive keeps for backward, deduplicated when shared, with parameters and
weights excluded.  Frozen regions that no gradient crosses contribute
nothing; frozen regions that gradients merely pass through store what the
chain rule needs and no more.  On instantiable toy configurations these
closed forms must equal the measured tape totals exactly.

Cost is counted in multiply-accumulate units (one fused multiply-add = one
unit), the convention profiler-reported transformer figures use; elementwise
work is charged at small documented per-element constants.  Memory in bytes
models 32-bit training: four bytes per stored scalar.
"""

from dataclasses import dataclass, field

from .backbone import BackboneConfig, ConfigError
from .blocks import SynqtConfig

BYTES_PER_SCALAR = 4  # 32-bit training regime

# per-element cost constants for non-matmul work (matmuls dominate)
LN_COST = 8
GELU_COST = 10
SOFTMAX_COST = 5
SIGMOID_COST = 4
ADD_COST = 1

SCHEME_KINDS = ("full_finetune", "linear_probe", "bitfit", "vpt_deep",
                "lora", "adapter", "synqt")


@dataclass
class LedgerItem:
    name: str
    category: str
    count: int


@dataclass
class Ledger:
    """Itemized account; each filled total equals the sum of its items."""
    items: list = field(default_factory=list)
    trainable_params: int = None
    stored_activation_scalars: int = None
    flops: int = None

    def add(self, name, category, count):
        self.items.append(LedgerItem(name, category, int(count)))

    @property
    def total(self):
        return sum(item.count for item in self.items)

    def category_total(self, category):
        return sum(item.count for item in self.items if item.category == category)

    @property
    def bytes(self):
        if self.stored_activation_scalars is None:
            return None
        return self.stored_activation_scalars * BYTES_PER_SCALAR

    def check(self):
        for value in (self.trainable_params, self.stored_activation_scalars,
                      self.flops):
            if value is not None and value != self.total:
                raise AssertionError(f"ledger total {value} != sum of items "
                                     f"{self.total}")
        if any(item.count < 0 for item in self.items):
            raise AssertionError("negative ledger item")
        return self

    def to_dict(self):
        out = {"items": [{"name": i.name, "category": i.category, "count": i.count}
                         for i in self.items]}
        if self.trainable_params is not None:
            out["trainable_params"] = self.trainable_params
        if self.stored_activation_scalars is not None:
            out["stored_activation_scalars"] = self.stored_activation_scalars
            out["bytes"] = self.bytes
        if self.flops is not None:
            out["flops"] = self.flops
        return out


@dataclass
class Scheme:
    """A tuning scheme applied to an architecture, for accounting purposes."""
    kind: str
    arch: BackboneConfig
    num_classes: int = 100
    tokens: int = 10          # vpt_deep prompt length
    rank: int = 4             # lora rank
    at_layer: int = None      # lora: single tuned layer (None = every layer)
    adapter_hidden: int = 64
    synqt: SynqtConfig = None

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ConfigError(f"unknown scheme kind {self.kind!r}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.kind == "vpt_deep" and self.tokens < 1:
            raise ConfigError("prompt length must be >= 1")
        if self.kind == "lora":
            if self.rank < 1:
                raise ConfigError("rank must be >= 1")
            if self.at_layer is not None and not 1 <= self.at_layer <= self.arch.depth:
                raise ConfigError(f"at_layer {self.at_layer} out of range "
                                  f"1..{self.arch.depth}")
        if self.kind == "adapter" and self.adapter_hidden < 1:
            raise ConfigError("adapter hidden width must be >= 1")
        if self.kind == "synqt":
            if self.synqt is None:
                self.synqt = SynqtConfig()
            self.synqt.validate(self.arch.width)


def synqt_scheme(arch, n=4, hidden=48, qkv_hidden=8, num_classes=100):
    return Scheme(kind="synqt", arch=arch, num_classes=num_classes,
                  synqt=SynqtConfig(tokens=n, hidden=hidden, qkv_hidden=qkv_hidden))


# ---------------------------------------------------------------------------
# trainable-parameter census
# ---------------------------------------------------------------------------

def _backbone_param_count(arch):
    d, md, m = arch.width, arch.mlp_ratio * arch.width, arch.tokens
    patch = arch.patch_dim * d + d
    embed = m * d + arch.num_register_tokens * d
    block = (4 * d                       # two layer norms
             + 4 * (d * d + d)           # q, k, v, output projections
             + (d * md + md)             # ffn in
             + (md * d + d))             # ffn out
    return patch + embed + arch.depth * block


def _bitfit_param_count(arch):
    d, md = arch.width, arch.mlp_ratio * arch.width
    per_block = 3 * d + d + md + d + 2 * d  # qkv, proj, ffn and norm biases
    return arch.depth * per_block + d       # plus the patch-projection bias


def _qsm_block_params(d, cfg):
    n, dh, qh = cfg.tokens, cfg.hidden, cfg.qkv_hidden
    prompt = n * d if cfg.use_prompt else 0
    bottleneck = d * dh + dh + dh * d + d
    qkv = 3 * (d * qh + qh + qh * d) + 2 * d  # key path has no output bias
    norms = 4 * d
    return prompt + 2 * bottleneck + qkv + norms


def _head_params(arch, hidden, num_classes):
    d, dh = arch.width, hidden
    gated = 3 * arch.depth - 1
    shared_proj = d * dh + dh + dh * d + d
    generator = d * gated + gated
    classifier = 2 * d + (d * dh + dh) + (dh * num_classes + num_classes)
    return shared_proj, generator, classifier


def count_params(scheme):
    """Census of trainable parameters from declared shapes."""
    arch = scheme.arch
    d = arch.width
    ledger = Ledger()
    head_linear = d * scheme.num_classes + scheme.num_classes

    if scheme.kind == "full_finetune":
        ledger.add("backbone", "backbone", _backbone_param_count(arch))
        ledger.add("classifier", "head", head_linear)
    elif scheme.kind == "linear_probe":
        ledger.add("backbone", "backbone", 0)
        ledger.add("classifier", "head", head_linear)
    elif scheme.kind == "bitfit":
        ledger.add("biases", "backbone", _bitfit_param_count(arch))
        ledger.add("classifier", "head", head_linear)
    elif scheme.kind == "vpt_deep":
        ledger.add("prompts", "backbone", arch.depth * scheme.tokens * d)
        ledger.add("classifier", "head", head_linear)
    elif scheme.kind == "lora":
        blocks = 1 if scheme.at_layer is not None else arch.depth
        ledger.add("lora_qv", "backbone", blocks * 4 * d * scheme.rank)
        ledger.add("classifier", "head", head_linear)
    elif scheme.kind == "adapter":
        a = scheme.adapter_hidden
        per_adapter = d * a + a + a * d + d
        ledger.add("adapters", "backbone", arch.depth * 2 * per_adapter)
        ledger.add("classifier", "head", head_linear)
    elif scheme.kind == "synqt":
        cfg = scheme.synqt
        ledger.add("qsm_blocks", "qsm", arch.depth * _qsm_block_params(d, cfg))
        proj, gen, clf = _head_params(arch, cfg.hidden, scheme.num_classes)
        ledger.add("head_projection", "head", proj)
        ledger.add("head_generator", "head", gen)
        ledger.add("head_classifier", "head", clf)
    ledger.trainable_params = ledger.total
    return ledger.check()


# ---------------------------------------------------------------------------
# stored-activation ledger
# ---------------------------------------------------------------------------
# Per-block costs below are scalars retained per sample.  Derivations mirror
# the forward graphs in backbone.py / blocks.py / head.py one op at a time:
# matmul keeps an operand only if the other side needs its gradient, GELU
# keeps its input, softmax and sigmoid keep their outputs, layer norm keeps
# the normalized rows plus one inverse-stddev per row, and a value consumed
# twice is stored once.

def _block_full(m, d, heads, mlp):
    # everything trainable: both norms, the normed input (kept once for the
    # q/k/v weight grads), q+k slices, v slices, probs, the attention output
    # kept for the projection grad, and both ffn operands around the GELU
    return (8 + 2 * mlp) * m * d + heads * m * m + 2 * m


def _block_frozen_on_path(m, d, heads, mlp):
    # frozen weights, gradient passing through: weight grads vanish, so only
    # the norms, q/k slices, v slices, probs and the GELU input remain
    return (5 + mlp) * m * d + heads * m * m + 2 * m


def _block_lora_const_input(m, d, heads, mlp, rank):
    # tuned block whose input is still gradient-free: the normed input is
    # kept for the lora grads, k stays constant (kept for the q grad), v and
    # the probs are live, plus ln2 and the GELU input
    return (4 + mlp) * m * d + 2 * m * rank + heads * m * m + m


def _block_lora_on_path(m, d, heads, mlp, rank):
    return (6 + mlp) * m * d + 2 * m * rank + heads * m * m + 2 * m


def _qsm_activation(n, d, dh, qh):
    # input kept for the down-projection grad, bottleneck mid, pre-attention
    # norm (rows + rstd) kept once for three projections, six small GELU
    # operands, q+k+v, probs, ffn norm and its two GELU operands
    return 8 * n * d + 3 * n * dh + 6 * n * qh + n * n + 2 * n


def _kem_activation(n, m, d, heads, mlp):
    # two norms on the query side, frozen k and v rows kept for the query
    # gradient, per-head probs, and the frozen-ffn GELU input
    return (2 + mlp) * n * d + 2 * m * d + heads * n * m + 2 * n


def _head_activation(depth, d, dh):
    # pooled rows kept per feature, two GELU operands per shared projection,
    # the conditioning vector, sigmoid output + mask row + gated weight row,
    # the stacked gated projections, classifier norm and GELU operands
    features = 3 * depth
    gated = features - 1
    return (features * (d + 2 * dh) + gated * (d + 3)
            + 3 * d + 2 * dh + 1)


def activation_ledger(scheme, batch_size=1):
    """Scalars retained for backward, itemized; ``batch_size`` multiplies
    every per-sample item."""
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    arch = scheme.arch
    m, d, heads, mlp = arch.tokens, arch.width, arch.heads, arch.mlp_ratio
    bsz = batch_size
    ledger = Ledger()
    classes = scheme.num_classes

    if scheme.kind == "full_finetune":
        ledger.add("patch_matrix", "backbone", bsz * arch.num_patches * arch.patch_dim)
        ledger.add("blocks", "backbone",
                   bsz * arch.depth * _block_full(m, d, heads, mlp))
        ledger.add("head_feature", "head", bsz * d)
        ledger.add("loss_probs", "loss", bsz * classes)
    elif scheme.kind == "linear_probe":
        ledger.add("backbone", "backbone", 0)
        ledger.add("head_feature", "head", bsz * d)
        ledger.add("loss_probs", "loss", bsz * classes)
    elif scheme.kind == "bitfit":
        ledger.add("blocks", "backbone",
                   bsz * arch.depth * _block_frozen_on_path(m, d, heads, mlp))
        ledger.add("head_feature", "head", bsz * d)
        ledger.add("loss_probs", "loss", bsz * classes)
    elif scheme.kind == "vpt_deep":
        mp = m + scheme.tokens
        ledger.add("blocks", "backbone",
                   bsz * arch.depth * _block_frozen_on_path(mp, d, heads, mlp))
        ledger.add("head_feature", "head", bsz * d)
        ledger.add("loss_probs", "loss", bsz * classes)
    elif scheme.kind == "lora":
        if scheme.at_layer is not None:
            k = scheme.at_layer
            ledger.add("tuned_block", "lora",
                       bsz * _block_lora_const_input(m, d, heads, mlp, scheme.rank))
            ledger.add("blocks_above", "backbone",
                       bsz * (arch.depth - k) * _block_frozen_on_path(m, d, heads, mlp))
        else:
            ledger.add("first_block", "lora",
                       bsz * _block_lora_const_input(m, d, heads, mlp, scheme.rank))
            ledger.add("blocks_above", "lora",
                       bsz * (arch.depth - 1)
                       * _block_lora_on_path(m, d, heads, mlp, scheme.rank))
        ledger.add("head_feature", "head", bsz * d)
        ledger.add("loss_probs", "loss", bsz * classes)
    elif scheme.kind == "adapter":
        per_adapter = m * d + 2 * m * scheme.adapter_hidden
        ledger.add("blocks", "backbone",
                   bsz * arch.depth * _block_frozen_on_path(m, d, heads, mlp))
        ledger.add("adapters", "adapter", bsz * arch.depth * 2 * per_adapter)
        ledger.add("head_feature", "head", bsz * d)
        ledger.add("loss_probs", "loss", bsz * classes)
    elif scheme.kind == "synqt":
        cfg = scheme.synqt
        n, dh, qh = cfg.tokens, cfg.hidden, cfg.qkv_hidden
        ledger.add("backbone", "backbone", 0)
        ledger.add("qsm_blocks", "qsm",
                   bsz * arch.depth * _qsm_activation(n, d, dh, qh))
        ledger.add("kem_blocks", "kem",
                   bsz * arch.depth * _kem_activation(n, m, d, heads, mlp))
        ledger.add("head", "head", bsz * _head_activation(arch.depth, d, dh))
        ledger.add("loss_probs", "loss", bsz * classes)
    ledger.stored_activation_scalars = ledger.total
    return ledger.check()


def entanglement_sweep(arch, rank=4, num_classes=100, batch_size=1):
    """Stored scalars for LoRA tuning exactly one layer k, for k = 1..depth.
    Deeper tuning points free every block below them, so the sweep falls
    strictly as k rises."""
    out = []
    for k in range(1, arch.depth + 1):
        scheme = Scheme(kind="lora", arch=arch, rank=rank, at_layer=k,
                        num_classes=num_classes)
        out.append((k, activation_ledger(scheme, batch_size).stored_activation_scalars))
    return out


# ---------------------------------------------------------------------------
# inference cost
# ---------------------------------------------------------------------------

def _linear_cost(rows, d_in, d_out):
    return rows * d_in * d_out + rows * d_out * ADD_COST  # product + bias


def _backbone_flops(arch):
    m, d, md, heads = arch.tokens, arch.width, arch.mlp_ratio * arch.width, arch.heads
    patch = _linear_cost(arch.num_patches, arch.patch_dim, d) + m * d * ADD_COST
    per_block = (
        2 * LN_COST * m * d
        + 3 * _linear_cost(m, d, d)        # q, k, v
        + m * m * d + heads * m * m * (SOFTMAX_COST + 1)  # scores + softmax/scale
        + m * m * d                         # probabilities times values
        + _linear_cost(m, d, d)             # output projection
        + 2 * m * d * ADD_COST              # residuals
        + _linear_cost(m, d, md) + GELU_COST * m * md + _linear_cost(m, md, d)
    )
    return patch, arch.depth * per_block


def _qsm_flops(n, d, dh, qh):
    per_bottleneck = _linear_cost(n, d, dh) + _linear_cost(n, dh, d)
    qkv = 3 * (_linear_cost(n, d, qh) + GELU_COST * n * qh + _linear_cost(n, qh, d))
    attn = n * n * d + n * n * (SOFTMAX_COST + 1) + n * n * d
    norms = 2 * LN_COST * n * d
    gelu_mid = GELU_COST * n * dh
    residuals = 4 * n * d * ADD_COST  # two residual adds and two scale factors
    return per_bottleneck * 2 + qkv + attn + norms + gelu_mid + residuals


def _kem_flops(n, m, d, md, heads):
    # keys/values reuse the backbone block's own projections of X_i, so only
    # the query path, the cross attention and the small-token FFN pay
    query = LN_COST * n * d + _linear_cost(n, d, d)
    attn = n * m * d + heads * n * m * (SOFTMAX_COST + 1) + n * m * d
    proj = _linear_cost(n, d, d)
    ffn = LN_COST * n * d + _linear_cost(n, d, md) + GELU_COST * n * md \
        + _linear_cost(n, md, d)
    residuals = 2 * n * d * ADD_COST
    return query + attn + proj + ffn + residuals


def _head_flops(depth, d, dh, classes, n):
    features = 3 * depth
    gated = features - 1
    pool = features * n * d
    proj = features * (_linear_cost(1, d, dh) + GELU_COST * dh + _linear_cost(1, dh, d))
    generate = _linear_cost(1, d, gated) + SIGMOID_COST * gated
    aggregate = gated * d + gated + d * ADD_COST
    classify = LN_COST * d + _linear_cost(1, d, dh) + GELU_COST * dh \
        + _linear_cost(1, dh, classes)
    return pool + proj + generate + aggregate + classify


def flop_count(scheme):
    """Multiply-accumulate count for one image at the scheme's geometry."""
    arch = scheme.arch
    d, md = arch.width, arch.mlp_ratio * arch.width
    ledger = Ledger()

    if scheme.kind == "vpt_deep":
        wider = BackboneConfig(
            image_size=arch.image_size, patch_size=arch.patch_size,
            depth=arch.depth, width=arch.width, heads=arch.heads,
            mlp_ratio=arch.mlp_ratio,
            num_register_tokens=arch.num_register_tokens + scheme.tokens,
            channels=arch.channels)
        patch, blocks = _backbone_flops(wider)
    else:
        patch, blocks = _backbone_flops(arch)
    ledger.add("patch_embed", "backbone", patch)
    ledger.add("blocks", "backbone", blocks)

    if scheme.kind == "lora":
        m = arch.tokens
        n_blocks = 1 if scheme.at_layer is not None else arch.depth
        ledger.add("lora_qv", "lora", n_blocks * 4 * m * d * scheme.rank)
    elif scheme.kind == "adapter":
        m, a = arch.tokens, scheme.adapter_hidden
        per_adapter = _linear_cost(m, d, a) + GELU_COST * m * a + _linear_cost(m, a, d)
        ledger.add("adapters", "adapter", arch.depth * 2 * per_adapter)
    elif scheme.kind == "synqt":
        cfg = scheme.synqt
        n = cfg.tokens
        ledger.add("qsm_blocks", "qsm",
                   arch.depth * _qsm_flops(n, d, cfg.hidden, cfg.qkv_hidden))
        ledger.add("kem_blocks", "kem",
                   arch.depth * _kem_flops(n, arch.tokens, d, md, arch.heads))
        ledger.add("head", "head",
                   _head_flops(arch.depth, d, cfg.hidden, scheme.num_classes, n))

    if scheme.kind != "synqt":
        ledger.add("classifier", "head",
                   _linear_cost(1, d, scheme.num_classes))
    ledger.flops = ledger.total
    return ledger.check()
