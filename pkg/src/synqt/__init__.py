"""Disentangled query tuning on a toy vision transformer.

Trainable synthesis blocks build task queries; frozen extraction blocks
reuse the backbone's weights to mine its intermediate features; a
conditional head aggregates them.  Alongside the model sits an analytic
accounting engine for trainable parameters, backward-retained activation
memory, and inference cost, cross-checked against the gradient tape.
"""

from .backbone import (BackboneConfig, FrozenBackbone, build_backbone,
                       forward_collect, kem_view, toy_config, vit_b16_config)
from .blocks import FeatureBundle, QsmParams, SynqtConfig, kem_forward, qsm_forward, stack_forward
from .head import (DropMask, HeadConfig, HeadParams, condition_vector,
                   conditional_weights, dropfeat, dump_feature_weights,
                   head_forward)
from .accounting import (Ledger, Scheme, activation_ledger, count_params,
                         entanglement_sweep, flop_count, synqt_scheme)
from .models import (FullFinetune, LinearProbe, LoraAtLayer, RandomQueryProbe,
                     SynqtModel)
from .optim import AdamW, adamw_step, cosine_lr
from .rng import Rng
from .tensor import (Tape, Tensor, backward, grad_check, parameter, frozen)
from .train import TrainConfig, compare, load_config, train

__version__ = "0.1.0"
