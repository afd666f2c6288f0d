"""MHEX+ side blocks: 1x1 conv + ReLU, sigmoid self-gate, deep-prediction head."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import ContractViolation
from .tensor import Tensor


@dataclass
class MhexBlock:
    """Bias-free pair of 1x1 convolutions.

    ``conv1_weight`` has shape ``[hidden, in_channels, 1, 1]`` and
    ``conv2_weight`` has shape ``[classes, hidden, 1, 1]``.
    """

    conv1_weight: Tensor
    conv2_weight: Tensor

    def __post_init__(self):
        c1, c2 = self.conv1_weight.shape, self.conv2_weight.shape
        if len(c1) != 4 or len(c2) != 4 or c1[2:] != (1, 1) or c2[2:] != (1, 1):
            raise ContractViolation("MHEX+ kernels must be spatially 1x1")
        if c2[1] != c1[0]:
            raise ContractViolation("conv2 input width must equal conv1 output width")

    @property
    def hidden_width(self):
        return self.conv1_weight.shape[0]

    @property
    def in_channels(self):
        return self.conv1_weight.shape[1]

    @property
    def class_count(self):
        return self.conv2_weight.shape[0]

    @property
    def param_count(self):
        return self.conv1_weight.size + self.conv2_weight.size

    @classmethod
    def init(cls, in_channels, hidden, classes, rng):
        """He fan-in initialisation."""
        w1 = rng.normal(0.0, np.sqrt(2.0 / in_channels), size=(hidden, in_channels, 1, 1))
        w2 = rng.normal(0.0, np.sqrt(2.0 / hidden), size=(classes, hidden, 1, 1))
        return cls(Tensor(w1, requires_grad=True), Tensor(w2, requires_grad=True))


@dataclass
class MhexOutput:
    pre_activation: Tensor
    Y: Tensor
    gate: Tensor
    Y_attended: Tensor
    deep_pred: Tensor


def mhex_forward(block, X, apply_relu=True):
    """Run one block on ``X[N,Cin,h,w]``.

    The deep prediction reads ``Y`` (not the gated features). ``apply_relu``
    exists for the linearisation checks only.
    """
    if X.ndim != 4 or X.shape[1] != block.in_channels:
        raise ContractViolation(
            f"MHEX+ block expects {block.in_channels} input channels, got shape {X.shape}"
        )
    z = T.conv2d(X, block.conv1_weight)
    y = T.relu(z) if apply_relu else z
    gate = T.sigmoid(y)
    attended = T.mul(gate, y)
    deep = T.conv2d(y, block.conv2_weight)
    return MhexOutput(z, y, gate, attended, deep)


def head_loss(logits, target, loss_kind, smooth):
    if loss_kind == "ce":
        return T.softmax_ce(logits, target)
    if loss_kind == "dice":
        return T.dice_loss(T.softmax(logits), T.one_hot(target, logits.shape[1]), smooth)
    raise ContractViolation(f"unknown loss kind {loss_kind!r}")


def deep_supervision_loss(deep_preds, target, final_logits, loss_kind="ce", aux_weight=None, smooth=1.0):
    """Final-head loss plus the mean of the upsampled auxiliary-head losses.

    ``aux_weight`` defaults to ``1/len(deep_preds)``.
    """
    if not deep_preds:
        raise ContractViolation("deep supervision needs at least one deep prediction")
    target = np.asarray(target)
    full = final_logits.shape[2:]
    if target.shape[-2:] != full:
        raise ContractViolation("target must match the final logits resolution")
    weight = 1.0 / len(deep_preds) if aux_weight is None else aux_weight
    total = head_loss(final_logits, target, loss_kind, smooth)
    aux = None
    for pred in deep_preds:
        factor = full[0] // pred.shape[2]
        if factor * pred.shape[2] != full[0] or factor * pred.shape[3] != full[1]:
            raise ContractViolation("deep prediction resolution must divide the target resolution")
        term = head_loss(T.upsample_nearest(pred, factor), target, loss_kind, smooth)
        aux = term if aux is None else T.add(aux, term)
    return T.add(total, T.mul(aux, weight))
