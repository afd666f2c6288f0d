"""Toy-scale U-Net / U-Net++ backbones with optional MHEX+ decoder blocks.

Decoder stages are residual double-conv units. When MHEX+ is enabled, each
decoder stage feeds its output ``X_l`` to an MHEX+ block and hands
``X_l + fold(Y_attended)`` to the next stage, where ``fold`` maps the block's
hidden channels onto the stage width without parameters (see
:func:`eunets.tensor.channel_fold`).

Node naming follows the nested U-Net++ grid ``X^{i,j}`` (level ``i``, column
``j``): ``enc{i}`` for ``j == 0``, ``bottleneck`` for ``X^{depth,0}``,
``dec{l}`` for the main decoder diagonal ``X^{depth-l,l}`` and
``node{i}_{j}`` for the remaining nested nodes (U-Net++ only).
"""

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import ContractViolation
from .mhex import MhexBlock, mhex_forward
from .tensor import Tensor

BACKBONES = ("unet", "unetpp")


@dataclass
class ModelConfig:
    backbone: str = "unet"
    with_mhex: bool = True
    in_channels: int = 1
    class_count: int = 2
    base_width: int = 8
    depth: int = 3
    mhex_hidden: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ContractViolation(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.depth < 2:
            raise ContractViolation("depth must be >= 2")
        if self.base_width < 4:
            raise ContractViolation("base_width must be >= 4")
        if self.class_count < 2:
            raise ContractViolation("class_count must be >= 2")
        if self.in_channels < 1 or self.mhex_hidden < 1:
            raise ContractViolation("in_channels and mhex_hidden must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class DecoderStage:
    """Wiring for decoder stage ``l`` (1-based, coarse to fine)."""

    index: int
    name: str
    level: int
    skips: list
    in_channels: int
    width: int
    mhex: str = None


@dataclass
class ForwardTrace:
    final_logits: Tensor
    deep_preds: list = field(default_factory=list)
    stage_inputs: list = field(default_factory=list)
    mhex_outputs: list = field(default_factory=list)
    stage_outputs: list = field(default_factory=list)
    skips: list = field(default_factory=list)
    features: dict = field(default_factory=dict)


def _width(cfg, level):
    return cfg.base_width * 2**level


def node_name(cfg, i, j):
    if j == 0:
        return "bottleneck" if i == cfg.depth else f"enc{i}"
    if i + j == cfg.depth:
        return f"dec{j}"
    return f"node{i}_{j}"


class ModelGraph:
    """A built network: parameter table plus stage wiring."""

    def __init__(self, config, params, encoder, nested, decoder):
        self.config = config
        self.params = params
        self.encoder = encoder
        self.nested = nested
        self.decoder = decoder

    @property
    def depth(self):
        return self.config.depth

    @property
    def with_mhex(self):
        return self.config.with_mhex

    @property
    def skip_table(self):
        return {stage.name: list(stage.skips) for stage in self.decoder}

    @property
    def mhex_blocks(self):
        if not self.config.with_mhex:
            return []
        return [self.mhex_block(stage.index) for stage in self.decoder]

    def mhex_block(self, l, overrides=None):
        stage = self.decoder[l - 1]
        if stage.mhex is None:
            raise ContractViolation("model has no MHEX+ blocks")
        get = _getter(self, overrides)
        return MhexBlock(get(f"{stage.mhex}.c1"), get(f"{stage.mhex}.c2"))

    def state(self):
        return {k: v.data for k, v in self.params.items()}

    def set_state(self, arrays):
        missing = set(self.params) - set(arrays)
        if missing:
            raise ContractViolation(f"missing parameters: {sorted(missing)}")
        for k in self.params:
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != self.params[k].shape:
                raise ContractViolation(f"shape mismatch for {k}: {arr.shape} vs {self.params[k].shape}")
            self.params[k] = Tensor(arr, requires_grad=True, name=k)

    def copy(self):
        clone = build_model(self.config)
        clone.set_state(self.state())
        return clone

    def __repr__(self):
        c = self.config
        return f"ModelGraph({c.backbone}, mhex={c.with_mhex}, depth={c.depth}, params={param_count(self)['total']})"


def _getter(model, overrides):
    params = model.params
    if not overrides:
        return params.__getitem__
    return lambda name: overrides[name] if name in overrides else params[name]


def _add_conv(params, cfg, name, cin, cout, k, bias=True):
    rng = np.random.default_rng([cfg.seed, zlib.crc32(name.encode())])
    fan_in = cin * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
    params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
    if bias:
        params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.b")


def _add_double(params, cfg, name, cin, cout, residual):
    _add_conv(params, cfg, f"{name}.conv1", cin, cout, 3)
    _add_conv(params, cfg, f"{name}.conv2", cout, cout, 3)
    if residual and cin != cout:
        _add_conv(params, cfg, f"{name}.proj", cin, cout, 1)


def build_model(cfg):
    """Build and initialise a network; weights depend only on ``cfg.seed`` and names.

    Each parameter draws from its own seeded stream, so the backbone weights of
    a model with and without MHEX+ blocks are identical for the same seed.
    """
    params = {}
    depth = cfg.depth
    encoder = []
    cin = cfg.in_channels
    for i in range(depth + 1):
        name = node_name(cfg, i, 0)
        _add_double(params, cfg, name, cin, _width(cfg, i), residual=False)
        encoder.append(name)
        cin = _width(cfg, i)

    nested = []
    if cfg.backbone == "unetpp":
        for j in range(1, depth):
            for i in range(depth - j):
                name = node_name(cfg, i, j)
                skips = [node_name(cfg, i, jj) for jj in range(j)]
                c = _width(cfg, i) * j + _width(cfg, i + 1)
                _add_double(params, cfg, name, c, _width(cfg, i), residual=True)
                nested.append((name, i, j, skips))

    decoder = []
    for l in range(1, depth + 1):
        level = depth - l
        name = node_name(cfg, level, l)
        if cfg.backbone == "unetpp":
            skips = [node_name(cfg, level, jj) for jj in range(l)]
        else:
            skips = [node_name(cfg, level, 0)]
        width = _width(cfg, level)
        c = width * len(skips) + _width(cfg, level + 1)
        _add_double(params, cfg, name, c, width, residual=True)
        mhex = None
        if cfg.with_mhex:
            mhex = f"{name}.mhex"
            for suffix, (co, ci) in (("c1", (cfg.mhex_hidden, width)), ("c2", (cfg.class_count, cfg.mhex_hidden))):
                rng = np.random.default_rng([cfg.seed, zlib.crc32(f"{mhex}.{suffix}".encode())])
                w = rng.normal(0.0, np.sqrt(2.0 / ci), size=(co, ci, 1, 1))
                params[f"{mhex}.{suffix}"] = Tensor(w, requires_grad=True, name=f"{mhex}.{suffix}")
        decoder.append(DecoderStage(l, name, level, skips, c, width, mhex))

    _add_conv(params, cfg, "head", _width(cfg, 0), cfg.class_count, 1)
    return ModelGraph(cfg, params, encoder, nested, decoder)


def _double_conv(get, name, x, residual, valid=None):
    h = T.relu(T.conv2d(x, get(f"{name}.conv1.w"), get(f"{name}.conv1.b"), pad=1))
    if valid is not None:
        # zero activations that stand in for padding when ``x`` is a crop
        h = T.mul(h, valid)
    h = T.relu(T.conv2d(h, get(f"{name}.conv2.w"), get(f"{name}.conv2.b"), pad=1))
    if not residual:
        return h
    try:
        proj_w = get(f"{name}.proj.w")
    except KeyError:
        return T.add(h, x)
    return T.add(h, T.conv2d(x, proj_w, get(f"{name}.proj.b")))


def decoder_stage(model, l, prev, skips, overrides=None, valid=None):
    """Stage ``l``'s residual double-conv output (the MHEX+ input ``X_l``).

    ``valid`` is an optional 0/1 mask applied after the first conv, used
    when evaluating the stage on windows that overhang the image border.
    """
    get = _getter(model, overrides)
    stage = model.decoder[l - 1]
    x = T.concat(list(skips) + [T.upsample_nearest(prev, 2)], axis=1)
    return _double_conv(get, stage.name, x, residual=True, valid=valid)


def _as_image_batch(image):
    if isinstance(image, Tensor):
        x = image
    else:
        x = Tensor(np.asarray(image, dtype=np.float64))
    if x.ndim == 3 and not x.requires_grad:
        x = Tensor(x.data[None])
    if x.ndim != 4:
        raise ContractViolation(f"expected image batch [N,C,H,W], got shape {x.shape}")
    return x


def forward(model, image, *, mhex_residual=True, apply_relu=True, overrides=None):
    """Run the network and keep the intermediate tensors needed downstream.

    ``mhex_residual=False`` drops the gated branch from the main stream (the
    deep predictions are still computed). ``overrides`` maps parameter names
    to replacement tensors.
    """
    cfg = model.config
    x = _as_image_batch(image)
    if x.shape[1] != cfg.in_channels:
        raise ContractViolation(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
    h, w = x.shape[2:]
    step = 2**cfg.depth
    if h % step or w % step:
        raise ContractViolation(f"spatial dims {h}x{w} must be divisible by {step}")
    get = _getter(model, overrides)

    feats = {}
    cur = x
    for i, name in enumerate(model.encoder):
        if i > 0:
            cur = T.maxpool2d(cur, 2)
        cur = _double_conv(get, name, cur, residual=False)
        feats[name] = cur

    for name, i, j, skips in model.nested:
        below = feats[node_name(cfg, i + 1, j - 1)]
        inp = T.concat([feats[s] for s in skips] + [T.upsample_nearest(below, 2)], axis=1)
        feats[name] = _double_conv(get, name, inp, residual=True)

    trace = ForwardTrace(final_logits=None, features=feats)
    prev = feats["bottleneck"]
    for stage in model.decoder:
        skips = [feats[s] for s in stage.skips]
        X = decoder_stage(model, stage.index, prev, skips, overrides)
        trace.skips.append(skips)
        trace.stage_inputs.append(X)
        out = X
        if cfg.with_mhex:
            mo = mhex_forward(model.mhex_block(stage.index, overrides), X, apply_relu=apply_relu)
            trace.mhex_outputs.append(mo)
            trace.deep_preds.append(mo.deep_pred)
            if mhex_residual:
                out = T.add(X, T.channel_fold(mo.Y_attended, X.shape[1]))
        trace.stage_outputs.append(out)
        feats[stage.name] = out
        prev = out

    trace.final_logits = T.conv2d(prev, get("head.w"), get("head.b"))
    return trace


def param_count(model):
    total = int(sum(p.size for p in model.params.values()))
    mhex_only = int(sum(p.size for k, p in model.params.items() if ".mhex." in k))
    return {"total": total, "mhex_only": mhex_only}


@dataclass
class Prediction:
    mask: np.ndarray
    confidence: np.ndarray
    probs: np.ndarray

    def confidence_map(self, index=0):
        from .pixelmap import PixelMap

        return PixelMap(self.confidence[index], "confidence")


def probabilities(logits):
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict(model, image):
    """Softmax over classes; argmax mask with ties going to the lower class id."""
    trace = forward(model, image)
    probs = probabilities(trace.final_logits)
    mask = probs.argmax(axis=1)
    return Prediction(mask=mask, confidence=probs.max(axis=1), probs=probs)
