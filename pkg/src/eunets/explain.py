"""Saliency maps: equivalent-kernel CAMs for MHEX+ blocks and a Grad-CAM baseline."""

import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import ContractViolation
from .models import forward
from .pixelmap import PixelMap
from .tensor import Tensor


@dataclass
class SalienceKernel:
    """Merged 1x1 kernel ``[classes, in_channels, 1, 1]`` of one MHEX+ block."""

    weight: np.ndarray
    stage: int = None

    @property
    def class_count(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    def matrix(self):
        return self.weight[:, :, 0, 0]


def equivalent_kernel(block, stage=None):
    """Collapse the block's two 1x1 convolutions into one class-by-channel kernel.

    Ignores the ReLU between them, so the identity with the deep prediction is
    exact only where the hidden pre-activations are non-negative.
    """
    w1 = block.conv1_weight.data
    w2 = block.conv2_weight.data
    if w1.shape[2:] != (1, 1) or w2.shape[2:] != (1, 1):
        raise ContractViolation("equivalent kernel needs 1x1 convolutions")
    merged = w2[:, :, 0, 0] @ w1[:, :, 0, 0]
    return SalienceKernel(merged[:, :, None, None], stage)


def mhex_cam(kernel, A, c):
    """Raw class activation map: channels of ``A[Cin,h,w]`` weighted by row ``c``."""
    a = A.data if isinstance(A, Tensor) else np.asarray(A, dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ContractViolation("mhex_cam takes a single activation tensor")
        a = a[0]
    if a.ndim != 3 or a.shape[0] != kernel.in_channels:
        raise ContractViolation(f"activation needs {kernel.in_channels} channels, got shape {a.shape}")
    if not 0 <= c < kernel.class_count:
        raise ContractViolation(f"class {c} out of range [0, {kernel.class_count})")
    values = np.tensordot(kernel.matrix()[c], a, axes=([0], [0]))
    return PixelMap(values, "cam", {"stage": kernel.stage, "class": c})


def stage_cams(model, image, c, trace=None):
    """Per-stage raw MHEX+ CAMs (coarse to fine) for the first image of a batch."""
    if not model.with_mhex:
        raise ContractViolation("stage CAMs need a model with MHEX+ blocks")
    if trace is None:
        trace = forward(model, image)
    cams = []
    for stage, X in zip(model.decoder, trace.stage_inputs):
        kernel = equivalent_kernel(model.mhex_block(stage.index), stage.index)
        cams.append(mhex_cam(kernel, X.data[0], c))
    return cams


def composite_cam(cams, size):
    """Mean of the per-stage maps after nearest upsampling to ``size``."""
    acc = np.zeros((size, size))
    for cam in cams:
        f = size // cam.height
        acc += np.repeat(np.repeat(cam.values, f, axis=0), f, axis=1)
    return PixelMap(acc / len(cams), "cam", {"stage": "composite"})


def grad_cam(model, image, c, stage):
    """Grad-CAM at decoder stage ``stage`` for the logits of pixels predicted as ``c``.

    Returns the rectified raw map at stage resolution. When no pixel is
    predicted as ``c`` (or the gradients vanish) the map is zero and
    ``meta["degenerate"]`` is set.
    """
    k = model.config.class_count
    if not 0 <= c < k:
        raise ContractViolation(f"class {c} out of range [0, {k})")
    if not 1 <= stage <= model.depth:
        raise ContractViolation(f"stage must be in [1, {model.depth}]")
    trace = forward(model, image)
    A = trace.stage_inputs[stage - 1]
    logits = trace.final_logits
    pred = logits.data.argmax(axis=1)
    select = np.zeros(logits.shape)
    select[:, c] = pred == c
    grads = T.backward(T.sum(T.mul(logits, select)))
    g = grads.get(A)
    a = A.data[0]
    if g is None or not np.any(g[0]):
        warnings.warn("Grad-CAM gradients are all zero; returning a zero map", RuntimeWarning, stacklevel=2)
        return PixelMap(np.zeros(a.shape[1:]), "gradcam", {"stage": stage, "class": c, "degenerate": True})
    weights = g[0].mean(axis=(1, 2))
    values = np.maximum(np.tensordot(weights, a, axes=([0], [0])), 0.0)
    return PixelMap(values, "gradcam", {"stage": stage, "class": c, "degenerate": False})


def _median_time(fn, repeats=7, min_time=0.02):
    """Median per-call wall time; each sample loops until ``min_time`` elapses."""
    start = time.perf_counter()
    fn()
    once = time.perf_counter() - start
    loops = max(1, int(np.ceil(min_time / max(once, 1e-9))))
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        for _ in range(loops):
            fn()
        samples.append((time.perf_counter() - start) / loops)
    return float(np.median(samples)), loops


def cam_benchmark(model, sizes, c=1, stage=None, seed=0):
    """Time equivalent-kernel preparation against Grad-CAM for each input size.

    Returns rows ``{"size", "mhex_prep_s", "mhex_loops", "gradcam_s", "gradcam_loops"}``.
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) < 3:
        raise ContractViolation("benchmark needs at least three sizes")
    step = 2**model.depth
    if any(s % step for s in sizes):
        raise ContractViolation(f"sizes must be divisible by {step}")
    stage = model.depth if stage is None else stage
    blocks = model.mhex_blocks
    rng = np.random.default_rng(seed)
    rows = []
    for size in sizes:
        image = rng.random((1, model.config.in_channels, size, size))
        if blocks:
            prep, prep_loops = _median_time(lambda: [equivalent_kernel(b) for b in blocks])
        else:
            prep, prep_loops = float("nan"), 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            gc_time, gc_loops = _median_time(lambda: grad_cam(model, image, c, stage), min_time=0.0)
        rows.append(
            {"size": size, "mhex_prep_s": prep, "mhex_loops": prep_loops, "gradcam_s": gc_time, "gradcam_loops": gc_loops}
        )
    return rows
