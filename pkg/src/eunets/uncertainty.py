"""Collaboration-gradient uncertainty, Deep-Ensemble maps and map agreement.

The collaboration map compares, pixel by pixel, how the losses of two
adjacent MHEX+ heads would move the first 1x1 kernel of the shallower block.
Both losses reach that kernel: the shallower head directly, the deeper head
through the gated residual that feeds the next decoder stage.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import ContractViolation
from .mhex import MhexBlock, mhex_forward
from .models import decoder_stage, forward, probabilities
from .pixelmap import PixelMap
from .tensor import Tensor


@dataclass
class UncertaintyConfig:
    """``pixel_stride > 1`` evaluates a subsampled grid and fills the rest by repetition."""

    epsilon: float = 1e-8
    anchor_rule: str = "shallower"
    normalize: bool = True
    pixel_stride: int = 1
    chunk_size: int = 64

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractViolation("epsilon must be positive")
        if self.anchor_rule != "shallower":
            raise ContractViolation("only the 'shallower' anchor rule is supported")
        if self.pixel_stride < 1 or self.chunk_size < 1:
            raise ContractViolation("pixel_stride and chunk_size must be >= 1")


def pair_cosine(grad_a, grad_b, epsilon=1e-8):
    """Row-wise guarded cosine of two ``[P, ...]`` gradient stacks.

    Returns ``(cos, zero_norm)`` where ``zero_norm`` flags rows whose norm
    product is zero (their cosine is 0).
    """
    a = np.asarray(grad_a, dtype=np.float64).reshape(len(grad_a), -1)
    b = np.asarray(grad_b, dtype=np.float64).reshape(len(grad_b), -1)
    dot = np.einsum("pi,pi->p", a, b)
    norms = np.sqrt(np.einsum("pi,pi->p", a, a)) * np.sqrt(np.einsum("pi,pi->p", b, b))
    return dot / (norms + epsilon), norms == 0


def combine_pair_cosines(cosines, normalize=True):
    """Sum over adjacent pairs; optionally map to ``(1 - mean) / 2`` so high means uncertain."""
    cosines = np.asarray(cosines, dtype=np.float64)
    total = cosines.sum(axis=0)
    if not normalize:
        return total
    return (1.0 - total / cosines.shape[0]) / 2.0


def _frozen(model):
    return {k: v.detach() for k, v in model.params.items()}


def _ce_seed(logits_at, t, k):
    """Gradient of the cross-entropy w.r.t. one logit vector (softmax minus one-hot)."""
    z = logits_at - logits_at.max()
    p = np.exp(z) / np.exp(z).sum()
    p[t] -= 1.0
    return p


def _windows(a, pad, size, rows, cols):
    """``[P, C, size, size]`` zero-padded windows of ``a[C, H, W]`` starting at ``(rows, cols)`` (unpadded coords)."""
    padded = np.pad(a, ((0, 0), (pad, pad), (pad, pad)))
    view = np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(1, 2))
    return np.ascontiguousarray(view[:, rows + pad, cols + pad].transpose(1, 0, 2, 3))


def pair_gradients(model, trace, l, target, pixels, chunk_size=64):
    """Per-pixel gradients of the stage-``l`` and stage-``l+1`` head losses w.r.t. block ``l``'s C1.

    ``pixels`` is an ``[P, 2]`` array of full-resolution ``(row, col)``
    positions. Returns two ``[P, hidden, in_channels]`` arrays.

    The shallower head is a 1x1 conv, so its gradient is closed-form. The
    deeper one is back-propagated through stage ``l+1`` on a 3x3-cell
    window around the pixel, which covers the receptive field of its two
    3x3 convs exactly.
    """
    frozen = _frozen(model)
    full_h = trace.final_logits.shape[2]
    X = trace.stage_inputs[l - 1].data[0]
    z = trace.mhex_outputs[l - 1].pre_activation.data[0]
    dp_l = trace.mhex_outputs[l - 1].deep_pred.data[0]
    dp_n = trace.mhex_outputs[l].deep_pred.data[0]
    hs, ws = X.shape[1:]
    f_l = full_h // hs
    f_n = full_h // dp_n.shape[1]
    k = dp_l.shape[0]
    w2_l = frozen[f"{model.decoder[l - 1].mhex}.c2"].data[:, :, 0, 0]
    block_n = model.mhex_block(l + 1, frozen)
    skips = [s.data[0] for s in trace.skips[l]]
    width = X.shape[0]

    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    t = np.asarray(target)[pixels[:, 0], pixels[:, 1]]
    # pixels sharing the deeper head's cell and the target have identical gradients
    keys = np.stack([pixels[:, 0] // f_n, pixels[:, 1] // f_n, t], axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    qy, qx, tc = uniq[:, 0], uniq[:, 1], uniq[:, 2]

    # shallower head: d/dz = relu'(z) * W2^T (softmax - onehot), outer X
    ry, rx = (qy * f_n) // f_l, (qx * f_n) // f_l
    seeds = np.stack([_ce_seed(dp_l[:, y, x], c, k) for y, x, c in zip(ry, rx, tc)])
    delta = (seeds @ w2_l) * (z[:, ry, rx].T > 0)
    ga = np.einsum("ph,pc->phc", delta, X[:, ry, rx].T)

    cy, cx = (qy - 2) // 2, (qx - 2) // 2
    z_win = _windows(z, 1, 3, cy, cx)
    x_win = _windows(X, 1, 3, cy, cx)
    skip_win = [_windows(s, 2, 6, 2 * cy, 2 * cx) for s in skips]
    inside = _windows(np.ones((1, 2 * hs, 2 * ws)), 2, 6, 2 * cy, 2 * cx)
    gb = np.empty_like(ga)
    for start in range(0, len(uniq), chunk_size):
        sl = slice(start, start + chunk_size)
        b = len(z_win[sl])
        zb = Tensor(z_win[sl], requires_grad=True)
        y = T.relu(zb)
        out = T.add(Tensor(x_win[sl]), T.channel_fold(T.mul(T.sigmoid(y), y), width))
        x_next = decoder_stage(model, l + 1, out, [Tensor(s[sl]) for s in skip_win], frozen, valid=inside[sl])
        head_n = mhex_forward(block_n, x_next).deep_pred
        seed_n = np.zeros(head_n.shape)
        ly, lx = qy[sl] - 2 * cy[sl], qx[sl] - 2 * cx[sl]
        for i in range(b):
            seed_n[i, :, ly[i], lx[i]] = _ce_seed(dp_n[:, qy[start + i], qx[start + i]], tc[start + i], k)
        delta_n = T.backward(head_n, seed_n)[zb]
        gb[sl] = np.einsum("bhyx,bcyx->bhc", delta_n, x_win[sl])
    return ga[inverse], gb[inverse]


def collaboration_map(model, image, cfg=None, target=None, trace=None):
    """Per-pixel collaboration-gradient uncertainty for the first image of ``image``.

    ``target`` defaults to the model's own predicted mask. With
    ``cfg.normalize`` the result is ``U = (1 - mean pair cosine) / 2`` in
    ``[0, 1]``; otherwise the raw cosine sum. ``meta`` carries the raw sum and
    the count of zero-norm gradient pairs.
    """
    cfg = cfg or UncertaintyConfig()
    if not model.with_mhex:
        raise ContractViolation("collaboration map needs a model with MHEX+ blocks")
    n_stages = len(model.decoder)
    if n_stages < 2:
        raise ContractViolation("collaboration map needs at least two decoder stages")
    if trace is None:
        img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        if img.ndim == 3:
            img = img[None]
        trace = forward(model, img[:1])
    h, w = trace.final_logits.shape[2:]
    if target is None:
        target = trace.final_logits.data[0].argmax(axis=0)
    target = np.asarray(target)
    if target.shape != (h, w):
        raise ContractViolation("target must match the image resolution")

    s = cfg.pixel_stride
    rows, cols = np.arange(0, h, s), np.arange(0, w, s)
    grid = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1).reshape(-1, 2)
    cosines = []
    zero_pairs = 0
    for l in range(1, n_stages):
        ga, gb = pair_gradients(model, trace, l, target, grid, cfg.chunk_size)
        cos, zero = pair_cosine(ga, gb, cfg.epsilon)
        cosines.append(cos)
        zero_pairs += int(zero.sum())
    raw = np.sum(cosines, axis=0).reshape(len(rows), len(cols))
    values = combine_pair_cosines(cosines, cfg.normalize).reshape(len(rows), len(cols))
    if s > 1:
        values = np.repeat(np.repeat(values, s, axis=0), s, axis=1)[:h, :w]
        raw = np.repeat(np.repeat(raw, s, axis=0), s, axis=1)[:h, :w]
    meta = {"raw_sum": raw, "zero_norm_pairs": zero_pairs, "pairs": n_stages - 1, "normalized": cfg.normalize}
    return PixelMap(values, "uncertainty", meta)


# ---------------------------------------------------------------------------
# Deep Ensemble
# ---------------------------------------------------------------------------


@dataclass
class EnsembleMaps:
    mean_prob: list
    variance: PixelMap
    entropy: PixelMap
    member_count: int


def ensemble_probabilities(models, image):
    """Stacked member softmax outputs ``[members, K, H, W]`` for one image."""
    if len(models) < 2:
        raise ContractViolation("an ensemble needs at least two members")
    ks = {m.config.class_count for m in models}
    if len(ks) != 1:
        raise ContractViolation(f"ensemble members disagree on class count: {sorted(ks)}")
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    return np.stack([probabilities(forward(m, img[:1]).final_logits)[0] for m in models])


def ensemble_stats_from_probs(member_probs):
    """Mean, variance and entropy maps from ``[members, K, H, W]`` probabilities.

    Variance is the foreground class for two classes, else the class mean.
    """
    # sorting over members makes the reductions independent of member order
    p = np.sort(np.asarray(member_probs, dtype=np.float64), axis=0)
    n, k = p.shape[:2]
    mean = p.mean(axis=0)
    var = ((p - mean) ** 2).mean(axis=0)
    variance = var[1] if k == 2 else var.mean(axis=0)
    plogp = np.where(mean > 0, mean * np.log(np.where(mean > 0, mean, 1.0)), 0.0)
    entropy = np.clip(-plogp.sum(axis=0), 0.0, np.log(k))
    return EnsembleMaps(
        mean_prob=[PixelMap(mean[c], "mean_prob", {"class": c}) for c in range(k)],
        variance=PixelMap(variance, "variance"),
        entropy=PixelMap(entropy, "entropy"),
        member_count=n,
    )


def ensemble_stats(models, image):
    return ensemble_stats_from_probs(ensemble_probabilities(models, image))


# ---------------------------------------------------------------------------
# Agreement metrics
# ---------------------------------------------------------------------------


@dataclass
class AgreementReport:
    iou: float
    dice: float
    pearson_r: float
    p_value: float
    threshold_used_A: float
    threshold_used_B: float
    degenerate: bool = False
    masks: tuple = field(default=None, repr=False)


def otsu_threshold(values, bins=256):
    """Otsu split over a ``bins``-bin histogram spanning the value range.

    Returns ``(threshold, mask)``; ``mask`` marks values in bins above the
    split. A constant map yields an empty mask.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return float(hi), np.zeros(np.shape(values), dtype=bool)
    idx = np.minimum(((v - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
    hist = np.bincount(idx, minlength=bins).astype(np.float64)
    centers = np.arange(bins) + 0.5
    w0 = np.cumsum(hist)[:-1]
    w1 = v.size - w0
    s0 = np.cumsum(hist * centers)[:-1]
    mu0 = s0 / np.where(w0 > 0, w0, 1.0)
    mu1 = (s0[-1] + hist[-1] * centers[-1] - s0) / np.where(w1 > 0, w1, 1.0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    split = int(np.argmax(between))
    threshold = lo + (split + 1) * (hi - lo) / bins
    return float(threshold), (idx > split).reshape(np.shape(values))


def mask_overlap(a, b):
    """IoU and Dice of two boolean masks; both empty counts as perfect agreement."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    total = np.count_nonzero(a) + np.count_nonzero(b)
    iou = 1.0 if union == 0 else inter / union
    dice = 1.0 if total == 0 else 2.0 * inter / total
    return iou, dice


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    ac, bc = a - a.mean(), b - b.mean()
    sa, sb = np.dot(ac, ac), np.dot(bc, bc)
    if sa == 0 or sb == 0:
        return 0.0, True
    return float(np.dot(ac, bc) / np.sqrt(sa * sb)), False


def permutation_p_value(a, b, r_obs, n_perm=1000, seed=0):
    """Two-sided permutation p-value, floored at ``1 / (n_perm + 1)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    ac = a - a.mean()
    bc = b - b.mean()
    denom = np.sqrt(np.dot(ac, ac) * np.dot(bc, bc))
    rng = np.random.default_rng(seed)
    shuffled = rng.permuted(np.broadcast_to(bc, (n_perm, bc.size)), axis=1)
    r_perm = shuffled @ ac / denom
    hits = np.count_nonzero(np.abs(r_perm) >= abs(r_obs))
    return (hits + 1) / (n_perm + 1)


def agreement_metrics(map_a, map_b, n_perm=1000, seed=0):
    """Otsu-binarised IoU/Dice plus Pearson r (raw values) with a permutation p-value."""
    a = map_a.values if isinstance(map_a, PixelMap) else np.asarray(map_a, dtype=np.float64)
    b = map_b.values if isinstance(map_b, PixelMap) else np.asarray(map_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"maps differ in shape: {a.shape} vs {b.shape}")
    thr_a, mask_a = otsu_threshold(a)
    thr_b, mask_b = otsu_threshold(b)
    iou, dice = mask_overlap(mask_a, mask_b)
    r, degenerate = pearson(a, b)
    p = 1.0 if degenerate else permutation_p_value(a, b, r, n_perm, seed)
    return AgreementReport(iou, dice, r, p, thr_a, thr_b, degenerate, (mask_a, mask_b))


# ---------------------------------------------------------------------------
# MU vs Deep-Ensemble experiment
# ---------------------------------------------------------------------------

REPORT_METHODS = ("entropy", "variance")
CSV_FIELDS = ("method", "sample_id", "iou", "dice", "pearson_r", "p_value")


@dataclass
class ExperimentResult:
    rows: list
    summary: dict
    maps: dict


def summarize_rows(rows):
    """``{method: {metric: (mean, sample std)}}`` over per-sample agreement rows."""
    summary = {}
    for method in dict.fromkeys(r["method"] for r in rows):
        sub = [r for r in rows if r["method"] == method]
        stats = {}
        for key in ("iou", "dice", "pearson_r", "p_value"):
            vals = np.array([r[key] for r in sub], dtype=np.float64)
            std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            stats[key] = (float(vals.mean()), std)
        stats["n"] = len(sub)
        summary[method] = stats
    return summary


def format_table(summary):
    """Plain-text table: one row per method, IoU / Dice / Pearson (p) columns."""
    lines = ["Method      IoU                Dice               Pearson Corr (p-value)"]
    for method, s in summary.items():
        cells = [f"{s[k][0]:.4f} ± {s[k][1]:.4f}" for k in ("iou", "dice", "pearson_r")]
        lines.append(f"{method.capitalize():<11} {cells[0]:<18} {cells[1]:<18} {cells[2]} (p={s['p_value'][0]:.4f})")
    return "\n".join(lines)


def uncertainty_experiment(ensemble, eu_model, dataset, sample_count=50, seed=0, cfg=None, n_perm=1000):
    """Agreement of the collaboration map with ensemble entropy and variance.

    Samples are drawn without replacement with ``seed``. Returns per-sample
    rows, the aggregated summary and the raw maps keyed by sample id.
    """
    if sample_count > len(dataset):
        raise ContractViolation("sample_count exceeds the dataset size")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(dataset), size=sample_count, replace=False))
    rows, maps = [], {}
    for i in chosen:
        sample = dataset[int(i)]
        image = np.asarray(sample.image)[None]
        mu = collaboration_map(eu_model, image, cfg)
        de = ensemble_stats(ensemble, image)
        maps[sample.id] = {"mu": mu.values, "entropy": de.entropy.values, "variance": de.variance.values}
        for method, ref in (("entropy", de.entropy), ("variance", de.variance)):
            rep = agreement_metrics(mu, ref, n_perm=n_perm, seed=0)
            rows.append(
                {
                    "method": method,
                    "sample_id": sample.id,
                    "iou": rep.iou,
                    "dice": rep.dice,
                    "pearson_r": rep.pearson_r,
                    "p_value": rep.p_value,
                }
            )
    return ExperimentResult(rows, summarize_rows(rows), maps)
