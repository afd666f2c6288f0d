"""scikit-learn style estimators wrapping the training harness.

``X`` is an image batch ``[N, C, H, W]`` (or ``[N, H, W]`` for one channel)
and ``y`` an integer mask batch ``[N, H, W]`` with classes ``0..K-1``.
"""

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ContractViolation
from .explain import composite_cam, stage_cams
from .harness import TrainConfig, dice_score, train
from .models import ModelConfig, build_model, forward, probabilities
from .uncertainty import UncertaintyConfig, collaboration_map, ensemble_stats_from_probs


def check_images(X, in_channels=None):
    """Validate an image batch and return it as float64 ``[N, C, H, W]``."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped [N, H, W] or [N, C, H, W], got {X.shape}")
    if in_channels is not None and X.shape[1] != in_channels:
        raise ValueError(f"expected {in_channels} channel(s), got {X.shape[1]}")
    return X


def check_masks(y, X):
    """Validate integer masks against the image batch; returns int64 ``[N, H, W]``."""
    y = np.asarray(y)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"masks must be shaped {(X.shape[0],) + X.shape[2:]}, got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("masks must hold integer class labels")
    y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("class labels must be non-negative")
    return y


class EUNetSegmenter(BaseEstimator):
    """U-Net or U-Net++ segmenter, optionally with MHEX+ side blocks.

    A validation carve-out of the training images (``validation_fraction``)
    drives learning-rate reduction and early stopping; the weights of the
    best validation epoch are kept.
    """

    def __init__(
        self,
        backbone="unet",
        with_mhex=True,
        base_width=8,
        depth=3,
        mhex_hidden=16,
        loss="ce",
        max_epochs=50,
        learning_rate=1e-3,
        batch_size=4,
        early_stop_patience=10,
        lr_reduce_patience=5,
        validation_fraction=0.1,
        random_state=0,
    ):
        self.backbone = backbone
        self.with_mhex = with_mhex
        self.base_width = base_width
        self.depth = depth
        self.mhex_hidden = mhex_hidden
        self.loss = loss
        self.max_epochs = max_epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.early_stop_patience = early_stop_patience
        self.lr_reduce_patience = lr_reduce_patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _model_config(self, in_channels, class_count):
        return ModelConfig(
            backbone=self.backbone,
            with_mhex=self.with_mhex,
            in_channels=in_channels,
            class_count=class_count,
            base_width=self.base_width,
            depth=self.depth,
            mhex_hidden=self.mhex_hidden,
            seed=self.random_state,
        )

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X)
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        n = len(X)
        n_val = max(1, int(round(self.validation_fraction * n)))
        if n_val >= n:
            raise ValueError(f"need more than {n_val} images to carve out a validation set")
        order = np.random.default_rng(self.random_state).permutation(n)
        val, tr = np.sort(order[:n_val]), np.sort(order[n_val:])

        self.class_count_ = max(2, int(y.max()) + 1)
        self.classes_ = np.arange(self.class_count_)
        self.n_channels_in_ = X.shape[1]
        cfg = TrainConfig(
            max_epochs=self.max_epochs,
            early_stop_patience=self.early_stop_patience,
            lr_reduce_patience=self.lr_reduce_patience,
            lr=self.learning_rate,
            batch_size=self.batch_size,
            loss_kind=self.loss,
            seed=self.random_state,
        )
        model = build_model(self._model_config(X.shape[1], self.class_count_))
        self.model_, self.history_ = train(model, (X[tr], y[tr]), (X[val], y[val]), cfg)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.n_channels_in_)
        frozen = {k: v.detach() for k, v in self.model_.params.items()}
        return np.concatenate(
            [probabilities(forward(self.model_, X[i : i + 16], overrides=frozen).final_logits) for i in range(0, len(X), 16)]
        )

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y):
        """Mean foreground Dice over images and non-background classes."""
        X = check_images(X, getattr(self, "n_channels_in_", None))
        y = check_masks(y, X)
        pred = self.predict(X)
        return float(np.mean([np.mean([dice_score(p, t, c) for c in range(1, self.class_count_)]) for p, t in zip(pred, y)]))

    def saliency(self, X, c=1):
        """Composite equivalent-kernel CAM per image, ``[N, H, W]`` raw values."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.n_channels_in_)
        if not self.with_mhex:
            raise ContractViolation("saliency maps need with_mhex=True")
        return np.stack([composite_cam(stage_cams(self.model_, x[None], c), X.shape[-1]).values for x in X])

    def uncertainty(self, X, **options):
        """Collaboration-gradient uncertainty per image, ``[N, H, W]`` in [0, 1]."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.n_channels_in_)
        cfg = UncertaintyConfig(**options)
        return np.stack([collaboration_map(self.model_, x[None], cfg).values for x in X])


class DeepEnsembleSegmenter(BaseEstimator):
    """Independently seeded copies of ``estimator`` whose softmax outputs are averaged."""

    def __init__(self, estimator=None, n_members=5, random_state=0):
        self.estimator = estimator
        self.n_members = n_members
        self.random_state = random_state

    def fit(self, X, y):
        if self.n_members < 2:
            raise ValueError("an ensemble needs at least two members")
        X = check_images(X)
        y = check_masks(y, X)
        base = self.estimator if self.estimator is not None else EUNetSegmenter()
        self.estimators_ = [
            clone(base).set_params(random_state=self.random_state + i).fit(X, y) for i in range(self.n_members)
        ]
        self.classes_ = self.estimators_[0].classes_
        return self

    def _member_probs(self, X):
        check_is_fitted(self, "estimators_")
        return np.stack([m.predict_proba(X) for m in self.estimators_])

    def predict_proba(self, X):
        return self._member_probs(X).mean(axis=0)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def uncertainty(self, X, kind="entropy"):
        """Per-image entropy (default) or variance maps, ``[N, H, W]``."""
        if kind not in ("entropy", "variance"):
            raise ValueError("kind must be 'entropy' or 'variance'")
        probs = self._member_probs(X)
        return np.stack([getattr(ensemble_stats_from_probs(probs[:, i]), kind).values for i in range(probs.shape[1])])
