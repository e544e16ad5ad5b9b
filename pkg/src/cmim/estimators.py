"""scikit-learn style wrappers around the training and inference pipeline.

Inputs are ``{modality name: array}`` mappings, so the estimators compose
with ``clone``, ``get_params``/``set_params`` and parameter searches, but not
with transformers that expect a single 2-D matrix.

Example
-------
>>> clf = CMIMClassifier(max_epochs=5).fit({"image": images, "text": tokens}, labels)  # doctest: +SKIP
>>> clf.predict_proba({"image": images, "text": tokens}, modalities=["image"])  # doctest: +SKIP
"""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import MultiModalDataset, split_dataset
from .encoders import ClassificationNet, ModalityKind, SegmentationNet
from .evaluation import macro_auc, mean_dice
from .losses import LossWeights
from .training import TrainConfig, train
from .validation import (
    check_class_labels,
    check_image_stack,
    check_label_masks,
    check_modality_inputs,
    check_present,
    check_token_matrix,
)

__all__ = ["CMIMClassifier", "CMIMSegmenter"]


class _CMIMBase(BaseEstimator):
    """Shared fitting logic; subclasses define the task specifics."""

    task: str

    def _weights(self) -> LossWeights:
        return LossWeights(self.lambda_ll, self.lambda_lg, self.lambda_gg, self.lambda_task)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            task=self.task,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            weights=self._weights(),
            seed=self.random_state,
            modality_dropout=self.modality_dropout,
        )

    def _fit_dataset(self, dataset: MultiModalDataset, model):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        parts = split_dataset(
            dataset, {"train": 1.0 - self.validation_fraction, "val": self.validation_fraction}, self.random_state
        )
        if len(parts["val"]) < 2 or len(parts["train"]) < 2:
            raise ValueError("too few samples for a train/validation split")
        self.checkpoint_, self.history_ = train(model, parts, self._train_config())
        self.model_ = model.eval()
        self.n_epochs_ = max(r.epoch for r in self.history_)
        return self

    def _present(self, modalities, n: int) -> torch.Tensor:
        return torch.from_numpy(check_present(modalities, self.modalities_, n))

    @torch.no_grad()
    def _forward(self, inputs: Dict[str, np.ndarray], present: torch.Tensor, batch_size: int = 64):
        self.model_.eval()
        n = present.shape[0]
        outs = []
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            batch = {m: torch.from_numpy(a[sl]) for m, a in inputs.items()}
            outs.append(self.model_(batch, present[sl]))
        return outs


class CMIMClassifier(ClassifierMixin, _CMIMBase):
    """Image + text classifier trained with cross-modal MI regularisation.

    Parameters
    ----------
    lambda_ll, lambda_lg, lambda_gg, lambda_task : float
        Loss weights; setting all MI weights to 0 gives the ablation baseline.
    image_size, seq_len, vocab_size : int
        Input geometry; ``X["image"]`` is ``[N, image_size, image_size]`` in
        ``[0, 1]`` and ``X["text"]`` is ``[N, <= seq_len]`` token ids.
    model_params : dict, optional
        Extra keyword arguments for :class:`~cmim.encoders.ClassificationNet`.
    validation_fraction : float
        Held-out share of the training data used for early stopping.
    random_state : int
        Seed for initialisation, splitting, batching and negative pairing.
    """

    task = "classification"

    def __init__(
        self,
        lambda_ll: float = 1.0,
        lambda_lg: float = 0.5,
        lambda_gg: float = 0.0,
        lambda_task: float = 1.0,
        learning_rate: float = 1e-4,
        batch_size: int = 32,
        max_epochs: int = 100,
        patience: int = 10,
        modality_dropout: float = 0.0,
        image_size: int = 32,
        seq_len: int = 16,
        vocab_size: int = 64,
        model_params: Optional[dict] = None,
        validation_fraction: float = 0.2,
        random_state: int = 0,
    ):
        self.lambda_ll = lambda_ll
        self.lambda_lg = lambda_lg
        self.lambda_gg = lambda_gg
        self.lambda_task = lambda_task
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.modality_dropout = modality_dropout
        self.image_size = image_size
        self.seq_len = seq_len
        self.vocab_size = vocab_size
        self.model_params = model_params
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _validate_X(self, X) -> Dict[str, np.ndarray]:
        return check_modality_inputs(
            X,
            ["image", "text"],
            {
                "image": lambda a, m: check_image_stack(a, m, self.image_size),
                "text": lambda a, m: self._pad_tokens(check_token_matrix(a, m, self.vocab_size, self.seq_len)),
            },
        )

    def _pad_tokens(self, tokens: np.ndarray) -> np.ndarray:
        if tokens.shape[1] == self.seq_len:
            return tokens
        out = np.zeros((tokens.shape[0], self.seq_len), dtype=np.int64)
        out[:, : tokens.shape[1]] = tokens
        return out

    def fit(self, X, y, present=None):
        """Train on paired image/text samples; ``present`` masks missing modalities."""
        inputs = self._validate_X(X)
        n = inputs["image"].shape[0]
        y = check_class_labels(y, n)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit")
        self.modalities_ = ["image", "text"]
        mask = check_present(present, self.modalities_, n)
        for j, m in enumerate(self.modalities_):
            if m == "text":
                empty = (inputs[m] == 0).all(axis=1) & mask[:, j]
                if empty.any():
                    raise ValueError("empty sequence after masking: text flagged present but all padding")
        dataset = MultiModalDataset(
            task="classification",
            modalities=inputs,
            targets=encoded.astype(np.int64),
            present=mask,
            ids=[str(i) for i in range(n)],
            num_classes=len(self.classes_),
            kinds={"image": ModalityKind.IMAGE_2D, "text": ModalityKind.TOKEN_SEQUENCE},
        )
        torch.manual_seed(self.random_state)
        params = dict(self.model_params or {})
        model = ClassificationNet(
            image_size=self.image_size, seq_len=self.seq_len, vocab_size=self.vocab_size,
            num_classes=len(self.classes_), **params,
        )
        return self._fit_dataset(dataset, model)

    def _outputs(self, X, modalities):
        check_is_fitted(self, "model_")
        inputs = self._validate_X(X)
        return self._forward(inputs, self._present(modalities, inputs["image"].shape[0]))

    def decision_function(self, X, modalities=None) -> np.ndarray:
        """Class logits using only ``modalities`` (default: all)."""
        return np.concatenate([o.logits.numpy() for o in self._outputs(X, modalities)])

    def predict_proba(self, X, modalities=None) -> np.ndarray:
        logits = self.decision_function(X, modalities)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X, modalities=None) -> np.ndarray:
        scores = self.decision_function(X, modalities)
        return self.classes_[scores.argmax(axis=1)]

    def transform(self, X, modalities=None) -> np.ndarray:
        """Fused global representation ``[N, fused_dim]``."""
        return np.concatenate([o.fused.global_.numpy() for o in self._outputs(X, modalities)])

    def score_auc(self, X, y, modalities=None) -> float:
        """Macro one-vs-rest AUC, the metric used for model selection."""
        labels = np.searchsorted(self.classes_, check_class_labels(y, len(np.asarray(y))))
        return macro_auc(self.predict_proba(X, modalities), labels, len(self.classes_))


class CMIMSegmenter(_CMIMBase):
    """Per-modality-branch U-Net for 1-vs-rest segmentation with MI regularisation.

    ``X`` maps each of ``modalities`` to ``[N, H, W]`` slices in ``[0, 1]``;
    ``y`` holds ``[N, H, W]`` integer label masks, reduced to
    ``mask == target_class`` before training.
    """

    task = "segmentation"

    def __init__(
        self,
        modalities: Sequence[str] = ("flair", "t1", "t1c", "t2"),
        target_class: int = 4,
        num_labels: int = 5,
        lambda_ll: float = 1.0,
        lambda_task: float = 1.0,
        learning_rate: float = 1e-4,
        batch_size: int = 32,
        max_epochs: int = 100,
        patience: int = 10,
        modality_dropout: float = 0.0,
        image_size: int = 32,
        model_params: Optional[dict] = None,
        validation_fraction: float = 0.2,
        random_state: int = 0,
    ):
        self.modalities = modalities
        self.target_class = target_class
        self.num_labels = num_labels
        self.lambda_ll = lambda_ll
        self.lambda_task = lambda_task
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.modality_dropout = modality_dropout
        self.image_size = image_size
        self.model_params = model_params
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    # segmentation only uses the local-local term
    lambda_lg = 0.0
    lambda_gg = 0.0

    def _validate_X(self, X) -> Dict[str, np.ndarray]:
        names = list(self.modalities)
        return check_modality_inputs(
            X, names, {m: (lambda a, name: check_image_stack(a, name, self.image_size)) for m in names}
        )

    def fit(self, X, y, present=None):
        inputs = self._validate_X(X)
        self.modalities_ = list(self.modalities)
        n = inputs[self.modalities_[0]].shape[0]
        masks = check_label_masks(y, n, self.image_size, self.num_labels)
        if not 0 <= self.target_class < self.num_labels:
            raise ValueError(f"target_class must be in [0, {self.num_labels})")
        dataset = MultiModalDataset(
            task="segmentation",
            modalities=inputs,
            targets=(masks == self.target_class).astype(np.int64),
            present=check_present(present, self.modalities_, n),
            ids=[str(i) for i in range(n)],
            num_classes=2,
            kinds={m: ModalityKind.VOLUME_CHANNEL for m in self.modalities_},
        )
        torch.manual_seed(self.random_state)
        model = SegmentationNet(
            modalities=tuple(self.modalities_), image_size=self.image_size, num_labels=2,
            **dict(self.model_params or {}),
        )
        return self._fit_dataset(dataset, model)

    def _outputs(self, X, modalities):
        check_is_fitted(self, "model_")
        inputs = self._validate_X(X)
        return self._forward(inputs, self._present(modalities, inputs[self.modalities_[0]].shape[0]))

    def predict_proba(self, X, modalities=None) -> np.ndarray:
        """Per-pixel probabilities ``[N, H, W, 2]`` (background, target)."""
        logits = np.concatenate([o.logits.numpy() for o in self._outputs(X, modalities)])
        z = np.exp(logits - logits.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)

    def predict(self, X, modalities=None) -> np.ndarray:
        """Binary target masks ``[N, H, W]`` (argmax of the pixel logits)."""
        logits = np.concatenate([o.logits.numpy() for o in self._outputs(X, modalities)])
        return logits.argmax(axis=-1).astype(np.int64)

    def transform(self, X, modalities=None) -> np.ndarray:
        """Fused bottleneck features ``[N, locations, channels]``."""
        return np.concatenate([o.fused.local.numpy() for o in self._outputs(X, modalities)])

    def score(self, X, y, modalities=None) -> float:
        """Mean per-sample Dice of the target class."""
        pred = self.predict(X, modalities)
        masks = check_label_masks(y, pred.shape[0], self.image_size, self.num_labels)
        return mean_dice(pred == 1, masks == self.target_class)
