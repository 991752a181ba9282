"""Patch-based material classification with sequence-level voting.

Four fully-connected layers over the spatially pooled relu4_1 backbone
feature of a patch, sigmoid-activated and sum-normalized into a probability
vector. A sequence is labeled by soft-voting random patches across frames.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbone import FeatureBackbone
from .errors import DataError, EmptyContentError, ParameterError
from .materials import DEFAULT_MATERIALS, MaterialLabel
from .normal_maps import NormalMapFrame
from .patches import PATCH_SIZE, Patch, random_crops

log = logging.getLogger(__name__)

FEATURE_LAYER = "relu4_1"
FEATURE_DIM = 512


@dataclass
class MaterialPrediction:
    """Per-patch probability simplex plus provenance."""

    probabilities: np.ndarray
    patch_id: int = 0
    frame_index: int = 0

    def validate(self) -> None:
        p = self.probabilities
        if p.min() < 0 or abs(float(p.sum()) - 1.0) > 1e-6:
            raise DataError(f"probabilities not a simplex: {p}")

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probabilities))


class MaterialClassifier(nn.Module):
    """512 -> 256 -> 128 -> 64 -> M with sigmoid + sum normalization."""

    def __init__(self, num_materials: int = len(DEFAULT_MATERIALS), feature_dim: int = FEATURE_DIM):
        super().__init__()
        self.num_materials = num_materials
        self.fc = nn.Sequential(
            nn.Linear(feature_dim, 256),
            nn.ReLU(),
            nn.Linear(256, 128),
            nn.ReLU(),
            nn.Linear(128, 64),
            nn.ReLU(),
            nn.Linear(64, num_materials),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        scores = torch.sigmoid(self.fc(features))
        return scores / scores.sum(dim=-1, keepdim=True)


def patch_feature(backbone: FeatureBackbone, patch: Patch) -> np.ndarray:
    """Pooled relu4_1 activation vector of one patch."""
    if not patch.mask.any():
        raise EmptyContentError("cannot classify an empty patch")
    stack = backbone.extract_features(patch.rgb(), (FEATURE_LAYER,))
    return stack.layers[FEATURE_LAYER].mean(axis=(0, 1)).astype(np.float32)


def batch_features(backbone: FeatureBackbone, patch_list: list[Patch], batch_size: int = 16) -> np.ndarray:
    feats = []
    with torch.no_grad():
        for start in range(0, len(patch_list), batch_size):
            block = patch_list[start : start + batch_size]
            for p in block:
                if not p.mask.any():
                    raise EmptyContentError("cannot classify an empty patch")
            rgb = torch.stack([torch.from_numpy(p.rgb()).permute(2, 0, 1) for p in block])
            out = backbone.features(rgb, (FEATURE_LAYER,))[FEATURE_LAYER]
            feats.append(out.mean(dim=(2, 3)).cpu().numpy())
    return np.concatenate(feats, axis=0)


def classify_patch(
    classifier: MaterialClassifier, backbone: FeatureBackbone, patch: Patch,
    patch_id: int = 0, frame_index: int = 0,
) -> MaterialPrediction:
    feature = patch_feature(backbone, patch)
    classifier.eval()
    with torch.no_grad():
        probs = classifier(torch.from_numpy(feature)[None])[0].numpy()
    return MaterialPrediction(
        probabilities=probs.astype(np.float64), patch_id=patch_id, frame_index=frame_index
    )


def train_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    num_materials: int,
    steps: int = 300,
    batch_size: int = 32,
    learning_rate: float = 1e-3,
    holdout_fraction: float = 0.25,
    seed: int = 0,
) -> tuple[MaterialClassifier, list[tuple[int, float, float]]]:
    """Cross-entropy training on precomputed patch features.

    Returns (classifier, history) where history rows are (step, loss,
    holdout_accuracy). Requires at least two distinct classes.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise DataError("classifier training needs at least 2 material classes")
    if len(features) != len(labels):
        raise DataError("features/labels length mismatch")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    n_hold = max(1, int(round(holdout_fraction * len(labels))))
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    if len(train_idx) == 0:
        raise DataError("not enough samples to split off a holdout set")

    torch.manual_seed(seed)
    clf = MaterialClassifier(num_materials, features.shape[1])
    optimizer = torch.optim.Adam(clf.parameters(), lr=learning_rate)
    x = torch.from_numpy(features.astype(np.float32))
    y = torch.from_numpy(labels)
    history: list[tuple[int, float, float]] = []
    for step in range(steps):
        batch = rng.choice(train_idx, size=min(batch_size, len(train_idx)), replace=False)
        bt = torch.from_numpy(batch)
        probs = clf(x[bt])
        loss = -(probs[torch.arange(len(bt)), y[bt]].clamp(min=1e-12).log()).mean()
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        if step % 25 == 0 or step == steps - 1:
            acc = holdout_accuracy(clf, features[hold_idx], labels[hold_idx])
            history.append((step, float(loss), acc))
    return clf, history


def holdout_accuracy(clf: MaterialClassifier, features: np.ndarray, labels: np.ndarray) -> float:
    clf.eval()
    with torch.no_grad():
        probs = clf(torch.from_numpy(features.astype(np.float32)))
        pred = probs.argmax(dim=1).numpy()
    return float((pred == labels).mean())


@dataclass
class VoteReport:
    label: MaterialLabel
    mean_probabilities: np.ndarray
    per_patch: list[MaterialPrediction]
    tie: bool

    def histogram(self, bins: int = 10) -> dict[str, list[int]]:
        """Patch-count histogram over probability bins, per material."""
        out: dict[str, list[int]] = {}
        edges = np.linspace(0.0, 1.0, bins + 1)
        for m, name in enumerate(self.label.vocabulary):
            values = [p.probabilities[m] for p in self.per_patch]
            counts, _ = np.histogram(values, bins=edges)
            out[name] = counts.tolist()
        return out


def vote_sequence(
    frames: list[NormalMapFrame],
    classifier: MaterialClassifier,
    backbone: FeatureBackbone,
    patches_per_frame: int = 42,
    rng_seed: int = 0,
    vocabulary=DEFAULT_MATERIALS,
    patch_size: int = PATCH_SIZE,
    max_frames: int | None = None,
) -> VoteReport:
    """Soft-vote the material over random patches of every frame.

    The final label is the argmax of the mean probability vector; exact ties
    go to the lowest vocabulary index and are flagged.
    """
    if not frames:
        raise DataError("cannot vote on an empty sequence")
    if patches_per_frame < 1:
        raise ParameterError("patches_per_frame must be positive")
    use = frames if max_frames is None else frames[:max_frames]
    predictions: list[MaterialPrediction] = []
    all_patches: list[Patch] = []
    meta: list[tuple[int, int]] = []
    for frame in use:
        if not frame.mask.any():
            continue
        crops = random_crops(
            frame, patches_per_frame, [rng_seed, frame.frame_index], patch_size
        )
        for i, patch in enumerate(crops):
            all_patches.append(patch)
            meta.append((i, frame.frame_index))
    if not all_patches:
        raise EmptyContentError("all frames are empty; nothing to classify")
    feats = batch_features(backbone, all_patches)
    classifier.eval()
    with torch.no_grad():
        probs = classifier(torch.from_numpy(feats)).numpy().astype(np.float64)
    for (pid, fidx), p in zip(meta, probs):
        predictions.append(MaterialPrediction(p, patch_id=pid, frame_index=fidx))
    mean = probs.mean(axis=0)
    best = int(np.argmax(mean))
    tie = bool(np.sum(np.isclose(mean, mean[best], rtol=0, atol=0)) > 1)
    label = MaterialLabel.from_index(best, vocabulary)
    return VoteReport(label=label, mean_probabilities=mean, per_patch=predictions, tie=tie)
