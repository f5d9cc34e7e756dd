"""Attention contributions and the early failure-mode detector.

The contribution of source token ``j`` to target token ``i`` at layer ``l``
is the per-head attention weight times the value vector of ``j`` pushed
through that head's output matrix, summed over heads.  Summed over ``j``
it reproduces the attention block output minus its bias.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .model import ActivationCache, MultiModalLM, PromptSpec
from .validation import check_binary_labels, check_scores


class FutureTokenWarning(UserWarning):
    """A contribution from a masked (future) source was requested."""


@dataclass
class ContributionProfile:
    layer: int
    target: int
    sources: list[int]
    vectors: np.ndarray
    norms: np.ndarray
    masked: list[int]


def _head_weights(model: MultiModalLM, layer: int) -> tuple[np.ndarray, np.ndarray]:
    c = model.config
    w_v = model.layer_param(layer, "attn.W_v").data.reshape(c.d_model, c.n_heads, c.d_head)
    w_o = model.layer_param(layer, "attn.W_o").data.reshape(c.n_heads, c.d_head, c.d_model)
    return w_v, w_o


def contributions(model: MultiModalLM, cache: ActivationCache, layer: int, target: int,
                  sources: Sequence[int]) -> ContributionProfile:
    """Contribution vectors from each of ``sources`` to ``target`` at ``layer``."""
    if not 0 <= layer < model.config.n_layers:
        raise ValueError(f"layer {layer} out of range")
    if not 0 <= target < cache.n_positions:
        raise ValueError(f"target {target} out of range")
    sources = [int(j) for j in sources]
    w_v, w_o = _head_weights(model, layer)
    x = cache.attn_in[layer][sources]                          # (n, d)
    vals = np.einsum("nd,dhk->nhk", x, w_v)                    # (n, H, dh)
    per_head = np.einsum("nhk,hkd->nhd", vals, w_o)            # (n, H, d)
    a = cache.attn_pattern[layer][:, target, sources].T        # (n, H)
    vecs = np.einsum("nh,nhd->nd", a, per_head)
    masked = [j for j in sources if j > target]
    if masked:
        warnings.warn(f"sources {masked} lie after target {target}; contribution is zero",
                      FutureTokenWarning, stacklevel=2)
        vecs[[i for i, j in enumerate(sources) if j > target]] = 0.0
    return ContributionProfile(layer, target, sources, vecs, np.linalg.norm(vecs, axis=-1), masked)


def contribution(model: MultiModalLM, cache: ActivationCache, layer: int, i: int, j: int) -> np.ndarray:
    return contributions(model, cache, layer, i, [j]).vectors[0]


def visual_to_constraint_profile(model: MultiModalLM, prompt: PromptSpec,
                                 cache: ActivationCache | None = None) -> np.ndarray:
    """``(N, L)`` contribution norms from each visual token to the last
    visual-constraint token."""
    if prompt.visual_constraint_span is None or prompt.n_visual == 0:
        raise ValueError("prompt has no visual constraint")
    if cache is None:
        _, cache = model.forward(prompt, cache=True)
    c = prompt.constraint_position
    sources = list(range(prompt.n_visual))
    cols = [contributions(model, cache, l, c, sources).norms for l in range(model.config.n_layers)]
    return np.stack(cols, axis=1)


def constraint_to_last_profile(model: MultiModalLM, prompt: PromptSpec,
                               cache: ActivationCache | None = None) -> np.ndarray:
    """Per-layer norm of the contribution from the constraint token to the
    last question token."""
    if cache is None:
        _, cache = model.forward(prompt, cache=True)
    c, last = prompt.constraint_position, prompt.last_position
    return np.array([contributions(model, cache, l, last, [c]).norms[0]
                     for l in range(model.config.n_layers)])


def position_mass(profile: np.ndarray, positions: Sequence[int], layer: int = 0) -> float:
    """Share of the layer's total contribution norm carried by ``positions``."""
    col = profile[:, layer]
    total = col.sum()
    return float(col[list(positions)].sum() / total) if total > 0 else 0.0


def profile_csv(profile: np.ndarray, row_label: str = "source") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    prof = np.atleast_2d(profile)
    if prof.shape[0] == 1 and profile.ndim == 1:
        w.writerow(["layer", "contribution"])
        for l, v in enumerate(profile):
            w.writerow([l, repr(float(v))])
        return buf.getvalue()
    w.writerow([row_label] + [f"layer{l}" for l in range(prof.shape[1])])
    for k, row in enumerate(prof):
        w.writerow([k] + [repr(float(v)) for v in row])
    return buf.getvalue()


# -- scoring ---------------------------------------------------------------

def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative
    (ties count one half), via average ranks."""
    scores = check_scores(scores)
    labels = check_binary_labels(labels, len(scores))
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confidence_baseline(model: MultiModalLM, prompt: PromptSpec) -> float:
    """Probability of the greedy first answer token."""
    return float(model.next_token_probs(prompt).max())


@dataclass
class DetectorModel:
    layers: tuple[int, int]
    threshold: float
    validation_auroc: float

    def score(self, profiles: np.ndarray) -> np.ndarray:
        profiles = np.atleast_2d(profiles)
        return profiles[:, list(self.layers)].mean(axis=1)


def fit_detector(profiles: np.ndarray, labels) -> DetectorModel:
    """Pick the layer pair whose mean contribution best separates the labels.

    Ties go to the lexicographically smallest pair.  The threshold maximizes
    Youden's J on the same data.
    """
    profiles = np.atleast_2d(np.asarray(profiles, dtype=np.float64))
    labels = check_binary_labels(labels, profiles.shape[0])
    n_layers = profiles.shape[1]
    if n_layers < 2:
        raise ValueError("need at least two layers")
    best, best_auc = None, -1.0
    for pair in itertools.combinations(range(n_layers), 2):
        a = auroc(profiles[:, list(pair)].mean(axis=1), labels)
        if a > best_auc:
            best, best_auc = pair, a
    assert best is not None
    scores = profiles[:, list(best)].mean(axis=1)
    return DetectorModel(best, _youden_threshold(scores, labels), best_auc)


def _youden_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    cands = np.unique(scores)
    best_t, best_j = cands[0], -np.inf
    n_pos, n_neg = labels.sum(), (~labels).sum()
    for t in cands:
        pred = scores >= t
        j = (pred & labels).sum() / n_pos - (pred & ~labels).sum() / n_neg
        if j > best_j:
            best_t, best_j = t, j
    return float(best_t)


class FailureDetector(ClassifierMixin, BaseEstimator):
    """Predicts answer correctness from constraint-to-last contribution
    profiles ``X`` of shape ``(n_prompts, n_layers)``."""

    def __init__(self, layers=None):
        self.layers = layers

    def fit(self, X, y):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = check_binary_labels(y, X.shape[0])
        if self.layers is None:
            self.detector_ = fit_detector(X, y)
        else:
            pair = tuple(int(l) for l in self.layers)
            if len(pair) != 2 or pair[0] == pair[1]:
                raise ValueError("layers must be two distinct indices")
            s = X[:, list(pair)].mean(axis=1)
            self.detector_ = DetectorModel(pair, _youden_threshold(s, y), auroc(s, y))
        self.classes_ = np.array([False, True])
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "detector_")
        return self.detector_.score(np.asarray(X, dtype=np.float64))

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X) >= self.detector_.threshold

    def score(self, X, y) -> float:
        """AUROC of the decision function."""
        return auroc(self.decision_function(X), y)


def detector_report(detector: DetectorModel, heldout_auroc: float, confidence_auroc: float,
                    n_validation: int, n_heldout: int) -> str:
    return json.dumps({
        "layers": list(detector.layers), "threshold": detector.threshold,
        "validation_auroc": detector.validation_auroc, "detector_auroc": heldout_auroc,
        "confidence_auroc": confidence_auroc, "n_validation": n_validation,
        "n_heldout": n_heldout}, indent=1, sort_keys=True)
