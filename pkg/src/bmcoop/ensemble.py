"""Prompt ensembling and statistics-based outlier pruning.

Per class: score each generated prompt by its mean scaled similarity to
the support images, convert scores to modified z-scores via the median
absolute deviation, drop prompts whose |z| reaches the selection
threshold, and average what survives into the teacher ensemble. The
plain (unpruned) mean ensemble is kept separately for the consistency
loss.

Ensemble rows are plain means and are NOT re-normalized to unit length;
downstream cosine computations normalize on the fly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError


def mean_ensemble(bank_embeddings: list[np.ndarray]) -> np.ndarray:
    """Average the N prompt embeddings of each class; returns (C, D)."""
    rows = []
    for c, embeds in enumerate(bank_embeddings):
        embeds = np.asarray(embeds, dtype=np.float64)
        if embeds.ndim != 2 or embeds.shape[0] < 1:
            raise DataError(f"class {c} has an empty prompt embedding bank")
        rows.append(embeds.mean(axis=0))
    return np.stack(rows)


def prompt_scores(
    bank_embeddings: list[np.ndarray],
    images: np.ndarray,
    beta: float,
) -> list[np.ndarray]:
    """Score each prompt of each class: mean of beta-scaled dot products over the batch.

    ``images`` must be unit-norm rows (B, D); prompt embeddings are unit by
    construction, so the dot product is the cosine similarity.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or images.shape[0] < 1:
        raise DataError("prompt scoring needs at least one image")
    scores = []
    for embeds in bank_embeddings:
        embeds = np.asarray(embeds, dtype=np.float64)
        if embeds.shape[1] != images.shape[1]:
            raise DataError(
                f"prompt dim {embeds.shape[1]} does not match image dim {images.shape[1]}"
            )
        # (N, D) @ (D, B) -> (N, B), then mean over the batch axis
        scores.append(beta * (embeds @ images.T).mean(axis=1))
    return scores


def mad_zscores(scores: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Median, median absolute deviation, and modified z-scores of a score vector.

    No consistency constant is applied: z = (s - median) / mad. When the
    mad is zero (all scores equal) every z is defined as zero, so nothing
    looks like an outlier.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 1:
        raise DataError("scores must be a non-empty vector")
    median = float(np.median(scores))
    mad = float(np.median(np.abs(scores - median)))
    if mad == 0.0:
        z = np.zeros_like(scores)
    else:
        z = (scores - median) / mad
    return median, mad, z


def select_prompts(zscores: np.ndarray, zeta_s: float) -> np.ndarray:
    """Boolean mask of prompts with |z| strictly below the threshold.

    Guaranteed non-empty: if every prompt is rejected, keep the single
    prompt with the smallest |z| (lowest index on ties).
    """
    if zeta_s <= 0:
        raise DataError(f"selection threshold must be > 0, got {zeta_s}")
    zscores = np.asarray(zscores, dtype=np.float64)
    mask = np.abs(zscores) < zeta_s
    if not mask.any():
        mask = np.zeros_like(mask)
        mask[int(np.argmin(np.abs(zscores)))] = True
    return mask


def selected_ensemble(
    bank_embeddings: list[np.ndarray],
    masks: list[np.ndarray],
) -> np.ndarray:
    """Average only the selected prompt embeddings of each class; returns (C, D)."""
    if len(bank_embeddings) != len(masks):
        raise DataError("one selection mask per class is required")
    rows = []
    for c, (embeds, mask) in enumerate(zip(bank_embeddings, masks)):
        embeds = np.asarray(embeds, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[0] != embeds.shape[0]:
            raise DataError(f"class {c}: mask length {mask.shape[0]} != {embeds.shape[0]} prompts")
        if not mask.any():
            raise DataError(f"class {c}: selection mask excludes every prompt")
        rows.append(embeds[mask].mean(axis=0))
    return np.stack(rows)


@dataclass
class PromptScoreReport:
    """Per-class scoring and selection outcome, serializable for the CLI."""

    class_name: str
    scores: np.ndarray
    median: float
    mad: float
    zscores: np.ndarray
    selected_mask: np.ndarray

    @property
    def n_selected(self) -> int:
        return int(self.selected_mask.sum())

    def to_dict(self) -> dict:
        return {
            "class": self.class_name,
            "scores": [float(s) for s in self.scores],
            "median": self.median,
            "mad": self.mad,
            "zscores": [float(z) for z in self.zscores],
            "selected_indices": [int(i) for i in np.flatnonzero(self.selected_mask)],
            "excluded_indices": [int(i) for i in np.flatnonzero(~self.selected_mask)],
            "n_selected": self.n_selected,
        }


def score_and_select(
    class_names: list[str],
    bank_embeddings: list[np.ndarray],
    images: np.ndarray,
    beta: float,
    zeta_s: float,
) -> list[PromptScoreReport]:
    """Full per-class pipeline: scores -> z-scores -> selection mask."""
    reports = []
    for name, scores in zip(class_names, prompt_scores(bank_embeddings, images, beta)):
        median, mad, z = mad_zscores(scores)
        mask = select_prompts(z, zeta_s)
        reports.append(
            PromptScoreReport(
                class_name=name,
                scores=scores,
                median=median,
                mad=mad,
                zscores=z,
                selected_mask=mask,
            )
        )
    return reports


def write_score_report(
    reports: list[PromptScoreReport],
    path: str | Path,
    header: dict | None = None,
) -> None:
    doc = dict(header or {})
    doc["classes"] = [r.to_dict() for r in reports]
    Path(path).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
