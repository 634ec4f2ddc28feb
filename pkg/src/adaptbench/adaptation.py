"""Source-free adaptation: information maximization plus centroid pseudo-labels.

The adapter only ever sees target images; the API takes a bare image array so
target labels cannot leak in. The classifier head stays frozen by default and
the feature extractor is tuned so target features land on the source head's
decision structure.
"""

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .defense import pgd_adversarial
from .models import (
    Classifier,
    bottleneck_features_for,
    clone_classifier,
    image_batch_to_tensor,
    logits_for,
)


@dataclass(frozen=True)
class AdaptConfig:
    epochs: int = 15
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-3
    freeze_head: bool = True
    im_entropy_weight: float = 1.0
    im_diversity_weight: float = 1.0
    pseudo_label_weight: float = 0.3
    pseudo_refresh_interval: int = 1  # epochs between pseudo-label recomputes
    joint_adv: str = "none"  # "none" | "pgd": true-label-free adversarial term
    joint_adv_weight: float = 0.2
    adv_eps: float = 4.0 / 255.0
    adv_steps: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.joint_adv not in ("none", "pgd"):
            raise ValueError("joint_adv must be 'none' or 'pgd'")
        if self.pseudo_refresh_interval < 1:
            raise ValueError("pseudo_refresh_interval must be >= 1")


def _entropy_terms(batch_logits: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(mean per-sample entropy, entropy of the mean prediction)."""
    log_p = F.log_softmax(batch_logits, dim=-1)
    p = log_p.exp()
    sample_entropy = -(p * log_p).sum(dim=-1).mean()
    p_bar = p.mean(dim=0)
    marginal_entropy = -(p_bar * torch.log(p_bar)).sum()
    return sample_entropy, marginal_entropy


def information_maximization_loss(batch_logits: torch.Tensor) -> torch.Tensor:
    """Mean prediction entropy minus entropy of the mean prediction.

    Minimizing drives each prediction confident while keeping the batch
    spread across classes. Lower bound is -ln(K), attained by confident
    predictions evenly covering all K classes; uniform predictions give 0.
    """
    if batch_logits.dim() != 2:
        raise ValueError("expected a (N, K) logit batch")
    sample_entropy, marginal_entropy = _entropy_terms(batch_logits)
    return sample_entropy - marginal_entropy


def centroid_pseudo_labels(
    model: Classifier, images: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    """Two-round nearest-centroid pseudo-labels in bottleneck-feature space.

    Round 1 builds class centroids weighted by softmax probabilities and
    assigns each sample to the nearest centroid under cosine distance; round 2
    recomputes centroids from the hard assignments and reassigns. Classes that
    lose all members keep their previous centroid.
    """
    feats = bottleneck_features_for(model, images, batch_size)
    logits = logits_for(model, images, batch_size)
    probs = torch.softmax(torch.from_numpy(logits), dim=1).numpy().astype(np.float64)
    feats = feats.astype(np.float64)
    normed = feats / (np.linalg.norm(feats, axis=1, keepdims=True) + 1e-12)

    centroids = probs.T @ feats / (probs.sum(axis=0)[:, None] + 1e-8)

    def assign(cents: np.ndarray) -> np.ndarray:
        c_normed = cents / (np.linalg.norm(cents, axis=1, keepdims=True) + 1e-12)
        cosine_dist = 1.0 - normed @ c_normed.T
        return np.argmin(cosine_dist, axis=1)

    labels = assign(centroids)
    k = probs.shape[1]
    onehot = np.eye(k)[labels]
    counts = onehot.sum(axis=0)
    refreshed = onehot.T @ feats / (counts[:, None] + 1e-8)
    refreshed[counts == 0] = centroids[counts == 0]  # keep empty classes anchored
    return assign(refreshed).astype(np.int64)


def shot_adapt(
    source_model: Classifier,
    target_images: np.ndarray,
    cfg: AdaptConfig,
    epoch_hook: Optional[Callable[[Classifier, int], dict]] = None,
) -> Tuple[Classifier, List[dict]]:
    """Adapt a source classifier to unlabeled target images.

    Loss per batch: im_entropy_weight * mean-entropy
                  - im_diversity_weight * marginal-entropy
                  + pseudo_label_weight * CE against centroid pseudo-labels,
    optionally + joint_adv_weight * CE on PGD examples built from the current
    pseudo-labels (joint_adv="pgd"); no ground-truth labels anywhere.

    Returns the adapted model and a per-epoch trace (loss plus whatever the
    optional epoch_hook reports). epochs=0 returns an unchanged copy.
    """
    model = clone_classifier(source_model)
    if cfg.epochs == 0:
        model.eval()
        return model, []
    if cfg.freeze_head:
        for p in model.head.parameters():
            p.requires_grad_(False)
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(
        trainable, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    x_all = image_batch_to_tensor(target_images)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xADA]))
    pseudo = None
    trace: List[dict] = []
    for epoch in range(cfg.epochs):
        if epoch % cfg.pseudo_refresh_interval == 0:
            pseudo_np = centroid_pseudo_labels(model, target_images)
            pseudo = torch.from_numpy(pseudo_np).to(x_all.device)
        perm = rng.permutation(len(x_all))
        total, seen = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue  # BN needs at least 2 samples per batch
            xb, yb = x_all[idx], pseudo[idx]
            if cfg.joint_adv == "pgd" and cfg.joint_adv_weight > 0:
                x_adv = pgd_adversarial(model, xb, yb, cfg.adv_eps, cfg.adv_steps)
            else:
                x_adv = None
            model.train()
            logits = model(xb)
            sample_entropy, marginal_entropy = _entropy_terms(logits)
            loss = (
                cfg.im_entropy_weight * sample_entropy
                - cfg.im_diversity_weight * marginal_entropy
                + cfg.pseudo_label_weight * F.cross_entropy(logits, yb)
            )
            if x_adv is not None:
                loss = loss + cfg.joint_adv_weight * F.cross_entropy(model(x_adv), yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        row = {"epoch": epoch, "loss": total / max(seen, 1)}
        if epoch_hook is not None:
            row.update(epoch_hook(model, epoch))
        trace.append(row)
    model.eval()
    return model, trace
