"""Small CNN classifier, label-smoothed source training, checkpoint IO.

The classifier is split into feature extractor -> bottleneck -> linear head so
adaptation can freeze the head and operate on bottleneck features. Models
consume NCHW torch tensors internally; every public entry point accepts the
package-wide numpy (N, H, W, C) image convention.
"""

import json
import os
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .seeding import scoped_torch_seed


def default_device() -> torch.device:
    return torch.device(os.environ.get("ADAPTBENCH_DEVICE", "cpu"))


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-3
    label_smoothing: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")


class Classifier(nn.Module):
    """Conv feature extractor, linear+BN bottleneck, linear head."""

    def __init__(
        self,
        class_count: int,
        input_shape: Tuple[int, int, int] = (32, 32, 3),
        channels: Tuple[int, ...] = (32, 64, 128),
        bottleneck_dim: int = 64,
    ):
        super().__init__()
        h, w, c = input_shape
        blocks = []
        prev = c
        for ch in channels:
            blocks += [
                nn.Conv2d(prev, ch, kernel_size=3, padding=1),
                nn.BatchNorm2d(ch),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            prev = ch
        self.features = nn.Sequential(*blocks)
        # Keep the final spatial grid (no global pooling) so localized and
        # high-frequency structure stays visible to the bottleneck.
        feat_dim = channels[-1] * (h // 2 ** len(channels)) * (w // 2 ** len(channels))
        self.bottleneck = nn.Sequential(
            nn.Linear(feat_dim, bottleneck_dim), nn.BatchNorm1d(bottleneck_dim)
        )
        self.head = nn.Linear(bottleneck_dim, class_count)
        self.class_count = class_count
        self.input_shape = tuple(input_shape)
        self.channels = tuple(channels)
        self.bottleneck_dim = bottleneck_dim

    def bottleneck_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.bottleneck(self.features(x).flatten(1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.bottleneck_features(x))


def build_classifier(
    class_count: int,
    input_shape: Tuple[int, int, int] = (32, 32, 3),
    seed: int = 0,
    channels: Tuple[int, ...] = (32, 64, 128),
    bottleneck_dim: int = 64,
) -> Classifier:
    """Seeded construction so the same seed yields identical initial weights."""
    with scoped_torch_seed(seed):
        model = Classifier(class_count, input_shape, channels, bottleneck_dim)
    return model.to(default_device())


def image_batch_to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) float numpy in [0, 1] -> (N, C, H, W) float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(
        default_device()
    )


def smoothed_cross_entropy(
    logits: torch.Tensor, labels: torch.Tensor, eps_ls: float = 0.1
) -> torch.Tensor:
    """Cross entropy against the label-smoothed target distribution.

    The target puts 1 - eps_ls on the true class and eps_ls / (K - 1) on each
    other class; eps_ls = 0 recovers plain cross entropy. Accepts a single
    (K,) logit vector or an (N, K) batch; returns the scalar mean.
    """
    if logits.dim() == 1:
        logits = logits[None]
        labels = labels.reshape(1)
    k = logits.shape[-1]
    if not 0.0 <= eps_ls < 1.0:
        raise ValueError("eps_ls must lie in [0, 1)")
    log_probs = F.log_softmax(logits, dim=-1)
    true_term = log_probs.gather(1, labels.view(-1, 1)).squeeze(1)
    if eps_ls == 0.0 or k == 1:
        return -true_term.mean()
    off = eps_ls / (k - 1)
    loss = -(1.0 - eps_ls) * true_term - off * (log_probs.sum(dim=-1) - true_term)
    return loss.mean()


def train_source(ds, cfg: TrainConfig) -> Classifier:
    """Label-smoothed ERM on one dataset; returns the trained classifier.

    ds needs .images/.labels/.class_count (DomainDataset or PoisonedDataset).
    All randomness (init, batch order) derives from cfg.seed. Aborts with
    TrainingDivergedError if the loss stops being finite.
    """
    if len(ds.images) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = build_classifier(ds.class_count, tuple(ds.images.shape[1:]), seed=cfg.seed)
    x_all = image_batch_to_tensor(ds.images)
    y_all = torch.from_numpy(np.asarray(ds.labels, dtype=np.int64)).to(x_all.device)
    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A]))
    history = []
    model.train()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(y_all))
        total, seen = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue  # BN needs at least 2 samples per batch
            xb, yb = x_all[idx], y_all[idx]
            loss = smoothed_cross_entropy(model(xb), yb, cfg.label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        epoch_loss = total / max(seen, 1)
        history.append(epoch_loss)
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(
                f"loss became non-finite at epoch {epoch} (lr={cfg.lr}); "
                f"history={history}"
            )
    model.training_loss_history = history
    model.eval()
    return model


@torch.no_grad()
def logits_for(model: Classifier, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for a numpy image batch, as (N, K) float numpy."""
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        xb = image_batch_to_tensor(images[start : start + batch_size])
        out.append(model(xb).cpu().numpy())
    return np.concatenate(out, axis=0)


@torch.no_grad()
def bottleneck_features_for(
    model: Classifier, images: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        xb = image_batch_to_tensor(images[start : start + batch_size])
        out.append(model.bottleneck_features(xb).cpu().numpy())
    return np.concatenate(out, axis=0)


def predict(model: Classifier, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Predicted labels; ties break toward the lowest class index."""
    return np.argmax(logits_for(model, images, batch_size), axis=1)


def save_classifier(model: Classifier, directory: str, extra_meta: Optional[dict] = None) -> None:
    """Checkpoint = weights blob + JSON metadata describing how to rebuild."""
    os.makedirs(directory, exist_ok=True)
    torch.save(model.state_dict(), os.path.join(directory, "weights.pt"))
    meta = {
        "arch": "smallcnn",
        "class_count": model.class_count,
        "input_shape": list(model.input_shape),
        "channels": list(model.channels),
        "bottleneck_dim": model.bottleneck_dim,
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(os.path.join(directory, "metadata.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_classifier(directory: str) -> Classifier:
    with open(os.path.join(directory, "metadata.json")) as f:
        meta = json.load(f)
    if meta.get("arch") != "smallcnn":
        raise ValueError(f"unknown arch {meta.get('arch')!r}")
    model = Classifier(
        class_count=meta["class_count"],
        input_shape=tuple(meta["input_shape"]),
        channels=tuple(meta["channels"]),
        bottleneck_dim=meta["bottleneck_dim"],
    )
    state = torch.load(os.path.join(directory, "weights.pt"), weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model.to(default_device())


def load_checkpoint_meta(directory: str) -> dict:
    with open(os.path.join(directory, "metadata.json")) as f:
        return json.load(f)


def clone_classifier(model: Classifier) -> Classifier:
    """Detached structural copy with identical weights."""
    twin = Classifier(
        model.class_count, model.input_shape, model.channels, model.bottleneck_dim
    )
    twin.load_state_dict(model.state_dict())
    return twin.to(next(model.parameters()).device)
