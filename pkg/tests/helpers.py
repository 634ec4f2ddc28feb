"""Test-only helpers: stub models with controllable outputs."""

import numpy as np
import torch
from torch import nn


class FixedLogitsModel(nn.Module):
    """Returns preset logits row-for-row regardless of the image content.

    Lets metric tests pin exact predictions without training anything. The
    logits table must have one row per sample the test will feed in.
    """

    def __init__(self, logits: np.ndarray):
        super().__init__()
        self.register_buffer("table", torch.as_tensor(np.asarray(logits, dtype=np.float32)))

    def forward(self, x):
        n = x.shape[0]
        if n > self.table.shape[0]:
            raise ValueError("more samples than preset logit rows")
        return self.table[:n]


class LinearImageModel(nn.Module):
    """Logits = W @ flatten(x) + b on NCHW input; closed-form geometry."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray = None):
        super().__init__()
        w = torch.as_tensor(np.asarray(weight, dtype=np.float32))
        self.linear = nn.Linear(w.shape[1], w.shape[0], bias=True)
        with torch.no_grad():
            self.linear.weight.copy_(w)
            if bias is None:
                self.linear.bias.zero_()
            else:
                self.linear.bias.copy_(torch.as_tensor(np.asarray(bias, dtype=np.float32)))

    def forward(self, x):
        return self.linear(x.reshape(x.shape[0], -1))


class FixedByContentModel(nn.Module):
    """Preset logits keyed by the (0, 0) red pixel; robust to batching.

    Row i is served for images built by :func:`indexed_images`. Perturbing a
    pixel by less than half an index step keeps the row mapping, so metric
    tests can apply small attacks without changing which logits come back.
    """

    def __init__(self, logits: np.ndarray):
        super().__init__()
        self.register_buffer("table", torch.as_tensor(np.asarray(logits, dtype=np.float32)))

    def forward(self, x):
        rows = torch.round(x[:, 0, 0, 0] * self.table.shape[0]).long()
        return self.table[rows.clamp(0, self.table.shape[0] - 1)]


class FeatureStubModel(nn.Module):
    """Stub exposing preset bottleneck features and logits, keyed by content.

    Row i of the tables is served for any image whose (0, 0) red pixel equals
    i / len(table), so the mapping survives arbitrary batching. Build inputs
    with :func:`indexed_images`. Mirrors the classifier interface used by
    pseudo-labeling: ``forward`` for logits, ``bottleneck_features`` for the
    embedding.
    """

    def __init__(self, features: np.ndarray, logits: np.ndarray):
        super().__init__()
        self.register_buffer("feats", torch.as_tensor(np.asarray(features, dtype=np.float32)))
        self.register_buffer("table", torch.as_tensor(np.asarray(logits, dtype=np.float32)))

    def _rows(self, x):
        return torch.round(x[:, 0, 0, 0] * self.table.shape[0]).long()

    def forward(self, x):
        return self.table[self._rows(x)]

    def bottleneck_features(self, x):
        return self.feats[self._rows(x)]


def indexed_images(n: int, image_size=(8, 8, 3)) -> np.ndarray:
    """n images whose (0, 0) red pixel encodes the sample index as i / n."""
    images = np.full((n,) + tuple(image_size), 0.5, dtype=np.float32)
    images[:, 0, 0, 0] = np.arange(n, dtype=np.float32) / n
    return images
