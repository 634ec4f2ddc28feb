"""Backdoor poisoning: blended, sinusoidal (SIG), and patch (BadNets) triggers.

All trigger arithmetic happens in the [0, 1] float pixel domain. Training-time
poisoning relabels the selected samples to the attacker's target class;
test-time application of the same trigger (for attack-success measurement)
reuses apply_trigger without relabeling.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .datasets import DomainDataset

POISON_MODES = ("blended", "sig", "badnets")


@dataclass(frozen=True)
class PoisonSpec:
    """Everything needed to poison a dataset reproducibly.

    trigger_image is the full-size blend image for "blended" mode and the
    patch for "badnets" mode; it is unused for "sig". patch_position is the
    (row, col) of the patch's top-left corner, None meaning bottom-right.
    """

    mode: str
    target_class: int = 0
    poison_rate: float = 0.1
    alpha: float = 0.2
    sig_amplitude: float = 20.0 / 255.0
    sig_freq: int = 6
    trigger_image: Optional[np.ndarray] = None
    patch_position: Optional[Tuple[int, int]] = None
    restrict_to_nontarget: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in POISON_MODES:
            raise ValueError(f"mode must be one of {POISON_MODES}, got {self.mode!r}")
        if not 0.0 < self.poison_rate <= 1.0:
            raise ValueError("poison_rate must lie in (0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.sig_amplitude < 0.0:
            raise ValueError("sig_amplitude must be non-negative")
        if self.target_class < 0:
            raise ValueError("target_class must be a valid class index")
        if self.mode in ("blended", "badnets") and self.trigger_image is None:
            raise ValueError(f"{self.mode} mode requires trigger_image")


def make_blend_trigger(image_size: Tuple[int, int, int], seed: int = 0) -> np.ndarray:
    """Fixed random-pattern blend image, the classic blended-injection trigger."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB1]))
    return rng.uniform(0.0, 1.0, size=image_size).astype(np.float32)


def make_badnets_patch(
    patch_size: Tuple[int, int, int] = (3, 3, 3), value: float = 1.0
) -> np.ndarray:
    """Solid bright patch. BadNets-style trigger."""
    return np.full(patch_size, float(value), dtype=np.float32)


def blend_poison(image: np.ndarray, trigger: np.ndarray, alpha: float) -> np.ndarray:
    """Convex blend (1 - alpha) * image + alpha * trigger.

    Inputs in [0, 1] stay in [0, 1] by convexity; no clamp is applied.
    """
    if image.shape[-3:] != trigger.shape:
        raise ValueError(f"trigger shape {trigger.shape} does not match image {image.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return ((1.0 - alpha) * image + alpha * trigger).astype(np.float32)


def build_sig_trigger(
    image_size: Tuple[int, int, int], amplitude: float, freq: int
) -> np.ndarray:
    """Horizontal sinusoid delta(i, j, c) = amplitude * sin(2*pi*j*freq / W).

    Constant down each column and across channels; amplitude is on the [0, 1]
    pixel scale.
    """
    h, w, c = image_size
    j = np.arange(w, dtype=np.float64)
    row = amplitude * np.sin(2.0 * np.pi * j * freq / w)
    return np.broadcast_to(row[None, :, None], (h, w, c)).astype(np.float32).copy()


def sig_poison(image: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Additive sinusoidal trigger with clamp to the valid pixel range."""
    if image.shape[-3:] != delta.shape:
        raise ValueError(f"delta shape {delta.shape} does not match image {image.shape}")
    return np.clip(image + delta, 0.0, 1.0).astype(np.float32)


def badnets_poison(
    image: np.ndarray, patch: np.ndarray, position: Optional[Tuple[int, int]] = None
) -> np.ndarray:
    """Overwrite a patch region; pixels outside the patch are untouched."""
    ph, pw, pc = patch.shape
    h, w, c = image.shape[-3:]
    if ph > h or pw > w or pc != c:
        raise ValueError(f"patch {patch.shape} does not fit image {image.shape}")
    if position is None:
        position = (h - ph, w - pw)
    r, col = position
    if r < 0 or col < 0 or r + ph > h or col + pw > w:
        raise ValueError(f"patch at {position} exceeds image bounds")
    out = np.array(image, dtype=np.float32, copy=True)
    out[..., r : r + ph, col : col + pw, :] = patch
    return out


def apply_trigger(images: np.ndarray, spec: PoisonSpec) -> np.ndarray:
    """Apply spec's trigger to one image or a batch, without relabeling."""
    if spec.mode == "blended":
        return blend_poison(images, spec.trigger_image, spec.alpha)
    if spec.mode == "sig":
        delta = build_sig_trigger(images.shape[-3:], spec.sig_amplitude, spec.sig_freq)
        return sig_poison(images, delta)
    if spec.mode == "badnets":
        return badnets_poison(images, spec.trigger_image, spec.patch_position)
    raise ValueError(f"unknown mode {spec.mode!r}")


@dataclass
class PoisonedDataset:
    """A dataset with a fraction of samples trigger-stamped and relabeled.

    images/labels are the materialized poisoned arrays; base and
    poisoned_indices record what was changed so audits can recompute them.
    """

    base: DomainDataset
    poisoned_indices: np.ndarray
    spec: PoisonSpec
    images: np.ndarray = field(init=False)
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.poisoned_indices = np.asarray(self.poisoned_indices, dtype=np.int64)
        images = np.array(self.base.images, copy=True)
        labels = np.array(self.base.labels, copy=True)
        if self.poisoned_indices.size:
            images[self.poisoned_indices] = apply_trigger(
                images[self.poisoned_indices], self.spec
            )
            labels[self.poisoned_indices] = self.spec.target_class
        self.images = images
        self.labels = labels

    def __len__(self) -> int:
        return len(self.base)

    @property
    def class_count(self) -> int:
        return self.base.class_count

    def to_dataset(self) -> DomainDataset:
        """Materialized view as a plain DomainDataset."""
        return DomainDataset(
            images=self.images,
            labels=self.labels,
            class_count=self.base.class_count,
            domain_id=self.base.domain_id + "+poison",
            split=self.base.split,
        )


def poison_dataset(ds: DomainDataset, spec: PoisonSpec) -> PoisonedDataset:
    """Select round(poison_rate * N) samples and poison them.

    Selection is uniform without replacement from all classes, or from
    non-target classes only when spec.restrict_to_nontarget is set. The same
    spec always selects the same indices.
    """
    if spec.target_class >= ds.class_count:
        raise ValueError("target_class out of range for this dataset")
    n_poison = int(round(spec.poison_rate * len(ds)))
    eligible = (
        np.flatnonzero(ds.labels != spec.target_class)
        if spec.restrict_to_nontarget
        else np.arange(len(ds))
    )
    if n_poison > eligible.size:
        raise ValueError(
            f"cannot poison {n_poison} samples, only {eligible.size} eligible"
        )
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xBAD]))
    chosen = np.sort(rng.choice(eligible, size=n_poison, replace=False))
    return PoisonedDataset(base=ds, poisoned_indices=chosen, spec=spec)
