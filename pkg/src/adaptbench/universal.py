"""Universal adversarial perturbations: DeepFool-accumulated and generator-based.

A universal perturbation is a single image-shaped tensor v, constrained to an
L-infinity ball of radius xi, that flips the model's prediction on a large
fraction of inputs: the fooling rate is label-free, comparing predictions on
x+v against predictions on x. Generation (either method) reports its achieved
fooling rate, which the evaluator can recompute independently.
"""

import json
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .models import image_batch_to_tensor, logits_for, predict
from .seeding import scoped_torch_seed

LINF_TOL = 1e-9  # constructor slack for float round-trips


@dataclass
class UniversalPerturbation:
    """An input-agnostic additive perturbation with provenance."""

    v: np.ndarray
    xi: float
    generator: str  # "uap" | "gap" | "random-sign"
    achieved_fooling_rate: float
    seed: int
    passes_used: Optional[int] = None  # UAP only: data passes before halting

    def __post_init__(self):
        self.v = np.ascontiguousarray(self.v, dtype=np.float32)
        if self.v.ndim != 3:
            raise ValueError("v must be image-shaped (H, W, C)")
        if float(np.abs(self.v).max(initial=0.0)) > self.xi + LINF_TOL:
            raise ValueError("perturbation exceeds its L-inf budget")
        if not 0.0 <= self.achieved_fooling_rate <= 1.0:
            raise ValueError("fooling rate must lie in [0, 1]")


@dataclass(frozen=True)
class UapConfig:
    xi: float = 10.0 / 255.0
    delta: float = 0.8  # target fooling rate; generation stops once reached
    max_passes: int = 10
    deepfool_overshoot: float = 0.02
    deepfool_max_iters: int = 20
    seed: int = 0


@dataclass(frozen=True)
class GapConfig:
    xi: float = 10.0 / 255.0
    steps: int = 300
    batch_size: int = 64
    lr: float = 0.01
    latent_dim: int = 64
    eval_every: int = 25
    seed: int = 0


def _f32_bound(radius: float) -> np.float32:
    """Largest float32 not exceeding radius (float32(radius) may round up)."""
    bound = np.float32(radius)
    if float(bound) > radius:
        bound = np.nextafter(bound, np.float32(0.0))
    return bound


def project_linf(v: np.ndarray, radius: float) -> np.ndarray:
    """Project onto the L-infinity ball of the given radius.

    The clip bound is the largest float32 below the radius, so the returned
    array satisfies the budget exactly, not just up to rounding.
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    bound = _f32_bound(radius)
    return np.clip(np.asarray(v, dtype=np.float32), -bound, bound)


def apply_perturbation(images: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Canonical application: add v and clamp to the valid pixel range."""
    return np.clip(images + v, 0.0, 1.0).astype(np.float32)


def fooling_rate(model, images: np.ndarray, v: np.ndarray) -> float:
    """Fraction of samples whose prediction changes under x -> x + v.

    Label-free by design; invariant to sample order and batch partitioning
    because predictions are computed in eval mode.
    """
    clean = predict(model, images)
    fooled = predict(model, apply_perturbation(images, v))
    return float(np.mean(clean != fooled))


def _logit_jacobian(model, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Logits of a single input and the jacobian of every logit wrt the input.

    Replicates the input once per class so a single backward pass with an
    identity seed matrix yields all class gradients.
    """
    with torch.no_grad():
        k = model(x[None]).shape[1]
    xs = x[None].repeat(k, 1, 1, 1).requires_grad_(True)
    logits = model(xs)
    grads = torch.autograd.grad(logits, xs, grad_outputs=torch.eye(k, device=x.device))[0]
    return logits[0].detach(), grads.detach()


def deepfool_step(
    model,
    x: np.ndarray,
    max_iters: int = 20,
    overshoot: float = 0.02,
    reference_label: Optional[int] = None,
) -> np.ndarray:
    """Minimal perturbation (linearized) that flips the prediction on x.

    Returns r such that the model's prediction on x + (1 + overshoot) * r
    differs from its prediction on x, or the best accumulated estimate after
    max_iters. If reference_label is given and the model already disagrees
    with it on x, returns zeros by convention.
    """
    model.eval()
    x_t = image_batch_to_tensor(x)[0]
    with torch.no_grad():
        logits0 = model(x_t[None])[0]
    k0 = int(np.argmax(logits0.cpu().numpy()))
    if reference_label is not None and k0 != int(reference_label):
        return np.zeros_like(np.asarray(x, dtype=np.float32))
    r_tot = torch.zeros_like(x_t)
    for _ in range(max_iters):
        x_cur = x_t + (1.0 + overshoot) * r_tot
        logits, jac = _logit_jacobian(model, x_cur)
        if int(torch.argmax(logits)) != k0:
            break
        w = jac - jac[k0 : k0 + 1]
        f = logits - logits[k0]
        w_norms = w.flatten(1).norm(dim=1) + 1e-12
        pert = f.abs() / w_norms
        pert[k0] = float("inf")
        l = int(torch.argmin(pert))
        step = torch.clamp(pert[l], min=1e-4) * w[l] / w_norms[l]
        r_tot = r_tot + step
    return r_tot.cpu().numpy().transpose(1, 2, 0).astype(np.float32)


@torch.no_grad()
def _predict_single(model, image: np.ndarray) -> int:
    model.eval()
    return int(model(image_batch_to_tensor(image)).argmax(dim=1).item())


def generate_uap(model, ds, cfg: UapConfig) -> UniversalPerturbation:
    """Accumulate per-sample DeepFool steps into one projected perturbation.

    One pass visits the generation set in a seeded random order; samples whose
    perturbed prediction already differs from their clean prediction are
    skipped. Generation halts as soon as the measured fooling rate reaches
    cfg.delta, or after cfg.max_passes passes.
    """
    model.eval()
    images = ds.images
    if len(images) == 0:
        raise ValueError("generation set is empty")
    clean_preds = predict(model, images)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x0AF]))
    v = np.zeros_like(images[0], dtype=np.float32)
    rate = 0.0
    passes = 0
    for _ in range(cfg.max_passes):
        for i in rng.permutation(len(images)):
            x_pert = apply_perturbation(images[i], v)
            if _predict_single(model, x_pert) != clean_preds[i]:
                continue
            r = deepfool_step(
                model,
                images[i] + v,  # raw sum; DeepFool itself is range-agnostic
                max_iters=cfg.deepfool_max_iters,
                overshoot=cfg.deepfool_overshoot,
            )
            v = project_linf(v + (1.0 + cfg.deepfool_overshoot) * r, cfg.xi)
        passes += 1
        rate = fooling_rate(model, images, v)
        if rate >= cfg.delta:
            break
    return UniversalPerturbation(
        v=v,
        xi=cfg.xi,
        generator="uap",
        achieved_fooling_rate=rate,
        seed=cfg.seed,
        passes_used=passes,
    )


class _PerturbationGenerator(nn.Module):
    """Tiny deconv net mapping a fixed latent to an image-shaped raw field."""

    def __init__(self, latent_dim: int, image_size: Tuple[int, int, int], width: int = 32):
        super().__init__()
        h, w, c = image_size
        if h % 4 or w % 4:
            raise ValueError("image sides must be divisible by 4")
        self.h0, self.w0 = h // 4, w // 4
        self.width = width
        self.fc = nn.Linear(latent_dim, width * self.h0 * self.w0)
        self.deconv = nn.Sequential(
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, c, 3, padding=1),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = self.fc(z).view(-1, self.width, self.h0, self.w0)
        return self.deconv(x)


def generate_gap(model, ds, cfg: GapConfig) -> UniversalPerturbation:
    """Train a generator whose squashed output maximally flips predictions.

    v = xi * tanh(G(z)) keeps the budget satisfied by construction; the
    training signal pushes the model's prediction on x + v away from its own
    clean prediction (no labels involved). The best perturbation seen during
    training (by fooling rate on the generation set) is returned.
    """
    model.eval()
    images = ds.images
    if len(images) == 0:
        raise ValueError("generation set is empty")
    clean_preds = torch.from_numpy(predict(model, images).astype(np.int64))
    x_all = image_batch_to_tensor(images)
    with scoped_torch_seed(cfg.seed):
        gen = _PerturbationGenerator(cfg.latent_dim, images.shape[1:])
        z = torch.randn(1, cfg.latent_dim)
    gen = gen.to(x_all.device)
    z = z.to(x_all.device)
    opt = torch.optim.Adam(gen.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x6A9]))

    def current_v() -> np.ndarray:
        gen.eval()
        with torch.no_grad():
            raw = gen(z)[0]
        v = (cfg.xi * torch.tanh(raw)).cpu().numpy().transpose(1, 2, 0)
        return project_linf(v, cfg.xi)  # guard against float32 tanh saturation

    best_v = current_v()
    best_rate = fooling_rate(model, images, best_v)
    for step in range(1, cfg.steps + 1):
        gen.train()
        idx = rng.choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)
        v = cfg.xi * torch.tanh(gen(z))
        x_adv = torch.clamp(x_all[idx] + v, 0.0, 1.0)
        loss = -F.cross_entropy(model(x_adv), clean_preds[idx].to(x_all.device))
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % cfg.eval_every == 0 or step == cfg.steps:
            cand = current_v()
            rate = fooling_rate(model, images, cand)
            if rate > best_rate:
                best_rate, best_v = rate, cand
    return UniversalPerturbation(
        v=best_v.astype(np.float32),
        xi=cfg.xi,
        generator="gap",
        achieved_fooling_rate=best_rate,
        seed=cfg.seed,
    )


def random_sign_perturbation(
    image_size: Tuple[int, int, int], xi: float, seed: int = 0
) -> np.ndarray:
    """Baseline: +/-xi at every pixel, the strongest unstructured perturbation."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x516]))
    return project_linf(xi * np.sign(rng.standard_normal(image_size)), xi)


def save_perturbation(pert: UniversalPerturbation, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    np.save(os.path.join(directory, "v.npy"), pert.v)
    meta = {
        "xi": pert.xi,
        "generator": pert.generator,
        "achieved_fooling_rate": pert.achieved_fooling_rate,
        "seed": pert.seed,
        "passes_used": pert.passes_used,
    }
    with open(os.path.join(directory, "metadata.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_perturbation(directory: str) -> UniversalPerturbation:
    v = np.load(os.path.join(directory, "v.npy"))
    with open(os.path.join(directory, "metadata.json")) as f:
        meta = json.load(f)
    return UniversalPerturbation(
        v=v,
        xi=meta["xi"],
        generator=meta["generator"],
        achieved_fooling_rate=meta["achieved_fooling_rate"],
        seed=meta["seed"],
        passes_used=meta.get("passes_used"),
    )
