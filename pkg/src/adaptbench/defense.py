"""Pre-adaptation hardening: distill the source model into a fresh student.

The source model is treated as untrusted. Before adaptation it is replaced by
a student that never inherits source parameters: the student learns from the
teacher's soft labels on target data, the soft labels are tracked by an EMA
bank so they can drift away from the teacher's worst predictions, and the
student is additionally trained on PGD examples whose radius ramps linearly
from zero so early distillation is undisturbed.
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import SyntheticShiftSpec, make_synthetic_domain_pair
from .models import (
    Classifier,
    TrainConfig,
    build_classifier,
    image_batch_to_tensor,
    logits_for,
    train_source,
)
from .seeding import derive_seed, scoped_torch_seed


@dataclass(frozen=True)
class DefenseConfig:
    kd_epochs: int = 50
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-3
    gamma: float = 0.6  # EMA weight on the existing bank entry
    clean_weight: float = 0.5
    adv_weight: float = 0.5
    pgd_eps_max: float = 4.0 / 255.0
    pgd_steps: int = 7
    pgd_step_size: Optional[float] = None  # None -> 2.5 * eps / steps
    radius_adjust: bool = True  # False fixes the radius at pgd_eps_max
    bank_update_interval: Optional[int] = None  # None -> once per epoch
    student_init: str = "auxiliary"  # "auxiliary" | "random"
    aux_samples_per_class: int = 60
    aux_epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.clean_weight < 0 or self.adv_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.student_init not in ("auxiliary", "random"):
            raise ValueError("student_init must be 'auxiliary' or 'random'")
        if self.bank_update_interval is not None and self.bank_update_interval < 1:
            raise ValueError("bank_update_interval must be >= 1 or None")


def kd_divergence(teacher_logits: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """KL(softmax(teacher) || softmax(student)), averaged over the batch.

    Zero exactly when the logits agree; asymmetric in its arguments.
    """
    if teacher_logits.shape != student_logits.shape:
        raise ValueError("teacher and student logits must have the same shape")
    t = teacher_logits if teacher_logits.dim() == 2 else teacher_logits[None]
    s = student_logits if student_logits.dim() == 2 else student_logits[None]
    t_log = F.log_softmax(t, dim=-1)
    s_log = F.log_softmax(s, dim=-1)
    return (t_log.exp() * (t_log - s_log)).sum(dim=-1).mean()


def ema_update(old: torch.Tensor, new: torch.Tensor, gamma: float) -> torch.Tensor:
    """gamma * old + (1 - gamma) * new."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    return gamma * old + (1.0 - gamma) * new


class SoftLabelBank:
    """Per-sample logit memory with exponential moving-average updates.

    Initialized with the teacher's logits on the target set; update() folds in
    fresh student logits row-wise. Labels are the argmax of the current rows.
    """

    def __init__(self, init_logits: torch.Tensor, gamma: float):
        if init_logits.dim() != 2:
            raise ValueError("bank expects (N, K) logits")
        if not 0.0 <= gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        self.logits = init_logits.detach().clone().float()
        self.gamma = gamma

    def __len__(self) -> int:
        return self.logits.shape[0]

    def update(self, sample_ids: torch.Tensor, new_logits: torch.Tensor) -> None:
        ids = torch.as_tensor(sample_ids, dtype=torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= len(self)):
            raise IndexError(f"sample id out of range for bank of size {len(self)}")
        if new_logits.shape != (ids.numel(), self.logits.shape[1]):
            raise ValueError("new_logits shape does not match the addressed rows")
        self.logits[ids] = ema_update(self.logits[ids], new_logits.detach().float(), self.gamma)

    def pseudo_labels(self) -> torch.Tensor:
        return self.logits.argmax(dim=1)


def radius_schedule(epoch: int, total_epochs: int, eps_max: float) -> float:
    """Linear ramp: eps_max * epoch / total_epochs, from 0 up to eps_max."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ValueError("epoch must lie in [0, total_epochs]")
    return eps_max * epoch / total_epochs


def pgd_adversarial(
    model,
    x: torch.Tensor,
    y: torch.Tensor,
    eps: float,
    steps: int,
    step_size: Optional[float] = None,
    random_start: bool = False,
) -> torch.Tensor:
    """Sign-gradient ascent on cross entropy inside the eps L-inf ball.

    The output stays within eps of x (exact projection each step) and within
    the valid pixel range. eps=0 or steps=0 return x unchanged. The model is
    evaluated in eval mode and restored afterwards; gradients only flow to
    the input copy.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if eps == 0.0 or steps <= 0:
        return x.detach().clone()
    if step_size is None:
        step_size = 2.5 * eps / steps
    was_training = model.training
    model.eval()
    x = x.detach()
    x_adv = x.clone()
    if random_start:
        x_adv = x_adv + torch.empty_like(x_adv).uniform_(-eps, eps)
        x_adv = torch.clamp(x_adv, 0.0, 1.0)
    for _ in range(steps):
        x_adv.requires_grad_(True)
        loss = F.cross_entropy(model(x_adv), y)
        grad = torch.autograd.grad(loss, x_adv)[0]
        x_adv = x_adv.detach() + step_size * grad.sign()
        x_adv = x + torch.clamp(x_adv - x, -eps, eps)
        x_adv = torch.clamp(x_adv, 0.0, 1.0)
    if was_training:
        model.train()
    return x_adv.detach()


def _init_student(teacher: Classifier, cfg: DefenseConfig) -> Classifier:
    """Student backbone that shares no parameters with the source model."""
    if cfg.student_init == "random":
        return build_classifier(
            teacher.class_count,
            teacher.input_shape,
            seed=derive_seed(cfg.seed, "student-init"),
            channels=teacher.channels,
            bottleneck_dim=teacher.bottleneck_dim,
        )
    # Auxiliary route: pretrain on a disjoint synthetic task (its own class
    # prototypes), then re-initialize the head for the real label space.
    aux_spec = SyntheticShiftSpec(
        class_count=teacher.class_count,
        samples_per_class=cfg.aux_samples_per_class,
        image_size=teacher.input_shape,
        shift_kind="color_jitter",
        shift_strength=0.0,
        seed=derive_seed(cfg.seed, "aux-task"),
    )
    aux_source, _ = make_synthetic_domain_pair(aux_spec)
    student = train_source(
        aux_source,
        TrainConfig(epochs=cfg.aux_epochs, seed=derive_seed(cfg.seed, "aux-train")),
    )
    with scoped_torch_seed(derive_seed(cfg.seed, "student-head")):
        student.head.reset_parameters()
    return student


def distill_defense(
    teacher: Classifier,
    target_images: np.ndarray,
    cfg: DefenseConfig,
    student_init_model: Optional[Classifier] = None,
    epoch_hook: Optional[Callable[[Classifier, int], dict]] = None,
) -> Tuple[Classifier, List[dict]]:
    """Distill an untrusted teacher into a hardened student on target images.

    Per batch the loss is
        clean_weight * KL(softmax(bank) || softmax(student(x)))
      + adv_weight   * KL(softmax(bank) || softmax(student(x_adv)))
    where x_adv comes from PGD against the current student, driven by the
    bank's argmax pseudo-labels, at the epoch's scheduled radius. The bank
    starts as the teacher's logits and is EMA-refreshed with student logits.

    Returns (student, per-epoch trace with loss and radius).
    """
    teacher.eval()
    if len(target_images) == 0:
        raise ValueError("target set is empty")
    x_all = image_batch_to_tensor(target_images)
    bank = SoftLabelBank(
        torch.from_numpy(logits_for(teacher, target_images)), cfg.gamma
    )
    student = student_init_model if student_init_model is not None else _init_student(teacher, cfg)
    opt = torch.optim.SGD(
        student.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD1]))
    steps_per_epoch = max(1, math.ceil(len(x_all) / cfg.batch_size))
    interval = cfg.bank_update_interval or steps_per_epoch
    trace: List[dict] = []
    global_step = 0
    all_ids = torch.arange(len(x_all))
    for epoch in range(cfg.kd_epochs):
        eps = (
            radius_schedule(epoch, cfg.kd_epochs, cfg.pgd_eps_max)
            if cfg.radius_adjust
            else cfg.pgd_eps_max
        )
        perm = rng.permutation(len(x_all))
        total, seen = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = torch.from_numpy(perm[start : start + cfg.batch_size].copy())
            if len(idx) < 2:
                continue  # BN needs at least 2 samples per batch
            xb = x_all[idx]
            bank_rows = bank.logits[idx]
            pseudo = bank_rows.argmax(dim=1)
            if cfg.adv_weight > 0 and eps > 0:
                x_adv = pgd_adversarial(
                    student, xb, pseudo, eps, cfg.pgd_steps, cfg.pgd_step_size
                )
            else:
                x_adv = xb
            student.train()
            loss = cfg.clean_weight * kd_divergence(bank_rows, student(xb))
            loss = loss + cfg.adv_weight * kd_divergence(bank_rows, student(x_adv))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
            global_step += 1
            if global_step % interval == 0:
                fresh = torch.from_numpy(logits_for(student, target_images))
                bank.update(all_ids, fresh)
        row = {"epoch": epoch, "loss": total / max(seen, 1), "eps": eps}
        if epoch_hook is not None:
            row.update(epoch_hook(student, epoch))
        trace.append(row)
    student.eval()
    return student, trace
