"""Metrics, attack applicators, result records, and training-curve parsing.

An applicator is a pure function mapping an image batch to an attacked image
batch; accuracy-style metrics compose a model, a labeled dataset, and an
applicator. Attack success rate is measured only over samples whose true
label differs from the attack target, so a perfectly clean model scores 0.
"""

import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .models import Classifier, image_batch_to_tensor, predict
from .poisoning import PoisonSpec, apply_trigger
from .universal import apply_perturbation

Applicator = Callable[[np.ndarray], np.ndarray]


def identity_applicator(images: np.ndarray) -> np.ndarray:
    return images


def perturbation_applicator(v: np.ndarray) -> Applicator:
    """Additive universal perturbation, clamped to the pixel range."""
    return lambda images: apply_perturbation(images, v)


def trigger_applicator(spec: PoisonSpec) -> Applicator:
    """Test-time trigger stamping (no relabeling)."""
    return lambda images: apply_trigger(images, spec)


def pgd_applicator(surrogate: Classifier, labels: np.ndarray, eps: float, steps: int) -> Applicator:
    """Per-image PGD crafted against a surrogate model with true labels.

    Import is local to avoid a module cycle: defense owns the PGD loop.
    """
    from .defense import pgd_adversarial

    labels_t = torch.from_numpy(np.asarray(labels, dtype=np.int64))

    def apply(images: np.ndarray) -> np.ndarray:
        x = image_batch_to_tensor(images)
        x_adv = pgd_adversarial(surrogate, x, labels_t.to(x.device), eps, steps)
        return x_adv.cpu().numpy().transpose(0, 2, 3, 1)

    return apply


def attacked_accuracy(model: Classifier, ds, applicator: Applicator) -> float:
    """Accuracy against ground truth after the applicator hits the images."""
    preds = predict(model, applicator(ds.images))
    return float(np.mean(preds == ds.labels))


def accuracy(model: Classifier, ds) -> float:
    """Clean accuracy; identical code path to attacked_accuracy."""
    return attacked_accuracy(model, ds, identity_applicator)


def attack_success_rate(
    model: Classifier, ds, applicator: Applicator, target_class: int
) -> float:
    """Fraction of non-target-class samples steered into the target class."""
    victim = ds.labels != target_class
    if not victim.any():
        raise ValueError("attack success rate is undefined on target-class-only data")
    preds = predict(model, applicator(ds.images[victim]))
    return float(np.mean(preds == target_class))


def transfer_attack_eval(
    source_model: Classifier,
    target_model: Classifier,
    ds,
    eps: float = 4.0 / 255.0,
    steps: int = 7,
) -> Dict[str, float]:
    """Image-specific transfer attack: craft on the source, score the target.

    PGD uses ground-truth labels against the frozen source model; the
    resulting examples are evaluated on the (possibly adapted) target model.
    """
    applicator = pgd_applicator(source_model, ds.labels, eps, steps)
    return {
        "clean_acc": accuracy(target_model, ds),
        "attacked_acc": attacked_accuracy(target_model, ds, applicator),
    }


@dataclass
class ResultRecord:
    """One evaluation outcome, serializable as a single JSON line."""

    attack_id: str
    defense_id: str
    adapt_id: str
    seed: int
    clean_acc: float
    attack_acc: Optional[float] = None
    asr: Optional[float] = None
    fooling: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_json_line(self) -> str:
        row = {
            "attack_id": self.attack_id,
            "defense_id": self.defense_id,
            "adapt_id": self.adapt_id,
            "seed": self.seed,
            "clean_acc": self.clean_acc,
        }
        for key in ("attack_acc", "asr", "fooling"):
            value = getattr(self, key)
            if value is not None:
                row[key] = value
        row.update(self.extra)
        return json.dumps(row, sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "ResultRecord":
        row = json.loads(line)
        known = {"attack_id", "defense_id", "adapt_id", "seed", "clean_acc",
                 "attack_acc", "asr", "fooling"}
        extra = {k: v for k, v in row.items() if k not in known}
        return cls(
            attack_id=row["attack_id"],
            defense_id=row["defense_id"],
            adapt_id=row["adapt_id"],
            seed=row["seed"],
            clean_acc=row["clean_acc"],
            attack_acc=row.get("attack_acc"),
            asr=row.get("asr"),
            fooling=row.get("fooling"),
            extra=extra,
        )


def write_results(records: List[ResultRecord], path: str) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(rec.to_json_line() + "\n")


def read_results(path: str) -> List[ResultRecord]:
    records = []
    with open(path) as f:
        for line in f:
            if line.strip():
                records.append(ResultRecord.from_json_line(line))
    return records


def curve_trace(path: str) -> Dict[str, list]:
    """Parse a per-epoch JSONL run log into aligned metric series.

    Every row must carry an integer "epoch" and all rows must share the same
    keys; epochs must run contiguously from 0. Malformed lines and missing
    epochs are reported by position.
    """
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as err:
                raise ValueError(f"{path}: malformed JSON on line {lineno}: {err}") from err
            if "epoch" not in row:
                raise ValueError(f"{path}: line {lineno} has no 'epoch' field")
            rows.append((lineno, row))
    if not rows:
        raise ValueError(f"{path}: empty run log")
    keys = set(rows[0][1])
    for lineno, row in rows:
        if set(row) != keys:
            raise ValueError(
                f"{path}: line {lineno} keys {sorted(row)} differ from {sorted(keys)}"
            )
    rows.sort(key=lambda item: item[1]["epoch"])
    epochs = [row["epoch"] for _, row in rows]
    for want, got in enumerate(epochs):
        if got != want:
            raise ValueError(f"{path}: missing record for epoch {want}")
    return {key: [row[key] for _, row in rows] for key in sorted(keys)}
