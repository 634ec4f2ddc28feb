"""Experiment orchestration: config schema, stage runner, manifest, report.

One experiment = one config file = one output directory. Stages write their
artifacts under <out>/<stage>/ and never touch another stage's directory;
the manifest records a content hash for every artifact so downstream stages
can state exactly which upstream bytes they consumed. Re-running a stage with
the same config rewrites the same bytes for every metric artifact.
"""

import copy
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import yaml

from . import evaluation
from .adaptation import AdaptConfig, shot_adapt
from .datasets import (
    DomainDataset,
    SyntheticShiftSpec,
    load_image_folder,
    make_synthetic_domain_pair,
    split_train_test,
)
from .defense import DefenseConfig, distill_defense
from .evaluation import ResultRecord, accuracy, attack_success_rate, attacked_accuracy
from .models import TrainConfig, load_classifier, save_classifier, train_source
from .poisoning import (
    PoisonSpec,
    make_badnets_patch,
    make_blend_trigger,
    poison_dataset,
)
from .seeding import derive_seed
from .universal import (
    GapConfig,
    UapConfig,
    fooling_rate,
    generate_gap,
    generate_uap,
    load_perturbation,
    save_perturbation,
)

UNIVERSAL_KINDS = ("uap", "gap")
BACKDOOR_KINDS = ("blended", "sig", "badnets")
ATTACK_KINDS = ("none",) + UNIVERSAL_KINDS + BACKDOOR_KINDS + ("pgd-image",)

STAGE_ORDER = ("poison", "train-source", "gen-attack", "defend", "adapt", "evaluate", "report")


class ConfigError(ValueError):
    """Configuration is malformed; maps to CLI exit code 2."""


class StageError(RuntimeError):
    """A stage cannot run (missing upstream artifacts, bad state); exit 1."""


# Config schema: block -> key -> (default, type). None defaults are allowed
# to stay None; everything else is coerced to the stated type.
_SCHEMA = {
    "task": {
        "kind": ("synthetic", str),  # synthetic | folder
        "class_count": (10, int),
        "samples_per_class": (100, int),
        "image_size": ([32, 32, 3], list),
        "shift_kind": ("color_jitter", str),
        "shift_strength": (0.4, float),
        "test_fraction": (0.3, float),
        "source_path": (None, str),
        "target_path": (None, str),
    },
    "source_train": {
        "epochs": (20, int),
        "batch_size": (128, int),
        "lr": (0.01, float),
        "momentum": (0.9, float),
        "weight_decay": (1e-3, float),
        "label_smoothing": (0.1, float),
    },
    "attack": {
        "kind": ("none", str),
        "xi": (10.0 / 255.0, float),
        "delta": (0.8, float),
        "max_passes": (6, int),
        "deepfool_overshoot": (0.02, float),
        "deepfool_max_iters": (25, int),
        "gap_steps": (300, int),
        "gap_lr": (0.01, float),
        "gap_latent_dim": (64, int),
        "poison_rate": (0.1, float),
        "target_class": (0, int),
        "alpha": (0.2, float),
        "sig_amplitude": (20.0 / 255.0, float),
        "sig_freq": (6, int),
        "patch_size": (4, int),
        "restrict_to_nontarget": (False, bool),
        "pgd_eps": (4.0 / 255.0, float),
        "pgd_steps": (7, int),
    },
    "defense": {
        "kind": ("none", str),  # none | distill
        "kd_epochs": (24, int),
        "batch_size": (128, int),
        "lr": (0.005, float),
        "gamma": (0.6, float),
        "clean_weight": (0.5, float),
        "adv_weight": (0.5, float),
        "pgd_eps_max": (4.0 / 255.0, float),
        "pgd_steps": (7, int),
        "radius_adjust": (True, bool),
        "student_init": ("auxiliary", str),
        "aux_epochs": (15, int),
        "aux_samples_per_class": (80, int),
    },
    "adapt": {
        "kind": ("shot", str),  # shot | none
        "epochs": (14, int),
        "batch_size": (64, int),
        "lr": (0.01, float),
        "freeze_head": (True, bool),
        "pseudo_label_weight": (0.3, float),
        "joint_adv": ("none", str),
        "joint_adv_weight": (0.2, float),
    },
}
_TOP_KEYS = {"task", "source_train", "attack", "defense", "adapt", "seed", "output_dir"}


@dataclass
class ExperimentConfig:
    task: dict
    source_train: dict
    attack: dict
    defense: dict
    adapt: dict
    seed: int = 0
    output_dir: str = "runs/experiment"

    def canonical_json(self) -> str:
        return json.dumps(
            {
                "task": self.task,
                "source_train": self.source_train,
                "attack": self.attack,
                "defense": self.defense,
                "adapt": self.adapt,
                "seed": self.seed,
            },
            sort_keys=True,
        )

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _coerce_block(name: str, raw: dict) -> dict:
    schema = _SCHEMA[name]
    block = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown key '{name}.{key}'")
        default, typ = schema[key]
        if value is None:
            block[key] = None
            continue
        try:
            if typ is bool:
                if not isinstance(value, bool):
                    raise TypeError("expected a boolean")
                block[key] = value
            elif typ is list:
                block[key] = [int(v) for v in value]
            else:
                block[key] = typ(value)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad value for '{name}.{key}': {err}") from err
    for key, (default, _) in schema.items():
        block.setdefault(key, copy.deepcopy(default))
    return block


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a raw mapping; unknown keys anywhere are hard errors."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown key '{key}'")
    blocks = {}
    for name in _SCHEMA:
        sub = raw.get(name, {})
        if sub is None:
            sub = {}
        if not isinstance(sub, dict):
            raise ConfigError(f"'{name}' must be a mapping")
        blocks[name] = _coerce_block(name, sub)
    cfg = ExperimentConfig(
        task=blocks["task"],
        source_train=blocks["source_train"],
        attack=blocks["attack"],
        defense=blocks["defense"],
        adapt=blocks["adapt"],
        seed=int(raw.get("seed", 0)),
        output_dir=str(raw.get("output_dir", "runs/experiment")),
    )
    _validate_semantics(cfg)
    return cfg


def _validate_semantics(cfg: ExperimentConfig) -> None:
    if cfg.task["kind"] not in ("synthetic", "folder"):
        raise ConfigError(f"task.kind must be synthetic or folder, got {cfg.task['kind']!r}")
    if cfg.task["kind"] == "folder" and not (
        cfg.task["source_path"] and cfg.task["target_path"]
    ):
        raise ConfigError("folder task needs task.source_path and task.target_path")
    if cfg.attack["kind"] not in ATTACK_KINDS:
        raise ConfigError(f"attack.kind must be one of {ATTACK_KINDS}")
    if cfg.defense["kind"] not in ("none", "distill"):
        raise ConfigError("defense.kind must be none or distill")
    if cfg.defense["student_init"] not in ("auxiliary", "random"):
        raise ConfigError("defense.student_init must be auxiliary or random")
    if cfg.adapt["kind"] not in ("shot", "none"):
        raise ConfigError("adapt.kind must be shot or none")
    if cfg.adapt["joint_adv"] not in ("none", "pgd"):
        raise ConfigError("adapt.joint_adv must be none or pgd")
    if not 0.0 < cfg.task["test_fraction"] < 1.0:
        raise ConfigError("task.test_fraction must lie strictly between 0 and 1")
    if len(cfg.task["image_size"]) != 3:
        raise ConfigError("task.image_size must be [H, W, C]")


def load_config(path: str, seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except yaml.YAMLError as err:
        raise ConfigError(f"could not parse {path}: {err}") from err
    cfg = parse_config(raw if raw is not None else {})
    if seed is not None:
        cfg.seed = int(seed)
    if out is not None:
        cfg.output_dir = out
    return cfg


# ---------------------------------------------------------------------------
# manifest


def _hash_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_tree(directory: str) -> Dict[str, str]:
    hashes = {}
    for root, _, files in os.walk(directory):
        for name in sorted(files):
            path = os.path.join(root, name)
            rel = os.path.relpath(path, directory)
            hashes[rel] = _hash_file(path)
    return hashes


class RunManifest:
    """Records config hash, library versions, and per-stage artifact hashes."""

    def __init__(self, out_dir: str, cfg: ExperimentConfig):
        self.path = os.path.join(out_dir, "manifest.json")
        if os.path.exists(self.path):
            with open(self.path) as f:
                self.data = json.load(f)
            if self.data.get("config_hash") != cfg.config_hash():
                raise StageError(
                    f"{out_dir} already holds a run with a different config; "
                    "use a fresh output directory"
                )
        else:
            import torch

            from . import __version__

            self.data = {
                "config_hash": cfg.config_hash(),
                "seed": cfg.seed,
                "versions": {
                    "package": __version__,
                    "numpy": np.__version__,
                    "torch": torch.__version__,
                },
                "stages": {},
            }

    def record_stage(
        self, name: str, stage_dir: str, wall_clock_s: float, inputs: Dict[str, str]
    ) -> None:
        artifacts = _hash_tree(stage_dir) if os.path.isdir(stage_dir) else {}
        self.data["stages"][name] = {
            "artifacts": {f"{name}/{rel}": h for rel, h in artifacts.items()},
            "inputs": inputs,
            "wall_clock_s": round(wall_clock_s, 3),
        }
        self.save()

    def stage_artifacts(self, name: str) -> Dict[str, str]:
        return self.data["stages"].get(name, {}).get("artifacts", {})

    def has_stage(self, name: str) -> bool:
        return name in self.data["stages"]

    def save(self) -> None:
        with open(self.path, "w") as f:
            json.dump(self.data, f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# dataset / spec construction helpers (deterministic from config)


def build_task(cfg: ExperimentConfig) -> Tuple[DomainDataset, DomainDataset, DomainDataset, DomainDataset]:
    """(source_train, source_test, target_train, target_test) for this config."""
    if cfg.task["kind"] == "synthetic":
        spec = SyntheticShiftSpec(
            class_count=cfg.task["class_count"],
            samples_per_class=cfg.task["samples_per_class"],
            image_size=tuple(cfg.task["image_size"]),
            shift_kind=cfg.task["shift_kind"],
            shift_strength=cfg.task["shift_strength"],
            seed=derive_seed(cfg.seed, "task"),
        )
        source, target = make_synthetic_domain_pair(spec)
    else:
        size = tuple(cfg.task["image_size"])
        source = load_image_folder(cfg.task["source_path"], image_size=size)
        target = load_image_folder(cfg.task["target_path"], image_size=size)
        if source.class_count != target.class_count:
            raise StageError("source and target folders disagree on class count")
    frac = cfg.task["test_fraction"]
    src_train, src_test = split_train_test(source, frac, derive_seed(cfg.seed, "split-source"))
    tgt_train, tgt_test = split_train_test(target, frac, derive_seed(cfg.seed, "split-target"))
    return src_train, src_test, tgt_train, tgt_test


def build_poison_spec(cfg: ExperimentConfig) -> PoisonSpec:
    kind = cfg.attack["kind"]
    if kind not in BACKDOOR_KINDS:
        raise StageError(f"attack.kind {kind!r} is not a backdoor attack")
    image_size = tuple(cfg.task["image_size"])
    a = cfg.attack
    if kind == "blended":
        trigger = make_blend_trigger(image_size, seed=derive_seed(cfg.seed, "trigger"))
    elif kind == "badnets":
        p = a["patch_size"]
        trigger = make_badnets_patch((p, p, image_size[2]))
    else:
        trigger = None
    return PoisonSpec(
        mode=kind,
        target_class=a["target_class"],
        poison_rate=a["poison_rate"],
        alpha=a["alpha"],
        sig_amplitude=a["sig_amplitude"],
        sig_freq=a["sig_freq"],
        trigger_image=trigger,
        restrict_to_nontarget=a["restrict_to_nontarget"],
        seed=derive_seed(cfg.seed, "poison"),
    )


def _applicable_stages(cfg: ExperimentConfig) -> List[str]:
    stages = []
    if cfg.attack["kind"] in BACKDOOR_KINDS:
        stages.append("poison")
    stages.append("train-source")
    if cfg.attack["kind"] in UNIVERSAL_KINDS:
        stages.append("gen-attack")
    if cfg.defense["kind"] != "none":
        stages.append("defend")
    stages += ["adapt", "evaluate", "report"]
    return stages


# ---------------------------------------------------------------------------
# stage implementations


def _write_jsonl(rows: List[dict], path: str) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _stage_poison(cfg: ExperimentConfig, out: str) -> None:
    src_train, _, _, _ = build_task(cfg)
    spec = build_poison_spec(cfg)
    poisoned = poison_dataset(src_train, spec)
    if spec.trigger_image is not None:
        np.save(os.path.join(out, "trigger.npy"), spec.trigger_image)
    manifest = {
        "mode": spec.mode,
        "target_class": spec.target_class,
        "poison_rate": spec.poison_rate,
        "alpha": spec.alpha,
        "sig_amplitude": spec.sig_amplitude,
        "sig_freq": spec.sig_freq,
        "restrict_to_nontarget": spec.restrict_to_nontarget,
        "seed": spec.seed,
        "poisoned_indices": poisoned.poisoned_indices.tolist(),
    }
    with open(os.path.join(out, "poison_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _stage_train_source(cfg: ExperimentConfig, out: str) -> None:
    src_train, _, _, _ = build_task(cfg)
    if cfg.attack["kind"] in BACKDOOR_KINDS:
        poison_dir = os.path.join(cfg.output_dir, "poison")
        if not os.path.isdir(poison_dir):
            raise StageError("train-source needs the poison stage first for backdoor attacks")
        train_ds = poison_dataset(src_train, build_poison_spec(cfg))
    else:
        train_ds = src_train
    t = cfg.source_train
    tcfg = TrainConfig(
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        lr=t["lr"],
        momentum=t["momentum"],
        weight_decay=t["weight_decay"],
        label_smoothing=t["label_smoothing"],
        seed=derive_seed(cfg.seed, "source-train"),
    )
    model = train_source(train_ds, tcfg)
    save_classifier(
        model,
        os.path.join(out, "checkpoint"),
        extra_meta={"config_hash": cfg.config_hash(), "seed": cfg.seed, "role": "source"},
    )
    rows = [
        {"epoch": i, "loss": loss} for i, loss in enumerate(model.training_loss_history)
    ]
    _write_jsonl(rows, os.path.join(out, "train_log.jsonl"))


def _stage_gen_attack(cfg: ExperimentConfig, out: str) -> None:
    kind = cfg.attack["kind"]
    if kind not in UNIVERSAL_KINDS:
        raise StageError(f"gen-attack only applies to universal attacks, not {kind!r}")
    ckpt = os.path.join(cfg.output_dir, "train-source", "checkpoint")
    if not os.path.isdir(ckpt):
        raise StageError("gen-attack needs the train-source stage first")
    model = load_classifier(ckpt)
    src_train, _, _, _ = build_task(cfg)
    a = cfg.attack
    if kind == "uap":
        pert = generate_uap(
            model,
            src_train,
            UapConfig(
                xi=a["xi"],
                delta=a["delta"],
                max_passes=a["max_passes"],
                deepfool_overshoot=a["deepfool_overshoot"],
                deepfool_max_iters=a["deepfool_max_iters"],
                seed=derive_seed(cfg.seed, "uap"),
            ),
        )
    else:
        pert = generate_gap(
            model,
            src_train,
            GapConfig(
                xi=a["xi"],
                steps=a["gap_steps"],
                lr=a["gap_lr"],
                latent_dim=a["gap_latent_dim"],
                seed=derive_seed(cfg.seed, "gap"),
            ),
        )
    save_perturbation(pert, os.path.join(out, "perturbation"))


def _stage_defend(cfg: ExperimentConfig, out: str) -> None:
    if cfg.defense["kind"] == "none":
        raise StageError("defense.kind is none; nothing to defend")
    ckpt = os.path.join(cfg.output_dir, "train-source", "checkpoint")
    if not os.path.isdir(ckpt):
        raise StageError("defend needs the train-source stage first")
    teacher = load_classifier(ckpt)
    _, _, tgt_train, _ = build_task(cfg)
    d = cfg.defense
    dcfg = DefenseConfig(
        kd_epochs=d["kd_epochs"],
        batch_size=d["batch_size"],
        lr=d["lr"],
        gamma=d["gamma"],
        clean_weight=d["clean_weight"],
        adv_weight=d["adv_weight"],
        pgd_eps_max=d["pgd_eps_max"],
        pgd_steps=d["pgd_steps"],
        radius_adjust=d["radius_adjust"],
        student_init=d["student_init"],
        aux_epochs=d["aux_epochs"],
        aux_samples_per_class=d["aux_samples_per_class"],
        seed=derive_seed(cfg.seed, "defense"),
    )
    student, trace = distill_defense(teacher, tgt_train.images, dcfg)
    save_classifier(
        student,
        os.path.join(out, "checkpoint"),
        extra_meta={"config_hash": cfg.config_hash(), "seed": cfg.seed, "role": "student"},
    )
    _write_jsonl(trace, os.path.join(out, "defense_log.jsonl"))


def _stage_adapt(cfg: ExperimentConfig, out: str) -> None:
    if cfg.defense["kind"] != "none":
        base_ckpt = os.path.join(cfg.output_dir, "defend", "checkpoint")
        missing = "defend"
    else:
        base_ckpt = os.path.join(cfg.output_dir, "train-source", "checkpoint")
        missing = "train-source"
    if not os.path.isdir(base_ckpt):
        raise StageError(f"adapt needs the {missing} stage first")
    model = load_classifier(base_ckpt)
    _, _, tgt_train, _ = build_task(cfg)
    if cfg.adapt["kind"] == "none":
        adapted, trace = model, []
    else:
        a = cfg.adapt
        acfg = AdaptConfig(
            epochs=a["epochs"],
            batch_size=a["batch_size"],
            lr=a["lr"],
            freeze_head=a["freeze_head"],
            pseudo_label_weight=a["pseudo_label_weight"],
            joint_adv=a["joint_adv"],
            joint_adv_weight=a["joint_adv_weight"],
            seed=derive_seed(cfg.seed, "adapt"),
        )
        adapted, trace = shot_adapt(model, tgt_train.images, acfg)
    save_classifier(
        adapted,
        os.path.join(out, "checkpoint"),
        extra_meta={"config_hash": cfg.config_hash(), "seed": cfg.seed, "role": "adapted"},
    )
    _write_jsonl(trace, os.path.join(out, "adapt_log.jsonl"))


def _attack_applicator_and_extras(cfg: ExperimentConfig, source_model):
    """(applicator, extras builder) for the configured attack, or (None, ...)."""
    kind = cfg.attack["kind"]
    if kind == "none":
        return None, None
    if kind in UNIVERSAL_KINDS:
        pert_dir = os.path.join(cfg.output_dir, "gen-attack", "perturbation")
        if not os.path.isdir(pert_dir):
            raise StageError("evaluate needs the gen-attack stage first")
        pert = load_perturbation(pert_dir)
        return evaluation.perturbation_applicator(pert.v), {"perturbation": pert}
    if kind in BACKDOOR_KINDS:
        spec = build_poison_spec(cfg)
        return evaluation.trigger_applicator(spec), {"poison_spec": spec}
    # pgd-image: per-image attack crafted against the source model
    return None, {"pgd": (cfg.attack["pgd_eps"], cfg.attack["pgd_steps"], source_model)}


def _stage_evaluate(cfg: ExperimentConfig, out: str) -> None:
    src_ckpt = os.path.join(cfg.output_dir, "train-source", "checkpoint")
    adapt_ckpt = os.path.join(cfg.output_dir, "adapt", "checkpoint")
    if not os.path.isdir(src_ckpt) or not os.path.isdir(adapt_ckpt):
        raise StageError("evaluate needs train-source and adapt stages first")
    source_model = load_classifier(src_ckpt)
    final_model = load_classifier(adapt_ckpt)
    _, _, _, tgt_test = build_task(cfg)
    kind = cfg.attack["kind"]
    defense_id = cfg.defense["kind"]
    applicator, extras = _attack_applicator_and_extras(cfg, source_model)

    records: List[ResultRecord] = []
    for model, adapt_id in ((source_model, "source-only"), (final_model, cfg.adapt["kind"])):
        clean = accuracy(model, tgt_test)
        records.append(
            ResultRecord(
                attack_id="none",
                defense_id=defense_id if adapt_id != "source-only" else "none",
                adapt_id=adapt_id,
                seed=cfg.seed,
                clean_acc=clean,
            )
        )
        if kind == "none":
            continue
        rec = ResultRecord(
            attack_id=kind,
            defense_id=defense_id if adapt_id != "source-only" else "none",
            adapt_id=adapt_id,
            seed=cfg.seed,
            clean_acc=clean,
        )
        if kind in UNIVERSAL_KINDS:
            pert = extras["perturbation"]
            rec.attack_acc = attacked_accuracy(model, tgt_test, applicator)
            rec.fooling = fooling_rate(model, tgt_test.images, pert.v)
            rec.extra["xi"] = pert.xi
            rec.extra["gen_fooling_rate"] = pert.achieved_fooling_rate
        elif kind in BACKDOOR_KINDS:
            spec = extras["poison_spec"]
            rec.attack_acc = attacked_accuracy(model, tgt_test, applicator)
            rec.asr = attack_success_rate(model, tgt_test, applicator, spec.target_class)
            rec.extra["target_class"] = spec.target_class
        else:  # pgd-image
            eps, steps, surrogate = extras["pgd"]
            res = evaluation.transfer_attack_eval(surrogate, model, tgt_test, eps, steps)
            rec.attack_acc = res["attacked_acc"]
            rec.extra["pgd_eps"] = eps
            rec.extra["pgd_steps"] = steps
        records.append(rec)
    evaluation.write_results(records, os.path.join(out, "results.jsonl"))


def _stage_report(cfg: ExperimentConfig, out: str) -> None:
    results_path = os.path.join(cfg.output_dir, "evaluate", "results.jsonl")
    if not os.path.exists(results_path):
        raise StageError("report needs the evaluate stage first")
    records = evaluation.read_results(results_path)

    import csv

    fields = ["attack_id", "defense_id", "adapt_id", "seed", "clean_acc", "attack_acc", "asr", "fooling"]
    with open(os.path.join(out, "summary.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(fields)
        for rec in records:
            writer.writerow([getattr(rec, k) for k in fields])

    lines = ["# Run summary", "", f"Seed {records[0].seed if records else cfg.seed}", ""]
    lines.append("| attack | defense | adapt | clean acc | attacked acc | ASR | fooling |")
    lines.append("|---|---|---|---|---|---|---|")
    for rec in records:
        fmt = lambda v: "-" if v is None else f"{v:.3f}"
        lines.append(
            f"| {rec.attack_id} | {rec.defense_id} | {rec.adapt_id} "
            f"| {rec.clean_acc:.3f} | {fmt(rec.attack_acc)} | {fmt(rec.asr)} | {fmt(rec.fooling)} |"
        )
    with open(os.path.join(out, "report.md"), "w") as f:
        f.write("\n".join(lines) + "\n")

    _plot_curves(cfg, out)


def _plot_curves(cfg: ExperimentConfig, out: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sources = [
        ("train-source", "train_log.jsonl"),
        ("defend", "defense_log.jsonl"),
        ("adapt", "adapt_log.jsonl"),
    ]
    panels = []
    for stage, fname in sources:
        path = os.path.join(cfg.output_dir, stage, fname)
        if os.path.exists(path) and os.path.getsize(path):
            panels.append((stage, evaluation.curve_trace(path)))
    if not panels:
        return
    fig, axes = plt.subplots(1, len(panels), figsize=(4.2 * len(panels), 3.2))
    if len(panels) == 1:
        axes = [axes]
    for ax, (stage, trace) in zip(axes, panels):
        for key, series in trace.items():
            if key == "epoch":
                continue
            ax.plot(trace["epoch"], series, label=key)
        ax.set_title(stage)
        ax.set_xlabel("epoch")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(os.path.join(out, "curves.png"), dpi=110)
    plt.close(fig)


_STAGE_FNS = {
    "poison": _stage_poison,
    "train-source": _stage_train_source,
    "gen-attack": _stage_gen_attack,
    "defend": _stage_defend,
    "adapt": _stage_adapt,
    "evaluate": _stage_evaluate,
    "report": _stage_report,
}


def _upstream_inputs(cfg: ExperimentConfig, manifest: RunManifest, stage: str) -> Dict[str, str]:
    """Content hashes of every upstream artifact this stage may consume."""
    inputs: Dict[str, str] = {}
    for earlier in STAGE_ORDER[: STAGE_ORDER.index(stage)]:
        inputs.update(manifest.stage_artifacts(earlier))
    return inputs


def run_stage(cfg: ExperimentConfig, stage: str) -> None:
    """Run one named stage, writing artifacts under output_dir/<stage>/."""
    if stage not in _STAGE_FNS:
        raise ConfigError(f"unknown stage {stage!r}; choose from {STAGE_ORDER}")
    if stage not in _applicable_stages(cfg):
        raise StageError(f"stage {stage!r} does not apply to this config")
    os.makedirs(cfg.output_dir, exist_ok=True)
    manifest = RunManifest(cfg.output_dir, cfg)
    stage_dir = os.path.join(cfg.output_dir, stage)
    os.makedirs(stage_dir, exist_ok=True)
    started = time.time()
    _STAGE_FNS[stage](cfg, stage_dir)
    manifest.record_stage(
        stage, stage_dir, time.time() - started, _upstream_inputs(cfg, manifest, stage)
    )


def run_all(cfg: ExperimentConfig, until: Optional[str] = None) -> List[str]:
    """Run every applicable stage in order, optionally stopping at `until`."""
    stages = _applicable_stages(cfg)
    if until is not None:
        if until not in STAGE_ORDER:
            raise ConfigError(f"unknown stage {until!r}; choose from {STAGE_ORDER}")
        if until not in stages:
            raise StageError(f"stage {until!r} does not apply to this config")
        stages = stages[: stages.index(until) + 1]
    for stage in stages:
        run_stage(cfg, stage)
    return stages
