"""Desk-scale benchmark: universal and backdoor attacks carried by a source
model into source-free adaptation, and a distillation defense that strips
them before adapting."""

from .adaptation import AdaptConfig, centroid_pseudo_labels, information_maximization_loss, shot_adapt
from .datasets import (
    DomainDataset,
    SyntheticShiftSpec,
    load_image_folder,
    make_synthetic_domain_pair,
    split_train_test,
)
from .defense import (
    DefenseConfig,
    SoftLabelBank,
    distill_defense,
    ema_update,
    kd_divergence,
    pgd_adversarial,
    radius_schedule,
)
from .evaluation import (
    ResultRecord,
    accuracy,
    attack_success_rate,
    attacked_accuracy,
    curve_trace,
    identity_applicator,
    perturbation_applicator,
    pgd_applicator,
    read_results,
    transfer_attack_eval,
    trigger_applicator,
    write_results,
)
from .models import (
    Classifier,
    TrainConfig,
    TrainingDivergedError,
    build_classifier,
    load_classifier,
    predict,
    save_classifier,
    smoothed_cross_entropy,
    train_source,
)
from .poisoning import (
    PoisonSpec,
    PoisonedDataset,
    apply_trigger,
    badnets_poison,
    blend_poison,
    build_sig_trigger,
    make_badnets_patch,
    make_blend_trigger,
    poison_dataset,
    sig_poison,
)
from .seeding import derive_seed
from .universal import (
    GapConfig,
    UapConfig,
    UniversalPerturbation,
    deepfool_step,
    fooling_rate,
    generate_gap,
    generate_uap,
    load_perturbation,
    project_linf,
    random_sign_perturbation,
    save_perturbation,
)

__version__ = "0.1.0"
