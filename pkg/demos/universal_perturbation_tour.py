"""Demo: one image-agnostic perturbation fools a model on most inputs.

Builds a source model, accumulates a universal perturbation over its own
training data, and then checks three things worth seeing once:

  - the perturbation never exceeds its L-inf budget of 10/255, anywhere;
  - the same single array transfers: it still flips a healthy fraction of
    predictions after SHOT adapts the model to a shifted domain;
  - distilling into a fresh student with scheduled-radius adversarial
    training shrinks that fraction without giving up clean accuracy.

Also generates the generator-based variant for comparison. Uses the same
scale as the acceptance suite so the transfer effect is visible; expect
five to ten minutes on CPU.
"""

import time

import numpy as np

from adaptbench.adaptation import AdaptConfig, shot_adapt
from adaptbench.datasets import SyntheticShiftSpec, make_synthetic_domain_pair, split_train_test
from adaptbench.defense import DefenseConfig, distill_defense
from adaptbench.evaluation import accuracy, attacked_accuracy, perturbation_applicator
from adaptbench.models import TrainConfig, train_source
from adaptbench.universal import GapConfig, UapConfig, fooling_rate, generate_gap, generate_uap

SEED = 0
XI = 10.0 / 255.0


def main() -> None:
    t0 = time.perf_counter()
    spec = SyntheticShiftSpec(
        class_count=10,
        samples_per_class=100,
        image_size=(32, 32, 3),
        shift_kind="color_jitter",
        shift_strength=0.4,
        seed=SEED,
    )
    source, target = make_synthetic_domain_pair(spec)
    src_train, src_test = split_train_test(source, 0.3, seed=SEED + 100)
    tgt_train, tgt_test = split_train_test(target, 0.3, seed=SEED + 200)

    print("training the source model")
    model = train_source(src_train, TrainConfig(epochs=20, seed=SEED))
    print(f"  source test accuracy {accuracy(model, src_test):.3f}")

    print("\naccumulating the universal perturbation (DeepFool steps, projected each time)")
    uap = generate_uap(model, src_train, UapConfig(xi=XI, delta=0.8, max_passes=6, deepfool_max_iters=25, seed=SEED))
    print(f"  linf norm {np.abs(uap.v).max():.6f} (budget {XI:.6f})")
    print(f"  fooling rate on its own generation set {uap.achieved_fooling_rate:.3f}")
    print(f"  passes used {uap.passes_used}")
    print(f"  held-out source test fooling rate {fooling_rate(model, src_test.images, uap.v):.3f}")

    print("\ngenerator-based variant, same budget by construction")
    gap = generate_gap(model, src_train, GapConfig(xi=XI, steps=150, seed=SEED))
    print(f"  linf norm {np.abs(gap.v).max():.6f}")
    print(f"  fooling rate {gap.achieved_fooling_rate:.3f}")

    print("\ntransfer: adapt the model with SHOT, keep the same perturbation")
    acfg = AdaptConfig(epochs=14, seed=SEED)
    adapted, _ = shot_adapt(model, tgt_train.images, acfg)
    uapp = perturbation_applicator(uap.v)
    print(f"  adapted clean accuracy      {accuracy(adapted, tgt_test):.3f}")
    print(f"  adapted accuracy w/attack   {attacked_accuracy(adapted, tgt_test, uapp):.3f}")
    print(f"  adapted fooling rate        {fooling_rate(adapted, tgt_test.images, uap.v):.3f}")

    print("\ndefense: distill first, adapt the student, re-apply the perturbation")
    dcfg = DefenseConfig(kd_epochs=24, lr=0.005, aux_epochs=15, aux_samples_per_class=80, seed=SEED)
    student, _ = distill_defense(model, tgt_train.images, dcfg)
    guarded, _ = shot_adapt(student, tgt_train.images, acfg)
    print(f"  defended clean accuracy     {accuracy(guarded, tgt_test):.3f}")
    print(f"  defended accuracy w/attack  {attacked_accuracy(guarded, tgt_test, uapp):.3f}")
    print(f"  defended fooling rate       {fooling_rate(guarded, tgt_test.images, uap.v):.3f}")

    print(f"\ntotal {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
