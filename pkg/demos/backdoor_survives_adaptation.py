"""Demo: a backdoor planted in a source model survives source-free adaptation.

Story in four acts, printed as it goes:

  1. Train two source models on the same synthetic task, one clean and one
     with 10% of its training set blended with a fixed trigger and relabeled
     to class 0.
  2. Both models look equally good on clean data. The poisoned one steers
     almost every triggered image into class 0.
  3. Adapt both to a shifted target domain with SHOT, which never sees the
     source data, and show the backdoor is still there afterwards.
  4. Run the distillation defense before adapting and show the trigger
     loses its grip while clean accuracy stays close.

Runs on CPU in a few minutes. Smaller than the acceptance setup, so the
numbers wiggle, but the ordering is stable.
"""

import time

from adaptbench.adaptation import AdaptConfig, shot_adapt
from adaptbench.datasets import SyntheticShiftSpec, make_synthetic_domain_pair, split_train_test
from adaptbench.defense import DefenseConfig, distill_defense
from adaptbench.evaluation import accuracy, attack_success_rate, attacked_accuracy, trigger_applicator
from adaptbench.models import TrainConfig, train_source
from adaptbench.poisoning import PoisonSpec, make_blend_trigger, poison_dataset

SEED = 0
TARGET_CLASS = 0


def main() -> None:
    t0 = time.perf_counter()
    spec = SyntheticShiftSpec(
        class_count=8,
        samples_per_class=80,
        image_size=(32, 32, 3),
        shift_kind="color_jitter",
        shift_strength=0.4,
        seed=SEED,
    )
    source, target = make_synthetic_domain_pair(spec)
    src_train, src_test = split_train_test(source, 0.3, seed=SEED + 100)
    tgt_train, tgt_test = split_train_test(target, 0.3, seed=SEED + 200)

    print("act 1: source training (clean control vs poisoned)")
    pspec = PoisonSpec(
        mode="blended",
        target_class=TARGET_CLASS,
        poison_rate=0.1,
        alpha=0.2,
        trigger_image=make_blend_trigger(spec.image_size, seed=SEED + 50),
        seed=SEED + 60,
    )
    tcfg = TrainConfig(epochs=16, seed=SEED)
    clean_src = train_source(src_train, tcfg)
    bd_src = train_source(poison_dataset(src_train, pspec), tcfg)
    tapp = trigger_applicator(pspec)

    print("\nact 2: on the source test split the two models look interchangeable")
    print(f"  clean model accuracy    {accuracy(clean_src, src_test):.3f}")
    print(f"  poisoned model accuracy {accuracy(bd_src, src_test):.3f}")
    asr_src = attack_success_rate(bd_src, src_test, tapp, TARGET_CLASS)
    print(f"  ...until the trigger appears: poisoned model ASR {asr_src:.3f}")

    print("\nact 3: SHOT adaptation to the shifted domain, source data long gone")
    acfg = AdaptConfig(epochs=10, seed=SEED)
    shot_bd, _ = shot_adapt(bd_src, tgt_train.images, acfg)
    print(f"  adapted clean accuracy     {accuracy(shot_bd, tgt_test):.3f}")
    print(f"  adapted accuracy w/trigger {attacked_accuracy(shot_bd, tgt_test, tapp):.3f}")
    asr_shot = attack_success_rate(shot_bd, tgt_test, tapp, TARGET_CLASS)
    print(f"  adapted ASR                {asr_shot:.3f}   <- the backdoor rode along")

    print("\nact 4: distill into a fresh student first, then adapt")
    dcfg = DefenseConfig(kd_epochs=16, lr=0.005, aux_epochs=10, aux_samples_per_class=60, seed=SEED)
    student, _ = distill_defense(bd_src, tgt_train.images, dcfg)
    guarded, _ = shot_adapt(student, tgt_train.images, acfg)
    print(f"  defended clean accuracy     {accuracy(guarded, tgt_test):.3f}")
    print(f"  defended accuracy w/trigger {attacked_accuracy(guarded, tgt_test, tapp):.3f}")
    asr_def = attack_success_rate(guarded, tgt_test, tapp, TARGET_CLASS)
    print(f"  defended ASR                {asr_def:.3f}")

    print(f"\nsummary: ASR source {asr_src:.3f} -> plain SHOT {asr_shot:.3f} -> defended {asr_def:.3f}")
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
