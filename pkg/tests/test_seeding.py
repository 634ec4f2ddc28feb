"""Seed derivation and scoped torch RNG isolation."""

import torch

from adaptbench.seeding import derive_seed, scoped_torch_seed


def test_derive_seed_deterministic_and_label_sensitive():
    assert derive_seed(3, "uap") == derive_seed(3, "uap")
    assert derive_seed(3, "uap") != derive_seed(3, "gap")
    assert derive_seed(3, "uap") != derive_seed(4, "uap")
    s = derive_seed(0, "anything")
    assert isinstance(s, int) and 0 <= s < 2**32


def test_scoped_torch_seed_restores_global_stream():
    torch.manual_seed(42)
    expected = torch.rand(4)
    torch.manual_seed(42)
    with scoped_torch_seed(7):
        inner_a = torch.rand(4)
    after = torch.rand(4)
    assert torch.equal(after, expected)
    with scoped_torch_seed(7):
        inner_b = torch.rand(4)
    assert torch.equal(inner_a, inner_b)
