"""Unit tests for parameter storage"""
import pytest
import torch
from torch import nn

from src.core.params import FreezeViolationError, ParameterStore


class TwoPart(nn.Module):
    def __init__(self):
        super().__init__()
        self.encoder = nn.Linear(2, 2)
        self.encoder_head = nn.Linear(2, 1)
        self.head = nn.Linear(2, 1)


def test_from_module_uses_dotted_names():
    """Names follow named_parameters and all start trainable"""
    store = ParameterStore.from_module(TwoPart())
    assert "encoder.weight" in store
    assert "head.bias" in store
    assert len(store) == 6
    assert store.trainable_names() == store.names()


def test_freeze_by_prefix_matches_whole_components():
    """Freezing 'encoder' leaves 'encoder_head' trainable"""
    module = TwoPart()
    store = ParameterStore.from_module(module)
    store.freeze(["encoder"])
    assert store.frozen_names() == ["encoder.weight", "encoder.bias"]
    assert store.is_trainable("encoder_head.weight")
    assert not module.encoder.weight.requires_grad


def test_freeze_all_then_unfreeze_one():
    """freeze() with no prefixes freezes everything"""
    store = ParameterStore.from_module(TwoPart())
    store.freeze()
    store.unfreeze(["head"])
    assert store.trainable_names() == ["head.weight", "head.bias"]


def test_count_by_prefix():
    """Scalar counts per component"""
    store = ParameterStore.from_module(TwoPart())
    assert store.count("encoder") == 6
    assert store.count() == 6 + 3 + 3


def test_freeze_violation_detected():
    """Changing a frozen parameter raises with its name"""
    module = TwoPart()
    store = ParameterStore.from_module(module)
    store.freeze(["encoder"])
    snapshot = store.snapshot()
    with torch.no_grad():
        module.head.weight.add_(1.0)
    store.assert_frozen_unchanged(snapshot)

    with torch.no_grad():
        module.encoder.bias.add_(1.0)
    with pytest.raises(FreezeViolationError) as exc:
        store.assert_frozen_unchanged(snapshot)
    assert exc.value.names == ["encoder.bias"]


def test_frozen_parameters_unchanged_by_optimizer_step():
    """Only trainable parameters enter the optimizer"""
    module = TwoPart()
    store = ParameterStore.from_module(module)
    store.freeze(["encoder"])
    snapshot = store.snapshot()
    optimizer = torch.optim.Adam(store.trainable_parameters(), lr=0.1)
    x = torch.randn(4, 2)
    loss = module.head(module.encoder(x)).sum() + module.encoder_head(x).sum()
    loss.backward()
    optimizer.step()
    store.assert_frozen_unchanged(snapshot)
    assert set(store.changed_since(snapshot)) <= {
        "head.weight",
        "head.bias",
        "encoder_head.weight",
        "encoder_head.bias",
    }
