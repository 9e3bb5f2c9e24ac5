"""Named parameter storage with trainable flags and freeze checks"""
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Tuple

import torch
from torch import nn

from src.common.errors import RestoredDepthError
from src.common.logging import get_logger

logger = get_logger(__name__)


class FreezeViolationError(RestoredDepthError):
    """Raised when a frozen parameter changed during a training step"""

    def __init__(self, names: List[str]):
        preview = ", ".join(names[:5])
        more = f" (+{len(names) - 5} more)" if len(names) > 5 else ""
        super().__init__(f"frozen parameters changed: {preview}{more}")
        self.names = names


def _matches(name: str, prefixes: Iterable[str]) -> bool:
    for prefix in prefixes:
        stem = prefix.rstrip(".")
        if name == stem or name.startswith(stem + "."):
            return True
    return False


class ParameterStore:
    """
    Map of parameter name -> tensor with a trainable flag per name

    The store shares storage with the tensors it was built from, so
    flags set here drive ``requires_grad`` on the live parameters.
    """

    def __init__(
        self,
        params: Mapping[str, torch.Tensor],
        trainable: Optional[Mapping[str, bool]] = None,
    ):
        self._params: Dict[str, torch.Tensor] = dict(params)
        self._trainable: Dict[str, bool] = {}
        for name, tensor in self._params.items():
            flag = tensor.requires_grad if trainable is None else trainable.get(name, True)
            self._set_flag(name, flag)

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParameterStore":
        """Build a store over all parameters of a module, keyed by dotted names"""
        return cls(dict(module.named_parameters()))

    def _set_flag(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag
        tensor = self._params[name]
        if tensor.is_leaf and tensor.is_floating_point():
            tensor.requires_grad_(flag)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[Tuple[str, torch.Tensor]]:
        return iter(self._params.items())

    def names(self) -> List[str]:
        return list(self._params)

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> List[str]:
        return [name for name, flag in self._trainable.items() if flag]

    def frozen_names(self) -> List[str]:
        return [name for name, flag in self._trainable.items() if not flag]

    def trainable_parameters(self) -> List[torch.Tensor]:
        return [self._params[name] for name in self.trainable_names()]

    def freeze(self, prefixes: Iterable[str] = ("",)) -> None:
        """Freeze every parameter under the given name prefixes ("" = all)"""
        prefixes = list(prefixes)
        for name in self._params:
            if "" in prefixes or _matches(name, prefixes):
                self._set_flag(name, False)

    def unfreeze(self, prefixes: Iterable[str] = ("",)) -> None:
        """Mark every parameter under the given name prefixes trainable ("" = all)"""
        prefixes = list(prefixes)
        for name in self._params:
            if "" in prefixes or _matches(name, prefixes):
                self._set_flag(name, True)

    def count(self, prefix: Optional[str] = None) -> int:
        """Number of scalar parameters, optionally under a prefix"""
        return sum(
            t.numel() for n, t in self._params.items() if prefix is None or _matches(n, [prefix])
        )

    def snapshot(self) -> Dict[str, torch.Tensor]:
        """Detached copies of every parameter"""
        return {name: t.detach().clone() for name, t in self._params.items()}

    def changed_since(self, snapshot: Mapping[str, torch.Tensor]) -> List[str]:
        """Names whose values are not bit-identical to the snapshot"""
        return [
            name
            for name, t in self._params.items()
            if name not in snapshot or not torch.equal(t.detach(), snapshot[name])
        ]

    def assert_frozen_unchanged(self, snapshot: Mapping[str, torch.Tensor]) -> None:
        """
        Raise FreezeViolationError if any frozen parameter differs from the snapshot

        Args:
            snapshot: Result of an earlier snapshot() call
        """
        frozen = set(self.frozen_names())
        violated = [name for name in self.changed_since(snapshot) if name in frozen]
        if violated:
            logger.error(f"Freeze violation on {len(violated)} parameters")
            raise FreezeViolationError(violated)
