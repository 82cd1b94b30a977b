from __future__ import annotations

from collections.abc import Iterable, Iterator

import numpy as np

from .tensor import Tensor


class ParamSet:
    """Named parameters plus a per-parameter trainable flag.

    Names are dotted paths (``shared_encoder.blocks.0.attn.q.weight``); freezing
    works by prefix so a whole submodule can be held constant.
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def has_prefix(self, prefix: str) -> bool:
        return any(n.startswith(prefix) for n in self._params)

    def num_values(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    # -- freezing --------------------------------------------------------
    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, prefixes: Iterable[str], trainable: bool) -> None:
        prefixes = tuple(prefixes)
        for n in self._params:
            if n.startswith(prefixes):
                self._trainable[n] = trainable

    def freeze(self, prefixes: Iterable[str]) -> None:
        self.set_trainable(prefixes, False)

    def unfreeze_all(self) -> None:
        for n in self._trainable:
            self._trainable[n] = True

    def trainable_names(self) -> list[str]:
        return [n for n, flag in self._trainable.items() if flag]

    def frozen_names(self) -> list[str]:
        return [n for n, flag in self._trainable.items() if not flag]

    # -- state -----------------------------------------------------------
    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, v in state.items():
            self[n].data[...] = v

    def subset(self, exclude_prefixes: Iterable[str] = ()) -> "ParamSet":
        """Shallow copy sharing tensors, minus the excluded prefixes."""
        exclude = tuple(exclude_prefixes)
        out = ParamSet()
        for n, t in self._params.items():
            if exclude and n.startswith(exclude):
                continue
            out._params[n] = t
            out._trainable[n] = self._trainable[n]
        return out

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for n, t in self._params.items():
            out.add(n, t.data, self._trainable[n])
        return out
