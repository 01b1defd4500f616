"""Named parameter collections and their bit-exact text serialization."""
from __future__ import annotations

import numpy as np

from .tensor import DimensionError, FrozenParameterError, Tensor

FORMAT_HEADER = "SDCOT-PARAMS v1"


class InvariantError(RuntimeError):
    """A structural precondition on parameters was violated."""


class ParamStore:
    """Ordered ``name -> Tensor`` map holding all trainable state of one model.

    Each parameter may carry a boolean ``mask`` of trainable entries; masked-out
    entries never move under :func:`adam_step`. A frozen store has no
    trainable entries at all and rejects gradient accumulation.
    """

    def __init__(self, items=None):
        self._params: dict[str, Tensor] = {}
        self._masks: dict[str, np.ndarray] = {}
        self.frozen = False
        for name, value in (items or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._params:
            raise InvariantError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=not self.frozen)
        t.frozen = self.frozen
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def replace(self, name, values):
        """Swap in new values for ``name`` (shape may change), dropping its mask."""
        old = self._params[name]
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=old.requires_grad)
        t.frozen = old.frozen
        self._params[name] = t
        self._masks.pop(name, None)
        return t

    def set_mask(self, name, mask):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self._params[name].shape:
            raise DimensionError(f"mask shape {mask.shape} != parameter shape {self[name].shape}")
        self._masks[name] = mask
        if not mask.any():
            self._params[name].requires_grad = False

    def clear_masks(self):
        self._masks.clear()
        for t in self._params.values():
            t.requires_grad = not self.frozen

    def mask(self, name):
        return self._masks.get(name)

    def trainable(self):
        """Names of parameters that receive gradients."""
        return [n for n, t in self._params.items() if t.requires_grad]

    def freeze(self):
        self.frozen = True
        for t in self._params.values():
            t.requires_grad = False
            t.frozen = True
            t.grad = None
        return self

    def accumulate(self, name, grad):
        if self.frozen:
            raise FrozenParameterError(f"parameter store is frozen; cannot accumulate into {name!r}")
        self._params[name].accumulate(grad)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def copy(self, frozen=False):
        out = ParamStore()
        out.frozen = frozen
        for name, t in self._params.items():
            out.add(name, t.values.copy())
        if not frozen:
            for name, m in self._masks.items():
                out.set_mask(name, m.copy())
        return out

    def state_dict(self):
        return {n: t.values.copy() for n, t in self._params.items()}

    def num_values(self):
        return int(sum(t.values.size for t in self._params.values()))

    def to_text(self):
        lines = [FORMAT_HEADER]
        for name, t in self._params.items():
            shape = ",".join(str(d) for d in t.shape)
            lines.append(f"{name} {shape} {t.values.astype('>f8').tobytes().hex()}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = text.splitlines()
        if not lines or lines[0].strip() != FORMAT_HEADER:
            raise ValueError(f"not a parameter file (expected header {FORMAT_HEADER!r})")
        return cls.from_lines(lines[1:])

    @classmethod
    def from_lines(cls, lines):
        store = cls()
        for line in lines:
            if not line.strip():
                continue
            name, shape_csv, payload = line.split(" ")
            shape = tuple(int(d) for d in shape_csv.split(",")) if shape_csv else ()
            values = np.frombuffer(bytes.fromhex(payload), dtype=">f8").astype(np.float64)
            store.add(name, values.reshape(shape))
        return store
