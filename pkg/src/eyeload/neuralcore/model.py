from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from .layers import BatchNorm, Layer, Sequential


class Model:
    """A bag of named :class:`Sequential` components sharing one parameter namespace."""

    def components(self) -> dict[str, Sequential]:
        raise NotImplementedError

    def named_layers(self) -> Iterator[tuple[str, Layer]]:
        for cname, seq in self.components().items():
            for lname, layer in seq.named_layers(cname + "."):
                yield lname, layer

    def named_parameters(self, prefix: str | None = None) -> Iterator[tuple[str, Layer, str]]:
        for lname, layer in self.named_layers():
            if prefix is not None and not lname.startswith(prefix):
                continue
            for key in layer.params:
                yield f"{lname}.{key}", layer, key

    def parameters(self, prefix: str | None = None) -> list[np.ndarray]:
        return [layer.params[k] for _, layer, k in self.named_parameters(prefix)]

    def gradients(self, prefix: str | None = None) -> list[np.ndarray]:
        return [layer.grads[k] for _, layer, k in self.named_parameters(prefix)]

    def zero_grad(self):
        for seq in self.components().values():
            seq.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for lname, layer in self.named_layers():
            for key, value in layer.params.items():
                state[f"{lname}.{key}"] = value
            if isinstance(layer, BatchNorm):
                for key, value in layer.buffers().items():
                    state[f"{lname}.{key}"] = value
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"state is missing {missing[:5]}")
        for lname, layer in self.named_layers():
            for key in layer.params:
                arr = np.asarray(state[f"{lname}.{key}"], dtype=float)
                if arr.shape != layer.params[key].shape:
                    raise ValueError(f"{lname}.{key}: shape {arr.shape} != {layer.params[key].shape}")
                layer.params[key][...] = arr
            if isinstance(layer, BatchNorm):
                layer.running_mean = np.array(state[f"{lname}.running_mean"], dtype=float)
                layer.running_var = np.array(state[f"{lname}.running_var"], dtype=float)

    def layer_specs(self) -> dict:
        return {name: seq.spec() for name, seq in self.components().items()}

    def digest(self, prefix: str | None = None) -> str:
        """SHA-256 over parameter bytes, optionally restricted to a name prefix."""
        h = hashlib.sha256()
        for name, value in sorted(self.state_dict().items()):
            if prefix is None or name.startswith(prefix):
                h.update(name.encode())
                h.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return h.hexdigest()
