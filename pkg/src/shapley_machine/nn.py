"""Minimal MLP stack with analytic backward passes.

No autodiff graph: the architectures are fixed (linear layers, optional layer
normalization, relu/tanh/identity activations, categorical heads) and every
backward pass is hand-derived, which keeps gradients auditable against
central finite differences.  Parameters live in flat named blocks so the
optimizer and the checkpoint format stay trivial.

Forward passes over shared read-only parameters are safe to run
concurrently; gradient accumulation and optimizer steps are single-writer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

LN_EPS = 1e-5


class NonFiniteGradientError(RuntimeError):
    """An update was rejected because a gradient entry was NaN or infinite."""


class CheckpointError(Exception):
    """Checkpoint file malformed or inconsistent with the expected manifest."""


@dataclass
class ParameterBlock:
    """A named flat parameter array with a matching gradient buffer."""

    name: str
    shape: tuple
    values: np.ndarray
    grads: np.ndarray = field(default=None)
    epoch: int = 0  # bumped on every optimizer write; used to detect stale tapes

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.grads is None:
            self.grads = np.zeros_like(self.values)
        if self.grads.shape != self.values.shape:
            raise ValueError("values and grads must have equal length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"block {self.name}: non-finite initial values")

    @property
    def view(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    @property
    def grad_view(self) -> np.ndarray:
        return self.grads.reshape(self.shape)

    @property
    def size(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple
    output_dim: int
    activation: str = "relu"
    layer_norm: bool = False
    orthogonal_init: bool = True
    final_gain: float = 1.0

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1 or any(d < 1 for d in self.hidden_dims):
            raise ValueError("all layer dimensions must be >= 1")
        if self.activation not in ("relu", "tanh", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")


def orthogonal_matrix(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((rows, cols)) if rows >= cols else rng.standard_normal((cols, rows))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activate_backward(name: str, a: np.ndarray, da: np.ndarray) -> np.ndarray:
    if name == "relu":
        return da * (a > 0.0)
    if name == "tanh":
        return da * (1.0 - a * a)
    return da


class Mlp:
    """Multilayer perceptron: (linear -> [layernorm] -> activation)* -> linear."""

    def __init__(self, name: str, spec: MlpSpec, rng: np.random.Generator):
        self.name = name
        self.spec = spec
        self.blocks: list[ParameterBlock] = []
        dims = [spec.input_dim, *spec.hidden_dims, spec.output_dim]
        self._layers = []
        for layer, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = layer == len(dims) - 2
            if spec.orthogonal_init:
                gain = spec.final_gain if last else (np.sqrt(2.0) if spec.activation == "relu" else 1.0)
                w = orthogonal_matrix(rng, fan_out, fan_in, gain)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            w_block = ParameterBlock(f"{name}.w{layer}", (fan_out, fan_in), w)
            b_block = ParameterBlock(f"{name}.b{layer}", (fan_out,), np.zeros(fan_out))
            self.blocks += [w_block, b_block]
            entry = {"w": w_block, "b": b_block, "last": last}
            if spec.layer_norm and not last:
                g_block = ParameterBlock(f"{name}.ln_g{layer}", (fan_out,), np.ones(fan_out))
                c_block = ParameterBlock(f"{name}.ln_b{layer}", (fan_out,), np.zeros(fan_out))
                self.blocks += [g_block, c_block]
                entry["ln_g"] = g_block
                entry["ln_b"] = c_block
            self._layers.append(entry)

    def _param_epoch(self) -> int:
        return sum(b.epoch for b in self.blocks)

    def forward(self, x: np.ndarray):
        """Returns (output, tape); accepts a single vector or a batch of rows."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.spec.input_dim:
            raise ValueError(
                f"{self.name}: expected input dim {self.spec.input_dim}, got {x.shape[1]}"
            )
        tape = {"inputs": [], "records": [], "single": single, "epoch": self._param_epoch()}
        h = x
        for entry in self._layers:
            tape["inputs"].append(h)
            z = h @ entry["w"].view.T + entry["b"].view
            rec = {}
            if entry["last"]:
                h = z
            elif "ln_g" in entry:
                mu = z.mean(axis=1, keepdims=True)
                var = z.var(axis=1, keepdims=True)
                inv_std = 1.0 / np.sqrt(var + LN_EPS)
                xhat = (z - mu) * inv_std
                zn = entry["ln_g"].view * xhat + entry["ln_b"].view
                h = _activate(self.spec.activation, zn)
                rec = {"xhat": xhat, "inv_std": inv_std}
            else:
                h = _activate(self.spec.activation, z)
            rec["out"] = h
            tape["records"].append(rec)
        out = h[0] if single else h
        return out, tape

    def backward(self, tape, upstream: np.ndarray) -> np.ndarray:
        """Accumulates d(loss)/d(params) into block grads; repeatable.

        Returns the gradient w.r.t. the forward input (same shape), so stacked
        networks can chain backward passes.
        """
        if tape["epoch"] != self._param_epoch():
            raise RuntimeError(f"{self.name}: stale tape (parameters changed since forward)")
        dy = np.asarray(upstream, dtype=np.float64)
        if tape["single"]:
            dy = dy[None, :]
        for entry, x_in, rec in zip(
            reversed(self._layers), reversed(tape["inputs"]), reversed(tape["records"])
        ):
            if not entry["last"]:
                da = _activate_backward(self.spec.activation, rec["out"], dy)
                if "ln_g" in entry:
                    xhat, inv_std = rec["xhat"], rec["inv_std"]
                    entry["ln_b"].grad_view[...] += da.sum(axis=0)
                    entry["ln_g"].grad_view[...] += (da * xhat).sum(axis=0)
                    dxhat = da * entry["ln_g"].view
                    dy = inv_std * (
                        dxhat
                        - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
                    )
                else:
                    dy = da
            entry["w"].grad_view[...] += dy.T @ x_in
            entry["b"].grad_view[...] += dy.sum(axis=0)
            dy = dy @ entry["w"].view
        return dy[0] if tape["single"] else dy


class Adam:
    """Standard Adam over a list of parameter blocks; zeroes grads after each step."""

    def __init__(self, blocks, lr=5e-4, beta1=0.99, beta2=0.999, eps=1e-5):
        self.blocks = list(blocks)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros(b.size) for b in self.blocks]
        self._v = [np.zeros(b.size) for b in self.blocks]

    def step(self) -> None:
        for block in self.blocks:
            if not np.all(np.isfinite(block.grads)):
                raise NonFiniteGradientError(f"non-finite gradient in block {block.name}")
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for block, m, v in zip(self.blocks, self._m, self._v):
            g = block.grads
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            block.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(block.values)):
                raise NonFiniteGradientError(f"non-finite values in block {block.name} after update")
            block.epoch += 1
            g[:] = 0.0

    def zero_grads(self) -> None:
        for block in self.blocks:
            block.grads[:] = 0.0


class Categorical:
    """Discrete distribution from logits, numerically stable throughout."""

    def __init__(self, logits: np.ndarray):
        logits = np.asarray(logits, dtype=np.float64)
        if logits.size == 0 or logits.shape[-1] == 0:
            raise ValueError("logits must be non-empty")
        self.single = logits.ndim == 1
        z = logits if not self.single else logits[None, :]
        z = z - z.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
        self._log_probs = z - log_norm
        self._probs = np.exp(self._log_probs)

    @property
    def probs(self) -> np.ndarray:
        return self._probs[0] if self.single else self._probs

    @property
    def n_actions(self) -> int:
        return self._probs.shape[1]

    def sample(self, rng: np.random.Generator) -> np.ndarray | int:
        u = rng.random(self._probs.shape[0])
        cum = np.cumsum(self._probs, axis=1)
        idx = (u[:, None] > cum).sum(axis=1)
        idx = np.minimum(idx, self.n_actions - 1)
        return int(idx[0]) if self.single else idx

    def log_prob(self, actions) -> np.ndarray | float:
        acts = np.atleast_1d(np.asarray(actions, dtype=np.int64))
        lp = self._log_probs[np.arange(len(acts)), acts]
        return float(lp[0]) if self.single else lp

    def entropy(self) -> np.ndarray | float:
        ent = -np.sum(self._probs * self._log_probs, axis=1)
        return float(ent[0]) if self.single else ent


def manifest_of(blocks) -> list:
    return [{"name": b.name, "shape": list(b.shape)} for b in blocks]


_MAGIC = b"SMNN"
_VERSION = 1


def save_checkpoint(path, blocks) -> None:
    """Versioned binary checkpoint: magic, version, JSON manifest, float64 LE arrays."""
    manifest = json.dumps(manifest_of(blocks)).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for block in blocks:
            fh.write(block.values.astype("<f8").tobytes())


def load_checkpoint(path, expected_manifest=None) -> dict:
    """Reads a checkpoint into {name: flat array}; rejects mismatched manifests."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        if expected_manifest is not None:
            want = [(e["name"], list(e["shape"])) for e in expected_manifest]
            got = [(e["name"], list(e["shape"])) for e in manifest]
            if want != got:
                raise CheckpointError(f"{path}: manifest mismatch")
        out = {}
        for entry in manifest:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"{path}: truncated block {entry['name']}")
            out[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    return out


def restore_blocks(blocks, loaded: dict) -> None:
    for block in blocks:
        if block.name not in loaded:
            raise CheckpointError(f"missing block {block.name}")
        arr = loaded[block.name]
        if arr.size != block.size:
            raise CheckpointError(f"block {block.name}: size mismatch")
        block.values[:] = arr
        block.epoch += 1


def finite_difference_gradients(loss_fn, blocks, eps: float = 1e-5) -> list:
    """Central-difference gradient of loss_fn() w.r.t. every block entry."""
    grads = []
    for block in blocks:
        g = np.zeros(block.size)
        for i in range(block.size):
            orig = block.values[i]
            block.values[i] = orig + eps
            hi = loss_fn()
            block.values[i] = orig - eps
            lo = loss_fn()
            block.values[i] = orig
            g[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads
