"""Small numpy neural-network substrate.

Every network keeps its weights in a single flat vector; per-layer matrices are
views into it. That keeps Adam, Polyak averaging, checkpointing and finite
difference checks working on plain 1-D arrays.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, NumericError

OUTPUT_ACTIVATIONS = ("tanh", "none", "softmax")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_dims: tuple[int, ...] = (256, 256, 256)
    output_activation: str = "none"

    def __post_init__(self):
        dims = (self.input_dim, self.output_dim, *self.hidden_dims)
        if any(int(d) < 1 for d in dims):
            raise ContractViolation(f"all layer dims must be >= 1, got {dims}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ContractViolation(f"unknown output activation {self.output_activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden_dims, self.output_dim]
        return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_dims)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Mlp:
    """Fully connected ReLU network with an optional tanh/softmax output."""

    def __init__(
        self,
        spec: MlpSpec,
        rng: np.random.Generator | None = None,
        params: np.ndarray | None = None,
        output_scale: float = 1.0,
        dtype=np.float64,
    ):
        self.spec = spec
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            chunks = []
            n_layers = len(spec.layer_dims)
            for k, (o, i) in enumerate(spec.layer_dims):
                scale = output_scale if k == n_layers - 1 else 1.0
                bound = scale / np.sqrt(i)
                chunks.append(rng.uniform(-bound, bound, size=o * i))
                chunks.append(rng.uniform(-bound, bound, size=o))
            params = np.concatenate(chunks)
        params = np.array(params, dtype=dtype)
        if params.shape != (spec.n_params,):
            raise ContractViolation(f"expected {spec.n_params} parameters, got {params.shape}")
        self.params = params
        self.weights, self.biases = self._views(self.params)
        self._cache: tuple | None = None

    def _views(self, flat: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        ws, bs, k = [], [], 0
        for o, i in self.spec.layer_dims:
            ws.append(flat[k:k + o * i].reshape(o, i))
            k += o * i
            bs.append(flat[k:k + o])
            k += o
        return ws, bs

    @property
    def dtype(self):
        return self.params.dtype

    def copy(self) -> "Mlp":
        return Mlp(self.spec, params=self.params.copy(), dtype=self.dtype)

    def load_params(self, flat: np.ndarray) -> None:
        if flat.shape != self.params.shape:
            raise ContractViolation("parameter vector shape mismatch")
        self.params[:] = flat

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.spec.input_dim:
            raise ContractViolation(f"input dim {x.shape[-1]} != {self.spec.input_dim}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            if k < last:
                h = np.maximum(z, 0.0)
                acts.append(h)
        act = self.spec.output_activation
        if act == "tanh":
            out = np.tanh(z)
        elif act == "softmax":
            out = softmax(z)
        else:
            out = z
        if cache:
            self._cache = (acts, z, out)
        return out

    @property
    def output_preactivation(self) -> np.ndarray:
        if self._cache is None:
            raise ContractViolation("forward() must be called before reading the preactivation")
        return self._cache[1]

    def backward(
        self, upstream: np.ndarray, preact_grad: np.ndarray | None = None, param_grads: bool = True
    ) -> tuple[np.ndarray | None, np.ndarray]:
        """Backpropagate through the last cached forward pass.

        ``upstream`` is dL/d(output); ``preact_grad`` is an optional extra
        dL/d(output preactivation) term, used for penalties on the raw actor
        output. Returns ``(flat parameter gradient, input gradient)``; for a
        batched forward the parameter gradient is summed over the batch. With
        ``param_grads=False`` only the input gradient is computed.
        """
        if self._cache is None:
            raise ContractViolation("backward() called without cached forward activations")
        acts, z, out = self._cache
        g = np.asarray(upstream, dtype=self.dtype)
        if g.shape != out.shape:
            raise ContractViolation(f"upstream grad shape {g.shape} != output shape {out.shape}")
        act = self.spec.output_activation
        if act == "tanh":
            dz = g * (1.0 - out * out)
        elif act == "softmax":
            dz = out * (g - (g * out).sum(axis=-1, keepdims=True))
        else:
            dz = g
        if preact_grad is not None:
            dz = dz + preact_grad.astype(self.dtype, copy=False)
        grads = np.zeros_like(self.params) if param_grads else None
        gw, gb = self._views(grads) if param_grads else (None, None)
        for k in range(len(self.weights) - 1, -1, -1):
            if param_grads:
                a_in = acts[k]
                if dz.ndim == 1:
                    gw[k][:] = np.outer(dz, a_in)
                    gb[k][:] = dz
                else:
                    gw[k][:] = dz.T @ a_in
                    gb[k][:] = dz.sum(axis=0)
            dx = dz @ self.weights[k]
            if k > 0:
                dz = dx * (acts[k] > 0)
        return grads, dx


class GruPolicy:
    """Gated recurrent trunk with independent actor (logits) and critic heads."""

    def __init__(
        self,
        input_dim: int,
        hidden_dim: int = 64,
        n_actions: int = 3,
        rng: np.random.Generator | None = None,
        params: np.ndarray | None = None,
        head_scale: float = 0.01,
    ):
        self.input_dim, self.hidden_dim, self.n_actions = int(input_dim), int(hidden_dim), int(n_actions)
        H, I, A = self.hidden_dim, self.input_dim, self.n_actions
        self._shapes = [
            ("w_x", (3 * H, I)), ("w_h", (3 * H, H)), ("b_x", (3 * H,)), ("b_h", (3 * H,)),
            ("w_pi", (A, H)), ("b_pi", (A,)), ("w_v", (1, H)), ("b_v", (1,)),
        ]
        n = sum(int(np.prod(s)) for _, s in self._shapes)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            parts = []
            for name, shape in self._shapes:
                fan_in = I if name in ("w_x", "b_x") else H
                scale = head_scale if name in ("w_pi", "b_pi", "w_v", "b_v") else 1.0
                bound = scale / np.sqrt(fan_in)
                parts.append(rng.uniform(-bound, bound, size=shape).ravel())
            params = np.concatenate(parts)
        params = np.array(params, dtype=np.float64)
        if params.shape != (n,):
            raise ContractViolation(f"expected {n} parameters, got {params.shape}")
        self.params = params
        self.p = self._views(self.params)
        self._cache: list | None = None

    @property
    def n_params(self) -> int:
        return self.params.size

    def _views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, k = {}, 0
        for name, shape in self._shapes:
            size = int(np.prod(shape))
            out[name] = flat[k:k + size].reshape(shape)
            k += size
        return out

    def copy(self) -> "GruPolicy":
        return GruPolicy(self.input_dim, self.hidden_dim, self.n_actions, params=self.params.copy())

    def initial_hidden(self) -> np.ndarray:
        return np.zeros(self.hidden_dim)

    def _cell(self, x, h):
        p, H = self.p, self.hidden_dim
        ax = p["w_x"] @ x + p["b_x"]
        ah = p["w_h"] @ h + p["b_h"]
        z = 1.0 / (1.0 + np.exp(-(ax[:H] + ah[:H])))
        r = 1.0 / (1.0 + np.exp(-(ax[H:2 * H] + ah[H:2 * H])))
        n = np.tanh(ax[2 * H:] + r * ah[2 * H:])
        h_next = (1.0 - z) * n + z * h
        return h_next, (x, h, z, r, n, ah[2 * H:])

    def step(self, x: np.ndarray, hidden: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
        """One recurrent step: returns (action logits, value, next hidden)."""
        x = np.asarray(x, dtype=np.float64)
        hidden = np.asarray(hidden, dtype=np.float64)
        if x.shape != (self.input_dim,) or hidden.shape != (self.hidden_dim,):
            raise ContractViolation("recurrent_step input/hidden shape mismatch")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(hidden))):
            raise ContractViolation("recurrent_step received non-finite input")
        h_next, _ = self._cell(x, hidden)
        logits = self.p["w_pi"] @ h_next + self.p["b_pi"]
        value = float(self.p["w_v"][0] @ h_next + self.p["b_v"][0])
        return logits, value, h_next

    def forward_sequence(self, xs: np.ndarray, h0: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Run a whole sequence, caching activations for :meth:`backward_sequence`."""
        xs = np.asarray(xs, dtype=np.float64)
        if not np.all(np.isfinite(xs)):
            raise ContractViolation("non-finite input sequence")
        h = self.initial_hidden() if h0 is None else np.asarray(h0, dtype=np.float64)
        steps, hs = [], []
        for x in xs:
            h, c = self._cell(x, h)
            steps.append(c)
            hs.append(h)
        hs = np.array(hs)
        logits = hs @ self.p["w_pi"].T + self.p["b_pi"]
        values = hs @ self.p["w_v"][0] + self.p["b_v"][0]
        self._cache = [steps, hs]
        return logits, values

    def backward_sequence(self, dlogits: np.ndarray, dvalues: np.ndarray) -> np.ndarray:
        """Backpropagation through time; returns the flat parameter gradient."""
        if self._cache is None:
            raise ContractViolation("backward_sequence() called before forward_sequence()")
        steps, hs = self._cache
        H = self.hidden_dim
        grads = np.zeros_like(self.params)
        g = self._views(grads)
        p = self.p
        dlogits = np.asarray(dlogits, dtype=np.float64)
        dvalues = np.asarray(dvalues, dtype=np.float64)
        g["w_pi"][:] = dlogits.T @ hs
        g["b_pi"][:] = dlogits.sum(axis=0)
        g["w_v"][0] = dvalues @ hs
        g["b_v"][0] = dvalues.sum()
        dh_heads = dlogits @ p["w_pi"] + np.outer(dvalues, p["w_v"][0])
        dh_next = np.zeros(H)
        for t in range(len(steps) - 1, -1, -1):
            x, h, z, r, n, ahn = steps[t]
            dh = dh_heads[t] + dh_next
            dn = dh * (1.0 - z)
            dz = dh * (h - n)
            dh_prev = dh * z
            dan = dn * (1.0 - n * n)
            dr = dan * ahn
            dzp = dz * z * (1.0 - z)
            drp = dr * r * (1.0 - r)
            dax = np.concatenate([dzp, drp, dan])
            dah = np.concatenate([dzp, drp, dan * r])
            g["w_x"] += np.outer(dax, x)
            g["b_x"] += dax
            g["w_h"] += np.outer(dah, h)
            g["b_h"] += dah
            dh_next = dh_prev + p["w_h"].T @ dah
        return grads


@dataclass
class Adam:
    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    dtype: type = np.float64

    def __post_init__(self):
        self.m = np.zeros(self.size, dtype=self.dtype)
        self.v = np.zeros(self.size, dtype=self.dtype)
        self._scratch = np.zeros(self.size, dtype=self.dtype)

    def step(self, params: np.ndarray, grads: np.ndarray) -> None:
        """Apply one bias-corrected Adam update to ``params`` in place."""
        if params.shape != (self.size,) or grads.shape != (self.size,):
            raise ContractViolation("Adam: parameter/gradient length mismatch")
        if not np.all(np.isfinite(grads)):
            raise NumericError("Adam: non-finite gradient, update rejected")
        self.t += 1
        b1, b2, tmp = self.beta1, self.beta2, self._scratch
        self.m *= b1
        np.multiply(grads, 1.0 - b1, out=tmp)
        self.m += tmp
        self.v *= b2
        np.multiply(grads, grads, out=tmp)
        tmp *= 1.0 - b2
        self.v += tmp
        # tmp <- sqrt(v_hat) + eps, then params -= lr * m_hat / tmp
        np.divide(self.v, 1.0 - b2 ** self.t, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += self.eps
        np.divide(self.m, tmp, out=tmp)
        tmp *= self.lr / (1.0 - b1 ** self.t)
        params -= tmp

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.m": self.m, f"{prefix}.v": self.v, f"{prefix}.t": np.array(self.t)}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        self.m = np.array(arrays[f"{prefix}.m"], dtype=self.dtype)
        self.v = np.array(arrays[f"{prefix}.v"], dtype=self.dtype)
        self.t = int(arrays[f"{prefix}.t"])


def polyak_average(target: np.ndarray, online: np.ndarray, retain: float) -> np.ndarray:
    """Return ``retain * target + (1 - retain) * online``."""
    if not 0.0 <= retain <= 1.0:
        raise ContractViolation(f"retain must lie in [0, 1], got {retain}")
    if target.shape != online.shape:
        raise ContractViolation("polyak_average: shape mismatch")
    return retain * target + (1.0 - retain) * online


class RunningNormalizer:
    """Running mean/std input normalizer with clipping."""

    def __init__(self, size: int, eps: float = 1e-2, clip: float = 5.0):
        self.size, self.eps, self.clip = size, eps, clip
        self.total = np.zeros(size)
        self.total_sq = np.zeros(size)
        self.count = 0
        self.mean = np.zeros(size)
        self.std = np.ones(size)

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.size)
        self.total += x.sum(axis=0)
        self.total_sq += (x * x).sum(axis=0)
        self.count += x.shape[0]
        self.mean = self.total / self.count
        var = self.total_sq / self.count - self.mean ** 2
        self.std = np.sqrt(np.maximum(self.eps ** 2, var))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.clip((x - self.mean) / self.std, -self.clip, self.clip)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.total": self.total, f"{prefix}.total_sq": self.total_sq,
                f"{prefix}.count": np.array(self.count)}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        self.total = np.array(arrays[f"{prefix}.total"], dtype=np.float64)
        self.total_sq = np.array(arrays[f"{prefix}.total_sq"], dtype=np.float64)
        self.count = int(arrays[f"{prefix}.count"])
        if self.count:
            self.mean = self.total / self.count
            var = self.total_sq / self.count - self.mean ** 2
            self.std = np.sqrt(np.maximum(self.eps ** 2, var))


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5,
                           indices: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (optionally on a subset of entries)."""
    x = np.array(x, dtype=np.float64)
    idx = range(x.size) if indices is None else indices
    out = np.zeros(x.size)
    for i in idx:
        orig = x[i]
        x[i] = orig + eps
        fp = f(x)
        x[i] = orig - eps
        fm = f(x)
        x[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def save_checkpoint(path: str | Path, descriptor: dict, arrays: dict[str, np.ndarray],
                    seed: int | None = None, global_step: int = 0) -> Path:
    """Write a checkpoint container (uncompressed ``.npz``).

    The descriptor, seed and step counter travel as a JSON blob next to the
    arrays, so parameters round-trip bit-exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"descriptor": descriptor, "seed": seed, "global_step": int(global_step)}
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=blob, **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as data:
        arrays = {k: data[k].copy() for k in data.files if k != "__meta__"}
        meta = json.loads(bytes(data["__meta__"]).decode())
    return meta, arrays
