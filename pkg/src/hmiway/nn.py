"""Small float64 networks with hand-written reverse-mode gradients.

Every network keeps its weights in one flat parameter vector; named tensors
are reshaped views into it, so an optimizer step on the flat vector updates
the network in place.  ``forward`` returns ``(output, cache)`` and
``backward(cache, grad_out)`` returns ``(param_grad, input_grad)``.
"""
from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "hmiway-params"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint file."""


class StaleCacheError(RuntimeError):
    pass


class Module:
    def __init__(self, shapes: list[tuple[str, tuple[int, ...]]]):
        self.layout: list[tuple[str, tuple[int, ...], int]] = []
        offset = 0
        for name, shape in shapes:
            self.layout.append((name, tuple(shape), offset))
            offset += int(np.prod(shape))
        self.n_params = offset
        self.params = np.zeros(offset)
        self._version = 0

    def view(self, name: str, flat: np.ndarray | None = None) -> np.ndarray:
        flat = self.params if flat is None else flat
        for n, shape, off in self.layout:
            if n == name:
                return flat[off:off + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        self.params[:] = flat
        self._version += 1

    def touch(self) -> None:
        """Mark parameters as changed (invalidates outstanding caches)."""
        self._version += 1

    def init_uniform(self, rng: np.random.Generator, names=None) -> None:
        for name, shape, off in self.layout:
            if names is not None and name not in names:
                continue
            fan_in = shape[0] if len(shape) == 2 else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            size = int(np.prod(shape))
            if name.startswith("b"):
                self.params[off:off + size] = 0.0
            else:
                self.params[off:off + size] = rng.uniform(-bound, bound, size)
        self._version += 1

    def _check(self, cache) -> None:
        if cache.get("version") != self._version or cache.get("owner") is not self:
            raise StaleCacheError("cache does not belong to the current parameters")

    def layout_header(self) -> list[dict]:
        return [{"name": n, "shape": list(s), "offset": o} for n, s, o in self.layout]


_ACT = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "linear": (lambda x: x, lambda y: np.ones_like(y)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda y: (y > 0).astype(np.float64)),
}


class MLP(Module):
    """Fully connected network; hidden layers use ``activation``, the last is linear."""

    def __init__(self, sizes: list[int], activation: str = "tanh",
                 rng: np.random.Generator | None = None, zero_last: bool = False):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = list(sizes)
        self.activation = activation
        shapes = []
        for k in range(len(sizes) - 1):
            shapes += [(f"W{k}", (sizes[k], sizes[k + 1])), (f"b{k}", (sizes[k + 1],))]
        super().__init__(shapes)
        if rng is not None:
            self.init_uniform(rng)
        if zero_last:
            k = len(sizes) - 2
            self.view(f"W{k}")[:] = 0.0
            self.view(f"b{k}")[:] = 0.0

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input width {x.shape[-1]} != {self.in_dim}")
        act, _ = _ACT[self.activation]
        acts = [x]
        n_layers = len(self.sizes) - 1
        h = x
        for k in range(n_layers):
            h = h @ self.view(f"W{k}") + self.view(f"b{k}")
            if k < n_layers - 1:
                h = act(h)
            acts.append(h)
        out = h[0] if squeeze else h
        return out, {"acts": acts, "squeeze": squeeze, "version": self._version, "owner": self}

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out: np.ndarray):
        self._check(cache)
        _, dact = _ACT[self.activation]
        acts = cache["acts"]
        g = np.asarray(grad_out, dtype=np.float64)
        if cache["squeeze"]:
            g = g[None, :]
        grad = np.zeros(self.n_params)
        n_layers = len(self.sizes) - 1
        for k in reversed(range(n_layers)):
            if k < n_layers - 1:
                g = g * dact(acts[k + 1])
            self.view(f"W{k}", grad)[:] = acts[k].T @ g
            self.view(f"b{k}", grad)[:] = g.sum(axis=0)
            g = g @ self.view(f"W{k}").T
        if cache["squeeze"]:
            g = g[0]
        return grad, g


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class LSTMEncoder(Module):
    """Single-layer LSTM over a sequence, followed by mean/log-std heads.

    ``run`` encodes a batch of equal-length (optionally masked) sequences to
    their final hidden states; ``heads`` maps a (pooled) hidden vector to the
    latent statistics.  Masked steps leave the cell state untouched.
    """

    def __init__(self, input_dim: int, hidden: int = 128, latent: int = 2,
                 rng: np.random.Generator | None = None, zero_heads: bool = False,
                 forget_bias: float = 1.0):
        self.input_dim = input_dim
        self.hidden = hidden
        self.latent = latent
        super().__init__([
            ("W", (input_dim + hidden, 4 * hidden)), ("b", (4 * hidden,)),
            ("Wmu", (hidden, latent)), ("bmu", (latent,)),
            ("Wls", (hidden, latent)), ("bls", (latent,)),
        ])
        if rng is not None:
            self.init_uniform(rng)
            self.view("b")[hidden:2 * hidden] = forget_bias
        if zero_heads:
            for n in ("Wmu", "bmu", "Wls", "bls"):
                self.view(n)[:] = 0.0

    def run(self, seqs: np.ndarray, mask: np.ndarray | None = None):
        """Encode ``seqs`` of shape ``(B, T, input_dim)``; returns ``(h_T, cache)``."""
        seqs = np.asarray(seqs, dtype=np.float64)
        if seqs.ndim == 2:
            seqs = seqs[None]
        B, T, D = seqs.shape
        if T == 0:
            raise ValueError("empty sequence")
        if D != self.input_dim:
            raise ValueError(f"input width {D} != {self.input_dim}")
        if mask is None:
            mask = np.ones((B, T))
        H = self.hidden
        W, b = self.view("W"), self.view("b")
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        steps = []
        for t in range(T):
            xh = np.concatenate([seqs[:, t], h], axis=1)
            z = xh @ W + b
            i = _sigmoid(z[:, :H])
            f = _sigmoid(z[:, H:2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = _sigmoid(z[:, 3 * H:])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            m = mask[:, t:t + 1]
            steps.append((xh, i, f, g, o, c, tc, m))
            c = m * c_new + (1.0 - m) * c
            h = m * h_new + (1.0 - m) * h
        return h, {"steps": steps, "version": self._version, "owner": self, "B": B}

    def run_backward(self, cache, grad_h: np.ndarray) -> np.ndarray:
        """Backprop-through-time; returns the flat parameter gradient (cell part only)."""
        self._check(cache)
        H = self.hidden
        W = self.view("W")
        grad = np.zeros(self.n_params)
        dW = self.view("W", grad)
        db = self.view("b", grad)
        dh = np.asarray(grad_h, dtype=np.float64).reshape(cache["B"], H).copy()
        dc = np.zeros_like(dh)
        for xh, i, f, g, o, c_prev, tc, m in reversed(cache["steps"]):
            dh_new = m * dh
            dc_new = m * dc + dh_new * o * (1.0 - tc * tc)
            do = dh_new * tc
            di = dc_new * g
            dg = dc_new * i
            df = dc_new * c_prev
            dz = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f),
                                 dg * (1.0 - g * g), do * o * (1.0 - o)], axis=1)
            dW += xh.T @ dz
            db += dz.sum(axis=0)
            dxh = dz @ W.T
            dh = (1.0 - m) * dh + dxh[:, self.input_dim:]
            dc = (1.0 - m) * dc + dc_new * f
        return grad

    def heads(self, h: np.ndarray):
        h = np.asarray(h, dtype=np.float64)
        mu = h @ self.view("Wmu") + self.view("bmu")
        log_sigma = h @ self.view("Wls") + self.view("bls")
        return mu, log_sigma, {"h": h, "version": self._version, "owner": self}

    def heads_backward(self, cache, grad_mu, grad_ls):
        self._check(cache)
        h = cache["h"]
        grad = np.zeros(self.n_params)
        g_mu = np.asarray(grad_mu, dtype=np.float64)
        g_ls = np.asarray(grad_ls, dtype=np.float64)
        if h.ndim == 1:
            self.view("Wmu", grad)[:] = np.outer(h, g_mu)
            self.view("Wls", grad)[:] = np.outer(h, g_ls)
            self.view("bmu", grad)[:] = g_mu
            self.view("bls", grad)[:] = g_ls
        else:
            self.view("Wmu", grad)[:] = h.T @ g_mu
            self.view("Wls", grad)[:] = h.T @ g_ls
            self.view("bmu", grad)[:] = g_mu.sum(axis=0)
            self.view("bls", grad)[:] = g_ls.sum(axis=0)
        dh = g_mu @ self.view("Wmu").T + g_ls @ self.view("Wls").T
        return grad, dh


def encode_sequence(encoder: LSTMEncoder, seq: np.ndarray) -> np.ndarray:
    """Final hidden state of one ``(T, input_dim)`` sequence."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise ValueError("expected a nonempty (T, input_dim) sequence")
    h, _ = encoder.run(seq[None])
    return h[0]


class Adam:
    """Adaptive-moment optimizer over a flat parameter vector."""

    def __init__(self, n_params: int, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 max_grad_norm: float | None = None):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        """Update ``params`` in place (and return it)."""
        grads = np.asarray(grads, dtype=np.float64)
        if grads.shape != params.shape or self.m.shape != params.shape:
            raise ValueError("gradient / parameter / state shape mismatch")
        bad = np.flatnonzero(~np.isfinite(grads))
        if bad.size:
            raise FloatingPointError(f"non-finite gradient at index {int(bad[0])}")
        if self.max_grad_norm is not None:
            norm = float(np.linalg.norm(grads))
            if norm > self.max_grad_norm:
                grads = grads * (self.max_grad_norm / norm)
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grads
        self.v = self.b2 * self.v + (1.0 - self.b2) * grads * grads
        m_hat = self.m / (1.0 - self.b1 ** self.t)
        v_hat = self.v / (1.0 - self.b2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params

    def state_dict(self) -> dict:
        return {"lr": self.lr, "betas": [self.b1, self.b2], "eps": self.eps, "t": self.t,
                "m": self.m.copy(), "v": self.v.copy(), "max_grad_norm": self.max_grad_norm}

    def load_state_dict(self, d: dict) -> None:
        self.lr = d["lr"]
        self.b1, self.b2 = d["betas"]
        self.eps = d["eps"]
        self.t = int(d["t"])
        self.m = np.array(d["m"], dtype=np.float64)
        self.v = np.array(d["v"], dtype=np.float64)
        self.max_grad_norm = d.get("max_grad_norm")


def optimizer_step(state: Adam, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    return state.step(params, grads)


def save_checkpoint(path, modules: dict[str, Module], meta: dict | None = None,
                    optimizers: dict[str, Adam] | None = None) -> Path:
    """Write flat parameter vectors (and optional Adam states) with a JSON header (``.npz``)."""
    path = Path(path)
    optimizers = optimizers or {}
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "meta": meta or {},
              "modules": {k: {"class": type(m).__name__, "n_params": m.n_params,
                              "layout": m.layout_header(), "config": module_config(m)}
                          for k, m in modules.items()},
              "optimizers": {k: {"lr": o.lr, "betas": [o.b1, o.b2], "eps": o.eps, "t": o.t,
                                 "max_grad_norm": o.max_grad_norm}
                             for k, o in optimizers.items()}}
    arrays = {f"param__{k}": m.params for k, m in modules.items()}
    for k, o in optimizers.items():
        arrays[f"opt__{k}__m"] = o.m
        arrays[f"opt__{k}__v"] = o.v
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)
    tmp.replace(path)
    return path


def _read_header(data, path) -> dict:
    header = json.loads(bytes(data["header"]).decode())
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a parameter checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} unsupported")
    return header


def _open(path):
    try:
        return np.load(Path(path))
    except (OSError, ValueError, EOFError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc


def load_checkpoint(path) -> tuple[dict[str, Module], dict]:
    with _open(path) as data:
        header = _read_header(data, path)
        modules = {}
        for name, spec in header["modules"].items():
            m = build_module(spec["class"], spec["config"])
            flat = data[f"param__{name}"]
            if m.layout_header() != spec["layout"]:
                raise CheckpointError(f"{path}: layout mismatch for {name}")
            m.set_params(flat)
            modules[name] = m
    return modules, header["meta"]


def load_optimizers(path) -> dict[str, Adam]:
    with _open(path) as data:
        header = _read_header(data, path)
        out = {}
        for name, st in header.get("optimizers", {}).items():
            opt = Adam(0)
            opt.load_state_dict({**st, "m": data[f"opt__{name}__m"], "v": data[f"opt__{name}__v"]})
            out[name] = opt
    return out


def module_config(m: Module) -> dict:
    if isinstance(m, MLP):
        return {"sizes": m.sizes, "activation": m.activation}
    if isinstance(m, LSTMEncoder):
        return {"input_dim": m.input_dim, "hidden": m.hidden, "latent": m.latent}
    raise TypeError(type(m).__name__)


def build_module(cls_name: str, config: dict) -> Module:
    if cls_name == "MLP":
        return MLP(config["sizes"], config["activation"])
    if cls_name == "LSTMEncoder":
        return LSTMEncoder(config["input_dim"], config["hidden"], config["latent"])
    raise ValueError(f"unknown module class {cls_name}")
