"""Hand-rolled MLPs with a mid-network injection point, Adam, and checkpoints.

Both networks share one architecture: ``depth`` ReLU layers of width
``hidden``; the encoded position feeds layer 1 and extra features (encoded
direction, optionally a light code) are concatenated onto the activation
entering layer ``inject_at``. A final linear layer feeds named heads, each
with its own output activation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from lumafield.errors import CheckpointError, ConfigError

# ---------------------------------------------------------------- encodings


@dataclass(frozen=True)
class EncodingSpec:
    num_frequencies: int
    include_identity: bool = True

    def width(self, d: int = 3) -> int:
        return d * (int(self.include_identity) + 2 * self.num_frequencies)


def freq_encode(x, spec: EncodingSpec, dtype=None) -> np.ndarray:
    """(x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)).

    Higher octaves use the double-angle recurrence, which keeps the cost at
    one sin/cos pair per coordinate; the error stays below 1e-12 in float64.
    """
    x = np.asarray(x)
    dtype = dtype or (x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)
    x64 = x.astype(np.float64, copy=False)
    d = x.shape[-1]
    ident = int(spec.include_identity)
    out = np.empty(x.shape[:-1] + (d * (ident + 2 * spec.num_frequencies),), dtype)
    if ident:
        out[..., :d] = x64
    if spec.num_frequencies:
        s, c = np.sin(np.pi * x64), np.cos(np.pi * x64)
        for k in range(spec.num_frequencies):
            j = d * (ident + 2 * k)
            out[..., j:j + d] = s
            out[..., j + d:j + 2 * d] = c
            s, c = 2.0 * s * c, (c - s) * (c + s)
    return out


# ---------------------------------------------------------------- MLP core

ACTIVATIONS = ("linear", "softplus", "sigmoid")


@dataclass(frozen=True)
class Head:
    name: str
    width: int
    activation: str = "linear"


@dataclass(eq=False)
class MlpParams:
    weights: list[np.ndarray]  # layer k: (in_k, out_k)
    biases: list[np.ndarray]
    in_width: int
    inject_width: int
    heads: tuple[Head, ...]
    depth: int = 8
    hidden: int = 256
    inject_at: int = 4  # 1-based layer receiving the injected features; 0 = none

    @property
    def out_width(self) -> int:
        return sum(h.width for h in self.heads)

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays())

    def descriptor(self) -> dict:
        return {
            "in_width": self.in_width, "inject_width": self.inject_width,
            "depth": self.depth, "hidden": self.hidden, "inject_at": self.inject_at,
            "heads": [[h.name, h.width, h.activation] for h in self.heads],
        }

    def astype(self, dtype) -> "MlpParams":
        return MlpParams([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases],
                         self.in_width, self.inject_width, self.heads, self.depth, self.hidden, self.inject_at)

    def copy(self) -> "MlpParams":
        return self.astype(self.weights[0].dtype)

    def layer_in_width(self, k: int) -> int:
        base = self.in_width if k == 1 else self.hidden
        return base + (self.inject_width if k == self.inject_at else 0)


def init_mlp(rng: np.random.Generator, in_width: int, inject_width: int, heads, depth: int = 8,
             hidden: int = 256, inject_at: int = 4, dtype=np.float32) -> MlpParams:
    """He-uniform (fan-in) weights, zero biases."""
    heads = tuple(h if isinstance(h, Head) else Head(*h) for h in heads)
    for h in heads:
        if h.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown head activation {h.activation!r}")
    if not 0 <= inject_at <= depth:
        raise ConfigError("inject_at must lie in [0, depth]")
    if inject_at == 0 and inject_width:
        raise ConfigError("injected features need an injection layer")
    p = MlpParams([], [], in_width, inject_width, heads, depth, hidden, inject_at)
    dims = [p.layer_in_width(k) for k in range(1, depth + 1)] + [hidden]
    outs = [hidden] * depth + [p.out_width]
    for fan_in, fan_out in zip(dims, outs):
        bound = np.sqrt(6.0 / fan_in)
        p.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
        p.biases.append(np.zeros(fan_out, dtype))
    return p


def _activate(raw: np.ndarray, heads) -> np.ndarray:
    out = np.empty_like(raw)
    j = 0
    for h in heads:
        sl = slice(j, j + h.width)
        if h.activation == "softplus":
            out[:, sl] = np.logaddexp(0.0, raw[:, sl])
        elif h.activation == "sigmoid":
            out[:, sl] = expit(raw[:, sl])
        else:
            out[:, sl] = raw[:, sl]
        j += h.width
    return out


def _activation_grad(raw: np.ndarray, heads) -> np.ndarray:
    d = np.ones_like(raw)
    j = 0
    for h in heads:
        sl = slice(j, j + h.width)
        if h.activation == "softplus":
            d[:, sl] = expit(raw[:, sl])
        elif h.activation == "sigmoid":
            s = expit(raw[:, sl])
            d[:, sl] = s * (1.0 - s)
        j += h.width
    return d


@dataclass(eq=False)
class GradTape:
    inputs: list[np.ndarray]  # input to every linear layer, head included
    raw: np.ndarray  # head pre-activation
    consumed: bool = False


def mlp_forward(params: MlpParams, base_input, injected=None) -> tuple[np.ndarray, GradTape]:
    """Batched forward pass; returns activated head outputs (B, out_width) and the tape."""
    dtype = params.weights[0].dtype
    h = np.asarray(base_input, dtype=dtype)
    squeeze = h.ndim == 1
    h = np.atleast_2d(h)
    if h.shape[1] != params.in_width:
        raise ValueError(f"width mismatch: input {h.shape[1]} != {params.in_width}")
    if params.inject_width:
        if injected is None:
            raise ValueError("width mismatch: network expects injected features")
        inj = np.atleast_2d(np.asarray(injected, dtype=dtype))
        if inj.shape[1] != params.inject_width:
            raise ValueError(f"width mismatch: injected {inj.shape[1]} != {params.inject_width}")
        if inj.shape[0] != h.shape[0]:
            inj = np.broadcast_to(inj, (h.shape[0], inj.shape[1]))
    elif injected is not None and np.size(injected):
        raise ValueError("width mismatch: network takes no injected features")
    inputs = []
    for k in range(1, params.depth + 1):
        if k == params.inject_at:
            h = np.concatenate([h, inj], axis=1)
        inputs.append(h)
        h = h @ params.weights[k - 1]
        h += params.biases[k - 1]
        np.maximum(h, 0, out=h)
    inputs.append(h)
    raw = h @ params.weights[-1] + params.biases[-1]
    out = _activate(raw, params.heads)
    return (out[0] if squeeze else out), GradTape(inputs, raw)


def mlp_backward(params: MlpParams, tape: GradTape, dL_dout, input_grads: bool = False):
    """Reverse-mode gradients for one forward call.

    Returns ``grads`` aligned with ``params.arrays()``; with ``input_grads``
    also returns (d base_input, d injected).
    """
    if tape.consumed:
        raise RuntimeError("GradTape already consumed by a backward pass")
    tape.consumed = True
    g = np.atleast_2d(np.asarray(dL_dout, dtype=tape.raw.dtype)) * _activation_grad(tape.raw, params.heads)
    grads_w = [None] * (params.depth + 1)
    grads_b = [None] * (params.depth + 1)
    grads_w[-1] = tape.inputs[-1].T @ g
    ones = np.ones(g.shape[0], g.dtype)  # column sums as a GEMV, much faster than sum(axis=0)
    grads_b[-1] = ones @ g
    gh = g @ params.weights[-1].T
    d_base = d_inj = None
    for k in range(params.depth, 0, -1):
        # ReLU derivative: the post-activation output is positive exactly where the unit fired
        out_k = tape.inputs[k][:, :params.hidden]
        gp = np.multiply(gh, out_k > 0, out=gh)
        grads_w[k - 1] = tape.inputs[k - 1].T @ gp
        grads_b[k - 1] = ones @ gp
        if k == 1 and not input_grads:
            break
        gin = gp @ params.weights[k - 1].T
        if k == params.inject_at:
            split = gin.shape[1] - params.inject_width
            d_inj = gin[:, split:]
            gin = gin[:, :split]
        if k == 1:
            d_base = gin
        gh = gin
    tape.inputs.clear()
    grads = [a for pair in zip(grads_w, grads_b) for a in pair]
    if input_grads:
        return grads, d_base, d_inj
    return grads


# ---------------------------------------------------------------- Adam


@dataclass(eq=False)
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    skipped_steps: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: MlpParams, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    arrays = params.arrays()
    return AdamState([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays],
                     lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: MlpParams, grads, state: AdamState, lr: float | None = None):
    """Bias-corrected Adam update in place; non-finite gradients skip the step."""
    arrays = params.arrays()
    if len(grads) != len(arrays) or any(g.shape != a.shape for g, a in zip(grads, arrays)):
        raise ValueError("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped_steps += 1
        return params, state
    state.step += 1
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------- networks


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 8
    hidden: int = 256
    inject_at: int = 4
    pos_freqs: int = 10
    dir_freqs: int = 4
    light_code_dim: int = 18

    @property
    def pos_encoding(self) -> EncodingSpec:
        return EncodingSpec(self.pos_freqs)

    @property
    def dir_encoding(self) -> EncodingSpec:
        return EncodingSpec(self.dir_freqs)


MATERIAL_HEADS = (Head("gamma", 1, "softplus"), Head("eta", 3, "sigmoid"))
LIGHTFIELD_HEADS = (Head("sh", 12, "linear"),)


def init_material_net(rng: np.random.Generator, cfg: NetworkConfig = NetworkConfig(), dtype=np.float32) -> MlpParams:
    return init_mlp(rng, cfg.pos_encoding.width(), cfg.dir_encoding.width(), MATERIAL_HEADS,
                    cfg.depth, cfg.hidden, cfg.inject_at, dtype)


def init_lightfield_net(rng: np.random.Generator, cfg: NetworkConfig = NetworkConfig(), dtype=np.float32) -> MlpParams:
    return init_mlp(rng, cfg.pos_encoding.width(), cfg.dir_encoding.width() + cfg.light_code_dim,
                    LIGHTFIELD_HEADS, cfg.depth, cfg.hidden, cfg.inject_at, dtype)


@dataclass(frozen=True)
class MaterialSample:
    gamma: np.ndarray  # (...,) specular strength >= 0
    eta: np.ndarray  # (..., 3) skin scattering in (0, 1)


def material_net_eval(params: MlpParams, x, omega_o, cfg: NetworkConfig = NetworkConfig()) -> MaterialSample:
    """x in scene-box-normalised coordinates, omega_o a unit view direction."""
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    pos = freq_encode(x.reshape(-1, 3), cfg.pos_encoding)
    dirs = freq_encode(np.broadcast_to(np.asarray(omega_o, float), x.shape).reshape(-1, 3), cfg.dir_encoding)
    out, _ = mlp_forward(params, pos, dirs)
    out = out.astype(np.float64)
    return MaterialSample(out[:, 0].reshape(lead), out[:, 1:4].reshape(lead + (3,)))


def lightfield_net_eval(params: MlpParams, x, omega, light_code, cfg: NetworkConfig = NetworkConfig()) -> np.ndarray:
    """Local degree-1 SH coefficients (..., 12) in R(4) G(4) B(4) order."""
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    n = int(np.prod(lead)) if lead else 1
    pos = freq_encode(x.reshape(-1, 3), cfg.pos_encoding)
    dirs = freq_encode(np.broadcast_to(np.asarray(omega, float), x.shape).reshape(-1, 3), cfg.dir_encoding)
    code = np.broadcast_to(np.asarray(light_code, float).reshape(1, -1), (n, cfg.light_code_dim))
    out, _ = mlp_forward(params, pos, np.concatenate([dirs, code], axis=1))
    return out.astype(np.float64).reshape(lead + (12,))


# ---------------------------------------------------------------- checkpoints

MAGIC = b"LFLD"
FORMAT_VERSION = 1


def _blob(arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)


def _unblob(buf: memoryview, pos: int, shapes) -> tuple[list[np.ndarray], int]:
    out = []
    for shape in shapes:
        n = int(np.prod(shape)) * 4
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        out.append(np.frombuffer(buf[pos:pos + n], "<f4").reshape(shape).astype(np.float32))
        pos += n
    return out, pos


def _shapes(desc: dict) -> list[tuple[int, ...]]:
    p = MlpParams([], [], desc["in_width"], desc["inject_width"],
                  tuple(Head(*h) for h in desc["heads"]), desc["depth"], desc["hidden"], desc["inject_at"])
    dims = [p.layer_in_width(k) for k in range(1, p.depth + 1)] + [p.hidden]
    outs = [p.hidden] * p.depth + [p.out_width]
    return [s for i, o in zip(dims, outs) for s in ((i, o), (o,))]


def save_checkpoint(path, nets: dict[str, MlpParams], optimizers: dict[str, AdamState] | None = None,
                    meta: dict | None = None) -> None:
    """Versioned little-endian f32 checkpoint; optimizer moments are optional."""
    desc = {
        "networks": {name: nets[name].descriptor() for name in sorted(nets)},
        "optimizer": sorted(optimizers) if optimizers else [],
        "meta": meta or {},
    }
    head = json.dumps(desc, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head]
    for name in sorted(nets):
        parts.append(_blob(nets[name].arrays()))
    for name in desc["optimizer"]:
        st = optimizers[name]
        parts.append(struct.pack("<QQdddd", st.step, st.skipped_steps, st.lr, st.beta1, st.beta2, st.eps))
        parts.append(_blob(st.m))
        parts.append(_blob(st.v))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


@dataclass(eq=False)
class Checkpoint:
    nets: dict[str, MlpParams]
    optimizers: dict[str, AdamState] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def load_checkpoint(path, expected: dict[str, dict] | None = None) -> Checkpoint:
    """Restore a checkpoint; ``expected`` maps network name -> descriptor to verify."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    buf = memoryview(path.read_bytes())
    if bytes(buf[:4]) != MAGIC:
        raise CheckpointError("bad checkpoint header")
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint")
    version, n_head = struct.unpack("<II", buf[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} != {FORMAT_VERSION}")
    if 12 + n_head > len(buf):
        raise CheckpointError("truncated checkpoint")
    try:
        desc = json.loads(bytes(buf[12:12 + n_head]))
    except ValueError:
        raise CheckpointError("bad checkpoint header") from None
    if expected is not None:
        for name, want in expected.items():
            if desc["networks"].get(name) != want:
                raise CheckpointError(f"architecture mismatch for network {name!r}")
    pos = 12 + n_head
    nets = {}
    for name in sorted(desc["networks"]):
        d = desc["networks"][name]
        arrays, pos = _unblob(buf, pos, _shapes(d))
        nets[name] = MlpParams(arrays[0::2], arrays[1::2], d["in_width"], d["inject_width"],
                               tuple(Head(*h) for h in d["heads"]), d["depth"], d["hidden"], d["inject_at"])
    opts = {}
    for name in desc["optimizer"]:
        if pos + 48 > len(buf):
            raise CheckpointError("truncated checkpoint")
        step, skipped, lr, b1, b2, eps = struct.unpack("<QQdddd", buf[pos:pos + 48])
        pos += 48
        shapes = _shapes(desc["networks"][name])
        m, pos = _unblob(buf, pos, shapes)
        v, pos = _unblob(buf, pos, shapes)
        opts[name] = AdamState(m, v, step, skipped, lr, b1, b2, eps)
    if pos != len(buf):
        raise CheckpointError("trailing bytes in checkpoint")
    return Checkpoint(nets, opts, desc["meta"])
