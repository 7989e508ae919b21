"""Small neural Transducer with hand-written gradients.

Acoustic encoder: mean-pool downsampling, two residual tanh convolutions
(window 3, width E; the first block's skip path embeds the F input channels
into the first F of the E channels), optional single-head global
self-attention, linear projection.
Label encoder: embedding (the blank row doubles as start symbol) followed by
one tanh recurrent cell. Joiner: ``W_o tanh(W_e h_t + W_l g_u + b) + b_o``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CheckpointError, LossError, ModelError, WarmStartError

BLANK_ID = 0


@dataclass(frozen=True)
class ArchConfig:
    feature_dim: int = 16
    encoder_dim: int = 32
    label_dim: int = 16
    joiner_dim: int = 32
    vocab_size: int = 8  # labels, excluding blank
    downsample_factor: int = 2
    use_attention: bool = False

    def __post_init__(self) -> None:
        dims = (self.feature_dim, self.encoder_dim, self.label_dim, self.joiner_dim)
        if min(dims) < 1 or self.vocab_size < 1 or self.downsample_factor < 1:
            raise ModelError(f"invalid architecture {self}")
        if self.encoder_dim < self.feature_dim:
            raise ModelError("encoder_dim must be at least feature_dim for the residual skip path")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        F, E, H, J = self.feature_dim, self.encoder_dim, self.label_dim, self.joiner_dim
        V1 = self.vocab_size + 1
        return {
            "enc.conv1.w": (3, F, E),
            "enc.conv1.b": (E,),
            "enc.conv2.w": (3, E, E),
            "enc.conv2.b": (E,),
            "enc.att.wq": (E, E),
            "enc.att.wk": (E, E),
            "enc.att.wv": (E, E),
            "enc.out.w": (E, E),
            "enc.out.b": (E,),
            "lab.emb": (V1, H),
            "lab.wx": (H, H),
            "lab.wh": (H, H),
            "lab.b": (H,),
            "join.we": (E, J),
            "join.wl": (H, J),
            "join.b": (J,),
            "join.wo": (J, V1),
            "join.bo": (V1,),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ModelError(f"unknown architecture settings {unknown}")
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        if "use_attention" in known and isinstance(known["use_attention"], str):
            known["use_attention"] = known["use_attention"].lower() in ("1", "true", "yes")
        return cls(**{k: (v if k == "use_attention" else int(v)) for k, v in known.items()})


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name == "lab.emb":
        return 1  # lookup table, not a matrix product
    if name.endswith(".w") and len(shape) == 3:
        return shape[0] * shape[1]
    return shape[0]


def is_bias(name: str) -> bool:
    return name.endswith(".b") or name.endswith(".bo")


@dataclass
class Model:
    arch: ArchConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "Model":
        return Model(self.arch, {k: v.copy() for k, v in self.params.items()})

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def vector(self) -> np.ndarray:
        return flatten(self.params)

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())


def flatten(tree: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([tree[k].ravel() for k in tree])


def _init_params(arch: ArchConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in arch.shapes().items():
        if is_bias(name):
            out[name] = np.zeros(shape)
        else:
            s = 1.0 / math.sqrt(_fan_in(name, shape))
            out[name] = rng.uniform(-s, s, size=shape)
    return out


def init_model(arch: ArchConfig, seed: int) -> Model:
    return Model(arch, _init_params(arch, np.random.default_rng(seed)))


def zero_model(arch: ArchConfig) -> Model:
    return Model(arch, {k: np.zeros(s) for k, s in arch.shapes().items()})


# ---------------------------------------------------------------- forward


def downsample(features: np.ndarray, k: int) -> np.ndarray:
    """Mean over consecutive groups of ``k`` frames; the last group may be short."""
    T, F = features.shape
    Tp = -(-T // k)
    pad = Tp * k - T
    x = np.concatenate([features, np.zeros((pad, F), dtype=features.dtype)]) if pad else features
    sums = x.reshape(Tp, k, F).sum(axis=1)
    counts = np.full(Tp, k, dtype=features.dtype)
    counts[-1] = k - pad
    return sums / counts[:, None]


def _windows(h: np.ndarray) -> np.ndarray:
    z = np.zeros((1, h.shape[1]), dtype=h.dtype)
    hp = np.concatenate([z, h, z])
    return np.concatenate([hp[:-2], hp[1:-1], hp[2:]], axis=1)


def _skip(x: np.ndarray, width: int) -> np.ndarray:
    """Embed (or truncate) the channels of ``x`` into ``width`` channels."""
    out = np.zeros((x.shape[0], width), dtype=x.dtype)
    n = min(width, x.shape[1])
    out[:, :n] = x[:, :n]
    return out


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def encode_acoustics(model: Model, features: np.ndarray, cache: Optional[dict] = None) -> np.ndarray:
    p = model.params
    arch = model.arch
    features = np.asarray(features)
    features = features.astype(np.result_type(features, np.float64), copy=False)
    if features.ndim != 2 or features.shape[1] != arch.feature_dim:
        raise ModelError(f"features must be T x {arch.feature_dim}, got {features.shape}")
    if features.shape[0] < arch.downsample_factor:
        raise ModelError(f"need at least {arch.downsample_factor} frames, got {features.shape[0]}")
    F, E = arch.feature_dim, arch.encoder_dim
    x = downsample(features, arch.downsample_factor)
    h = _skip(x, E)
    for blk, width in (("conv1", F), ("conv2", E)):
        win = _windows(x if blk == "conv1" else h)
        act = np.tanh(win @ p[f"enc.{blk}.w"].reshape(3 * width, E) + p[f"enc.{blk}.b"])
        if cache is not None:
            cache[blk] = (win, act)
        h = h + act
    if arch.use_attention:
        q = h @ p["enc.att.wq"]
        k = h @ p["enc.att.wk"]
        v = h @ p["enc.att.wv"]
        att = _softmax_rows(q @ k.T / math.sqrt(E))
        if cache is not None:
            cache["att"] = (h, q, k, v, att)
        h = h + att @ v
    if cache is not None:
        cache["enc_in"] = h
    return h @ p["enc.out.w"] + p["enc.out.b"]


def encode_labels(model: Model, labels: Sequence[int]) -> np.ndarray:
    """Label-encoder states for prefixes [start], [start, y1], ... -> (U+1) x H."""
    p = model.params
    ys = np.concatenate([[BLANK_ID], np.asarray(labels, dtype=np.int64)])
    inp = p["lab.emb"][ys] @ p["lab.wx"] + p["lab.b"]
    wh = p["lab.wh"]
    g = np.empty((len(ys), model.arch.label_dim), dtype=inp.dtype)
    prev = np.zeros(model.arch.label_dim, dtype=inp.dtype)
    for u in range(len(ys)):
        prev = np.tanh(inp[u] + prev @ wh)
        g[u] = prev
    return g


def label_step(model: Model, state: np.ndarray, token: int) -> np.ndarray:
    p = model.params
    return np.tanh(p["lab.emb"][token] @ p["lab.wx"] + p["lab.b"] + state @ p["lab.wh"])


def label_start(model: Model) -> np.ndarray:
    return label_step(model, np.zeros(model.arch.label_dim), BLANK_ID)


def _check_labels(model: Model, labels: Sequence[int]) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 1 or y.max() > model.arch.vocab_size):
        raise ModelError(f"labels must lie in [1, {model.arch.vocab_size}] (blank excluded)")
    return y


def forward(model: Model, features: np.ndarray, labels: Sequence[int], cache: Optional[dict] = None) -> np.ndarray:
    """Logit lattice of shape T' x (U+1) x (V+1); index 0 on the last axis is blank."""
    y = _check_labels(model, labels)
    p = model.params
    enc = encode_acoustics(model, features, cache)
    g = encode_labels(model, y)
    a = enc @ p["join.we"]
    b = g @ p["join.wl"] + p["join.b"]
    hid = np.tanh(a[:, None, :] + b[None, :, :])
    z = hid @ p["join.wo"] + p["join.bo"]
    if cache is not None:
        cache.update(enc=enc, g=g, hid=hid, labels=y)
    return z


# ------------------------------------------------------------------- loss


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def _forward_variables(blank: np.ndarray, emit: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Log-space alpha and beta over the (T', U+1) lattice.

    Within one time row both recursions are first-order linear recurrences
    along u, solved with a running log-sum-exp after removing the cumulative
    emission score.
    """
    Tp, U1 = blank.shape
    alpha = np.empty((Tp, U1))
    beta = np.empty((Tp, U1))
    cum = np.zeros((Tp, U1))
    np.cumsum(emit, axis=1, out=cum[:, 1:])
    with np.errstate(invalid="ignore"):
        for t in range(Tp):
            c = cum[t]
            if t == 0:
                arrive = np.full(U1, -np.inf)
                arrive[0] = 0.0
            else:
                arrive = alpha[t - 1] + blank[t - 1]
            alpha[t] = c + np.logaddexp.accumulate(arrive - c)
        for t in range(Tp - 1, -1, -1):
            c = cum[t]
            if t == Tp - 1:
                leave = np.full(U1, -np.inf)
                leave[-1] = blank[t, -1]
            else:
                leave = beta[t + 1] + blank[t]
            beta[t] = np.logaddexp.accumulate((leave + c)[::-1])[::-1] - c
    return alpha, beta


def lattice_scores(lattice: np.ndarray, labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(log-softmax, blank scores T'x(U+1), emission scores T'xU)."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    Tp, U1, _ = lattice.shape
    if Tp == 0:
        raise LossError("lattice has no frames")
    if U1 != len(y) + 1:
        raise LossError(f"lattice has U+1={U1} but {len(y)} labels were given")
    logp = log_softmax(lattice)
    blank = logp[:, :, BLANK_ID]
    emit = logp[:, np.arange(len(y)), y] if len(y) else np.zeros((Tp, 0))
    return logp, blank, emit


def transducer_loss(lattice: np.ndarray, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``labels`` and its gradient w.r.t. the logits."""
    lattice = np.asarray(lattice, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    logp, blank, emit = lattice_scores(lattice, y)
    Tp, U1, _ = lattice.shape
    alpha, beta = _forward_variables(blank, emit)
    nll = -(alpha[-1, -1] + blank[-1, -1])

    grad = np.exp(logp) * np.exp(alpha + beta + nll)[:, :, None]
    blank_occ = np.zeros((Tp, U1))
    blank_occ[:-1] = np.exp(alpha[:-1] + blank[:-1] + beta[1:] + nll)
    blank_occ[-1, -1] = np.exp(alpha[-1, -1] + blank[-1, -1] + nll)
    grad[:, :, BLANK_ID] -= blank_occ
    if len(y):
        emit_occ = np.exp(alpha[:, :-1] + emit + beta[:, 1:] + nll)
        grad[:, np.arange(len(y)), y] -= emit_occ
    return float(nll), grad


# --------------------------------------------------------------- backward


def backward(
    model: Model,
    features: np.ndarray,
    labels: Sequence[int],
    lattice_grad: np.ndarray,
    cache: Optional[dict] = None,
) -> dict[str, np.ndarray]:
    """Exact gradient of a lattice-level objective w.r.t. every parameter.

    ``lattice_grad`` is d(objective)/d(logits); pass the ``cache`` filled by
    :func:`forward` to skip recomputation.
    """
    if cache is None:
        cache = {}
        forward(model, features, labels, cache)
    p = model.params
    arch = model.arch
    F = arch.feature_dim
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dz = np.asarray(lattice_grad, dtype=np.float64)
    enc, g, hid, y = cache["enc"], cache["g"], cache["hid"], cache["labels"]
    J = arch.joiner_dim
    V1 = arch.vocab_size + 1

    # joiner
    grads["join.wo"] = hid.reshape(-1, J).T @ dz.reshape(-1, V1)
    grads["join.bo"] = dz.sum(axis=(0, 1))
    dpre = (dz @ p["join.wo"].T) * (1.0 - hid * hid)
    da = dpre.sum(axis=1)
    db = dpre.sum(axis=0)
    grads["join.b"] = db.sum(axis=0)
    grads["join.we"] = enc.T @ da
    grads["join.wl"] = g.T @ db
    denc = da @ p["join.we"].T
    dg = db @ p["join.wl"].T

    # label encoder, backprop through time
    ys = np.concatenate([[BLANK_ID], y])
    emb = p["lab.emb"]
    dinp = np.empty_like(g)
    carry = np.zeros(arch.label_dim)
    for u in range(len(ys) - 1, -1, -1):
        d = (dg[u] + carry) * (1.0 - g[u] * g[u])
        dinp[u] = d
        carry = d @ p["lab.wh"].T
    if len(ys) > 1:
        grads["lab.wh"] = g[:-1].T @ dinp[1:]
    grads["lab.b"] = dinp.sum(axis=0)
    x = emb[ys]
    grads["lab.wx"] = x.T @ dinp
    np.add.at(grads["lab.emb"], ys, dinp @ p["lab.wx"].T)

    # acoustic encoder
    h = cache["enc_in"]
    grads["enc.out.w"] = h.T @ denc
    grads["enc.out.b"] = denc.sum(axis=0)
    dh = denc @ p["enc.out.w"].T
    E = arch.encoder_dim
    if arch.use_attention:
        hin, q, k, v, att = cache["att"]
        datt = dh @ v.T
        dv = att.T @ dh
        ds = att * (datt - (datt * att).sum(axis=1, keepdims=True)) / math.sqrt(E)
        dq = ds @ k
        dk = ds.T @ q
        grads["enc.att.wq"] = hin.T @ dq
        grads["enc.att.wk"] = hin.T @ dk
        grads["enc.att.wv"] = hin.T @ dv
        dh = dh + dq @ p["enc.att.wq"].T + dk @ p["enc.att.wk"].T + dv @ p["enc.att.wv"].T
    win, act = cache["conv2"]
    dact = dh * (1.0 - act * act)
    grads["enc.conv2.w"] = (win.T @ dact).reshape(3, E, E)
    grads["enc.conv2.b"] = dact.sum(axis=0)
    dwin = dact @ p["enc.conv2.w"].reshape(3 * E, E).T
    dh = dh + dwin[:, E : 2 * E]
    dh[1:] += dwin[:-1, 2 * E :]
    dh[:-1] += dwin[1:, :E]
    # conv1 reads the downsampled features, which carry no parameters
    win, act = cache["conv1"]
    dact = dh * (1.0 - act * act)
    grads["enc.conv1.w"] = (win.T @ dact).reshape(3, F, E)
    grads["enc.conv1.b"] = dact.sum(axis=0)
    return grads


def loss_and_grad(model: Model, features: np.ndarray, labels: Sequence[int]) -> tuple[float, dict[str, np.ndarray]]:
    cache: dict = {}
    z = forward(model, features, labels, cache)
    nll, dz = transducer_loss(z, cache["labels"])
    return nll, backward(model, features, labels, dz, cache)


# ------------------------------------------------------------- warm start


def warm_start(prior: Model, new_vocab_size: int, mode: str, seed: int = 0) -> Model:
    """Initialise a new stage from ``prior``.

    ``full`` copies everything (vocabulary must match); ``encoder_only``
    keeps the acoustic encoder and draws a fresh label encoder and joiner
    sized for ``new_vocab_size``.
    """
    if mode == "full":
        if new_vocab_size != prior.arch.vocab_size:
            raise WarmStartError(
                f"full warm start needs vocab size {prior.arch.vocab_size}, got {new_vocab_size}"
            )
        return prior.copy()
    if mode != "encoder_only":
        raise WarmStartError(f"unknown warm-start mode {mode!r}")
    arch = ArchConfig(**{**asdict(prior.arch), "vocab_size": int(new_vocab_size)})
    # the new sub-networks are exactly those of init_model(arch, seed)
    params = init_model(arch, seed).params
    params.update({k: v.copy() for k, v in prior.group("enc.").items()})
    return Model(arch, params)


# ------------------------------------------------------------- checkpoints

MAGIC = b"TDCKPT1"
_ARCH = struct.Struct("<7I")


def _crc64_table() -> list[int]:
    poly = 0xC96C5795D7870F42  # CRC-64/XZ, reflected
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC_TABLE = _crc64_table()


def crc64(data: bytes) -> int:
    crc = 0xFFFFFFFFFFFFFFFF
    table = _CRC_TABLE
    for byte in data:
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


def dumps_checkpoint(model: Model) -> bytes:
    a = model.arch
    parts = [
        _ARCH.pack(
            a.feature_dim, a.encoder_dim, a.label_dim, a.joiner_dim,
            a.vocab_size, a.downsample_factor, int(a.use_attention),
        ),
        struct.pack("<I", len(model.params)),
    ]
    for name, value in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<Q", value.size))
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    payload = b"".join(parts)
    return MAGIC + payload + struct.pack("<Q", crc64(payload))


def loads_checkpoint(data: bytes) -> Model:
    if not data.startswith(MAGIC) or len(data) < len(MAGIC) + _ARCH.size + 12:
        raise CheckpointError("not a transducer checkpoint")
    payload = data[len(MAGIC) : -8]
    (stored,) = struct.unpack("<Q", data[-8:])
    if crc64(payload) != stored:
        raise CheckpointError("checkpoint CRC mismatch")
    f, e, h, j, v, k, att = _ARCH.unpack_from(payload)
    arch = ArchConfig(f, e, h, j, v, k, bool(att))
    shapes = arch.shapes()
    off = _ARCH.size
    (count,) = struct.unpack_from("<I", payload, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", payload, off)
        off += 4
        name = payload[off : off + nlen].decode("utf-8")
        off += nlen
        (n,) = struct.unpack_from("<Q", payload, off)
        off += 8
        if name not in shapes or math.prod(shapes[name]) != n:
            raise CheckpointError(f"unexpected parameter block {name} ({n} values)")
        params[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(shapes[name]).copy()
        off += 8 * n
    if set(params) != set(shapes):
        raise CheckpointError("checkpoint is missing parameter blocks")
    return Model(arch, {k: params[k] for k in shapes})


def save_checkpoint(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(dumps_checkpoint(model))


def load_checkpoint(path: str | Path) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads_checkpoint(data)


def params_equal(a: Model, b: Model, prefix: str = "") -> bool:
    keys_a = [k for k in a.params if k.startswith(prefix)]
    keys_b = [k for k in b.params if k.startswith(prefix)]
    if keys_a != keys_b:
        return False
    return all(
        a.params[k].shape == b.params[k].shape and np.array_equal(a.params[k], b.params[k])
        for k in keys_a
    )


