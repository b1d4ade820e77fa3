"""Small feedforward autoregressive LM with analytic backpropagation.

The network is embed -> concat -> affine -> ReLU -> (optional layer norm)
-> affine -> softmax. Besides next-token probabilities it exposes a menu of
intermediate states ("key taps") usable as fixed-length context
representations for retrieval. Training is Adam on cross-entropy, fully
deterministic in the config seed. A double-precision path exists for
gradient checking; training and inference run in float32.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace

import numpy as np

from .corpus import TokenSequence, WindowSpec, windows_matrix
from .util import FileFormatError, NnlmError, TrainingDivergedError, short_hash

_MODEL_MAGIC = b"NLMM"
_MODEL_VERSION = 1
_LN_EPS = 1e-5


class KeyTap(enum.Enum):
    """Which intermediate state serves as the context representation."""

    HIDDEN_PRE_ACTIVATION = "hidden_pre_activation"
    HIDDEN_POST_ACTIVATION = "hidden_post_activation"
    HIDDEN_POST_LAYER_NORM = "hidden_post_layer_norm"
    OUTPUT_LOGITS_INPUT = "output_logits_input"


DEFAULT_TAP = KeyTap.HIDDEN_POST_LAYER_NORM


@dataclass(frozen=True)
class LmConfig:
    context_len: int
    embed_dim: int
    hidden_dim: int
    vocab_size: int
    dropout_rate: float = 0.0
    use_layer_norm: bool = True
    seed: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if min(self.context_len, self.embed_dim, self.hidden_dim, self.vocab_size) < 1:
            raise NnlmError("all model dimensions must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise NnlmError("dropout_rate must be in [0, 1)")


_PARAM_ORDER = ("embed", "w1", "b1", "ln_g", "ln_b", "w2", "b2")


class FfLmModel:
    def __init__(self, config: LmConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @property
    def key_dim(self) -> int:
        return self.config.hidden_dim

    def param_names(self) -> tuple[str, ...]:
        skip = () if self.config.use_layer_norm else ("ln_g", "ln_b")
        return tuple(n for n in _PARAM_ORDER if n not in skip)

    def astype(self, dtype) -> "FfLmModel":
        return FfLmModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def serialize(self) -> bytes:
        c = self.config
        head = struct.pack(
            "<4sIIIIIdBQdIIddd",
            _MODEL_MAGIC,
            _MODEL_VERSION,
            c.context_len,
            c.embed_dim,
            c.hidden_dim,
            c.vocab_size,
            c.dropout_rate,
            c.use_layer_norm,
            c.seed,
            c.learning_rate,
            c.batch_size,
            c.epochs,
            c.adam_beta1,
            c.adam_beta2,
            c.adam_eps,
        )
        body = b"".join(self.params[n].astype("<f4").tobytes() for n in self.param_names())
        return head + body

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.serialize())

    @classmethod
    def load(cls, path) -> "FfLmModel":
        fmt = "<4sIIIIIdBQdIIddd"
        with open(path, "rb") as f:
            head = f.read(struct.calcsize(fmt))
            if len(head) != struct.calcsize(fmt):
                raise FileFormatError(f"{path}: truncated model header")
            (magic, version, n, e, d, v, dropout, use_ln, seed, lr, bs, epochs, b1, b2, eps) = struct.unpack(fmt, head)
            if magic != _MODEL_MAGIC:
                raise FileFormatError(f"{path}: bad magic {magic!r}")
            if version != _MODEL_VERSION:
                raise FileFormatError(f"{path}: unsupported model version {version}")
            config = LmConfig(
                context_len=n, embed_dim=e, hidden_dim=d, vocab_size=v,
                dropout_rate=dropout, use_layer_norm=bool(use_ln), seed=seed,
                learning_rate=lr, batch_size=bs, epochs=epochs,
                adam_beta1=b1, adam_beta2=b2, adam_eps=eps,
            )
            model = init_model(config)  # shapes only; overwritten below
            params = {}
            for name in model.param_names():
                shape = model.params[name].shape
                count = int(np.prod(shape))
                buf = f.read(4 * count)
                if len(buf) != 4 * count:
                    raise FileFormatError(f"{path}: truncated tensor {name}")
                params[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        return cls(config, params)

    def content_hash(self) -> int:
        return short_hash(self.serialize())


def init_model(config: LmConfig) -> FfLmModel:
    """Scaled-uniform init (+-1/sqrt(fan_in)), zero biases, unit LN gain."""
    rng = np.random.default_rng(config.seed)
    n, e, d, v = config.context_len, config.embed_dim, config.hidden_dim, config.vocab_size

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    params = {
        "embed": uniform((v, e), e),
        "w1": uniform((n * e, d), n * e),
        "b1": np.zeros(d, dtype=np.float32),
        "w2": uniform((d, v), d),
        "b2": np.zeros(v, dtype=np.float32),
    }
    if config.use_layer_norm:
        params["ln_g"] = np.ones(d, dtype=np.float32)
        params["ln_b"] = np.zeros(d, dtype=np.float32)
    return FfLmModel(config, params)


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, xhat, inv


def _forward_cache(model: FfLmModel, ctx: np.ndarray, train_mode: bool, rng: np.random.Generator | None):
    """Run the network on a (B, n) batch, keeping every intermediate."""
    p = model.params
    cfg = model.config
    if ctx.ndim != 2 or ctx.shape[1] != cfg.context_len:
        raise NnlmError(f"context batch must be (B, {cfg.context_len})")
    if int(ctx.max(initial=0)) >= cfg.vocab_size:
        raise NnlmError("token id out of vocabulary range")
    dtype = p["w1"].dtype
    flat = p["embed"][ctx].reshape(ctx.shape[0], -1)
    pre = flat @ p["w1"] + p["b1"]
    post = np.maximum(pre, 0.0)
    if train_mode and cfg.dropout_rate > 0.0:
        if rng is None:
            raise NnlmError("train-mode forward with dropout needs an rng")
        mask = (rng.random(post.shape) >= cfg.dropout_rate).astype(dtype) / dtype.type(1.0 - cfg.dropout_rate)
        dropped = post * mask
    else:
        mask = None
        dropped = post
    if cfg.use_layer_norm:
        normed, xhat, inv = _layer_norm(dropped, p["ln_g"], p["ln_b"])
    else:
        normed, xhat, inv = dropped, None, None
    logits = normed @ p["w2"] + p["b2"]
    return {
        "ctx": ctx, "flat": flat, "pre": pre, "post": post, "mask": mask,
        "dropped": dropped, "normed": normed, "xhat": xhat, "inv": inv, "logits": logits,
    }


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z -= z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def _tap_vectors(model: FfLmModel, cache: dict) -> dict[KeyTap, np.ndarray]:
    taps = {
        KeyTap.HIDDEN_PRE_ACTIVATION: cache["pre"],
        KeyTap.HIDDEN_POST_ACTIVATION: cache["post"],
        KeyTap.OUTPUT_LOGITS_INPUT: cache["normed"],
    }
    if model.config.use_layer_norm:
        taps[KeyTap.HIDDEN_POST_LAYER_NORM] = cache["normed"]
    return taps


def forward(
    model: FfLmModel,
    context: np.ndarray | list[int],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[dict[KeyTap, np.ndarray], np.ndarray]:
    """Single-context forward pass.

    Returns the tap vectors and the float64 next-token distribution
    (softmax with max subtraction; sums to 1 within 1e-6).
    """
    ctx = np.asarray(context, dtype=np.int64).reshape(1, -1)
    cache = _forward_cache(model, ctx, train_mode, rng)
    probs = _softmax64(cache["logits"])[0]
    taps = {tap: vec[0].copy() for tap, vec in _tap_vectors(model, cache).items()}
    return taps, probs


def extract_key(model: FfLmModel, context: np.ndarray | list[int], tap: KeyTap = DEFAULT_TAP) -> np.ndarray:
    """Inference-mode context representation for one window."""
    if tap is KeyTap.HIDDEN_POST_LAYER_NORM and not model.config.use_layer_norm:
        raise NnlmError("layer-norm tap requested but the model has no layer norm")
    taps, _ = forward(model, context, train_mode=False)
    return taps[tap]


def extract_keys_batch(model: FfLmModel, ctx: np.ndarray, tap: KeyTap = DEFAULT_TAP, chunk: int = 8192) -> np.ndarray:
    """Vectorized :func:`extract_key` over a (N, n) context matrix."""
    if tap is KeyTap.HIDDEN_POST_LAYER_NORM and not model.config.use_layer_norm:
        raise NnlmError("layer-norm tap requested but the model has no layer norm")
    out = np.empty((ctx.shape[0], model.key_dim), dtype=np.float32)
    for lo in range(0, ctx.shape[0], chunk):
        cache = _forward_cache(model, ctx[lo: lo + chunk], train_mode=False, rng=None)
        out[lo: lo + chunk] = _tap_vectors(model, cache)[tap]
    return out


def target_logp_batch(model: FfLmModel, ctx: np.ndarray, targets: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """float64 log p(target | context) for every row, inference mode."""
    out = np.empty(ctx.shape[0], dtype=np.float64)
    for lo in range(0, ctx.shape[0], chunk):
        cache = _forward_cache(model, ctx[lo: lo + chunk], train_mode=False, rng=None)
        probs = _softmax64(cache["logits"])
        out[lo: lo + chunk] = np.log(probs[np.arange(probs.shape[0]), targets[lo: lo + chunk]])
    return out


def _loss_and_grads(model: FfLmModel, ctx: np.ndarray, targets: np.ndarray, train_mode: bool, rng):
    """Mean cross-entropy over the batch and gradients for every parameter."""
    p = model.params
    cfg = model.config
    cache = _forward_cache(model, ctx, train_mode, rng)
    dtype = p["w1"].dtype
    B = ctx.shape[0]

    logits = cache["logits"]
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=-1, keepdims=True)
    tgt_p = probs[np.arange(B), targets]
    loss = float(-np.log(np.maximum(tgt_p, np.finfo(np.float64).tiny)).mean())

    dlogits = probs.copy()
    dlogits[np.arange(B), targets] -= 1.0
    dlogits /= dtype.type(B)

    grads: dict[str, np.ndarray] = {}
    grads["w2"] = cache["normed"].T @ dlogits
    grads["b2"] = dlogits.sum(axis=0)
    dnormed = dlogits @ p["w2"].T

    if cfg.use_layer_norm:
        xhat, inv = cache["xhat"], cache["inv"]
        grads["ln_g"] = (dnormed * xhat).sum(axis=0)
        grads["ln_b"] = dnormed.sum(axis=0)
        dxhat = dnormed * p["ln_g"]
        ddropped = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
    else:
        ddropped = dnormed

    dpost = ddropped if cache["mask"] is None else ddropped * cache["mask"]
    dpre = dpost * (cache["pre"] > 0)
    grads["w1"] = cache["flat"].T @ dpre
    grads["b1"] = dpre.sum(axis=0)
    dflat = dpre @ p["w1"].T

    dembed = np.zeros_like(p["embed"])
    np.add.at(dembed, ctx.reshape(-1), dflat.reshape(B * cfg.context_len, cfg.embed_dim))
    grads["embed"] = dembed
    return loss, grads


def train(
    model: FfLmModel,
    seq: TokenSequence,
    spec: WindowSpec | None = None,
    config: LmConfig | None = None,
) -> tuple[FfLmModel, list[float]]:
    """Adam on cross-entropy over shuffled windows; returns per-epoch mean NLL.

    Deterministic in the config seed: shuffling and dropout masks come from
    one generator, and batch boundaries are fixed by batch_size.
    """
    cfg = config or model.config
    spec = spec or WindowSpec(cfg.context_len)
    if spec.context_len != cfg.context_len:
        raise NnlmError("window width does not match model context_len")
    ctx_all, tgt_all = windows_matrix(seq, spec)
    n_windows = ctx_all.shape[0]
    if n_windows == 0:
        raise NnlmError("empty sequence")

    rng = np.random.default_rng(cfg.seed + 1)
    mstate = {k: np.zeros_like(v) for k, v in model.params.items()}
    vstate = {k: np.zeros_like(v) for k, v in model.params.items()}
    step = 0
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    loss_curve: list[float] = []

    for epoch in range(cfg.epochs):
        order = rng.permutation(n_windows)
        epoch_nll = 0.0
        for lo in range(0, n_windows, cfg.batch_size):
            batch = order[lo: lo + cfg.batch_size]
            loss, grads = _loss_and_grads(model, ctx_all[batch], tgt_all[batch], train_mode=True, rng=rng)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, windows {lo}..{lo + len(batch)}")
            epoch_nll += loss * len(batch)
            step += 1
            lr_t = cfg.learning_rate * np.sqrt(1.0 - b2**step) / (1.0 - b1**step)
            for name, g in grads.items():
                mstate[name] = b1 * mstate[name] + (1.0 - b1) * g
                vstate[name] = b2 * vstate[name] + (1.0 - b2) * g * g
                model.params[name] -= (lr_t * mstate[name] / (np.sqrt(vstate[name]) + eps)).astype(
                    model.params[name].dtype
                )
        loss_curve.append(epoch_nll / n_windows)
    return model, loss_curve


def mean_nll(model: FfLmModel, seq: TokenSequence, spec: WindowSpec | None = None) -> float:
    """Average -ln p(target|context) over every window, inference mode."""
    spec = spec or WindowSpec(model.config.context_len)
    ctx, tgt = windows_matrix(seq, spec)
    if ctx.shape[0] == 0:
        raise NnlmError("empty sequence")
    return float(-target_logp_batch(model, ctx, tgt).mean())


def grad_check(
    model: FfLmModel,
    ctx: np.ndarray,
    targets: np.ndarray,
    epsilon: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs on a float64 copy of the model with dropout disabled; samples at
    least ``n_coords`` parameter coordinates spread across all tensors.
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise NnlmError("epsilon must be within [1e-6, 1e-4]")
    m64 = model.astype(np.float64)
    _, grads = _loss_and_grads(m64, ctx, targets, train_mode=False, rng=None)

    def loss_of() -> float:
        loss, _ = _loss_and_grads(m64, ctx, targets, train_mode=False, rng=None)
        return loss

    rng = np.random.default_rng(seed)
    names = list(m64.param_names())
    sizes = np.array([m64.params[n].size for n in names], dtype=np.float64)
    worst = 0.0
    for _ in range(n_coords):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat_idx = int(rng.integers(m64.params[name].size))
        flat = m64.params[name].reshape(-1)
        orig = flat[flat_idx]
        flat[flat_idx] = orig + epsilon
        up = loss_of()
        flat[flat_idx] = orig - epsilon
        down = loss_of()
        flat[flat_idx] = orig
        g_fd = (up - down) / (2.0 * epsilon)
        g_an = grads[name].reshape(-1)[flat_idx]
        rel = abs(g_an - g_fd) / max(abs(g_an) + abs(g_fd), 1e-8)
        worst = max(worst, rel)
    return worst
