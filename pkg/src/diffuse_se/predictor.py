"""Noise predictor: a non-autoregressive stack of gated residual layers with
bidirectional dilated convolutions, a step embedding and a conditioner
encoder. Forward and backward passes are written out by hand in numpy.

Activations are laid out (batch, time, channels). The compute dtype follows
the parameter dtype, so the same code runs in float32 for training and in
float64 for gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict, replace
import math

import numpy as np

from .schedule import NoiseSchedule

LEAK = 0.4
INV_SQRT2 = 1.0 / math.sqrt(2.0)


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class PredictorConfig:
    n_layers: int = 30
    n_blocks: int = 3
    residual_channels: int = 63
    kernel_size: int = 3
    conditioner_dim: int = 80
    cond_channels: int = 80
    step_embedding_dim: int = 128
    step_hidden: int = 512
    hop: int = 256
    upsample_strides: tuple = (16, 16)

    def __post_init__(self):
        object.__setattr__(self, "upsample_strides", tuple(int(s) for s in self.upsample_strides))
        if min(self.n_layers, self.n_blocks, self.residual_channels, self.conditioner_dim,
               self.cond_channels, self.step_hidden) < 1:
            raise ValueError("sizes must be positive")
        if self.n_layers % self.n_blocks:
            raise ValueError("n_layers must be divisible by n_blocks")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.step_embedding_dim % 2 or self.step_embedding_dim < 4:
            raise ValueError("step_embedding_dim must be even and >= 4")
        if math.prod(self.upsample_strides) != self.hop:
            raise ValueError("upsample strides must multiply to the hop size")
        if any(s % 2 for s in self.upsample_strides):
            raise ValueError("upsample strides must be even")

    @property
    def dilations(self) -> list[int]:
        n = self.n_layers // self.n_blocks
        return [2 ** (i % n) for i in range(self.n_layers)]

    @property
    def receptive_field(self) -> int:
        """Half-width (in samples) of the waveform window each output sees."""
        return (self.kernel_size // 2) * sum(self.dilations)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["upsample_strides"] = list(self.upsample_strides)
        return d

    @classmethod
    def from_dict(cls, d) -> "PredictorConfig":
        return cls(**d)


COND_PREFIX = "cond_encoder."


class PredictorParams:
    """Named learnable tensors plus the config that shaped them."""

    def __init__(self, config: PredictorConfig, tensors: dict):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, k):
        return self.tensors[k]

    def names(self):
        return list(self.tensors)

    def conditioner_encoder_names(self):
        return [k for k in self.tensors if k.startswith(COND_PREFIX)]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype) -> "PredictorParams":
        return PredictorParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "PredictorParams":
        return PredictorParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())


def _shapes(cfg: PredictorConfig) -> dict:
    C, K, H, E = cfg.residual_channels, cfg.kernel_size, cfg.step_hidden, cfg.step_embedding_dim
    Cc = cfg.cond_channels
    shapes = {
        "input.w": (C,), "input.b": (C,),
        "step.fc1.w": (E, H), "step.fc1.b": (H,),
        "step.fc2.w": (H, H), "step.fc2.b": (H,),
        COND_PREFIX + "proj.w": (cfg.conditioner_dim, Cc), COND_PREFIX + "proj.b": (Cc,),
    }
    for j, s in enumerate(cfg.upsample_strides):
        shapes[f"{COND_PREFIX}up{j}.w"] = (Cc, 2 * s * Cc)
        shapes[f"{COND_PREFIX}up{j}.b"] = (Cc,)
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        shapes.update({
            p + "step.w": (H, C), p + "step.b": (C,),
            p + "conv.w": (K * C, 2 * C), p + "conv.b": (2 * C,),
            p + "cond.w": (Cc, 2 * C), p + "cond.b": (2 * C,),
            p + "out.w": (C, 2 * C), p + "out.b": (2 * C,),
        })
    shapes.update({"skip.w": (C, C), "skip.b": (C,), "head.w": (C,), "head.b": ()})
    return shapes


def _fan_in(name, shape, cfg):
    if name.endswith(".b"):
        return None
    if name == "input.w":
        return 1
    if ".up" in name:
        return 2 * cfg.cond_channels  # each output sample sums two taps per input channel
    return shape[0]


def _init_tensor(name, shape, cfg, rng, dtype):
    if name.startswith("head."):
        return np.zeros(shape, dtype=dtype)
    fan = _fan_in(name, shape, cfg)
    if fan is None:
        return np.zeros(shape, dtype=dtype)
    # He-normal for layers feeding a rectifier, Glorot-ish otherwise
    gain = 2.0 if name in ("input.w", "skip.w") or name.startswith(COND_PREFIX) else 1.0
    return (rng.standard_normal(shape) * math.sqrt(gain / fan)).astype(dtype)


def init_params(config: PredictorConfig, rng: np.random.Generator,
                dtype=np.float32) -> PredictorParams:
    """Random initialisation with a zero output head (untrained net predicts 0)."""
    return PredictorParams(config, {n: _init_tensor(n, s, config, rng, dtype)
                                    for n, s in _shapes(config).items()})


def reset_conditioner_encoder(params: PredictorParams, new_dim: int,
                              rng: np.random.Generator) -> PredictorParams:
    """Re-initialise the conditioner encoder for ``new_dim`` input features.

    Every other tensor is carried over unchanged (same array values).
    """
    cfg = replace(params.config, conditioner_dim=int(new_dim))
    shapes = _shapes(cfg)
    out = {}
    for n, v in params.tensors.items():
        if n.startswith(COND_PREFIX):
            out[n] = _init_tensor(n, shapes[n], cfg, rng, v.dtype)
        else:
            out[n] = v.copy()
    return PredictorParams(cfg, out)


# ------------------------------------------------------------- primitives

def step_sinusoid(t, dim: int) -> np.ndarray:
    """Fixed sinusoidal encoding of (possibly fractional) step positions."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = 10.0 ** (np.arange(half) * 4.0 / (half - 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu_fwd(x):
    s = _sigmoid(x)
    return x * s, s


def _silu_bwd(x, s, g):
    return g * (s * (1.0 + x * (1.0 - s)))


def _lrelu(x):
    return np.where(x > 0, x, LEAK * x)


def _lrelu_bwd(x, g):
    return np.where(x > 0, g, LEAK * g)


def _upsample_fwd(u, w, b, s):
    B, F, Ci = u.shape
    Co = b.shape[0]
    z = (u @ w).reshape(B, F, 2, s, Co)
    full = np.zeros((B, (F + 1) * s, Co), dtype=u.dtype)
    full[:, :F * s] += z[:, :, 0].reshape(B, F * s, Co)
    full[:, s:] += z[:, :, 1].reshape(B, F * s, Co)
    h = s // 2
    return full[:, h:h + F * s] + b


def _upsample_bwd(u, w, s, g):
    B, F, Ci = u.shape
    Co = g.shape[-1]
    h = s // 2
    gfull = np.zeros((B, (F + 1) * s, Co), dtype=g.dtype)
    gfull[:, h:h + F * s] = g
    gz = np.empty((B, F, 2, s, Co), dtype=g.dtype)
    gz[:, :, 0] = gfull[:, :F * s].reshape(B, F, s, Co)
    gz[:, :, 1] = gfull[:, s:].reshape(B, F, s, Co)
    gz = gz.reshape(B, F, 2 * s * Co)
    gw = np.einsum("bfi,bfj->ij", u, gz, optimize=True)
    gu = gz @ w.T
    gb = g.sum(axis=(0, 1))
    return gu, gw, gb


def _taps(y, K, d, extra=None):
    """Shifted copies of ``y`` for a dilated conv, optionally followed by ``extra`` channels."""
    B, L, C = y.shape
    E = 0 if extra is None else extra.shape[-1]
    out = np.zeros((B, L, K * C + E), dtype=y.dtype)
    for k in range(K):
        o = (k - K // 2) * d
        if o >= L or -o >= L:
            continue
        sl = slice(k * C, (k + 1) * C)
        if o >= 0:
            out[:, :L - o, sl] = y[:, o:]
        else:
            out[:, -o:, sl] = y[:, :L + o]
    if E:
        out[..., K * C:] = extra
    return out


def _taps_bwd(g, K, d, C):
    B, L, _ = g.shape
    out = np.zeros((B, L, C), dtype=g.dtype)
    for k in range(K):
        o = (k - K // 2) * d
        if o >= L or -o >= L:
            continue
        gk = g[..., k * C:(k + 1) * C]
        if o >= 0:
            out[:, o:] += gk[:, :L - o]
        else:
            out[:, :L + o] += gk[:, -o:]
    return out


# ---------------------------------------------------------------- network

def _prepare(params, x, t_pos, cond):
    dt = params.dtype
    cfg = params.config
    x = np.asarray(x, dtype=dt)
    single = x.ndim == 1
    if single:
        x = x[None]
    frames = cond.frames if hasattr(cond, "frames") else cond
    frames = np.asarray(frames, dtype=dt)
    if frames.ndim == 2:
        frames = np.broadcast_to(frames[None], (x.shape[0],) + frames.shape)
    B, L = x.shape
    if frames.shape[0] != B:
        raise ShapeMismatch(f"batch of {B} waveforms but {frames.shape[0]} conditioners")
    if frames.shape[2] != cfg.conditioner_dim:
        raise ShapeMismatch(f"conditioner has {frames.shape[2]} features, "
                            f"network expects {cfg.conditioner_dim}")
    need = -(-L // cfg.hop)
    if frames.shape[1] != need:
        raise ShapeMismatch(f"{L} samples need {need} conditioner frames, got {frames.shape[1]}")
    t = np.broadcast_to(np.asarray(t_pos, dtype=np.float64), (B,))
    return x, t, frames, single


def forward(params: PredictorParams, x, t_pos, cond, keep_cache: bool = False):
    """Predicted noise for waveforms ``x`` of shape (L,) or (B, L)."""
    cfg = params.config
    P = params.tensors
    x, t, frames, single = _prepare(params, x, t_pos, cond)
    dt = x.dtype
    B, L = x.shape
    C = cfg.residual_channels
    K = cfg.kernel_size
    cache = {} if keep_cache else None

    a0 = x[:, :, None] * P["input.w"] + P["input.b"]
    h = np.maximum(a0, 0)

    e0 = step_sinusoid(t, cfg.step_embedding_dim).astype(dt)
    p1 = e0 @ P["step.fc1.w"] + P["step.fc1.b"]
    e1, s1 = _silu_fwd(p1)
    p2 = e1 @ P["step.fc2.w"] + P["step.fc2.b"]
    e2, s2 = _silu_fwd(p2)

    c0 = frames @ P[COND_PREFIX + "proj.w"] + P[COND_PREFIX + "proj.b"]
    u = _lrelu(c0)
    ups = []
    for j, s in enumerate(cfg.upsample_strides):
        pre = _upsample_fwd(u, P[f"{COND_PREFIX}up{j}.w"], P[f"{COND_PREFIX}up{j}.b"], s)
        ups.append((u, pre))
        u = _lrelu(pre)
    cu = np.ascontiguousarray(u[:, :L])

    skip = np.zeros((B, L, C), dtype=dt)
    layers = []
    for i, d in enumerate(cfg.dilations):
        p = f"layer{i}."
        dstep = e2 @ P[p + "step.w"] + P[p + "step.b"]
        # dilated conv and conditioner projection share one matmul
        Y = _taps(h + dstep[:, None, :], K, d, cu)
        z = Y @ np.concatenate([P[p + "conv.w"], P[p + "cond.w"]])
        z += P[p + "conv.b"] + P[p + "cond.b"]
        a = np.tanh(z[..., :C])
        g = _sigmoid(z[..., C:])
        gate = a * g
        o = gate @ P[p + "out.w"] + P[p + "out.b"]
        h = (h + o[..., :C]) * dt.type(INV_SQRT2)
        skip += o[..., C:]
        if keep_cache:
            layers.append((Y, a, g, gate))

    sk = skip * dt.type(1.0 / math.sqrt(cfg.n_layers))
    q = sk @ P["skip.w"] + P["skip.b"]
    r = np.maximum(q, 0)
    out = r @ P["head.w"] + P["head.b"]

    if keep_cache:
        cache.update(a0=a0, x=x, e0=e0, p1=p1, s1=s1, e1=e1, p2=p2, s2=s2, e2=e2,
                     frames=frames, c0=c0, ups=ups, cu=cu, layers=layers, sk=sk, q=q, r=r)
    if single:
        out = out[0]
    return (out, cache) if keep_cache else out


def backward(params: PredictorParams, cache: dict, gout) -> dict:
    """Gradients of sum(gout * forward(...)) w.r.t. every tensor."""
    cfg = params.config
    P = params.tensors
    C, K = cfg.residual_channels, cfg.kernel_size
    dt = params.dtype
    gout = np.asarray(gout, dtype=dt)
    if gout.ndim == 1:
        gout = gout[None]
    B, L = gout.shape
    G = {}

    G["head.b"] = np.asarray(gout.sum(), dtype=dt)
    G["head.w"] = np.einsum("blc,bl->c", cache["r"], gout)
    gr = gout[:, :, None] * P["head.w"]
    gq = np.where(cache["q"] > 0, gr, 0)
    G["skip.b"] = gq.sum(axis=(0, 1))
    G["skip.w"] = cache["sk"].reshape(-1, C).T @ gq.reshape(-1, C)
    gskip = (gq @ P["skip.w"].T) * dt.type(1.0 / math.sqrt(cfg.n_layers))

    cu = cache["cu"]
    gh = np.zeros((B, L, C), dtype=dt)
    ge2 = np.zeros_like(cache["e2"])
    gcu = np.zeros_like(cu)
    go = np.empty((B, L, 2 * C), dtype=dt)
    for i in reversed(range(cfg.n_layers)):
        p = f"layer{i}."
        d = cfg.dilations[i]
        Y, a, g, gate = cache["layers"][i]
        # h_out = (h_in + o[:C]) / sqrt2, skip += o[C:]
        go[..., :C] = gh * dt.type(INV_SQRT2)
        go[..., C:] = gskip
        gh = gh * dt.type(INV_SQRT2)
        go2 = go.reshape(-1, 2 * C)
        G[p + "out.b"] = go2.sum(axis=0)
        G[p + "out.w"] = gate.reshape(-1, C).T @ go2
        ggate = go @ P[p + "out.w"].T
        gz = np.empty((B, L, 2 * C), dtype=dt)
        gz[..., :C] = ggate * g * (1 - a * a)
        gz[..., C:] = ggate * a * g * (1 - g)
        gz2 = gz.reshape(-1, 2 * C)
        gb = gz2.sum(axis=0)
        G[p + "conv.b"] = gb
        G[p + "cond.b"] = gb.copy()
        gW = Y.reshape(-1, Y.shape[-1]).T @ gz2
        G[p + "conv.w"] = gW[:K * C]
        G[p + "cond.w"] = gW[K * C:]
        gY = gz @ np.concatenate([P[p + "conv.w"], P[p + "cond.w"]]).T
        gcu += gY[..., K * C:]
        gyin = _taps_bwd(gY, K, d, C)
        gh = gh + gyin
        gdstep = gyin.sum(axis=1)
        G[p + "step.b"] = gdstep.sum(axis=0)
        G[p + "step.w"] = cache["e2"].T @ gdstep
        ge2 += gdstep @ P[p + "step.w"].T

    # input projection
    ga0 = np.where(cache["a0"] > 0, gh, 0)
    G["input.w"] = np.einsum("bl,blc->c", cache["x"], ga0)
    G["input.b"] = ga0.sum(axis=(0, 1))

    # step embedding MLP
    gp2 = _silu_bwd(cache["p2"], cache["s2"], ge2)
    G["step.fc2.b"] = gp2.sum(axis=0)
    G["step.fc2.w"] = cache["e1"].T @ gp2
    gp1 = _silu_bwd(cache["p1"], cache["s1"], gp2 @ P["step.fc2.w"].T)
    G["step.fc1.b"] = gp1.sum(axis=0)
    G["step.fc1.w"] = cache["e0"].T @ gp1

    # conditioner encoder
    ups = cache["ups"]
    Fs = ups[-1][1].shape[1]
    gu = np.zeros((B, Fs, gcu.shape[-1]), dtype=dt)
    gu[:, :L] = gcu
    for j in reversed(range(len(cfg.upsample_strides))):
        u_in, pre = ups[j]
        gpre = _lrelu_bwd(pre, gu)
        gu, gw, gbb = _upsample_bwd(u_in, P[f"{COND_PREFIX}up{j}.w"], cfg.upsample_strides[j], gpre)
        G[f"{COND_PREFIX}up{j}.w"] = gw
        G[f"{COND_PREFIX}up{j}.b"] = gbb
    gc0 = _lrelu_bwd(cache["c0"], gu)
    fr = cache["frames"]
    G[COND_PREFIX + "proj.w"] = fr.reshape(-1, fr.shape[-1]).T @ gc0.reshape(-1, gc0.shape[-1])
    G[COND_PREFIX + "proj.b"] = gc0.sum(axis=(0, 1))
    return {k: G[k].astype(dt, copy=False) for k in P}


def predict_noise(params: PredictorParams, x_t, t_pos, cond) -> np.ndarray:
    return forward(params, x_t, t_pos, cond)


def loss_and_grad(params: PredictorParams, x_t, t_pos, epsilon, cond, need_grad: bool = True):
    """Batch-mean squared L2 error between ``epsilon`` and the prediction.

    Shapes: ``x_t`` and ``epsilon`` (B, L), ``t_pos`` (B,), ``cond`` (B, F, D).
    Returns ``(loss, grads)``; grads is None when ``need_grad`` is false.
    """
    eps = np.asarray(epsilon, dtype=params.dtype)
    if eps.ndim == 1:
        eps = eps[None]
    if need_grad:
        pred, cache = forward(params, x_t, t_pos, cond, keep_cache=True)
    else:
        pred = forward(params, x_t, t_pos, cond)
    pred = pred.reshape(eps.shape)
    diff = eps - pred
    B = eps.shape[0]
    loss = float(np.sum(diff.astype(np.float64) ** 2) / B)
    if not need_grad:
        return loss, None
    return loss, backward(params, cache, diff * (-2.0 / B))


# ----------------------------------------------------------------- oracles

def oracle_predict(x_t, t: int, x0, schedule: NoiseSchedule) -> np.ndarray:
    """Exact noise that maps ``x0`` to ``x_t`` at step ``t`` (closed-form inverse)."""
    if t < 1:
        raise ValueError("oracle needs t >= 1 (division by zero at t=0)")
    abar = schedule.alpha_bar(t)
    return (np.asarray(x_t) - math.sqrt(abar) * np.asarray(x0)) / math.sqrt(1.0 - abar)


class Predictor:
    """Callable interface used by the samplers: ``f(x_t, t_pos, cond) -> eps``."""

    calls = 0

    def __call__(self, x_t, t_pos, cond):
        raise NotImplementedError


class NetworkPredictor(Predictor):
    def __init__(self, params: PredictorParams):
        self.params = params
        self.calls = 0

    def __call__(self, x_t, t_pos, cond):
        self.calls += 1
        return forward(self.params, x_t, t_pos, cond).astype(np.float64)


class OraclePredictor(Predictor):
    """Analytic noise predictor that knows the clean signal.

    Fractional positions use the same sqrt(alpha_bar) interpolation as the
    fast-schedule alignment, so the prediction is exact there too.
    """

    def __init__(self, x0, schedule: NoiseSchedule):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.schedule = schedule
        self.calls = 0

    def __call__(self, x_t, t_pos, cond=None):
        self.calls += 1
        if float(t_pos) == int(t_pos) and 1 <= int(t_pos) <= self.schedule.T:
            return oracle_predict(x_t, int(t_pos), self.x0, self.schedule)
        r = float(self.schedule.sqrt_alpha_bar_at(t_pos))
        if r >= 1.0:
            raise ValueError("oracle undefined at step position 0")
        return (np.asarray(x_t) - r * self.x0) / math.sqrt(1.0 - r * r)


class ZeroPredictor(Predictor):
    def __init__(self):
        self.calls = 0

    def __call__(self, x_t, t_pos, cond=None):
        self.calls += 1
        return np.zeros_like(np.asarray(x_t, dtype=np.float64))
