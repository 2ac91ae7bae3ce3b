"""Noise-prediction network with exact hand-written gradients.

Architecture: token embedding + sinusoidal time embedding -> 1-D conv stem
over the visit axis -> B residual self-attention blocks, each modulated by
feature-wise scale/shift generated from the per-token connectivity features
-> linear projection back to the vocabulary. Everything runs in plain numpy
(float64 by default) so gradients can be checked against finite differences.

Conditioning enters only through the scale/shift generators: at their zero
initialization the network output is independent of the feature matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .schedule import ScheduleParams, alpha_v, loss_weight

CHECKPOINT_FORMAT_VERSION = 1

_NEG_INF = -1e30
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class TrajectoryTensor:
    """L x V real matrix with a row validity mask; padding rows are all-zero."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        if values.ndim != 2 or mask.shape != (values.shape[0],):
            raise ValueError("values must be (L, V) with an L-length mask")
        if np.any(values[~mask] != 0.0):
            raise ValueError("masked-out rows must be all-zero")

    @property
    def length(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class NetConfig:
    hidden: int = 32
    blocks: int = 3
    heads: int = 4
    film_d: int = 1
    vocab_size: int = 1
    max_len: int = 32
    dtype: str = "float64"

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")
        if self.hidden % 2 != 0:
            raise ValueError("hidden must be even (paired sin/cos time features)")
        if min(self.film_d, self.vocab_size, self.max_len) < 1:
            raise ValueError("film_d, vocab_size, max_len must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    h, v, d = cfg.hidden, cfg.vocab_size, cfg.film_d
    shapes: dict[str, tuple[int, ...]] = {
        "embed": (v, h),
        "time_w": (h, h),  # h sinusoidal features -> h channels
        "time_b": (h,),
        "conv_w": (3, h, h),
        "conv_b": (h,),
    }
    for i in range(cfg.blocks):
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"blk{i}_{name}"] = (h, h)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[f"blk{i}_{name}"] = (h,)
        shapes[f"blk{i}_film_ws"] = (d, h)
        shapes[f"blk{i}_film_bs"] = (h,)
        shapes[f"blk{i}_film_wb"] = (d, h)
        shapes[f"blk{i}_film_bb"] = (h,)
    shapes["out_w"] = (h, v)
    shapes["out_b"] = (v,)
    return shapes


def param_count(cfg: NetConfig) -> int:
    """Closed-form parameter count.

    V*h + (h*h + h) + (3*h*h + h) + B*(4*h*h + 4*h + 2*d*h + 2*h) + (h*V + V)
    """
    h, v, d, b = cfg.hidden, cfg.vocab_size, cfg.film_d, cfg.blocks
    return (
        v * h
        + h * h + h
        + 3 * h * h + h
        + b * (4 * h * h + 4 * h + 2 * d * h + 2 * h)
        + h * v + v
    )


_FAN_IN = {"embed": "v", "time_w": "h", "conv_w": "3h", "wq": "h", "wk": "h",
           "wv": "h", "wo": "h", "out_w": "h"}


def init_params(cfg: NetConfig, seed: int) -> dict[str, np.ndarray]:
    """Scaled-uniform fan-in init; film generators start at identity (scale=1, shift=0)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1F]))
    h, v = cfg.hidden, cfg.vocab_size
    fan = {"v": v, "h": h, "3h": 3 * h}
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        base = name.split("_", 1)[1] if name.startswith("blk") else name
        if base in _FAN_IN:
            a = np.sqrt(1.0 / fan[_FAN_IN[base]])
            params[name] = rng.uniform(-a, a, size=shape)
        else:
            params[name] = np.zeros(shape)  # biases and film generators
        params[name] = params[name].astype(cfg.np_dtype)
    return params


def time_features(t, hidden: int) -> np.ndarray:
    """Sinusoidal features of t in [0, 1]: hidden/2 log-spaced frequencies, sin+cos."""
    n_freq = hidden // 2
    omega = np.exp(np.linspace(np.log(1.0), np.log(1000.0), n_freq))
    angle = np.multiply.outer(np.asarray(t, dtype=float), omega)
    return np.concatenate([np.sin(angle), np.cos(angle)], axis=-1)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_prime(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def _softmax_last(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batched(x: np.ndarray, mask: np.ndarray, t):
    x = np.asarray(x, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
        mask = mask[None]
    tvec = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],)).copy()
    return x, mask, tvec, squeeze


def _forward_impl(params, cfg: NetConfig, x, mask, tvec, psi_mat, want_cache: bool):
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input to the denoiser")
    B, L, V = x.shape
    if V != cfg.vocab_size:
        raise ValueError(f"input vocab width {V} != config {cfg.vocab_size}")
    psi_mat = np.asarray(psi_mat, dtype=float)
    if psi_mat.shape != (cfg.vocab_size, cfg.film_d):
        raise ValueError(
            f"feature matrix shape {psi_mat.shape} != {(cfg.vocab_size, cfg.film_d)}"
        )
    h, nh = cfg.hidden, cfg.heads
    dh = h // nh
    inv_sqrt_dh = 1.0 / np.sqrt(dh)
    mcol = mask[..., None]

    xm = x * mcol
    c = xm @ psi_mat                                   # (B,L,d)
    tf = time_features(tvec, h)                        # (B,h)
    temb = tf @ params["time_w"] + params["time_b"]    # (B,h)
    h0 = (xm @ params["embed"] + temb[:, None, :]) * mcol

    pad = np.zeros((B, 1, h), dtype=h0.dtype)
    h0p = np.concatenate([pad, h0, pad], axis=1)       # (B,L+2,h)
    s = params["conv_b"] + sum(
        h0p[:, k : k + L] @ params["conv_w"][k] for k in range(3)
    )
    g = _gelu(s)
    H = h0 + g

    key_bias = np.where(mask, 0.0, _NEG_INF)[:, None, :]   # (B,1,L)
    blocks = []
    for i in range(cfg.blocks):
        p = lambda n: params[f"blk{i}_{n}"]
        H_in = H
        q = H_in @ p("wq") + p("bq")
        k = H_in @ p("wk") + p("bk")
        v = H_in @ p("wv") + p("bv")
        m_cat = np.empty_like(q)
        attn = []
        for j in range(nh):
            sl = slice(j * dh, (j + 1) * dh)
            logits = q[..., sl] @ k[..., sl].transpose(0, 2, 1) * inv_sqrt_dh
            A = _softmax_last(logits + key_bias)
            m_cat[..., sl] = A @ v[..., sl]
            attn.append(A)
        o = m_cat @ p("wo") + p("bo")
        scale = 1.0 + c @ p("film_ws") + p("film_bs")
        shift = c @ p("film_wb") + p("film_bb")
        u = scale * o + shift
        H = H_in + u
        if want_cache:
            blocks.append((H_in, q, k, v, attn, m_cat, o, scale))

    out = H @ params["out_w"] + params["out_b"]
    cache = None
    if want_cache:
        cache = {
            "xm": xm, "c": c, "tf": tf, "h0": h0, "h0p": h0p, "s": s,
            "H_final": H, "blocks": blocks, "mask": mask,
        }
    return out, cache


def forward(params, cfg: NetConfig, x, mask, t, psi_mat) -> np.ndarray:
    """Predict the injected noise for x at time t; accepts (L,V) or (B,L,V)."""
    xb, mb, tvec, squeeze = _as_batched(x, mask, t)
    out, _ = _forward_impl(params, cfg, xb, mb, tvec, psi_mat, want_cache=False)
    return out[0] if squeeze else out


def _backward_impl(params, cfg: NetConfig, cache, dout) -> dict[str, np.ndarray]:
    h, nh = cfg.hidden, cfg.heads
    dh = h // nh
    inv_sqrt_dh = 1.0 / np.sqrt(dh)
    B, L, _ = dout.shape
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}

    H = cache["H_final"]
    grads["out_w"] += np.einsum("blh,blv->hv", H, dout)
    grads["out_b"] += dout.sum(axis=(0, 1))
    dH = dout @ params["out_w"].T
    dc = np.zeros_like(cache["c"])

    for i in reversed(range(cfg.blocks)):
        p = lambda n: params[f"blk{i}_{n}"]
        H_in, q, k, v, attn, m_cat, o, scale = cache["blocks"][i]
        dU = dH  # residual add: dH flows to both H_in and u
        dscale = dU * o
        dshift = dU
        do = dU * scale
        c = cache["c"]
        grads[f"blk{i}_film_ws"] += np.einsum("bld,blh->dh", c, dscale)
        grads[f"blk{i}_film_bs"] += dscale.sum(axis=(0, 1))
        grads[f"blk{i}_film_wb"] += np.einsum("bld,blh->dh", c, dshift)
        grads[f"blk{i}_film_bb"] += dshift.sum(axis=(0, 1))
        dc += dscale @ p("film_ws").T + dshift @ p("film_wb").T

        grads[f"blk{i}_wo"] += np.einsum("blh,blg->hg", m_cat, do)
        grads[f"blk{i}_bo"] += do.sum(axis=(0, 1))
        dm = do @ p("wo").T

        dq = np.empty_like(q)
        dk = np.empty_like(k)
        dv = np.empty_like(v)
        for j in range(nh):
            sl = slice(j * dh, (j + 1) * dh)
            A = attn[j]
            dmj = dm[..., sl]
            dA = dmj @ v[..., sl].transpose(0, 2, 1)
            dv[..., sl] = A.transpose(0, 2, 1) @ dmj
            dlog = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
            dq[..., sl] = dlog @ k[..., sl] * inv_sqrt_dh
            dk[..., sl] = dlog.transpose(0, 2, 1) @ q[..., sl] * inv_sqrt_dh

        dH_in = dH.copy()
        for name, darr in (("wq", dq), ("wk", dk), ("wv", dv)):
            grads[f"blk{i}_{name}"] += np.einsum("blh,blg->hg", H_in, darr)
            grads[f"blk{i}_b{name[1]}"] += darr.sum(axis=(0, 1))
            dH_in += darr @ p(name).T
        dH = dH_in

    # stem: H1 = h0 + gelu(s), s = conv(h0)
    ds = dH * _gelu_prime(cache["s"])
    grads["conv_b"] += ds.sum(axis=(0, 1))
    h0p = cache["h0p"]
    dh0p = np.zeros_like(h0p)
    for k3 in range(3):
        grads["conv_w"][k3] += np.einsum("blh,blg->hg", h0p[:, k3 : k3 + L], ds)
        dh0p[:, k3 : k3 + L] += ds @ params["conv_w"][k3].T
    dh0 = dH + dh0p[:, 1 : 1 + L]

    mcol = cache["mask"][..., None]
    dpre = dh0 * mcol
    grads["embed"] += np.einsum("blv,blh->vh", cache["xm"], dpre)
    dtemb = dpre.sum(axis=1)
    grads["time_w"] += cache["tf"].T @ dtemb
    grads["time_b"] += dtemb.sum(axis=0)
    # dc would propagate into psi_mat (an input, not a parameter): dropped.
    return grads


# ---------------------------------------------------------------------------
# Training objective.
# ---------------------------------------------------------------------------


def perturb(x0, mask, t, eps, sched: ScheduleParams, psi_clipped):
    """Forward-noised state sqrt(a_v) x0 + sqrt(1-a_v) eps, per token column.

    Accepts (L,V)/scalar-t or (B,L,V)/vector-t; padding rows stay zero.
    """
    x0 = np.asarray(x0, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    psi = np.asarray(psi_clipped, dtype=float)
    if x0.ndim == 2:
        a = alpha_v(sched, float(t), psi)                     # (V,)
    else:
        a = alpha_v(sched, np.asarray(t, dtype=float)[:, None], psi[None, :])[:, None, :]
    xt = np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps
    return xt * mask[..., None]


def weighted_residual_loss(eps_hat, eps, t, mask) -> float:
    """Per-sample objective w(t) * sum over unmasked entries of (eps - eps_hat)^2."""
    resid = (np.asarray(eps) - np.asarray(eps_hat)) * np.asarray(mask, dtype=bool)[..., None]
    return float(loss_weight(float(t)) * np.sum(resid * resid))


def loss_and_gradient(
    params,
    cfg: NetConfig,
    batch: list[TrajectoryTensor],
    psi_mat,
    psi_clipped,
    sched: ScheduleParams,
    *,
    time_rng: np.random.Generator,
    noise_rng: np.random.Generator,
):
    """Mean weighted denoising loss over the batch and its exact gradient.

    t ~ Uniform(0,1) per sample, noise standard normal; both drawn from the
    caller-provided streams so runs are replayable.
    """
    if not batch:
        raise ValueError("empty batch")
    x0 = np.stack([tr.values for tr in batch])
    mask = np.stack([tr.mask for tr in batch])
    t = time_rng.uniform(0.0, 1.0, size=len(batch))
    eps = noise_rng.standard_normal(x0.shape)
    return loss_and_gradient_with_draws(
        params, cfg, x0, mask, t, eps, psi_mat, psi_clipped, sched
    )


def loss_and_gradient_with_draws(
    params, cfg: NetConfig, x0, mask, t, eps, psi_mat, psi_clipped, sched: ScheduleParams
):
    """Deterministic loss/gradient for explicitly supplied (t, eps) draws."""
    B = x0.shape[0]
    xt = perturb(x0, mask, t, eps, sched, psi_clipped)
    eps_hat, cache = _forward_impl(
        params, cfg, xt, mask, np.asarray(t, dtype=float), psi_mat, want_cache=True
    )
    w = loss_weight(np.asarray(t, dtype=float))               # (B,)
    resid = (eps - eps_hat) * mask[..., None]
    per_sample = w * np.sum(resid * resid, axis=(1, 2))
    loss = float(per_sample.mean())
    dout = (-2.0 / B) * w[:, None, None] * resid
    grads = _backward_impl(params, cfg, cache, dout)
    return loss, grads


# ---------------------------------------------------------------------------
# Checkpoint container.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    net_cfg: NetConfig
    sched: ScheduleParams
    lam: float
    params: dict[str, np.ndarray]
    step: int
    opt_m: dict[str, np.ndarray] | None
    opt_v: dict[str, np.ndarray] | None
    rng_info: dict


def _arrays_to_json(arrs: dict[str, np.ndarray]) -> dict:
    return {
        name: {"shape": list(a.shape), "data": np.asarray(a, dtype=float).reshape(-1).tolist()}
        for name, a in arrs.items()
    }


def _arrays_from_json(doc: dict, dtype) -> dict[str, np.ndarray]:
    out = {}
    for name, entry in doc.items():
        out[name] = np.asarray(entry["data"], dtype=dtype).reshape(entry["shape"])
    return out


def save_checkpoint(
    path,
    net_cfg: NetConfig,
    sched: ScheduleParams,
    params: dict[str, np.ndarray],
    step: int,
    opt_m: dict[str, np.ndarray] | None = None,
    opt_v: dict[str, np.ndarray] | None = None,
    rng_info: dict | None = None,
) -> None:
    doc = {
        "format": "kgdiff-checkpoint",
        "version": CHECKPOINT_FORMAT_VERSION,
        "net": {
            "hidden": net_cfg.hidden, "blocks": net_cfg.blocks, "heads": net_cfg.heads,
            "film_d": net_cfg.film_d, "vocab_size": net_cfg.vocab_size,
            "max_len": net_cfg.max_len, "dtype": net_cfg.dtype,
        },
        "schedule": {
            "beta_min": sched.beta_min, "beta_max": sched.beta_max,
            "horizon_steps": sched.horizon_steps, "lambda": sched.lam,
        },
        "lambda": sched.lam,
        "step": int(step),
        "rng": rng_info or {},
        "params": _arrays_to_json(params),
        "opt_m": _arrays_to_json(opt_m) if opt_m is not None else None,
        "opt_v": _arrays_to_json(opt_v) if opt_v is not None else None,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format") != "kgdiff-checkpoint":
        raise ValueError("not a checkpoint file")
    if doc.get("version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"checkpoint version {doc.get('version')!r} != supported {CHECKPOINT_FORMAT_VERSION}"
        )
    net = doc["net"]
    cfg = NetConfig(
        hidden=net["hidden"], blocks=net["blocks"], heads=net["heads"],
        film_d=net["film_d"], vocab_size=net["vocab_size"],
        max_len=net["max_len"], dtype=net["dtype"],
    )
    sc = doc["schedule"]
    sched = ScheduleParams(
        beta_min=sc["beta_min"], beta_max=sc["beta_max"],
        horizon_steps=sc["horizon_steps"], lam=sc["lambda"],
    )
    dtype = cfg.np_dtype
    return Checkpoint(
        net_cfg=cfg,
        sched=sched,
        lam=float(doc["lambda"]),
        params=_arrays_from_json(doc["params"], dtype),
        step=int(doc["step"]),
        opt_m=_arrays_from_json(doc["opt_m"], dtype) if doc.get("opt_m") else None,
        opt_v=_arrays_from_json(doc["opt_v"], dtype) if doc.get("opt_v") else None,
        rng_info=doc.get("rng", {}),
    )
