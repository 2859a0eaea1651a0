"""Desk-scale denoising diffusion with pluggable attention sites.

The toy denoiser is a tiny patch transformer written directly in numpy with
a hand-written backward pass. Every linear map is an
:class:`~splatedit.lora.AdaptedLinear`, and every self-attention site calls
an attention object, which is how reference-concatenation and persona
blending are injected during sampling.

Latents are the images themselves (no autoencoder).
"""
import json
from dataclasses import asdict, dataclass

import numpy as np

from .attention import (
    DEFAULT_PERSONA_LAMBDA,
    attention_weights,
    persona_blend_attention,
    reference_concat_attention,
    sdp_attention,
)
from .lora import DEFAULT_RANK, AdaptedLinear, init_delta
from .optim import Adam

DEFAULT_VIEWS = 4


@dataclass
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        self.alpha_bars = np.cumprod(1.0 - self.betas)

    @classmethod
    def linear(cls, T=100, beta_start=1e-4, beta_end=0.2):
        return cls(np.linspace(beta_start, beta_end, T))

    @property
    def T(self):
        return len(self.betas)


def _expand_mask(mask, like):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == like.ndim - 1:
        mask = mask[..., None]
    return mask


def noise_at(z0, alpha_bar, eps, mask=None):
    """sqrt(ab) * z0 * (1 - m) + sqrt(1 - ab) * eps, elementwise."""
    z0 = np.asarray(z0, dtype=np.float64)
    ab = np.asarray(alpha_bar, dtype=np.float64)
    if ab.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (z0.ndim - 1))
    signal = np.sqrt(ab) * z0
    if mask is not None:
        signal = signal * (1.0 - _expand_mask(mask, z0))
    return signal + np.sqrt(1.0 - ab) * eps


def add_noise_masked(z0, t, eps, mask, schedule):
    """Noise ``z0`` to step ``t`` with the masked region's signal removed.

    ``t`` is an int or one int per batch item; ``mask`` is (H, W) or
    (B, H, W) with 1 marking removed signal (all zeros gives plain noising).
    """
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"z0 {z0.shape} and eps {eps.shape} differ")
    if mask is not None:
        m = _expand_mask(mask, z0)
        if np.broadcast_shapes(m.shape, z0.shape) != z0.shape:
            raise ValueError(f"mask {np.shape(mask)} does not fit latent {z0.shape}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.T):
        raise ValueError(f"t must lie in [0, {schedule.T})")
    return noise_at(z0, schedule.alpha_bars[t], eps, mask)


def sample_masks(count, height, width, seed=0, min_cover=0.10, max_cover=0.60):
    """Unions of 1-4 random rectangles covering 10-60% of the pixels."""
    if count <= 0:
        raise ValueError("mask count must be positive")
    rng = np.random.default_rng(seed)
    masks = []
    while len(masks) < count:
        m = np.zeros((height, width), dtype=np.uint8)
        for _ in range(rng.integers(1, 5)):
            h = rng.integers(max(1, round(0.2 * height)), max(2, round(0.6 * height)) + 1)
            w = rng.integers(max(1, round(0.2 * width)), max(2, round(0.6 * width)) + 1)
            y = rng.integers(0, height - h + 1)
            x = rng.integers(0, width - w + 1)
            m[y:y + h, x:x + w] = 1
        if min_cover <= m.mean() <= max_cover:
            masks.append(m)
    return masks


@dataclass
class DenoiserConfig:
    height: int = 16
    width: int = 16
    channels: int = 3
    patch: int = 2
    d_model: int = 48
    n_blocks: int = 2
    ff_hidden: int = 96
    n_labels: int = 2
    label_dim: int = 8
    time_dim: int = 8
    pos_dim: int = 8
    T: int = 100


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


class PlainAttention:
    """Ordinary per-sample self-attention."""

    def __call__(self, layer, Q, K, V, step):
        return np.stack([sdp_attention(Q[b], K[b], V[b]) for b in range(len(Q))])


class ReferenceAttention:
    """Every non-reference sample also attends to the reference sample's K/V.

    ``lag`` > 0 reads the reference K/V recorded ``lag`` sampling steps
    earlier (falling back to the current step at the start).
    """

    def __init__(self, ref_index=0, lag=0):
        self.ref_index = ref_index
        self.lag = lag
        self.history = {}

    def __call__(self, layer, Q, K, V, step):
        r = self.ref_index
        self.history[(step, layer)] = (K[r].copy(), V[r].copy())
        K_ref, V_ref = self.history.get((step - self.lag, layer), self.history[(step, layer)])
        out = np.empty(Q.shape[:2] + (V.shape[2],))
        for b in range(len(Q)):
            if b == r:
                out[b] = sdp_attention(Q[b], K[b], V[b])
            else:
                out[b] = reference_concat_attention(Q[b], K[b], V[b], K_ref, V_ref)
        return out


class KVBank:
    """Recorded (K, V) per (sampling step, layer), one pair per recorded view."""

    def __init__(self):
        self.entries = {}

    def add(self, step, layer, K, V):
        self.entries.setdefault((step, layer), []).append((K, V))

    def get(self, step, layer):
        return self.entries[(step, layer)]

    @property
    def layers(self):
        return sorted({layer for _, layer in self.entries})

    @property
    def steps(self):
        return sorted({step for step, _ in self.entries})

    def __len__(self):
        return len(self.entries)


class RecordingAttention:
    """Wraps another attention object and stores every sample's K/V."""

    def __init__(self, inner=None, bank=None, samples=None):
        self.inner = inner or PlainAttention()
        self.bank = bank if bank is not None else KVBank()
        self.samples = samples

    def __call__(self, layer, Q, K, V, step):
        for b in self.samples if self.samples is not None else range(len(K)):
            self.bank.add(step, layer, K[b].copy(), V[b].copy())
        return self.inner(layer, Q, K, V, step)


class PersonaAttention:
    """Blend own attention with the mean attention over a recorded bank."""

    def __init__(self, bank, lam=DEFAULT_PERSONA_LAMBDA):
        self.bank = bank
        self.lam = lam

    def __call__(self, layer, Q, K, V, step):
        bank = self.bank.get(step, layer) if self.lam < 1.0 else ()
        return np.stack([persona_blend_attention(Q[b], K[b], V[b], bank, self.lam)
                         for b in range(len(Q))])


class ToyDenoiser:
    """Patch transformer predicting the noise of a noisy latent.

    Tokens concatenate a flattened patch, a learned garment-label embedding,
    sinusoidal time features and fixed positional features; they pass through
    a linear embedding, ``n_blocks`` residual blocks (self-attention, then a
    SiLU feed-forward pair) and a linear head back to patch space.
    """

    def __init__(self, config=None, seed=0):
        self.config = cfg = config or DenoiserConfig()
        if cfg.height % cfg.patch or cfg.width % cfg.patch:
            raise ValueError("image size must be a multiple of the patch size")
        rng = np.random.default_rng(seed)
        p2c = cfg.patch * cfg.patch * cfg.channels
        d = cfg.d_model
        self.label_emb = rng.normal(0.0, 0.5, (cfg.n_labels, cfg.label_dim))

        def lin(d_in, d_out, gain=1.0):
            W = rng.normal(0.0, gain / np.sqrt(d_in), (d_out, d_in))
            return AdaptedLinear(W, np.zeros(d_out))

        self.layers = {"embed": lin(p2c + cfg.label_dim + cfg.time_dim + cfg.pos_dim, d)}
        for b in range(cfg.n_blocks):
            for name in "qkv":
                self.layers[f"block{b}.{name}"] = lin(d, d)
            self.layers[f"block{b}.o"] = lin(d, d, 0.5)
            self.layers[f"block{b}.ff1"] = lin(d, cfg.ff_hidden)
            self.layers[f"block{b}.ff2"] = lin(cfg.ff_hidden, d, 0.5)
        self.layers["head"] = lin(d, p2c, 0.5)
        self._pos = self._positional_features()

    # -- parameters ---------------------------------------------------------

    def attach_lora(self, rank=DEFAULT_RANK, seed=0):
        for i, layer in enumerate(self.layers.values()):
            r = min(rank, layer.d_in, layer.d_out)
            layer.delta = init_delta(layer.d_in, layer.d_out, r, seed=seed + i)
        return self

    def detach_lora(self):
        for layer in self.layers.values():
            layer.delta = None

    def base_params(self):
        out = {"label_emb": self.label_emb}
        for n, layer in self.layers.items():
            out[f"{n}.W"] = layer.W
            out[f"{n}.bias"] = layer.bias
        return out

    def lora_params(self):
        out = {}
        for n, layer in self.layers.items():
            if layer.delta is not None and layer.trainable:
                out[f"{n}.A"] = layer.delta.A
                out[f"{n}.B"] = layer.delta.B
        return out

    def param_count(self):
        arrays = list(self.base_params().values()) + list(self.lora_params().values())
        return int(sum(a.size for a in arrays))

    # -- token plumbing -----------------------------------------------------

    @property
    def n_tokens(self):
        c = self.config
        return (c.height // c.patch) * (c.width // c.patch)

    def _positional_features(self):
        c = self.config
        gh, gw = c.height // c.patch, c.width // c.patch
        gy, gx = np.mgrid[0:gh, 0:gw]
        gy = (2.0 * gy + 1.0) / gh - 1.0
        gx = (2.0 * gx + 1.0) / gw - 1.0
        feats = []
        for f in range(c.pos_dim // 4):
            w = np.pi * 2.0 ** f
            feats += [np.sin(w * gx), np.cos(w * gx), np.sin(w * gy), np.cos(w * gy)]
        return np.stack(feats, axis=-1).reshape(gh * gw, -1)

    def _time_features(self, t, batch):
        c = self.config
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,)) / c.T
        freqs = np.pi * 2.0 ** np.arange(c.time_dim // 2)
        ang = t[:, None] * freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def patchify(self, z):
        c = self.config
        B = z.shape[0]
        p = c.patch
        z = z.reshape(B, c.height // p, p, c.width // p, p, c.channels)
        return z.transpose(0, 1, 3, 2, 4, 5).reshape(B, -1, p * p * c.channels)

    def unpatchify(self, x):
        c = self.config
        B = x.shape[0]
        p = c.patch
        x = x.reshape(B, c.height // p, c.width // p, p, p, c.channels)
        return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, c.height, c.width, c.channels)

    # -- forward / backward -------------------------------------------------

    def forward(self, z, t, labels, attention=None, step=0, cache=False):
        """Predict noise for latents ``z`` (B, H, W, C).

        ``attention(layer, Q, K, V, step)`` replaces every self-attention
        computation when given. With ``cache=True`` returns ``(eps, cache)``
        for :meth:`backward` (plain attention only).
        """
        z = np.asarray(z, dtype=np.float64)
        B, N = z.shape[0], self.n_tokens
        labels = np.broadcast_to(np.asarray(labels), (B,))
        if cache and attention is not None:
            raise ValueError("backward is only supported through plain attention")
        attention = attention or PlainAttention()
        x = np.concatenate([
            self.patchify(z),
            np.broadcast_to(self.label_emb[labels][:, None, :], (B, N, self.config.label_dim)),
            np.broadcast_to(self._time_features(t, B)[:, None, :], (B, N, self.config.time_dim)),
            np.broadcast_to(self._pos[None], (B, N, self._pos.shape[1])),
        ], axis=-1)
        L = self.layers
        h = L["embed"](x)
        store = {"x": x, "labels": labels, "blocks": []}
        scale = 1.0 / np.sqrt(self.config.d_model)
        for b in range(self.config.n_blocks):
            q = L[f"block{b}.q"](h)
            k = L[f"block{b}.k"](h)
            v = L[f"block{b}.v"](h)
            if cache:
                P = np.stack([attention_weights(q[i], k[i]) for i in range(B)])
                a = P @ v
            else:
                P = None
                a = attention(b, q, k, v, step)
            h1 = h + L[f"block{b}.o"](a)
            f = L[f"block{b}.ff1"](h1)
            s, sig = _silu(f)
            h2 = h1 + L[f"block{b}.ff2"](s)
            if cache:
                store["blocks"].append(dict(h=h, q=q, k=k, v=v, P=P, a=a, h1=h1,
                                            f=f, s=s, sig=sig, scale=scale))
            h = h2
        store["h"] = h
        eps = self.unpatchify(L["head"](h))
        return (eps, store) if cache else eps

    def __call__(self, z, t, labels, attention=None, step=0):
        return self.forward(z, t, labels, attention=attention, step=step)

    def backward(self, store, grad_eps, base=False):
        """Gradients of a loss given dL/d(eps prediction).

        LoRA factors get "<layer>.A" / "<layer>.B" entries; with ``base=True``
        the frozen weights and the label embedding are included too.
        """
        L = self.layers
        grads = {}

        def collect(name, g):
            for key, val in g.items():
                full = f"{name}.{key}"
                grads[full] = grads.get(full, 0.0) + val

        g = self.patchify(np.asarray(grad_eps, dtype=np.float64))
        g_h, gr = L["head"].backward(store["h"], g, base)
        collect("head", gr)
        for b in reversed(range(self.config.n_blocks)):
            c = store["blocks"][b]
            g_s, gr = L[f"block{b}.ff2"].backward(c["s"], g_h, base)
            collect(f"block{b}.ff2", gr)
            sig, f = c["sig"], c["f"]
            g_f = g_s * (sig + f * sig * (1.0 - sig))
            g_h1f, gr = L[f"block{b}.ff1"].backward(c["h1"], g_f, base)
            collect(f"block{b}.ff1", gr)
            g_h1 = g_h + g_h1f
            g_a, gr = L[f"block{b}.o"].backward(c["a"], g_h1, base)
            collect(f"block{b}.o", gr)
            P = c["P"]
            g_v = np.swapaxes(P, 1, 2) @ g_a
            g_P = g_a @ np.swapaxes(c["v"], 1, 2)
            g_S = P * (g_P - np.sum(g_P * P, axis=-1, keepdims=True)) * c["scale"]
            g_q = g_S @ c["k"]
            g_k = np.swapaxes(g_S, 1, 2) @ c["q"]
            g_h = g_h1
            for name, gg in (("q", g_q), ("k", g_k), ("v", g_v)):
                gx, gr = L[f"block{b}.{name}"].backward(c["h"], gg, base)
                collect(f"block{b}.{name}", gr)
                g_h = g_h + gx
        g_x, gr = L["embed"].backward(store["x"], g_h, base)
        collect("embed", gr)
        if base:
            p2c = self.config.patch ** 2 * self.config.channels
            g_lab = g_x[..., p2c:p2c + self.config.label_dim].sum(axis=1)
            g_emb = np.zeros_like(self.label_emb)
            np.add.at(g_emb, store["labels"], g_lab)
            grads["label_emb"] = g_emb
        return grads

    # -- persistence --------------------------------------------------------

    def save(self, path):
        arrays = {k: v for k, v in self.base_params().items()}
        arrays["config"] = np.frombuffer(json.dumps(asdict(self.config)).encode(), dtype=np.uint8)
        np.savez(path, **arrays)
        return path

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            cfg = DenoiserConfig(**json.loads(bytes(data["config"]).decode()))
            model = cls(cfg)
            for k, v in model.base_params().items():
                v[...] = data[k]
        return model


def diffusion_loss(denoiser, z0, masks, labels, t, eps, schedule, base=False):
    """Masked noise-prediction MSE and its gradients.

    Returns ``(loss, grads)``; see :meth:`ToyDenoiser.backward` for keys.
    """
    z_t = add_noise_masked(z0, t, eps, masks, schedule)
    pred, store = denoiser.forward(z_t, t, labels, cache=True)
    diff = pred - eps
    loss = float(np.mean(diff * diff))
    grads = denoiser.backward(store, 2.0 * diff / diff.size, base=base)
    return loss, grads


def _draw_t_eps(rng, schedule, z0):
    t = rng.integers(0, schedule.T, size=len(z0))
    eps = rng.standard_normal(z0.shape)
    return t, eps


def train_base(denoiser, images, labels, schedule, steps=3000, batch_size=32,
               lr=2e-3, seed=0, masks=None):
    """Fit all base weights with the plain noise-prediction objective.

    Returns the per-step loss history.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(denoiser.base_params(), lr=lr, eps=1e-8)
    history = []
    for i in range(steps):
        idx = rng.integers(0, len(images), size=batch_size)
        z0 = images[idx]
        t, eps = _draw_t_eps(rng, schedule, z0)
        m = None if masks is None else masks[idx]
        loss, grads = diffusion_loss(denoiser, z0, m, labels[idx], t, eps, schedule, base=True)
        # cosine decay keeps the late steps from bouncing
        opt.lr = {k: lr * 0.5 * (1 + np.cos(np.pi * i / steps)) for k in opt.params}
        opt.step(grads)
        history.append(loss)
    return np.array(history)


class LoraTrainer:
    """Optimizer state for LoRA fine-tuning: Adam over A/B plus an RNG."""

    def __init__(self, denoiser, lr=1e-3, seed=0):
        params = denoiser.lora_params()
        if not params:
            raise ValueError("denoiser has no trainable low-rank deltas")
        self.opt = Adam(params, lr=lr, eps=1e-8)
        self.rng = np.random.default_rng(seed)


def lora_train_step(denoiser, batch, schedule, trainer):
    """One masked-objective step on ``batch = (z0, masks, labels)``.

    Samples t uniformly and Gaussian eps, updates only the A/B factors and
    returns the loss before the update.
    """
    z0, masks, labels = batch
    z0 = np.asarray(z0, dtype=np.float64)
    if not denoiser.lora_params():
        raise ValueError("denoiser has no trainable low-rank deltas")
    t, eps = _draw_t_eps(trainer.rng, schedule, z0)
    loss, grads = diffusion_loss(denoiser, z0, masks, labels, t, eps, schedule)
    trainer.opt.step({k: v for k, v in grads.items() if k in trainer.opt.params})
    return loss


def train_lora(denoiser, images, labels, schedule, iters=1000, n_masks=16,
               batch_size=8, lr=1e-3, seed=0):
    """Fine-tune attached deltas on ``images`` with random binary masks."""
    h, w = images.shape[1:3]
    masks = np.stack(sample_masks(n_masks, h, w, seed=seed))
    trainer = LoraTrainer(denoiser, lr=lr, seed=seed)
    rng = np.random.default_rng(seed + 1)
    losses = []
    for _ in range(iters):
        idx = rng.integers(0, len(images), size=batch_size)
        midx = rng.integers(0, len(masks), size=batch_size)
        losses.append(lora_train_step(
            denoiser, (images[idx], masks[midx], np.asarray(labels)[idx]), schedule, trainer))
    return np.array(losses)


# -- sampling ---------------------------------------------------------------

def sampling_steps(T, steps):
    ts = np.unique(np.round(np.linspace(T - 1, 0, steps)).astype(int))[::-1]
    return ts


def denoise(denoiser, z_src, labels, schedule, noise, masks=None, steps=25,
            attention=None, strength=1.0):
    """Deterministic (eta = 0) DDIM edit of ``z_src`` (B, H, W, C).

    Sampling starts at step ``round(strength * (T - 1))`` from the source
    noised with ``noise`` and its masked region's signal removed. Pixels
    outside ``masks`` are re-imposed from the noised source at every step
    and copied verbatim at the end; ``masks=None`` regenerates everything.
    """
    z_src = np.asarray(z_src, dtype=np.float64)
    t_start = int(round(strength * (schedule.T - 1)))
    ts = sampling_steps(t_start + 1, steps)
    ab = schedule.alpha_bars
    m = None if masks is None else _expand_mask(masks, z_src)
    x = noise_at(z_src, ab[ts[0]], noise, masks)
    for i, t in enumerate(ts):
        if m is not None:
            known = np.sqrt(ab[t]) * z_src + np.sqrt(1.0 - ab[t]) * noise
            x = m * x + (1.0 - m) * known
        eps = denoiser.forward(x, t, labels, attention=attention, step=i)
        x0 = np.clip((x - np.sqrt(1.0 - ab[t]) * eps) / np.sqrt(ab[t]), 0.0, 1.0)
        eps = (x - np.sqrt(ab[t]) * x0) / np.sqrt(1.0 - ab[t])
        ab_next = ab[ts[i + 1]] if i + 1 < len(ts) else 1.0
        x = np.sqrt(ab_next) * x0 + np.sqrt(1.0 - ab_next) * eps
    if m is not None:
        x = m * x + (1.0 - m) * z_src
    return x


def _view_noise(n, shape, seed, shared):
    rng = np.random.default_rng(seed)
    if shared:
        return np.broadcast_to(rng.standard_normal(shape), (n,) + shape).copy()
    return rng.standard_normal((n,) + shape)


def multiview_reference_edit(images, labels, denoiser, schedule, ref_index=0,
                             masks=None, seed=0, steps=25, shared_noise=True,
                             use_reference=True, reference_lag=0, record=False,
                             strength=1.0):
    """Edit ``n`` views in lockstep, sharing the reference view's K/V.

    Returns the edited latents, or ``(edited, bank)`` with ``record=True``
    where ``bank`` holds every view's K/V per (step, layer).
    """
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    if n < 2:
        raise ValueError("reference editing needs at least two views")
    if images.shape[1:] != (denoiser.config.height, denoiser.config.width,
                            denoiser.config.channels):
        raise ValueError(f"views must be {denoiser.config.height}x{denoiser.config.width}")
    noise = _view_noise(n, images.shape[1:], seed, shared_noise)
    attn = ReferenceAttention(ref_index, reference_lag) if use_reference else PlainAttention()
    bank = None
    if record:
        bank = KVBank()
        attn = RecordingAttention(attn, bank)
    out = denoise(denoiser, images, np.broadcast_to(labels, (n,)), schedule, noise,
                  masks=masks, steps=steps, attention=attn, strength=strength)
    return (out, bank) if record else out


def persona_denoise(latent, bank, lam, denoiser, schedule, label, mask=None,
                    seed=0, steps=25, strength=1.0):
    """Edit one latent with persona-blended attention against ``bank``."""
    if lam < 1.0:
        if len(bank) == 0:
            raise ValueError("persona blending with lambda < 1 needs a nonempty bank")
        if bank.layers != list(range(denoiser.config.n_blocks)):
            raise ValueError(f"bank layers {bank.layers} do not match "
                             f"{denoiser.config.n_blocks} attention sites")
    latent = np.asarray(latent, dtype=np.float64)[None]
    noise = _view_noise(1, latent.shape[1:], seed, True)
    masks = None if mask is None else np.asarray(mask)[None]
    out = denoise(denoiser, latent, np.asarray([label]), schedule, noise, masks=masks,
                  steps=steps, attention=PersonaAttention(bank, lam), strength=strength)
    return out[0]
