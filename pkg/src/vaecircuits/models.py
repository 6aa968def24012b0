"""Convolutional VAE (standard, beta, FactorVAE), losses and the training loop.

The forward pass is a fixed sequence of named stages. Every stage output is
an activation-capture site, and any site can be overridden mid-pass, which is
what activation patching and mediation build on.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping

import numpy as np

from .engine import Adam, NonFiniteError, SeededRNG, Tensor, backward, cosine_lr, no_grad
from .engine import functional as F

log = logging.getLogger(__name__)

VARIANTS = ("standard", "beta", "factor")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    variant: str = "standard"
    latent_dim: int = 10
    beta: float = 4.0
    gamma: float = 40.0
    lambda_recon: float = 1.0
    image_size: int = 64
    channels: int = 1
    conv_channels: tuple[int, ...] = (32, 64, 128)
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    weight_decay: float = 1e-5
    disc_lr: float = 5e-5
    disc_hidden: tuple[int, ...] = (256, 256, 256)
    disc_betas: tuple[float, float] = (0.5, 0.9)
    seed: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.disc_hidden = tuple(int(c) for c in self.disc_hidden)
        self.disc_betas = tuple(float(b) for b in self.disc_betas)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        # gamma = 0 is allowed: it is the documented control that reduces FactorVAE to a VAE
        for name in ("beta", "lambda_recon"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if not self.conv_channels:
            raise ConfigError("conv_channels must name at least one layer")
        if self.image_size % (2 ** len(self.conv_channels)) != 0:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by 2^{len(self.conv_channels)}")
        for name in ("lr", "disc_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.batch_size < 1 or self.epochs < 0 or self.weight_decay < 0:
            raise ConfigError("batch_size >= 1, epochs >= 0 and weight_decay >= 0 required")

    @property
    def kl_weight(self) -> float:
        return self.beta if self.variant == "beta" else 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("conv_channels", "disc_hidden", "disc_betas"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**dict(d))


def site_names(config: ModelConfig) -> list[str]:
    n = len(config.conv_channels)
    return ([f"encoder_conv_{i}" for i in range(n)] + ["mu", "logvar", "z"]
            + [f"decoder_conv_{i}" for i in range(n)] + ["recon"])


def site_shapes(config: ModelConfig, batch: int) -> dict[str, tuple[int, ...]]:
    n = len(config.conv_channels)
    s = config.image_size
    shapes: dict[str, tuple[int, ...]] = {}
    for i, c in enumerate(config.conv_channels):
        shapes[f"encoder_conv_{i}"] = (batch, c, s >> (i + 1), s >> (i + 1))
    for name in ("mu", "logvar", "z"):
        shapes[name] = (batch, config.latent_dim)
    dec_out = list(reversed(config.conv_channels[:-1])) + [config.channels]
    for i, c in enumerate(dec_out):
        side = s >> (n - 1 - i)
        shapes[f"decoder_conv_{i}"] = (batch, c, side, side)
    shapes["recon"] = (batch, config.channels, s, s)
    return shapes


@dataclass
class ModelBundle:
    config: ModelConfig
    params: dict[str, Tensor]
    disc_params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def site_names(self) -> list[str]:
        return site_names(self.config)

    @property
    def n_layers(self) -> int:
        return len(self.config.conv_channels)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self) -> "ModelBundle":
        return ModelBundle(
            ModelConfig.from_dict(self.config.to_dict()),
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()},
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.disc_params.items()},
        )


# --------------------------------------------------------------------- init

def _kaiming_uniform(rng: SeededRNG, shape: tuple[int, ...], fan_in: float) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(shape, -bound, bound), requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def init_model(config: ModelConfig, rng: SeededRNG) -> ModelBundle:
    """Kaiming-uniform (fan-in) weights, zero biases.

    Transposed convs use the effective fan-in ``cin * k * k / stride**2``.
    """
    k = 4
    p: dict[str, Tensor] = {}
    cin = config.channels
    for i, c in enumerate(config.conv_channels):
        p[f"enc{i}.w"] = _kaiming_uniform(rng, (c, cin, k, k), cin * k * k)
        p[f"enc{i}.b"] = _zeros(c)
        cin = c
    n = len(config.conv_channels)
    side = config.image_size >> n
    flat = config.conv_channels[-1] * side * side
    d = config.latent_dim
    p["mu.w"] = _kaiming_uniform(rng, (d, flat), flat)
    p["mu.b"] = _zeros(d)
    p["logvar.w"] = _kaiming_uniform(rng, (d, flat), flat)
    p["logvar.b"] = _zeros(d)
    p["dec_fc.w"] = _kaiming_uniform(rng, (flat, d), d)
    p["dec_fc.b"] = _zeros(flat)
    dec_channels = list(reversed(config.conv_channels)) + [config.channels]
    for i in range(n):
        ci, co = dec_channels[i], dec_channels[i + 1]
        p[f"dec{i}.w"] = _kaiming_uniform(rng, (ci, co, k, k), ci * k * k / 4)
        p[f"dec{i}.b"] = _zeros(co)
    return ModelBundle(config, p)


def init_discriminator(config: ModelConfig, rng: SeededRNG) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    widths = [config.latent_dim, *config.disc_hidden, 2]
    for i in range(len(widths) - 1):
        p[f"disc{i}.w"] = _kaiming_uniform(rng, (widths[i + 1], widths[i]), widths[i])
        p[f"disc{i}.b"] = _zeros(widths[i + 1])
    return p


# ------------------------------------------------------------------ forward

Override = Callable[[Tensor], Tensor]


class Forward:
    """Staged forward pass over one model.

    ``run`` evaluates stages in site order. ``overrides`` maps a site to a
    function applied to that site's freshly computed value; its result is
    what downstream stages consume. ``resume`` supplies already-computed site
    values so evaluation can start after a given site.
    """

    def __init__(self, model: ModelBundle):
        self.model = model
        self.cfg = model.config
        self.p = model.params
        n = model.n_layers
        self.n = n
        self.stages: list[tuple[str, Callable[[dict], Tensor]]] = []
        for i in range(n):
            self.stages.append((f"encoder_conv_{i}", self._enc(i)))
        self.stages += [("mu", self._head("mu")), ("logvar", self._head("logvar")),
                        ("z", self._z)]
        for i in range(n):
            self.stages.append((f"decoder_conv_{i}", self._dec(i)))
        self.stages.append(("recon", lambda v: v[f"decoder_conv_{n - 1}"]))
        self.order = [name for name, _ in self.stages]

    def _enc(self, i: int):
        def stage(v):
            h = v["x"] if i == 0 else v[f"encoder_conv_{i - 1}"]
            return F.relu(F.conv2d(h, self.p[f"enc{i}.w"], self.p[f"enc{i}.b"]))
        return stage

    def _head(self, name: str):
        def stage(v):
            h = v[f"encoder_conv_{self.n - 1}"]
            flat = F.reshape(h, (h.shape[0], -1))
            return F.linear(flat, self.p[f"{name}.w"], self.p[f"{name}.b"])
        return stage

    def _z(self, v):
        noise = v.get("noise")
        if noise is None:
            return v["mu"]
        return reparameterize(v["mu"], v["logvar"], noise)

    def _dec(self, i: int):
        last = i == self.n - 1

        def stage(v):
            if i == 0:
                z = v["z"]
                h = F.relu(F.linear(z, self.p["dec_fc.w"], self.p["dec_fc.b"]))
                side = self.cfg.image_size >> self.n
                h = F.reshape(h, (z.shape[0], self.cfg.conv_channels[-1], side, side))
            else:
                h = v[f"decoder_conv_{i - 1}"]
            out = F.conv_transpose2d(h, self.p[f"dec{i}.w"], self.p[f"dec{i}.b"])
            if last:
                v["logits"] = out
                return F.sigmoid(out)
            return F.relu(out)
        return stage

    def run(self, inputs: dict, overrides: Mapping[str, Override] | None = None,
            start_after: str | None = None, stop_after: str | None = None) -> dict:
        overrides = overrides or {}
        for site in overrides:
            if site not in self.order:
                raise KeyError(f"unknown site {site!r}; known: {self.order}")
        v = dict(inputs)
        started = start_after is None
        for name, fn in self.stages:
            if not started:
                if name == start_after:
                    started = True
                continue
            out = fn(v)
            if name in overrides:
                out = overrides[name](out)
            v[name] = out
            if name == stop_after:
                break
        return v


def _check_input(model: ModelBundle, x: Tensor) -> None:
    c = model.config
    want = (c.channels, c.image_size, c.image_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != want:
        raise ValueError(f"encode: expected input (batch, {want[0]}, {want[1]}, {want[2]}), "
                         f"got {x.shape}")


def reparameterize(mu: Tensor, logvar: Tensor, noise) -> Tensor:
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=np.float64)
    if mu.shape != logvar.shape or noise.shape != mu.shape:
        raise ValueError(f"reparameterize: shapes {mu.shape}, {logvar.shape}, {noise.shape}")
    return F.add(mu, F.mul(F.exp(F.mul(logvar, 0.5)), Tensor(noise)))


def encode(model: ModelBundle, x) -> tuple[Tensor, Tensor, dict[str, Tensor]]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_input(model, x)
    fwd = Forward(model)
    v = fwd.run({"x": x}, stop_after="logvar")
    trace = {k: v[k] for k in fwd.order if k in v}
    return v["mu"], v["logvar"], trace


def decode(model: ModelBundle, z) -> tuple[Tensor, dict[str, Tensor]]:
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.ndim != 2 or z.shape[1] != model.config.latent_dim:
        raise ValueError(f"decode: expected latent (batch, {model.config.latent_dim}), "
                         f"got {z.shape}")
    fwd = Forward(model)
    v = fwd.run({"z": z}, start_after="z")
    trace = {k: v[k] for k in fwd.order[fwd.order.index("decoder_conv_0"):]}
    trace["logits"] = v["logits"]
    return v["recon"], trace


def forward(model: ModelBundle, x, noise=None) -> dict[str, Tensor]:
    """Full pass; returns every site plus ``logits``. ``noise=None`` means z = mu."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_input(model, x)
    return Forward(model).run({"x": x, "noise": noise})


# ------------------------------------------------------------------- losses

def discriminator_logits(disc: Mapping[str, Tensor], z: Tensor, slope: float = 0.2) -> Tensor:
    n = len(disc) // 2
    h = z
    for i in range(n):
        h = F.linear(h, disc[f"disc{i}.w"], disc[f"disc{i}.b"])
        if i < n - 1:
            h = F.leaky_relu(h, slope)
    return h


def factorvae_tc(z: Tensor, disc: Mapping[str, Tensor], rng: SeededRNG):
    """Density-ratio TC estimate and the discriminator's own loss.

    Returns ``(tc, disc_loss, z_perm)``. ``tc`` is differentiable w.r.t. ``z``;
    the discriminator loss sees detached samples only. Class 0 is "joint"
    (true batch), class 1 is "marginal" (dimension-wise permuted batch).
    """
    b, d = z.shape
    if b < 2:
        raise ValueError("factorvae_tc: batch of 1 cannot be permuted")
    logits = discriminator_logits(disc, z)
    tc = F.mean(F.sub(F.take_column(logits, 0), F.take_column(logits, 1)))
    perms = np.stack([rng.permutation(b) for _ in range(d)])
    z_det = z.detach()
    z_perm = F.permute_dims(z_det, perms)
    joint = F.cross_entropy(discriminator_logits(disc, z_det), np.zeros(b, dtype=np.int64))
    marg = F.cross_entropy(discriminator_logits(disc, z_perm), np.ones(b, dtype=np.int64))
    disc_loss = F.mul(F.add(joint, marg), 0.5)
    return tc, disc_loss, z_perm


def loss(model: ModelBundle, x, outputs: Mapping[str, Tensor], tc: Tensor | None = None
         ) -> dict[str, Tensor]:
    """Loss components: recon (BCE summed over pixels), kl, tc and total; all batch means."""
    cfg = model.config
    target = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    b = target.shape[0]
    recon = F.mul(F.sum(F.bce_with_logits(outputs["logits"], target)), 1.0 / b)
    mu, logvar = outputs["mu"], outputs["logvar"]
    kl_terms = F.sub(F.add(F.square(mu), F.exp(logvar)), F.add(logvar, 1.0))
    kl = F.mul(F.sum(kl_terms), 0.5 / b)
    total = F.add(F.mul(recon, cfg.lambda_recon), F.mul(kl, cfg.kl_weight))
    out = {"recon": recon, "kl": kl}
    if cfg.variant == "factor":
        if tc is None:
            raise ValueError("factor variant needs a tc estimate")
        total = F.add(total, F.mul(tc, cfg.gamma))
        out["tc"] = tc
    out["total"] = total
    for name, t in out.items():
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"loss component {name} is not finite")
    return out


# ----------------------------------------------------------------- training

@dataclass
class TrainingLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)


def train(images: np.ndarray, config: ModelConfig,
          on_step: Callable[[dict], None] | None = None) -> tuple[ModelBundle, TrainingLog]:
    """Train one VAE variant on ``images`` (N, C, H, W) in [0, 1].

    Separate seeded streams drive init, shuffling, reparameterisation noise,
    discriminator init and the TC permutations, so turning the TC penalty on
    or off never shifts the VAE's own random draws.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError(f"train: need a nonempty (N, C, H, W) array, got {images.shape}")
    root = SeededRNG(config.seed)
    model = init_model(config, root.child(0))
    shuffle_rng, noise_rng = root.child(1), root.child(2)
    names = list(model.params)
    opt = Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay, names=names)
    factor = config.variant == "factor"
    if factor:
        model.disc_params = init_discriminator(config, root.child(3))
        perm_rng = root.child(4)
        disc_opt = Adam(list(model.disc_params.values()), lr=config.disc_lr,
                        betas=config.disc_betas, names=list(model.disc_params))

    n = len(images)
    bs = config.batch_size
    per_epoch = math.ceil(n / bs)
    total_steps = max(config.epochs * per_epoch, 1)
    tlog = TrainingLog()
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        sums: dict[str, float] = {}
        seen = 0
        for bi in range(per_epoch):
            idx = order[bi * bs:(bi + 1) * bs]
            if factor and len(idx) < 2:
                continue
            x = images[idx]
            lr = cosine_lr(step, total_steps, config.lr)
            try:
                noise = noise_rng.normal((len(idx), config.latent_dim))
                out = forward(model, Tensor(x), noise=noise)
                tc = disc_loss = None
                if factor:
                    # with gamma = 0 the penalty is inert; keep it off the VAE's tape
                    z_tc = out["z"] if config.gamma > 0 else out["z"].detach()
                    tc, disc_loss, _ = factorvae_tc(z_tc, model.disc_params, perm_rng)
                comps = loss(model, x, out, tc)
                opt.zero_grad()
                if factor:
                    disc_opt.zero_grad()
                backward(comps["total"])
                opt.step(lr)
                if factor:
                    disc_opt.zero_grad()
                    backward(disc_loss)
                    disc_opt.step()
            except (NonFiniteError, FloatingPointError) as exc:
                raise TrainingDiverged(f"diverged at epoch {epoch} step {step}: {exc}") from exc
            rec = {"epoch": epoch, "step": step, "lr": lr, "batch": len(idx)}
            rec.update({k: t.item() for k, t in comps.items()})
            if factor:
                rec["disc_loss"] = disc_loss.item()
            tlog.steps.append(rec)
            if on_step is not None:
                on_step(rec)
            for k, val in rec.items():
                if k not in ("epoch", "step", "lr", "batch"):
                    sums[k] = sums.get(k, 0.0) + val * len(idx)
            seen += len(idx)
            step += 1
        ep = {"epoch": epoch, "lr_end": cosine_lr(min(step, total_steps), total_steps, config.lr)}
        ep.update({k: v / max(seen, 1) for k, v in sums.items()})
        tlog.epochs.append(ep)
        log.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in ep.items()})
    return model, tlog


def frozen(model: ModelBundle) -> ModelBundle:
    """Read-only view for analysis: same arrays, no autodiff participation."""
    return ModelBundle(model.config,
                       {k: Tensor(v.data) for k, v in model.params.items()},
                       {k: Tensor(v.data) for k, v in model.disc_params.items()})


__all__ = [
    "ConfigError", "Forward", "ModelBundle", "ModelConfig", "TrainingDiverged", "TrainingLog",
    "VARIANTS", "decode", "discriminator_logits", "encode", "factorvae_tc", "forward", "frozen",
    "init_discriminator", "init_model", "loss", "no_grad", "reparameterize", "site_names",
    "site_shapes", "train",
]
