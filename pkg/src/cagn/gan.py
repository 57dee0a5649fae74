"""Resnet generator/discriminator, the non-saturating GAN objective with
R1 gradient penalty on real data, and one adversarial training step.

The generator's 3x3 block convolutions (all except the output layer) are
the instrumented layers: each one's feature map passes through a
task-specific adapter before feeding forward.  Skip 1x1 convs stay
uninstrumented so every instrumented layer's adapter is strictly smaller
than the layer it transforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .adapters import AdapterConfig, AdapterParams, adapter_forward, adapter_init
from .errors import ConfigurationError, ContractViolationError, NumericFailureError
from .optim import Adam
from .tensor import Tensor


@dataclass
class GeneratorSpec:
    latent_dim: int = 64
    embed_dim: int = 1
    num_classes: int = 1
    conditional: bool = False
    init_size: int = 4
    init_channels: int = 64
    blocks: tuple = ((64, True), (64, True), (32, True), (32, False))
    out_channels: int = 3

    @property
    def out_size(self) -> int:
        return self.init_size * 2 ** sum(1 for _, up in self.blocks if up)


@dataclass
class DiscriminatorSpec:
    in_channels: int = 3
    embed_planes: int = 4
    num_classes: int = 1
    conditional: bool = False
    base_channels: int = 32
    blocks: tuple = ((32, True), (64, True), (64, True), (64, False))
    final_size: int = 4


@dataclass
class TrainConfig:
    gamma: float = 10.0
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8
    batch_size: int = 8
    iterations: int = 3000
    seed: int = 0
    loss_variant: str = "nonsat"  # or "minimax"
    reinit_discriminator: bool = False

    def __post_init__(self):
        if self.gamma <= 0 or self.iterations <= 0:
            raise ConfigurationError("TrainConfig: gamma and iterations must be positive")
        if self.loss_variant not in ("nonsat", "minimax"):
            raise ConfigurationError(f"unknown loss variant '{self.loss_variant}'")


def generator_layout(spec: GeneratorSpec) -> list[dict]:
    """Canonical per-layer description shared by forward pass and costing."""
    entries = []
    c0 = spec.init_channels
    entries.append(
        {
            "kind": "dense",
            "name": "dense",
            "f_in": spec.latent_dim + spec.embed_dim,
            "f_out": c0 * spec.init_size * spec.init_size,
        }
    )
    size = spec.init_size
    c_in = c0
    instrumented_channels: list[int] = []
    for i, (c_out, up) in enumerate(spec.blocks):
        if up:
            size *= 2
        if c_in != c_out:
            entries.append(
                {
                    "kind": "conv",
                    "name": f"block{i}/skip",
                    "c_in": c_in,
                    "c_out": c_out,
                    "hw": size,
                    "k": 1,
                    "bias": False,
                    "instrumented": False,
                }
            )
        for conv_name, cin_conv in ((f"block{i}/conv1", c_in), (f"block{i}/conv2", c_out)):
            j = len(instrumented_channels)
            prev2 = instrumented_channels[j - 2] if j >= 2 else None
            entries.append(
                {
                    "kind": "conv",
                    "name": conv_name,
                    "c_in": cin_conv,
                    "c_out": c_out,
                    "hw": size,
                    "k": 3,
                    "bias": True,
                    "instrumented": True,
                    "prev2_channels": prev2,
                }
            )
            instrumented_channels.append(c_out)
        c_in = c_out
    entries.append(
        {
            "kind": "conv",
            "name": "out",
            "c_in": c_in,
            "c_out": spec.out_channels,
            "hw": size,
            "k": 3,
            "bias": True,
            "instrumented": False,
        }
    )
    return entries


class GanModel:
    """Parameter naming, initialization and forward passes for one
    generator/discriminator pair."""

    def __init__(self, gspec: GeneratorSpec, dspec: DiscriminatorSpec, adapter_cfg: AdapterConfig):
        self.gspec = gspec
        self.dspec = dspec
        self.adapter_cfg = adapter_cfg
        self.layout = generator_layout(gspec)
        self.instrumented = [e for e in self.layout if e.get("instrumented")]

    # -- initialization -----------------------------------------------------

    def init_theta(self, seed: int, dtype=np.float32) -> dict[str, Tensor]:
        rng = np.random.default_rng([seed, 1])
        params: dict[str, Tensor] = {}
        for e in self.layout:
            if e["kind"] == "dense":
                std = 1.0 / np.sqrt(e["f_in"])
                params["dense_w"] = _p(rng.normal(0, std, (e["f_out"], e["f_in"])), dtype)
                params["dense_b"] = _p(np.zeros(e["f_out"]), dtype)
            else:
                kh = e["k"]
                std = np.sqrt(2.0 / (e["c_in"] * kh * kh))
                params[f"{e['name']}_w"] = _p(
                    rng.normal(0, std, (e["c_out"], e["c_in"], kh, kh)), dtype
                )
                if e["bias"]:
                    params[f"{e['name']}_b"] = _p(np.zeros(e["c_out"]), dtype)
        params["embed"] = _p(
            rng.normal(0, 1.0, (self.gspec.num_classes, self.gspec.embed_dim)), dtype
        )
        return params

    def init_psi(self, seed: int, dtype=np.float32) -> dict[str, Tensor]:
        rng = np.random.default_rng([seed, 2])
        d = self.dspec
        params: dict[str, Tensor] = {}
        c_in = d.in_channels + (d.embed_planes if d.conditional else 0)
        std = np.sqrt(2.0 / (c_in * 9))
        params["conv_in_w"] = _p(rng.normal(0, std, (d.base_channels, c_in, 3, 3)), dtype)
        params["conv_in_b"] = _p(np.zeros(d.base_channels), dtype)
        c_prev = d.base_channels
        for i, (c_out, _down) in enumerate(d.blocks):
            if c_prev != c_out:
                params[f"block{i}/skip_w"] = _p(
                    rng.normal(0, np.sqrt(1.0 / c_prev), (c_out, c_prev, 1, 1)), dtype
                )
            params[f"block{i}/conv1_w"] = _p(
                rng.normal(0, np.sqrt(2.0 / (c_prev * 9)), (c_out, c_prev, 3, 3)), dtype
            )
            params[f"block{i}/conv1_b"] = _p(np.zeros(c_out), dtype)
            params[f"block{i}/conv2_w"] = _p(
                rng.normal(0, np.sqrt(2.0 / (c_out * 9)), (c_out, c_out, 3, 3)), dtype
            )
            params[f"block{i}/conv2_b"] = _p(np.zeros(c_out), dtype)
            c_prev = c_out
        f_in = c_prev * d.final_size * d.final_size
        params["out_w"] = _p(rng.normal(0, np.sqrt(1.0 / f_in), (1, f_in)), dtype)
        params["out_b"] = _p(np.zeros(1), dtype)
        if d.conditional:
            params["embed"] = _p(rng.normal(0, 1.0, (d.num_classes, d.embed_planes)), dtype)
        return params

    def init_phi(self, seed: int, dtype=np.float32) -> dict[str, Tensor]:
        """Flat name->Tensor map over every instrumented layer."""
        flat: dict[str, Tensor] = {}
        for idx, e in enumerate(self.instrumented):
            cfg = self.adapter_cfg.for_layer(e["name"])
            ap = adapter_init(
                e["c_out"], cfg, seed=abs(hashly(seed, idx)), c_prev2=e.get("prev2_channels"),
                dtype=dtype,
            )
            flat.update(ap.tensors(prefix=f"{e['name']}/"))
        return flat

    def phi_struct(self, flat: dict[str, Tensor]) -> dict[str, AdapterParams]:
        out: dict[str, AdapterParams] = {}
        for e in self.instrumented:
            p = f"{e['name']}/"
            out[e["name"]] = AdapterParams(
                c=e["c_out"],
                phi_g_w=flat[p + "phi_g_w"],
                phi_g_b=flat[p + "phi_g_b"],
                phi_p_w=flat.get(p + "phi_p_w"),
                phi_p_b=flat.get(p + "phi_p_b"),
                phi_r_w=flat.get(p + "phi_r_w"),
                phi_r_b=flat.get(p + "phi_r_b"),
            )
        return out

    # -- forward passes -----------------------------------------------------

    def generate(
        self,
        z: Tensor,
        labels: Optional[np.ndarray],
        theta: dict[str, Tensor],
        phi_flat: Optional[dict[str, Tensor]],
    ) -> Tensor:
        spec = self.gspec
        b = z.data.shape[0]
        if spec.conditional and labels is None:
            raise ContractViolationError("conditional generator requires labels")
        if labels is None:
            labels = np.zeros(b, dtype=np.int64)
        e = T.index_rows(theta["embed"], labels)
        h = T.concat_channels([z, e])
        x = T.dense(h, theta["dense_w"], theta["dense_b"])
        x = T.reshape(x, (b, spec.init_channels, spec.init_size, spec.init_size))

        phi = self.phi_struct(phi_flat) if phi_flat is not None else None
        adapted: list[Tensor] = []

        def maybe_adapt(name: str, fmap: Tensor) -> Tensor:
            if phi is None:
                return fmap
            j = len(adapted)
            prev2 = adapted[j - 2] if j >= 2 else None
            out = adapter_forward(fmap, prev2, phi[name], self.adapter_cfg.for_layer(name))
            adapted.append(out)
            return out

        c_in = spec.init_channels
        for i, (c_out, up) in enumerate(spec.blocks):
            skip = T.upsample_nearest2x(x) if up else x
            if c_in != c_out:
                skip = T.conv2d(skip, theta[f"block{i}/skip_w"], None, padding=0)
            h = T.leaky_relu(x)
            if up:
                h = T.upsample_nearest2x(h)
            h = T.conv2d(h, theta[f"block{i}/conv1_w"], theta[f"block{i}/conv1_b"], padding=1)
            h = maybe_adapt(f"block{i}/conv1", h)
            h = T.leaky_relu(h)
            h = T.conv2d(h, theta[f"block{i}/conv2_w"], theta[f"block{i}/conv2_b"], padding=1)
            h = maybe_adapt(f"block{i}/conv2", h)
            x = T.add(skip, h)
            c_in = c_out
        x = T.leaky_relu(x)
        img = T.tanh(T.conv2d(x, theta["out_w"], theta["out_b"], padding=1))
        return img

    def discriminate(
        self, x: Tensor, labels: Optional[np.ndarray], psi: dict[str, Tensor]
    ) -> Tensor:
        d = self.dspec
        if d.conditional:
            if labels is None:
                raise ContractViolationError("conditional discriminator requires labels")
            e = T.index_rows(psi["embed"], labels)
            planes = T.broadcast_plane(e, x.data.shape[2], x.data.shape[3])
            x = T.concat_channels([x, planes])
        h = T.conv2d(x, psi["conv_in_w"], psi["conv_in_b"], padding=1)
        c_prev = d.base_channels
        for i, (c_out, down) in enumerate(d.blocks):
            skip = h
            if c_prev != c_out:
                skip = T.conv2d(skip, psi[f"block{i}/skip_w"], None, padding=0)
            if down:
                skip = T.avg_pool2x(skip)
            m = T.leaky_relu(h)
            m = T.conv2d(m, psi[f"block{i}/conv1_w"], psi[f"block{i}/conv1_b"], padding=1)
            m = T.leaky_relu(m)
            m = T.conv2d(m, psi[f"block{i}/conv2_w"], psi[f"block{i}/conv2_b"], padding=1)
            if down:
                m = T.avg_pool2x(m)
            h = T.add(skip, m)
            c_prev = c_out
        h = T.leaky_relu(h)
        flat = T.reshape(h, (h.data.shape[0], c_prev * d.final_size * d.final_size))
        return T.dense(flat, psi["out_w"], psi["out_b"])


def _p(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def hashly(seed: int, idx: int) -> int:
    # stable per-layer seed derivation without python hash randomization
    return int(np.random.default_rng([seed, idx]).integers(0, 2**31 - 1))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def gan_losses(
    logits_real: Tensor, logits_fake: Tensor, variant: str = "nonsat"
) -> tuple[Tensor, Tensor]:
    """Logistic GAN losses on raw discriminator logits.

    loss_D = E[softplus(-D(real))] + E[softplus(D(fake))]; the generator
    loss is the non-saturating E[softplus(-D(fake))] by default, or the
    saturating minimax form -E[softplus(D(fake))]."""
    if logits_real.data.shape != logits_fake.data.shape:
        raise ContractViolationError("gan_losses: batch shapes differ")
    loss_d = T.add(
        T.mean_all(T.softplus(T.neg(logits_real))), T.mean_all(T.softplus(logits_fake))
    )
    if variant == "nonsat":
        loss_g = T.mean_all(T.softplus(T.neg(logits_fake)))
    elif variant == "minimax":
        loss_g = T.neg(T.mean_all(T.softplus(logits_fake)))
    else:
        raise ConfigurationError(f"unknown loss variant '{variant}'")
    for val, name in ((loss_d, "loss_D"), (loss_g, "loss_G")):
        if not np.isfinite(val.data):
            raise NumericFailureError(f"{name} is not finite")
    return loss_d, loss_g


def r1_from_logits(logits_real: Tensor, real: Tensor, gamma: float) -> Tensor:
    """(gamma/2) * mean_b ||d D(x_b)/d x_b||^2, differentiable w.r.t. the
    discriminator parameters (double backward)."""
    score = T.sum_all(logits_real)
    gmap = T.grad([score], [real], create_graph=True)
    if real.node_id not in gmap:
        # constant discriminator: zero penalty
        return Tensor(np.zeros((), dtype=logits_real.dtype))
    gx = gmap[real.node_id]
    per_sample = T.sum_axes(T.square(gx), tuple(range(1, gx.data.ndim)))
    return T.smul(T.mean_all(per_sample), gamma / 2.0)


def r1_penalty(d_fn, real: np.ndarray, gamma: float) -> Tensor:
    """Standalone form: runs its own discriminator forward on `real`."""
    x = Tensor(np.asarray(real), requires_grad=True)
    logits = d_fn(x)
    return r1_from_logits(logits, x, gamma)


# ---------------------------------------------------------------------------
# one adversarial step
# ---------------------------------------------------------------------------

def _named_grads(
    loss: Tensor, named: dict[str, Tensor]
) -> dict[str, Tensor]:
    tensors = [t for t in named.values() if t.requires_grad]
    gmap = T.grad([loss], tensors)
    out = {}
    for name, t in named.items():
        if t.node_id in gmap:
            out[name] = gmap[t.node_id]
    return out


def train_step(
    model: GanModel,
    theta: dict[str, Tensor],
    phi_flat: Optional[dict[str, Tensor]],
    psi: dict[str, Tensor],
    opt_g: Adam,
    opt_d: Adam,
    real: np.ndarray,
    labels: Optional[np.ndarray],
    z_rng: np.random.Generator,
    cfg: TrainConfig,
    iteration: int = 0,
) -> dict[str, float]:
    """One discriminator update (logistic loss + R1 on real data), then one
    generator update.  Frozen tensors are never touched: the engine omits
    them from gradient maps, and Adam only visits mapped names."""
    b = real.shape[0]
    latent = model.gspec.latent_dim

    def sample_z():
        return Tensor(z_rng.normal(size=(b, latent)).astype(real.dtype))

    def fake_labels():
        if not model.gspec.conditional:
            return None
        return z_rng.integers(0, model.gspec.num_classes, size=b)

    # --- discriminator phase (generator detached) ---
    fl = fake_labels()
    with T.no_grad():
        fake = model.generate(sample_z(), fl, theta, phi_flat)
    real_t = Tensor(real, requires_grad=True)
    logits_real = model.discriminate(real_t, labels, psi)
    logits_fake = model.discriminate(fake.detach(), fl, psi)
    loss_d, _ = gan_losses(logits_real, logits_fake, cfg.loss_variant)
    r1 = r1_from_logits(logits_real, real_t, cfg.gamma)
    total_d = T.add(loss_d, r1)
    if not np.isfinite(total_d.data):
        raise NumericFailureError("discriminator loss is not finite", iteration=iteration)
    opt_d.step(psi, _named_grads(total_d, psi))

    # --- generator phase ---
    for t in psi.values():
        t.requires_grad = False
    try:
        fl2 = fake_labels()
        fake2 = model.generate(sample_z(), fl2, theta, phi_flat)
        logits_fake2 = model.discriminate(fake2, fl2, psi)
        if cfg.loss_variant == "nonsat":
            loss_g = T.mean_all(T.softplus(T.neg(logits_fake2)))
        else:
            loss_g = T.neg(T.mean_all(T.softplus(logits_fake2)))
        if not np.isfinite(loss_g.data):
            raise NumericFailureError("generator loss is not finite", iteration=iteration)
        trainable: dict[str, Tensor] = {
            f"theta/{n}": t for n, t in theta.items() if t.requires_grad
        }
        if phi_flat is not None:
            trainable.update({f"phi/{n}": t for n, t in phi_flat.items()})
        grads = _named_grads(loss_g, trainable)
        opt_g.step(trainable, grads)
    finally:
        for t in psi.values():
            t.requires_grad = True
    return {
        "loss_d": float(loss_d.data),
        "loss_g": float(loss_g.data),
        "r1": float(r1.data),
    }
