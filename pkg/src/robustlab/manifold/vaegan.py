"""VAE-GAN manifold approximation with fully connected networks.

The encoder maps an image to the mean and log-variance of a diagonal
Gaussian posterior, the decoder maps a latent code to an image through a
sigmoid, and an optional discriminator scores images as real or generated.
Setting ``adversarial_weight`` to zero trains a plain VAE.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..autodiff import AdamState, Classifier, Tensor, adam_step, log_sigmoid, no_grad
from ..autodiff import serialize
from ..autodiff.nn import BatchNorm, Flatten, Linear, ReLU

log = logging.getLogger(__name__)

LOG_FLOOR = float(np.log(1e-7))
SCOPES = ("class-specific", "class-agnostic")


class TrainingDiverged(FloatingPointError):
    pass


def _mlp(sizes: list[int], rng, flatten_shape: tuple | None = None, batch_norm: bool = False) -> Classifier:
    layers = [Flatten()] if flatten_shape is not None and len(flatten_shape) > 1 else []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Linear(a, b, rng))
        if i < len(sizes) - 2:
            layers.append(ReLU())
            if batch_norm:
                layers.append(BatchNorm(b))
    input_shape = flatten_shape if flatten_shape is not None else (sizes[0],)
    return Classifier(layers, input_shape, sizes[-1], kind="custom")


@dataclass
class ManifoldModel:
    encoder: Classifier  # image -> (mu, log_var) concatenated
    decoder: Classifier  # z -> image logits (flattened)
    discriminator: Classifier | None
    latent_dim: int = 10
    image_shape: tuple = (1, 28, 28)
    scope: str = "class-agnostic"
    class_id: int | None = None
    lambda_recon: float = 3.0
    box: float = 2.0
    meta: dict = field(default_factory=dict)

    name = "learned"

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}, got {self.scope!r}")
        if self.scope == "class-specific" and self.class_id is None:
            raise ValueError("a class-specific manifold needs a class_id")
        self.image_shape = tuple(self.image_shape)

    @classmethod
    def build(cls, image_shape=(1, 28, 28), latent_dim: int = 10, hidden=(256, 128), seed: int = 0, **kwargs) -> "ManifoldModel":
        rng = np.random.default_rng(seed)
        pixels = int(np.prod(image_shape))
        h = list(hidden)
        encoder = _mlp([pixels, *h, 2 * latent_dim], rng, tuple(image_shape))
        decoder = _mlp([latent_dim, *h[::-1], pixels], rng)
        discriminator = _mlp([pixels, *h, 1], rng, tuple(image_shape))
        return cls(encoder, decoder, discriminator, latent_dim, tuple(image_shape), meta={"hidden": h, "seed": seed}, **kwargs)

    # latent box --------------------------------------------------------------
    @property
    def lower(self) -> np.ndarray:
        return np.full(self.latent_dim, -self.box)

    @property
    def upper(self) -> np.ndarray:
        return np.full(self.latent_dim, self.box)

    # networks ----------------------------------------------------------------
    def posterior(self, x) -> tuple[Tensor, Tensor]:
        out = self.encoder(x)
        return out[:, : self.latent_dim], out[:, self.latent_dim :]

    def decode(self, z, rows=None) -> Tensor:
        if not isinstance(z, Tensor):
            z = Tensor(z)
        return self.decoder(z).sigmoid().reshape((len(z),) + self.image_shape)

    def encode(self, x: np.ndarray, rows=None, batch_size: int = 500) -> np.ndarray:
        """Posterior means for a batch of images."""
        out = []
        with no_grad():
            for start in range(0, len(x), batch_size):
                mu, _ = self.posterior(Tensor(x[start : start + batch_size]))
                out.append(mu.data)
        return np.concatenate(out) if out else np.zeros((0, self.latent_dim))

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.decode(Tensor(self.encode(x))).data

    def reconstruction_error(self, x: np.ndarray) -> float:
        """Mean absolute per-pixel error of mean reconstructions."""
        return float(np.abs(self.reconstruct(x) - x).mean())

    def networks(self) -> dict:
        nets = {"encoder": self.encoder, "decoder": self.decoder}
        if self.discriminator is not None:
            nets["discriminator"] = self.discriminator
        return nets

    # persistence -------------------------------------------------------------
    def save(self, path) -> None:
        blocks = {}
        arch = {}
        for name, net in self.networks().items():
            arch[name] = net.descriptor()
            blocks.update({f"{name}/{k}": v for k, v in net.state().items()})
        meta = {
            "type": "manifold",
            "latent_dim": self.latent_dim,
            "image_shape": list(self.image_shape),
            "scope": self.scope,
            "class_id": self.class_id,
            "lambda_recon": self.lambda_recon,
            "box": self.box,
            "architecture": arch,
            "meta": self.meta,
        }
        serialize.save(path, blocks, meta)

    @classmethod
    def load(cls, path) -> "ManifoldModel":
        blocks, meta = serialize.load(path)
        if meta.get("type") != "manifold":
            raise serialize.FormatError(f"container holds {meta.get('type')!r}, not a manifold model")
        nets = {}
        for name, desc in meta["architecture"].items():
            prefix = f"{name}/"
            state = {k[len(prefix) :]: v for k, v in blocks.items() if k.startswith(prefix)}
            nets[name] = serialize.classifier_from_blocks(desc, state)
        return cls(
            nets["encoder"],
            nets["decoder"],
            nets.get("discriminator"),
            meta["latent_dim"],
            tuple(meta["image_shape"]),
            meta["scope"],
            meta["class_id"],
            meta["lambda_recon"],
            meta["box"],
            meta.get("meta", {}),
        )


def kl_to_standard_normal(mu, log_var):
    """KL(N(mu, diag(exp(log_var))) || N(0, I)) per row; works on arrays or tensors."""
    if isinstance(mu, Tensor):
        return ((mu * mu + log_var.exp() - 1.0 - log_var) * 0.5).sum(axis=1)
    mu, log_var = np.asarray(mu, dtype=np.float64), np.asarray(log_var, dtype=np.float64)
    return 0.5 * (mu * mu + (np.expm1(log_var) - log_var)).sum(axis=-1)


@dataclass
class VaeGanLosses:
    encoder: Tensor
    decoder: Tensor
    discriminator: Tensor | None
    reconstruction: float
    kl: float


def _check_finite(*tensors):
    for t in tensors:
        if t is not None and not np.all(np.isfinite(t.data)):
            raise TrainingDiverged("non-finite activations in VAE-GAN losses")


def vae_gan_losses(model: ManifoldModel, batch, noise: np.ndarray, adversarial_weight: float = 1.0, part: str = "all") -> VaeGanLosses:
    """Encoder, decoder and discriminator objectives for one batch.

    ``noise`` is the standard-normal draw of the reparameterised sample,
    shared by all three objectives. ``part`` limits which graphs are built
    ("encoder", "decoder", "discriminator" or "all"), so each network's
    gradient can come from its own objective.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if np.any(x.data < 0) or np.any(x.data > 1):
        raise ValueError("batch values must lie in [0, 1]")
    n = len(x)
    lam = model.lambda_recon
    mu, log_var = model.posterior(x)
    z = mu + (log_var * 0.5).exp() * Tensor(noise)
    if part == "decoder":
        z = z.detach()
    recon_img = model.decode(z)
    recon = ((x - recon_img).abs().reshape(n, -1).sum(axis=1)).mean()
    kl = kl_to_standard_normal(mu, log_var).mean()
    _check_finite(recon, kl)

    enc_loss = recon * lam + kl
    dec_loss = recon * lam
    dis_loss = None
    use_gan = model.discriminator is not None and adversarial_weight > 0
    if use_gan and part in ("all", "decoder"):
        fake_logit = model.discriminator(recon_img)
        dec_loss = dec_loss - log_sigmoid(fake_logit).maximum(LOG_FLOOR).mean() * adversarial_weight
    if use_gan and part in ("all", "discriminator"):
        fake = recon_img.detach() if part == "discriminator" else recon_img
        real_term = log_sigmoid(model.discriminator(x)).maximum(LOG_FLOOR)
        fake_term = log_sigmoid(-model.discriminator(fake)).maximum(LOG_FLOOR)
        dis_loss = -(real_term + fake_term).mean()
    _check_finite(enc_loss, dec_loss, dis_loss)
    return VaeGanLosses(enc_loss, dec_loss, dis_loss, float(recon.data), float(kl.data))


def discriminator_loss_from_probabilities(p_real, p_fake) -> np.ndarray:
    """-log D(x) - log(1 - D(dec(z))) with the probability floor applied."""
    floor = np.exp(LOG_FLOOR)
    return -np.log(np.maximum(p_real, floor)) - np.log(np.maximum(1.0 - np.asarray(p_fake), floor))


@dataclass(frozen=True)
class ManifoldTrainingConfig:
    latent_dim: int = 10
    lambda_recon: float = 3.0
    adversarial_weight: float = 1.0
    learning_rate: float = 0.005
    decay: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 100
    epochs: int = 10
    hidden: tuple = (256, 128)
    seed: int = 0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def train_manifold(
    images: np.ndarray,
    scope: str = "class-agnostic",
    config: ManifoldTrainingConfig | None = None,
    class_id: int | None = None,
    held_out: np.ndarray | None = None,
) -> ManifoldModel:
    """Fit a VAE-GAN to ``images`` with alternating per-network Adam updates.

    For ``class-specific`` scope the caller passes images of one class only.
    The held-out L1 reconstruction error is stored in ``model.meta``.
    """
    config = config or ManifoldTrainingConfig()
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("cannot train a manifold on an empty dataset")
    model = ManifoldModel.build(
        images.shape[1:],
        config.latent_dim,
        config.hidden,
        config.seed,
        scope=scope,
        class_id=class_id,
        lambda_recon=config.lambda_recon,
    )
    use_gan = config.adversarial_weight > 0
    if not use_gan:
        model.discriminator = None
    states = {
        name: AdamState(config.learning_rate, config.decay, config.weight_decay) for name in model.networks()
    }
    rng = np.random.default_rng([config.seed, 1])
    n = len(images)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        totals = np.zeros(3)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = images[idx]
            noise = rng.standard_normal((len(idx), config.latent_dim))
            for net in model.networks().values():
                net.zero_grad()
            try:
                enc = vae_gan_losses(model, x, noise, config.adversarial_weight, part="encoder")
                enc.encoder.backward()
                enc_grads = {k: p.grad for k, p in model.encoder.named_parameters().items()}
                model.decoder.zero_grad()
                dec = vae_gan_losses(model, x, noise, config.adversarial_weight, part="decoder")
                dec.decoder.backward()
                adam_step(states["encoder"], model.encoder.named_parameters(), enc_grads)
                adam_step(states["decoder"], model.decoder.named_parameters())
                if use_gan:
                    model.discriminator.zero_grad()
                    dis = vae_gan_losses(model, x, noise, config.adversarial_weight, part="discriminator")
                    dis.discriminator.backward()
                    adam_step(states["discriminator"], model.discriminator.named_parameters())
                    totals[2] += float(dis.discriminator.data) * len(idx)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"manifold training diverged in epoch {epoch}: {exc}") from exc
            totals[0] += enc.reconstruction * len(idx)
            totals[1] += enc.kl * len(idx)
        for state in states.values():
            state.end_epoch()
        history.append({"epoch": epoch + 1, "reconstruction": totals[0] / n, "kl": totals[1] / n, "discriminator": totals[2] / n})
        log.debug("manifold epoch %d: %s", epoch + 1, history[-1])
    for net in model.networks().values():
        net.eval()
        for p in net.named_parameters().values():
            p.requires_grad = False
    model.meta.update({"training": config.as_dict(), "history": history})
    if held_out is not None and len(held_out):
        model.meta["held_out_l1"] = model.reconstruction_error(held_out)
    return model


@dataclass
class ClassManifolds:
    """One class-specific manifold per label."""

    models: dict

    name = "learned-class-specific"

    def __getitem__(self, label: int) -> ManifoldModel:
        if int(label) not in self.models:
            raise KeyError(f"no manifold for class {label}")
        return self.models[int(label)]

    @property
    def latent_dim(self) -> int:
        return next(iter(self.models.values())).latent_dim


def train_class_manifolds(images: np.ndarray, labels: np.ndarray, config: ManifoldTrainingConfig | None = None) -> ClassManifolds:
    config = config or ManifoldTrainingConfig()
    models = {}
    for c in np.unique(labels):
        models[int(c)] = train_manifold(images[labels == c], "class-specific", config, class_id=int(c))
    return ClassManifolds(models)
