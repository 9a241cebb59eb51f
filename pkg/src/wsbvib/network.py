"""Image-to-correspondence network with concrete-dropout weight uncertainty.

A strided 3D conv encoder maps a volume to a latent Gaussian; a small dense
decoder maps latent vectors to an ordered point set. In bayesian mode the
dense encoder layers carry learnable concrete-dropout rates whose masks are
relaxed Bernoulli draws, and weight_kl() turns the dropout rates plus weight
norms into the variational weight penalty. The decoder stays deterministic
so the latent-to-shape map acts as the shared correspondence model.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import LatentGaussian, PointSet, PredictiveDistribution, Volume
from .errors import ConfigError, DataError, IOFormatError, MissingFileError
from .uncertainty import decompose

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    latent_dim: int = 32
    m_out: int = 256
    input_resolution: tuple = (48, 48, 48)
    conv_channels: tuple = (8, 16, 32, 64)
    dense_widths: tuple = (256, 128)
    decoder_widths: tuple = (256, 1024)
    dropout_init_p: float = 0.1
    dropout_temperature: float = 0.1
    dropout_prior_lengthscale: float = 1e-2
    bayesian: bool = True
    conv_dropout: bool = False

    def __post_init__(self):
        if self.latent_dim < 2:
            raise ConfigError(f"latent_dim must be >= 2, got {self.latent_dim}")
        if self.m_out < 4:
            raise ConfigError(f"m_out must be >= 4, got {self.m_out}")
        if len(self.input_resolution) != 3 or any(int(r) < 8 for r in self.input_resolution):
            raise ConfigError(f"input_resolution must be 3 dims >= 8, got {self.input_resolution}")
        if not self.conv_channels or any(int(c) < 1 for c in self.conv_channels):
            raise ConfigError("conv_channels must be positive and non-empty")
        if not self.dense_widths or any(int(w) < 1 for w in self.dense_widths):
            raise ConfigError("dense_widths must be positive and non-empty")
        if not self.decoder_widths or any(int(w) < 1 for w in self.decoder_widths):
            raise ConfigError("decoder_widths must be positive and non-empty")
        if not 0.0 < self.dropout_init_p < 1.0:
            raise ConfigError(f"dropout_init_p must lie in (0, 1), got {self.dropout_init_p}")
        if self.dropout_temperature <= 0:
            raise ConfigError("dropout_temperature must be positive")
        if self.dropout_prior_lengthscale <= 0:
            raise ConfigError("dropout_prior_lengthscale must be positive")
        object.__setattr__(self, "input_resolution", tuple(int(r) for r in self.input_resolution))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "dense_widths", tuple(int(w) for w in self.dense_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))


def concrete_mask(p, temperature, u):
    """Relaxed Bernoulli keep-mask: 1 at u -> 0, 0 at u -> 1, 0.5 at u = p = 0.5."""
    p = torch.as_tensor(p, dtype=torch.float64 if not torch.is_tensor(u) else None)
    u = torch.as_tensor(u)
    if torch.is_tensor(p) and p.dtype != u.dtype:
        p = p.to(u.dtype)
    logit = torch.log(p) - torch.log1p(-p) + torch.log(u) - torch.log1p(-u)
    return 1.0 - torch.sigmoid(logit / temperature)


def reparameterize(q: LatentGaussian, eps: torch.Tensor) -> torch.Tensor:
    """z = mu + exp(log_var / 2) * eps, broadcasting eps over the batch."""
    mu = q.mu if torch.is_tensor(q.mu) else torch.as_tensor(q.mu)
    log_var = q.log_var if torch.is_tensor(q.log_var) else torch.as_tensor(q.log_var)
    return mu + torch.exp(0.5 * log_var) * eps


def _conv_out(n: int) -> int:
    # Conv3d(kernel 3, stride 2, padding 1)
    return (n - 1) // 2 + 1


class ShapePredictor(nn.Module):
    """Encoder/decoder pair; see the module docstring."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.step = 0
        self.dataset_size = 1

        blocks = []
        in_ch = 1
        dims = list(config.input_resolution)
        for out_ch in config.conv_channels:
            blocks.append(nn.Sequential(
                nn.Conv3d(in_ch, out_ch, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(min(8, out_ch), out_ch),
                nn.ReLU(),
            ))
            in_ch = out_ch
            dims = [_conv_out(d) for d in dims]
        self.conv_blocks = nn.ModuleList(blocks)
        self.flat_dim = in_ch * dims[0] * dims[1] * dims[2]

        dense = []
        widths = [self.flat_dim, *config.dense_widths]
        for a, b in zip(widths[:-1], widths[1:]):
            dense.append(nn.Linear(a, b))
        self.dense_layers = nn.ModuleList(dense)
        self.head_mu = nn.Linear(widths[-1], config.latent_dim)
        self.head_log_var = nn.Linear(widths[-1], config.latent_dim)

        dec = []
        dwidths = [config.latent_dim, *config.decoder_widths, 3 * config.m_out]
        for a, b in zip(dwidths[:-1], dwidths[1:]):
            dec.append(nn.Linear(a, b))
        self.decoder_layers = nn.ModuleList(dec)

        # one learnable dropout logit per masked layer input; order fixes the
        # mask draw sequence for a given seed
        self._drop_specs = []
        if config.bayesian:
            init_logit = math.log(config.dropout_init_p) - math.log1p(-config.dropout_init_p)
            if config.conv_dropout:
                for i in range(1, len(self.conv_blocks)):
                    self._drop_specs.append((f"conv{i}", config.conv_channels[i - 1]))
            for i, layer in enumerate(self.dense_layers):
                self._drop_specs.append((f"dense{i}", layer.in_features))
            self._drop_specs.append(("head_mu", self.head_mu.in_features))
            self._drop_specs.append(("head_log_var", self.head_log_var.in_features))
            self.dropout_logits = nn.ParameterList([
                nn.Parameter(torch.tensor(init_logit)) for _ in self._drop_specs])
        else:
            self.dropout_logits = nn.ParameterList()

    # -- dropout ----------------------------------------------------------

    def dropout_rates(self) -> dict:
        return {name: torch.sigmoid(logit)
                for (name, _), logit in zip(self._drop_specs, self.dropout_logits)}

    def _mask_layer(self, h: torch.Tensor, spec_idx: int,
                    gen: torch.Generator | None, channelwise: bool) -> torch.Tensor:
        p = torch.sigmoid(self.dropout_logits[spec_idx]).to(h.dtype)
        if channelwise:
            shape = (h.shape[0], h.shape[1], 1, 1, 1)
        else:
            shape = h.shape
        u = torch.rand(shape, generator=gen, dtype=h.dtype)
        # clamp away exact endpoints so the relaxation stays finite
        u = u.clamp(1e-7, 1.0 - 1e-7)
        mask = concrete_mask(p, self.config.dropout_temperature, u)
        return h * mask / (1.0 - p)

    # -- encoder ----------------------------------------------------------

    def encode(self, x: torch.Tensor, mask_seed: int | None = None,
               deterministic: bool = False) -> LatentGaussian:
        """Map a volume batch to a latent Gaussian.

        mask_seed pins the dropout draws; deterministic=True skips masking
        (the inverted scaling keeps the two paths equal in expectation).
        """
        if not torch.is_tensor(x):
            x = torch.as_tensor(x, dtype=torch.float32)
        if x.dim() == 4:
            x = x.unsqueeze(1)
        if x.dim() != 5 or x.shape[1] != 1:
            raise DataError(f"expected a (batch, H, W, D) volume batch, got {tuple(x.shape)}")
        if tuple(x.shape[2:]) != self.config.input_resolution:
            raise DataError(
                f"volume dims {tuple(x.shape[2:])} do not match "
                f"configured {self.config.input_resolution}")
        x = x.to(self.conv_blocks[0][0].weight.dtype)
        use_drop = self.config.bayesian and not deterministic
        gen = None
        if use_drop and mask_seed is not None:
            gen = torch.Generator()
            gen.manual_seed(int(mask_seed))

        spec_idx = 0
        h = x
        for i, block in enumerate(self.conv_blocks):
            if use_drop and self.config.conv_dropout and i > 0:
                h = self._mask_layer(h, spec_idx, gen, channelwise=True)
            if self.config.bayesian and self.config.conv_dropout and i > 0:
                spec_idx += 1
            h = block(h)
        h = h.flatten(1)
        for layer in self.dense_layers:
            if use_drop:
                h = self._mask_layer(h, spec_idx, gen, channelwise=False)
            if self.config.bayesian:
                spec_idx += 1
            h = torch.relu(layer(h))
        h_mu = self._mask_layer(h, spec_idx, gen, channelwise=False) if use_drop else h
        if self.config.bayesian:
            spec_idx += 1
        h_lv = self._mask_layer(h, spec_idx, gen, channelwise=False) if use_drop else h
        return LatentGaussian(self.head_mu(h_mu), self.head_log_var(h_lv))

    # -- decoder ----------------------------------------------------------

    def _decode(self, z: torch.Tensor) -> torch.Tensor:
        h = z
        for layer in self.decoder_layers[:-1]:
            h = torch.relu(layer(h))
        h = self.decoder_layers[-1](h)
        return h.view(*h.shape[:-1], self.config.m_out, 3)

    def decode(self, z) -> PointSet:
        """Deterministic latent-to-shape map; returns an ordered point set."""
        if not torch.is_tensor(z):
            z = torch.as_tensor(z, dtype=torch.float32)
        if z.dim() != 1 or z.shape[0] != self.config.latent_dim:
            raise DataError(f"expected a latent vector of length {self.config.latent_dim}")
        z = z.to(self.decoder_layers[0].weight.dtype)
        with torch.no_grad():
            pts = self._decode(z.unsqueeze(0))[0]
        return PointSet(pts.detach().cpu().numpy().astype(np.float64), ordered=True)

    # -- weight prior -----------------------------------------------------

    def weight_kl(self) -> torch.Tensor:
        """Concrete-dropout weight penalty over the masked encoder layers."""
        if not self.config.bayesian:
            raise ConfigError("weight_kl is undefined for a non-bayesian network")
        ls2 = self.config.dropout_prior_lengthscale ** 2
        scale = 1.0 / float(self.dataset_size)
        layer_weights = {
            **{f"dense{i}": layer.weight for i, layer in enumerate(self.dense_layers)},
            "head_mu": self.head_mu.weight,
            "head_log_var": self.head_log_var.weight,
        }
        if self.config.conv_dropout:
            for i in range(1, len(self.conv_blocks)):
                layer_weights[f"conv{i}"] = self.conv_blocks[i][0].weight
        total = torch.zeros((), dtype=self.head_mu.weight.dtype)
        for (name, k), logit in zip(self._drop_specs, self.dropout_logits):
            p = torch.sigmoid(logit)
            w = layer_weights[name]
            weight_term = ls2 * (1.0 - p) * (w ** 2).sum() / 2.0
            entropy = p * torch.log(p) + (1.0 - p) * torch.log1p(-p)
            total = total + weight_term + k * entropy * scale
        return total

    def set_dataset_size(self, n: int) -> None:
        if n < 1:
            raise ConfigError(f"dataset size must be positive, got {n}")
        self.dataset_size = int(n)

    # -- prediction -------------------------------------------------------

    def predict(self, volume: Volume, n_latent_samples: int = 8,
                n_mask_samples: int = 8,
                rng: np.random.Generator | None = None) -> PredictiveDistribution:
        """Sample the predictive grid for one volume and decompose it.

        Non-bayesian networks collapse the mask axis to one deterministic
        realization regardless of n_mask_samples.
        """
        if n_latent_samples < 2:
            raise DataError(f"need at least 2 latent samples, got {n_latent_samples}")
        if n_mask_samples < 1:
            raise DataError(f"need at least 1 mask sample, got {n_mask_samples}")
        if rng is None:
            rng = np.random.default_rng()
        d = n_mask_samples if self.config.bayesian else 1
        s = n_latent_samples
        x = torch.from_numpy(volume.data).float().unsqueeze(0)
        dtype = self.head_mu.weight.dtype
        x = x.to(dtype)
        rows = []
        with torch.no_grad():
            for _ in range(d):
                if self.config.bayesian:
                    seed = int(rng.integers(0, 2 ** 63 - 1))
                    q = self.encode(x, mask_seed=seed)
                else:
                    q = self.encode(x, deterministic=True)
                eps = torch.from_numpy(rng.standard_normal((s, self.config.latent_dim))).to(dtype)
                z = reparameterize(q, eps)
                rows.append(self._decode(z).cpu().numpy().astype(np.float64))
        grid = np.stack(rows)
        mean, ale, epi = decompose(grid)
        return PredictiveDistribution(mean=mean, var_aleatoric=ale, var_epistemic=epi,
                                      samples=grid.reshape(d * s, self.config.m_out, 3))

    def predict_mean(self, x: torch.Tensor) -> torch.Tensor:
        """Dropout-free mean shape for a volume batch, (batch, M, 3)."""
        with torch.no_grad():
            q = self.encode(x, deterministic=True)
            return self._decode(q.mu)


def weight_kl(model: ShapePredictor) -> torch.Tensor:
    return model.weight_kl()


def build_model(config: NetworkConfig, seed: int = 0) -> ShapePredictor:
    """Construct and initialize the network (Xavier weights, zero biases)."""
    torch.manual_seed(seed)
    model = ShapePredictor(config)
    for module in model.modules():
        if isinstance(module, (nn.Linear, nn.Conv3d)):
            nn.init.xavier_uniform_(module.weight)
            nn.init.zeros_(module.bias)
    return model


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path: str, model: ShapePredictor,
                    optimizer: torch.optim.Optimizer | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "net_config": dataclasses.asdict(model.config),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "step": model.step,
        "dataset_size": model.dataset_size,
        "torch_rng": torch.get_rng_state(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str, restore_rng: bool = False) -> tuple[ShapePredictor, dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise MissingFileError(f"checkpoint not found: {path}")
    except Exception as exc:
        raise IOFormatError(f"{path}: not a readable checkpoint ({exc})")
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise IOFormatError(f"{path}: missing checkpoint version header")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise IOFormatError(
            f"{path}: unsupported checkpoint version {payload['format_version']}")
    cfg_dict = dict(payload["net_config"])
    for key in ("input_resolution", "conv_channels", "dense_widths", "decoder_widths"):
        cfg_dict[key] = tuple(cfg_dict[key])
    config = NetworkConfig(**cfg_dict)
    model = ShapePredictor(config)
    model.load_state_dict(payload["model_state"])
    model.step = int(payload["step"])
    model.dataset_size = int(payload["dataset_size"])
    if restore_rng:
        torch.set_rng_state(payload["torch_rng"])
    return model, payload
