"""The masked CNN-attention autoencoder: architecture, corruption, loss.

Per-pixel thermal responses pass through a small convolutional head, a
learned per-level feature gating, multi-head self-attention over time
positions, and an MLP bottleneck that emits the latent vector used for
defect analysis. The decoder mirrors the head: a linear expansion followed
by convolutions back to a single channel.

Training corrupts each input by zeroing random whole patches and adding
Gaussian noise everywhere, then reconstructs the clean response; the latent
is additionally pulled toward a PCA projection of the same response
(cosine-distance distillation term).
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .baselines import pca
from .sequence import PixelMatrix, ValidationError

CHECKPOINT_MAGIC = b"NNCP0001"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and training hyperparameters.

    Defaults follow the fixed recipe this toolkit targets: 3 conv layers
    with kernel 3, four attention heads, a 32-wide latent, Adam at 2e-5
    with batches of 128, and training on a 1000-sample pixel subset.
    """

    n_t: int
    conv_layers: int = 3
    kernel_size: int = 3
    channels: int = 16
    n_heads: int = 4
    head_width: int = 0  # 0 resolves to max(4, channels // n_heads)
    latent_dim: int = 32
    mlp_hidden: int = 128
    mask_ratio: float = 0.5
    patch_len: int = 8
    noise_sigma_rel: float = 0.05
    kd_weight: float = 0.1
    lr: float = 2e-5
    batch_size: int = 128
    epochs: int = 50
    subset_size: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.n_t < 2:
            raise ValidationError("n_t must be >= 2")
        if self.latent_dim > self.n_t:
            raise ValidationError("latent_dim must not exceed n_t")
        if not 1 <= self.patch_len <= self.n_t:
            raise ValidationError("patch_len must be in [1, n_t]")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValidationError("mask_ratio must be in [0, 1]")
        if self.kernel_size % 2 != 1:
            raise ValidationError("kernel_size must be odd")
        if self.conv_layers < 1 or self.channels < 1 or self.n_heads < 1:
            raise ValidationError("conv_layers, channels, n_heads must be >= 1")
        if self.noise_sigma_rel < 0:
            raise ValidationError("noise_sigma_rel must be >= 0")
        if self.head_width == 0:
            object.__setattr__(self, "head_width", max(4, self.channels // self.n_heads))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Kaiming-uniform weights (fan-in scaling), zero biases, fixed order."""
    c, k, n_t = cfg.channels, cfg.kernel_size, cfg.n_t
    d_k = cfg.head_width

    def conv(name: str, c_out: int, c_in: int, width: int):
        params[f"{name}_w"] = Tensor(
            ad.kaiming_uniform((c_out, c_in, width), c_in * width, rng),
            requires_grad=True,
        )
        params[f"{name}_b"] = Tensor(np.zeros(c_out), requires_grad=True)

    def dense(name: str, d_in: int, d_out: int):
        params[f"{name}_w"] = Tensor(
            ad.kaiming_uniform((d_in, d_out), d_in, rng), requires_grad=True
        )
        params[f"{name}_b"] = Tensor(np.zeros(d_out), requires_grad=True)

    params: dict[str, Tensor] = {}
    for i in range(cfg.conv_layers):
        conv(f"enc{i}", c, 1 if i == 0 else c, k)
    for i in range(cfg.conv_layers):
        conv(f"gate{i}", c, c, 1)
    for h in range(cfg.n_heads):
        for proj in ("q", "k", "v"):
            params[f"mha_{proj}{h}"] = Tensor(
                ad.kaiming_uniform((c, d_k), c, rng), requires_grad=True
            )
    dense("mha_out", cfg.n_heads * d_k, c)
    # near-uniform attention at init makes the MHA output almost rank-1; a
    # zero bias then lets the output ReLU kill the whole encoder for ~6% of
    # seeds (all channels negative), freezing training. Small positive
    # bias keeps the block alive.
    params["mha_out_b"].data[:] = 0.01
    dense("mlp0", n_t * c, cfg.mlp_hidden)
    dense("mlp1", cfg.mlp_hidden, cfg.latent_dim)
    dense("expand", cfg.latent_dim, c * n_t)
    conv("dec0", c, c, k)
    conv("dec1", c, c, k)
    conv("dec2", 1, c, k)
    return params


class ModelState:
    """All learnable parameters plus the config that shapes them.

    Parameter iteration order is fixed by the insertion order of
    :func:`_init_params`, which keeps optimizer state and checkpoints
    aligned across runs.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int | None = None) -> "ModelState":
        from .seeds import substream

        rng = substream(config.seed if seed is None else seed, "model-init")
        return cls(config, _init_params(config, rng))

    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "ModelState":
        return ModelState(
            self.config,
            {
                name: Tensor(p.data.copy(), requires_grad=True)
                for name, p in self.params.items()
            },
        )

    # -- checkpoint container: magic, JSON header, raw little-endian f64 --

    def save(self, path) -> None:
        header = {
            "version": 1,
            "config": self.config.to_dict(),
            "params": [
                {"name": name, "shape": list(p.data.shape)}
                for name, p in self.params.items()
            ],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for p in self.params.values():
                fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ModelState":
        from .io import FormatError

        with open(path, "rb") as fh:
            if fh.read(8) != CHECKPOINT_MAGIC:
                raise FormatError("not a model checkpoint")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            if header.get("version") != 1:
                raise FormatError(f"unsupported checkpoint version {header.get('version')}")
            config = ModelConfig.from_dict(header["config"])
            params: dict[str, Tensor] = {}
            for entry in header["params"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                raw = fh.read(8 * count)
                if len(raw) != 8 * count:
                    raise FormatError("truncated checkpoint payload")
                arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
                params[entry["name"]] = Tensor(arr, requires_grad=True)
        return cls(config, params)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class CorruptedBatch:
    """Masked-and-noised responses plus the binary masks that produced them."""

    values: np.ndarray  # (B, n_t)
    masks: np.ndarray  # (B, n_t), 1 = visible, 0 = masked
    noise_sigma: float


def corrupt(batch: np.ndarray, cfg: ModelConfig, rng: np.random.Generator) -> CorruptedBatch:
    """Zero whole random patches, then add Gaussian noise to every entry.

    Patches are non-overlapping length-``patch_len`` slots; exactly
    floor(mask_ratio * n_t / patch_len) slots are zeroed per sample, so the
    realized masked fraction is the whole-patch formula exactly. The noise
    std is ``noise_sigma_rel`` times the batch std, and noise lands on
    masked entries too.
    """
    batch = np.asarray(batch, dtype=np.float64)
    n_b, n_t = batch.shape
    if n_t != cfg.n_t:
        raise ValidationError(f"batch length {n_t} != configured n_t {cfg.n_t}")
    n_slots = n_t // cfg.patch_len
    n_masked = int(cfg.mask_ratio * n_t / cfg.patch_len)

    masks = np.ones((n_b, n_t))
    if n_masked > 0:
        # without-replacement slot choice per sample, vectorized
        order = np.argsort(rng.random((n_b, n_slots)), axis=1)
        chosen = order[:, :n_masked]
        slot_visible = np.ones((n_b, n_slots), dtype=bool)
        np.put_along_axis(slot_visible, chosen, False, axis=1)
        masks[:, : n_slots * cfg.patch_len] = np.repeat(
            slot_visible, cfg.patch_len, axis=1
        )
        values = masks * batch
    else:
        values = batch.copy()

    sigma = float(cfg.noise_sigma_rel * batch.std()) if cfg.noise_sigma_rel > 0 else 0.0
    if sigma > 0:
        values = values + rng.normal(0.0, sigma, values.shape)
    return CorruptedBatch(values=values, masks=masks, noise_sigma=sigma)


def forward(model: ModelState, x) -> tuple[Tensor, Tensor]:
    """Run responses through the network: returns (latents, reconstructions).

    ``x`` is (B, n_t) (a single response may be passed as (1, n_t)).
    """
    cfg = model.config
    p = model.params
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if x.data.ndim != 2 or x.data.shape[1] != cfg.n_t:
        raise ValidationError(f"input shape {x.data.shape} != (B, {cfg.n_t})")
    n_b = x.data.shape[0]

    h = ad.reshape(x, (n_b, 1, cfg.n_t))
    features = []
    for i in range(cfg.conv_layers):
        h = ad.relu(ad.conv1d(h, p[f"enc{i}_w"], p[f"enc{i}_b"]))
        features.append(h)

    # per-level gating: sigmoid(1x1 conv) weights, summed over levels
    attended = None
    for i, feat in enumerate(features):
        gate = ad.sigmoid(ad.conv1d(feat, p[f"gate{i}_w"], p[f"gate{i}_b"]))
        term = ad.mul(gate, feat)
        attended = term if attended is None else ad.add(attended, term)

    tokens = ad.transpose(attended, (0, 2, 1))  # (B, T, C)
    mixed = ad.multi_head_attention(
        tokens,
        w_q=[p[f"mha_q{h}"] for h in range(cfg.n_heads)],
        w_k=[p[f"mha_k{h}"] for h in range(cfg.n_heads)],
        w_v=[p[f"mha_v{h}"] for h in range(cfg.n_heads)],
        w_o=p["mha_out_w"],
        b_o=p["mha_out_b"],
    )

    flat = ad.reshape(mixed, (n_b, cfg.n_t * cfg.channels))
    hidden = ad.relu(ad.linear(flat, p["mlp0_w"], p["mlp0_b"]))
    z = ad.linear(hidden, p["mlp1_w"], p["mlp1_b"])

    d = ad.linear(z, p["expand_w"], p["expand_b"])
    d = ad.reshape(d, (n_b, cfg.channels, cfg.n_t))
    d = ad.relu(ad.conv1d(d, p["dec0_w"], p["dec0_b"]))
    d = ad.relu(ad.conv1d(d, p["dec1_w"], p["dec1_b"]))
    d = ad.conv1d(d, p["dec2_w"], p["dec2_b"])
    recon = ad.reshape(d, (n_b, cfg.n_t))
    return z, recon


def pca_targets(pm: PixelMatrix, latent_dim: int) -> np.ndarray:
    """Distillation teacher: projections onto the top temporal PCA modes.

    When the matrix rank falls short of ``latent_dim`` the trailing
    coordinates are zero-padded (with a warning); the cosine term then
    simply ignores those directions.
    """
    n_pixels, n_t = pm.rows.shape
    k = min(latent_dim, n_pixels, n_t)
    result = pca(pm, k)
    targets = np.zeros((n_pixels, latent_dim))
    usable = min(k, result.rank)
    if usable < latent_dim:
        warnings.warn(
            f"PCA teacher rank {usable} < latent_dim {latent_dim}; padding with zeros",
            stacklevel=2,
        )
    targets[:, :usable] = result.scores[:, :usable]
    return targets


@dataclass(frozen=True)
class LossValues:
    total: Tensor
    rec: Tensor
    kd: Tensor
    kd_samples: int  # rows that actually contributed to the kd term


def loss(
    z: Tensor,
    recon: Tensor,
    clean: np.ndarray,
    teacher: np.ndarray,
    kd_weight: float,
) -> LossValues:
    """Reconstruction + distillation loss against the *clean* responses.

    rec is the batch mean of the per-sample squared L2 reconstruction
    error; kd is the batch mean cosine distance between network latents and
    their PCA teacher rows. Rows where either latent has zero norm are
    excluded from kd (flagged via ``kd_samples``).
    """
    clean = np.asarray(clean, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    if recon.data.shape != clean.shape:
        raise ValidationError("reconstruction/clean shape mismatch")
    if z.data.shape != teacher.shape:
        raise ValidationError("latent/teacher shape mismatch")
    n_b = clean.shape[0]

    diff = ad.sub(recon, Tensor(clean))
    rec = ad.mul(ad.tsum(ad.power(diff, 2.0)), 1.0 / n_b)

    z_norms = np.linalg.norm(z.data, axis=1)
    t_norms = np.linalg.norm(teacher, axis=1)
    valid = np.flatnonzero((z_norms > 0) & (t_norms > 0))
    if valid.size == 0:
        kd = Tensor(0.0)
    else:
        z_v = z if valid.size == n_b else ad.take_rows(z, valid)
        t_v = Tensor(teacher[valid])
        dots = ad.tsum(ad.mul(z_v, t_v), axis=1)
        norms = ad.sqrt(ad.tsum(ad.power(z_v, 2.0), axis=1))
        cos = ad.div(dots, ad.mul(norms, Tensor(t_norms[valid])))
        kd = ad.tmean(ad.sub(1.0, cos))

    total = ad.add(rec, ad.mul(kd, kd_weight))
    if not np.isfinite(total.data):
        raise ad.NonFiniteError("loss is not finite")
    return LossValues(total=total, rec=rec, kd=kd, kd_samples=int(valid.size))
