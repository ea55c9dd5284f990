"""Convolutional autoencoder anomaly detector.

Encoder: 3x3 same-padded convolutions (default 38 and 76 filters, leaky ReLU),
flatten, dense layer to a 256-d latent vector ``z`` with identity activation.
The decoder mirrors it with a dense layer and transposed convolutions.

The anomaly score is the mean squared reconstruction error over the 256 chunk
entries, computed on per-channel standardized input. A chunk is flagged when
its score exceeds a threshold chosen on nominal validation data.

Training runs in float32. Inference runs in float64 on an exact upcast of the
float32 parameters, so the latent layer's ``W x + b`` can be reproduced
outside the network to rounding precision.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from peepscope.errors import ArtifactError, ConfigError, NumericError
from peepscope.telemetry import N_CHANNELS, WINDOW, Dataset

logger = logging.getLogger(__name__)

MAGIC = b"PEEP"
FORMAT_VERSION = 1
INFER_BATCH = 256


@dataclass(frozen=True)
class Architecture:
    filters: tuple[int, ...] = (38, 76)
    latent_dim: int = 256
    kernel: int = 3
    negative_slope: float = 0.01

    def __post_init__(self) -> None:
        if not self.filters or any(f < 1 for f in self.filters):
            raise ConfigError("need at least one conv block with a positive filter count")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if self.kernel % 2 != 1:
            raise ConfigError("kernel must be odd for same padding")

    @property
    def flat_dim(self) -> int:
        return self.filters[-1] * WINDOW * N_CHANNELS


DEFAULT_ARCHITECTURE = Architecture()
SMALL_ARCHITECTURE = Architecture(filters=(8, 16), latent_dim=64)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 100
    patience: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")
        if self.epochs < 0 or self.patience < 1:
            raise ConfigError("epochs must be >= 0 and patience >= 1")


class ConvAutoencoder(nn.Module):
    """Returns ``(reconstruction, z, latent_input)`` from ``forward``."""

    def __init__(self, arch: Architecture) -> None:
        super().__init__()
        self.arch = arch
        pad = arch.kernel // 2
        chans = (1,) + tuple(arch.filters)
        self.encoder = nn.ModuleList(
            nn.Conv2d(cin, cout, arch.kernel, padding=pad) for cin, cout in zip(chans[:-1], chans[1:])
        )
        self.latent = nn.Linear(arch.flat_dim, arch.latent_dim)
        self.expand = nn.Linear(arch.latent_dim, arch.flat_dim)
        rev = chans[::-1]
        self.decoder = nn.ModuleList(
            nn.ConvTranspose2d(cin, cout, arch.kernel, padding=pad) for cin, cout in zip(rev[:-1], rev[1:])
        )
        self.act = nn.LeakyReLU(arch.negative_slope)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h = x.unsqueeze(1)
        for conv in self.encoder:
            h = self.act(conv(h))
        flat = h.flatten(1)
        z = self.latent(flat)
        h = self.act(self.expand(z)).view(-1, self.arch.filters[-1], WINDOW, N_CHANNELS)
        for i, deconv in enumerate(self.decoder):
            h = deconv(h)
            if i < len(self.decoder) - 1:
                h = self.act(h)
        return h.squeeze(1), z, flat


@dataclass
class AutoencoderModel:
    """Trained detector: network, input standardization, threshold and metadata."""

    net: ConvAutoencoder
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_CHANNELS))
    norm_std: np.ndarray = field(default_factory=lambda: np.ones(N_CHANNELS))
    threshold: float = math.inf
    metadata: dict = field(default_factory=dict)
    _infer: ConvAutoencoder | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def arch(self) -> Architecture:
        return self.net.arch

    def invalidate(self) -> None:
        self._infer = None

    def inference_net(self) -> ConvAutoencoder:
        if self._infer is None:
            self._infer = copy.deepcopy(self.net).double().eval()
        return self._infer

    def standardize(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.norm_mean) / self.norm_std

    def latent_layer(self) -> tuple[np.ndarray, np.ndarray]:
        """``(W, b)`` of the dense layer producing ``z``, as float64."""
        lin = self.net.latent
        return (lin.weight.detach().double().numpy().copy(), lin.bias.detach().double().numpy().copy())

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


def build_model(arch: Architecture = DEFAULT_ARCHITECTURE, seed: int = 0) -> AutoencoderModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = ConvAutoencoder(arch)
    return AutoencoderModel(net, metadata={"init_seed": seed})


def fit_standardization(model: AutoencoderModel, train: Dataset) -> None:
    flat = train.values.reshape(-1, N_CHANNELS)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std[std < 1e-12] = 1.0
    model.norm_mean, model.norm_std = mean, std


def _as_batch(X) -> tuple[np.ndarray, bool]:
    if isinstance(X, Dataset):
        X = X.values
    elif hasattr(X, "values") and hasattr(X, "origin"):
        X = X.values
    arr = np.asarray(X, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (WINDOW, N_CHANNELS):
        raise ConfigError(f"input must be 16x16 chunks, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("input contains non-finite values")
    return arr, single


def iter_forward(model: AutoencoderModel, X, batch: int = INFER_BATCH):
    """Yield ``(scores, reconstruction, z, latent_input)`` per batch of chunks.

    Keeps memory bounded: the latent input alone is ~19k floats per chunk.
    """
    arr, _ = _as_batch(X)
    net = model.inference_net()
    with torch.inference_mode():
        for lo in range(0, len(arr), batch):
            xs = model.standardize(arr[lo : lo + batch])
            r, z, h = net(torch.from_numpy(xs))
            r = r.numpy()
            yield reconstruction_mse(xs, r), r, z.numpy(), h.numpy()


def forward(model: AutoencoderModel, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reconstruction (standardized space), latent ``z`` and the latent layer's input.

    Accepts one chunk (16x16), a stack ``(n, 16, 16)`` or a :class:`Dataset`.
    """
    _, single = _as_batch(X)
    parts = list(iter_forward(model, X))
    if not parts:
        return (np.empty((0, WINDOW, N_CHANNELS)), np.empty((0, model.arch.latent_dim)),
                np.empty((0, model.arch.flat_dim)))
    out = tuple(np.concatenate([p[k] for p in parts]) for k in (1, 2, 3))
    return tuple(o[0] for o in out) if single else out  # type: ignore[return-value]


def reconstruction_mse(X: np.ndarray, X_hat: np.ndarray) -> np.ndarray:
    """Mean over the chunk entries of the squared error; works on single chunks or stacks."""
    d = np.asarray(X, dtype=np.float64) - np.asarray(X_hat, dtype=np.float64)
    return np.mean(d * d, axis=(-2, -1))


def score(model: AutoencoderModel, X) -> np.ndarray | float:
    _, single = _as_batch(X)
    parts = [p[0] for p in iter_forward(model, X)]
    out = np.concatenate(parts) if parts else np.empty(0)
    return float(out[0]) if single else out


def flag(model: AutoencoderModel, X) -> np.ndarray | bool:
    s = score(model, X)
    return s > model.threshold


# --------------------------------------------------------------------------- training


@dataclass
class TrainHistory:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    @property
    def best_val_loss(self) -> float:
        return min(self.val_loss) if self.val_loss else math.nan

    def write_csv(self, path: str | Path) -> None:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{e},{t!r},{v!r}" for e, t, v in zip(self.epochs, self.train_loss, self.val_loss)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def train(model: AutoencoderModel, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig,
          log_every: int = 1) -> TrainHistory:
    """Mini-batch Adam on the reconstruction MSE, keeping the best-validation parameters.

    Standardization statistics are fitted on ``train_ds`` first. Deterministic
    given ``cfg.seed`` and a fixed torch thread count.
    """
    if not train_ds.is_nominal or not val_ds.is_nominal:
        raise ConfigError("training and validation data must be nominal")
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ConfigError("training and validation sets must be non-empty")
    history = TrainHistory()
    fit_standardization(model, train_ds)
    model.invalidate()
    if cfg.epochs == 0:
        return history

    net = model.net.float().train()
    xs = torch.from_numpy(model.standardize(train_ds.values).astype(np.float32))
    xv = torch.from_numpy(model.standardize(val_ds.values).astype(np.float32))
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    best_state = copy.deepcopy(net.state_dict())
    best_val = math.inf
    stale = 0
    n = len(xs)
    for epoch in range(1, cfg.epochs + 1):
        order = torch.from_numpy(rng.permutation(n))
        total = 0.0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            batch = xs[order[lo : lo + cfg.batch_size]]
            opt.zero_grad(set_to_none=True)
            loss = torch.mean((net(batch)[0] - batch) ** 2)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"training diverged at epoch {epoch}, batch {b}: loss={value}")
            loss.backward()
            opt.step()
            total += value * len(batch)
        train_loss = total / n
        val_loss = _mean_loss(net, xv)
        if not math.isfinite(val_loss):
            raise NumericError(f"validation loss is non-finite at epoch {epoch}")
        history.epochs.append(epoch)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        if val_loss < best_val:
            best_val, stale = val_loss, 0
            best_state = copy.deepcopy(net.state_dict())
            history.best_epoch = epoch
        else:
            stale += 1
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d: train %.6g val %.6g", epoch, train_loss, val_loss)
        if stale >= cfg.patience:
            logger.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
            break
    net.load_state_dict(best_state)
    net.eval()
    model.invalidate()
    model.metadata.update(
        train_seed=cfg.seed,
        epochs_run=len(history.epochs),
        best_epoch=history.best_epoch,
        best_val_loss=history.best_val_loss,
        final_train_loss=history.train_loss[-1],
    )
    return history


def _mean_loss(net: ConvAutoencoder, xs: torch.Tensor) -> float:
    total = 0.0
    with torch.inference_mode():
        for lo in range(0, len(xs), INFER_BATCH):
            batch = xs[lo : lo + INFER_BATCH]
            total += torch.sum((net(batch)[0] - batch) ** 2).item()
    return total / xs.numel()


# --------------------------------------------------------------------------- gradient check


def _recon_loss(net: nn.Module, x: torch.Tensor) -> torch.Tensor:
    out = net(x)
    if isinstance(out, tuple):
        out = out[0]
    return torch.mean((out - x) ** 2)


@dataclass(frozen=True)
class GradientCheckReport:
    max_error: float
    checked: int
    skipped_kinks: int


def gradient_check_report(net: nn.Module | AutoencoderModel, X, eps: float = 1e-4, per_layer: int = 100,
                          seed: int = 0,
                          loss_fn: Callable[[nn.Module, torch.Tensor], torch.Tensor] = _recon_loss,
                          ) -> GradientCheckReport:
    """Compare autograd with central finite differences on sampled coordinates.

    Samples ``per_layer`` coordinates (all, if fewer) of every parameter tensor
    on a float64 copy of the network. Two guards keep the comparison meaningful:

    * a coordinate whose ``+-eps`` stencil flips the sign of any leaky-ReLU
      input straddles a kink, where the loss has no derivative; it is skipped
      and counted in ``skipped_kinks``;
    * relative errors use a denominator of at least ``1e4`` times the
      round-off bound ``eps_mach * |loss| / eps`` of the central difference,
      so gradients below what the difference can resolve are not divided by
      (almost) zero.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ConfigError("eps must lie in [1e-6, 1e-3]")
    if isinstance(net, AutoencoderModel):
        arr, _ = _as_batch(X)
        x = torch.from_numpy(net.standardize(arr))
        net = net.net
    else:
        x = torch.as_tensor(np.asarray(X, dtype=np.float64))
    net = copy.deepcopy(net).double()
    masks: list[torch.Tensor] = []
    hooks = [m.register_forward_hook(lambda mod, inp, out: masks.append(inp[0] > 0))
             for m in net.modules() if isinstance(m, (nn.LeakyReLU, nn.ReLU))]

    def evaluate() -> tuple[float, list[torch.Tensor]]:
        masks.clear()
        value = loss_fn(net, x).item()
        return value, list(masks)

    for p in net.parameters():
        p.grad = None
    loss = loss_fn(net, x)
    loss.backward()
    floor = max(1e-12, 1e4 * np.finfo(np.float64).eps * abs(loss.item()) / eps)
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    try:
        with torch.no_grad():
            for p in net.parameters():
                flat = p.data.view(-1)
                grad = p.grad.reshape(-1)
                k = min(per_layer, flat.numel())
                for i in rng.choice(flat.numel(), size=k, replace=False):
                    orig = flat[i].item()
                    flat[i] = orig + eps
                    up, m_up = evaluate()
                    flat[i] = orig - eps
                    down, m_down = evaluate()
                    flat[i] = orig
                    if any(not torch.equal(a, b) for a, b in zip(m_up, m_down)):
                        skipped += 1
                        continue
                    g_fd = (up - down) / (2 * eps)
                    g_bp = grad[i].item()
                    worst = max(worst, abs(g_bp - g_fd) / max(abs(g_bp), abs(g_fd), floor))
                    checked += 1
    finally:
        for h in hooks:
            h.remove()
    if checked == 0:
        raise NumericError("every sampled coordinate straddles an activation kink; lower eps")
    if skipped:
        logger.info("gradient check: %d coordinates checked, %d skipped at activation kinks", checked, skipped)
    return GradientCheckReport(float(worst), checked, skipped)


def gradient_check(net: nn.Module | AutoencoderModel, X, eps: float = 1e-4, per_layer: int = 100,
                   seed: int = 0, loss_fn: Callable[[nn.Module, torch.Tensor], torch.Tensor] = _recon_loss) -> float:
    """Max relative error between autograd and central finite differences (see ``gradient_check_report``)."""
    return gradient_check_report(net, X, eps, per_layer, seed, loss_fn).max_error


# --------------------------------------------------------------------------- threshold


def threshold_from_scores(scores: np.ndarray, target_fpr: float = 1e-3) -> float:
    """Smallest tau with at most ``target_fpr`` of the scores strictly above it."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    n = len(s)
    if not 0 < target_fpr <= 1:
        raise ConfigError("target_fpr must lie in (0, 1]")
    if n == 0 or n < math.ceil(1.0 / target_fpr - 1e-9):
        raise ConfigError(
            f"{n} nominal validation chunks cannot resolve FPR {target_fpr}; "
            f"need at least {math.ceil(1.0 / target_fpr - 1e-9)} (enlarge the validation split)"
        )
    allowed = math.floor(target_fpr * n + 1e-9)
    if allowed >= n:
        return -math.inf
    return float(s[n - allowed - 1])


def choose_threshold(model: AutoencoderModel, val_nominal: Dataset, target_fpr: float = 1e-3) -> float:
    if not val_nominal.is_nominal:
        raise ConfigError("threshold selection needs nominal validation data")
    tau = threshold_from_scores(score(model, val_nominal), target_fpr)
    model.threshold = tau
    model.metadata["target_fpr"] = target_fpr
    return tau


# --------------------------------------------------------------------------- persistence


def _manifest(model: AutoencoderModel) -> dict:
    return {
        "architecture": {**asdict(model.arch), "filters": list(model.arch.filters)},
        "threshold": model.threshold,
        "norm_mean": [float(v) for v in model.norm_mean],
        "norm_std": [float(v) for v in model.norm_std],
        "metadata": model.metadata,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.net.state_dict().items()],
    }


def save_model(model: AutoencoderModel, path: str | Path) -> str:
    """Write the model file; returns its sha256."""
    manifest = json.dumps(_manifest(model), sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(manifest)), manifest]
    for tensor in model.net.state_dict().values():
        chunks.append(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    data = b"".join(chunks)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise ArtifactError(f"cannot write model {path}: {exc}") from exc
    return hashlib.sha256(data).hexdigest()


def load_model(path: str | Path) -> AutoencoderModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactError(f"cannot read model {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise ArtifactError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 12:
        raise ArtifactError(f"{path}: truncated header")
    version, mlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported model format version {version} (expected {FORMAT_VERSION})")
    if len(data) < 12 + mlen:
        raise ArtifactError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[12 : 12 + mlen].decode("utf-8"))
        arch_d = manifest["architecture"]
        arch = Architecture(tuple(arch_d["filters"]), arch_d["latent_dim"], arch_d["kernel"], arch_d["negative_slope"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ArtifactError(f"{path}: malformed manifest: {exc}") from exc
    net = ConvAutoencoder(arch)
    state = {}
    offset = 12 + mlen
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(data):
            raise ArtifactError(f"{path}: truncated parameter block {entry['name']}")
        arr = np.frombuffer(data[offset:end], dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset = end
    if offset != len(data):
        raise ArtifactError(f"{path}: {len(data) - offset} trailing bytes")
    try:
        net.load_state_dict(state)
    except RuntimeError as exc:
        raise ArtifactError(f"{path}: parameters do not match architecture: {exc}") from exc
    net.eval()
    return AutoencoderModel(
        net,
        np.array(manifest["norm_mean"], dtype=np.float64),
        np.array(manifest["norm_std"], dtype=np.float64),
        float(manifest["threshold"]),
        manifest.get("metadata", {}),
    )
