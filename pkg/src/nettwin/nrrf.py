"""Neural radio radiance field.

An attenuation MLP maps an encoded (TX position, voxel position) to a
nonnegative attenuation and a feature vector; a radiance MLP maps the feature
plus the encoded retransmission direction to a nonnegative signal. The power
arriving from direction w is the emission-absorption composite along the ray
P(r, w) = P_rx + r w, and the received value is the cos(elevation)-weighted
mean over a fixed direction grid, in normalized RSRP units.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NrrfConfig:
    att_depth: int = 4
    att_width: int = 64
    rad_widths: tuple[int, ...] = (64, 32)
    pos_freqs: int = 10
    dir_freqs: int = 4
    n_azimuth: int = 16
    n_elevation: int = 4
    n_radial: int = 32
    r_min: float = 0.5
    spacing: str = "geometric"       # "geometric" | "uniform"
    d_max: float | None = None       # None -> the scene's maximum ray distance
    rsrp_range: tuple[float, float] = (-150.0, -40.0)
    seed: int = 0
    dtype: str = "float32"

    def to_json(self) -> dict:
        d = asdict(self)
        d["rad_widths"] = list(self.rad_widths)
        d["rsrp_range"] = list(self.rsrp_range)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NrrfConfig":
        d = dict(d)
        d["rad_widths"] = tuple(d["rad_widths"])
        d["rsrp_range"] = tuple(d["rsrp_range"])
        return cls(**d)


PROFILES = {
    "desk": NrrfConfig(),
    # same networks as desk on a coarse horizontal grid, cheap enough for multi-seed benchmarks
    "bench": NrrfConfig(n_azimuth=6, n_elevation=1, n_radial=8),
    "paper": NrrfConfig(att_depth=8, att_width=256, rad_widths=(256, 128), n_azimuth=36, n_elevation=9,
                        n_radial=64),
}


def profile(name: str, **overrides) -> NrrfConfig:
    try:
        base = PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown NRRF profile {name!r}; choose from {sorted(PROFILES)}") from None
    return replace(base, **overrides)


def fourier_encode(x: torch.Tensor, num_freqs: int) -> torch.Tensor:
    """[x, sin(2^k pi x), cos(2^k pi x)] for k < num_freqs, per coordinate."""
    freqs = (2.0 ** torch.arange(num_freqs, dtype=x.dtype, device=x.device)) * math.pi
    xf = x[..., None] * freqs
    return torch.cat([x, torch.sin(xf).flatten(-2), torch.cos(xf).flatten(-2)], dim=-1)


def radial_samples(config: NrrfConfig, d_max: float) -> np.ndarray:
    n = config.n_radial
    if config.spacing == "uniform":
        return d_max * np.arange(1, n + 1) / n
    if config.spacing == "geometric":
        if n == 1:
            return np.array([d_max])
        return config.r_min * (d_max / config.r_min) ** (np.arange(n) / (n - 1))
    raise ValueError(f"unknown radial spacing {config.spacing!r}")


def direction_grid(n_azimuth: int, n_elevation: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Azimuth/elevation cell centres and normalized cos(elevation) weights, flattened."""
    az = 2 * math.pi * np.arange(n_azimuth) / n_azimuth
    el = -math.pi / 2 + (np.arange(n_elevation) + 0.5) * math.pi / n_elevation
    A, E = np.meshgrid(az, el, indexing="ij")
    w = np.cos(E).ravel()
    return A.ravel(), E.ravel(), w / w.sum()


class _MLP(nn.Module):
    def __init__(self, sizes: Sequence[int]):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))

    def forward(self, x, first_extra=None):
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k == 0 and first_extra is not None:
                x = x + first_extra
            if k < len(self.layers) - 1:
                x = F.relu(x)
        return x


class NrrfModel(nn.Module):
    """Attenuation + radiance networks with a fixed rendering grid."""

    def __init__(self, config: NrrfConfig, bounds: Sequence[float], tx_position: Sequence[float],
                 scene_d_max: float):
        super().__init__()
        self.config = config
        self.bounds = tuple(float(v) for v in bounds)
        self.scene_d_max = float(scene_d_max)
        self.d_max = float(config.d_max or scene_d_max)
        dtype = getattr(torch, config.dtype)
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(config.seed)
        pos_dim = 3 * (1 + 2 * config.pos_freqs)
        dir_dim = 2 * (1 + 2 * config.dir_freqs)
        self.pos_dim, self.dir_dim = pos_dim, dir_dim
        # the first layer sees [enc(P_tx), enc(P_x)]; it is stored split so the constant TX
        # half is evaluated once per call
        self.attenuation_net = _MLP([2 * pos_dim] + [config.att_width] * config.att_depth + [1 + config.att_width])
        self.radiance_net = _MLP([config.att_width + dir_dim] + list(config.rad_widths) + [1])
        torch.random.set_rng_state(gen_state)
        self.to(dtype)

        xmin, ymin, xmax, ymax = self.bounds
        # normalization box: scene footprint, ground to TX height; far ray samples land
        # outside [-1, 1] and are encoded unclipped
        lo = np.array([xmin, ymin, 0.0])
        hi = np.array([xmax, ymax, max(float(tx_position[2]), 1.0)])
        self.register_buffer("box_center", torch.tensor((lo + hi) / 2, dtype=dtype))
        self.register_buffer("box_half", torch.tensor((hi - lo) / 2, dtype=dtype))
        self.register_buffer("tx_position", torch.tensor(list(tx_position), dtype=dtype))
        az, el, w = direction_grid(config.n_azimuth, config.n_elevation)
        dirs = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)
        # retransmission direction points back toward the receiver
        back_az = np.mod(az + math.pi, 2 * math.pi)
        back_el = -el
        ang = np.stack([back_az / math.pi - 1.0, back_el / (math.pi / 2)], axis=1)
        r = radial_samples(config, self.d_max)
        dr = np.diff(np.concatenate([[0.0], r]))
        self.register_buffer("dirs", torch.tensor(dirs, dtype=dtype))
        self.register_buffer("dir_weights", torch.tensor(w, dtype=dtype))
        self.register_buffer("dir_angles", torch.tensor(ang, dtype=dtype))
        self.register_buffer("radii", torch.tensor(r, dtype=dtype))
        self.register_buffer("dr", torch.tensor(dr, dtype=dtype))

    @classmethod
    def for_scene(cls, scene, config: NrrfConfig) -> "NrrfModel":
        return cls(config, scene.bounds, scene.tx.position, scene.d_max)

    @property
    def dtype(self) -> torch.dtype:
        return self.dirs.dtype

    # ------------------------------------------------------------------ normalization

    def normalize_rsrp(self, dbm):
        lo, hi = self.config.rsrp_range
        return (dbm - lo) / (hi - lo)

    def denormalize_rsrp(self, value):
        lo, hi = self.config.rsrp_range
        return lo + value * (hi - lo)

    def encode_position(self, p: torch.Tensor) -> torch.Tensor:
        return fourier_encode((p - self.box_center) / self.box_half, self.config.pos_freqs)

    # ------------------------------------------------------------------ field

    def _tx_term(self) -> torch.Tensor:
        first = self.attenuation_net.layers[0]
        enc_tx = self.encode_position(self.tx_position)
        return enc_tx @ first.weight[:, : self.pos_dim].T

    def field(self, positions: torch.Tensor, dir_enc_term: torch.Tensor | None = None,
              dir_enc: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Attenuation and signal at voxel positions (..., 3).

        The retransmission direction enters either as an encoded tensor ``dir_enc``
        (..., dir_dim) or as its precomputed first-layer contribution.
        """
        first = self.attenuation_net.layers[0]
        enc_x = self.encode_position(positions)
        h = F.linear(enc_x, first.weight[:, self.pos_dim:], first.bias) + self._tx_term()
        for k, layer in enumerate(self.attenuation_net.layers[1:]):
            h = layer(F.relu(h))
        raw_delta, feat = h[..., 0], h[..., 1:]
        rfirst = self.radiance_net.layers[0]
        width = self.config.att_width
        g = F.linear(feat, rfirst.weight[:, :width], rfirst.bias)
        if dir_enc_term is None:
            dir_enc_term = dir_enc @ rfirst.weight[:, width:].T
        g = g + dir_enc_term
        for layer in self.radiance_net.layers[1:]:
            g = layer(F.relu(g))
        return F.softplus(raw_delta), F.softplus(g[..., 0])

    def field_eval(self, tx_position, voxel_position, direction) -> tuple[float, float]:
        """Single query: (attenuation, signal) for voxel ``voxel_position`` emitting toward ``direction``."""
        if np.allclose(np.asarray(tx_position, float), self.tx_position.detach().cpu().numpy()) is False:
            raise ValueError("this field was built for a single transmitter position")
        az, el = direction
        ang = torch.tensor([[az / math.pi - 1.0, el / (math.pi / 2)]], dtype=self.dtype)
        enc = fourier_encode(ang, self.config.dir_freqs)
        with torch.no_grad():
            d, s = self.field(torch.tensor([voxel_position], dtype=self.dtype), dir_enc=enc)
        return float(d[0]), float(s[0])

    # ------------------------------------------------------------------ rendering

    def _dir_terms(self) -> torch.Tensor:
        rfirst = self.radiance_net.layers[0]
        enc = fourier_encode(self.dir_angles, self.config.dir_freqs)
        return enc @ rfirst.weight[:, self.config.att_width:].T   # (D, hidden)

    def render_rays(self, rx: torch.Tensor) -> torch.Tensor:
        """R(w) for every grid direction: (n, D)."""
        pts = rx[:, None, None, :] + self.radii[None, None, :, None] * self.dirs[None, :, None, :]
        dir_term = self._dir_terms()[None, :, None, :]
        delta, sig = self.field(pts, dir_enc_term=dir_term)
        return composite(delta, sig, self.dr)

    def forward(self, rx: torch.Tensor) -> torch.Tensor:
        """Normalized RSRP prediction for receivers (n, 3)."""
        return self.render_rays(rx) @ self.dir_weights

    def predict_rsrp(self, rx, chunk: int = 256) -> np.ndarray:
        """dBm predictions for an (n, 3) array of receiver positions."""
        rx = np.atleast_2d(np.asarray(rx, dtype=float))
        out = []
        with torch.no_grad():
            for k in range(0, len(rx), chunk):
                t = torch.as_tensor(rx[k:k + chunk], dtype=self.dtype)
                out.append(self.denormalize_rsrp(self(t)).cpu().numpy().astype(float))
        return np.concatenate(out) if out else np.zeros(0)

    def render_direction(self, rx, direction) -> float:
        """R(w) for one (azimuth, elevation) direction, linear normalized units."""
        az, el = direction
        d = torch.tensor([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)], dtype=self.dtype)
        back = torch.tensor([[((az + math.pi) % (2 * math.pi)) / math.pi - 1.0, -el / (math.pi / 2)]],
                            dtype=self.dtype)
        enc = fourier_encode(back, self.config.dir_freqs)
        with torch.no_grad():
            pts = torch.as_tensor(rx, dtype=self.dtype)[None, :] + self.radii[:, None] * d[None, :]
            delta, sig = self.field(pts, dir_enc=enc.expand(len(pts), -1))
            return float(composite(delta, sig, self.dr))

    # ------------------------------------------------------------------ parameters

    def flat_parameters(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.named_parameters()}

    def clone(self) -> "NrrfModel":
        other = NrrfModel(self.config, self.bounds, self.tx_position.tolist(), self.scene_d_max)
        other.load_state_dict(self.state_dict())
        return other

    def to_dtype(self, dtype: str) -> "NrrfModel":
        other = NrrfModel(replace(self.config, dtype=dtype), self.bounds, self.tx_position.tolist(), self.scene_d_max)
        with torch.no_grad():
            for (k, p), (_, q) in zip(other.named_parameters(), self.named_parameters()):
                p.copy_(q.to(p.dtype))
        return other


def composite(delta: torch.Tensor, signal: torch.Tensor, dr: torch.Tensor) -> torch.Tensor:
    """Emission-absorption quadrature along the last axis.

    alpha_i = 1 - exp(-delta_i dr_i), T_i = prod_{j<i} (1 - alpha_j), R = sum_i T_i alpha_i S_i.
    """
    alpha = 1.0 - torch.exp(-delta * dr)
    ones = torch.ones_like(alpha[..., :1])
    trans = torch.cumprod(torch.cat([ones, 1.0 - alpha[..., :-1]], dim=-1), dim=-1)
    return (trans * alpha * signal).sum(-1)


# --------------------------------------------------------------------------- loss and training


@dataclass
class EwcState:
    """Anchor weights and diagonal Fisher information for the consolidation penalty."""

    anchor: dict[str, torch.Tensor]
    fisher: dict[str, torch.Tensor]
    lam: float = 0.4

    def __post_init__(self):
        for k, f in self.fisher.items():
            if f.shape != self.anchor[k].shape:
                raise ValueError(f"fisher/anchor shape mismatch for {k}")
            if bool((f < 0).any()):
                raise ValueError("fisher entries must be nonnegative")

    def penalty(self, model: NrrfModel) -> torch.Tensor:
        total = torch.zeros((), dtype=model.dtype)
        for name, p in model.named_parameters():
            total = total + (self.fisher[name] * (p - self.anchor[name]) ** 2).sum()
        return 0.5 * self.lam * total


def batch_tensors(model: NrrfModel, locations, targets_dbm) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.as_tensor(np.asarray(locations, dtype=float).reshape(-1, 3), dtype=model.dtype)
    y = torch.as_tensor(np.asarray(targets_dbm, dtype=float).reshape(-1), dtype=model.dtype)
    return x, model.normalize_rsrp(y)


def loss_terms(model: NrrfModel, x: torch.Tensor, y_norm: torch.Tensor, ewc: EwcState | None = None) -> torch.Tensor:
    loss = torch.mean((model(x) - y_norm) ** 2)
    if ewc is not None:
        loss = loss + ewc.penalty(model)
    return loss


def loss_and_gradient(model: NrrfModel, locations, targets_dbm, ewc: EwcState | None = None
                      ) -> tuple[float, dict[str, torch.Tensor]]:
    """MSE on normalized RSRP (plus the EWC penalty) and its gradient per parameter tensor."""
    if len(np.atleast_1d(targets_dbm)) == 0:
        raise ValueError("batch must be nonempty")
    x, y = batch_tensors(model, locations, targets_dbm)
    params = [p for _, p in model.named_parameters()]
    loss = loss_terms(model, x, y, ewc)
    grads = torch.autograd.grad(loss, params)
    return float(loss.detach()), {name: g for (name, _), g in zip(model.named_parameters(), grads)}


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    decay: float = 5e-5              # per-step multiplicative decay of the learning rate
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


class Learner:
    """Owns a model plus its Adam state; applies gradient steps."""

    def __init__(self, model: NrrfModel, optim: OptimConfig = OptimConfig()):
        self.model = model
        self.optim_config = optim
        self.optimizer = torch.optim.Adam(model.parameters(), lr=optim.lr, betas=optim.betas, eps=optim.eps)
        self.scheduler = torch.optim.lr_scheduler.ExponentialLR(self.optimizer, gamma=1.0 - optim.decay)
        self.steps = 0
        self.anomalies = 0

    def step(self, x: torch.Tensor, y_norm: torch.Tensor, ewc: EwcState | None = None) -> float:
        self.optimizer.zero_grad(set_to_none=True)
        loss = loss_terms(self.model, x, y_norm, ewc)
        loss.backward()
        self.optimizer.step()
        self.scheduler.step()
        self.steps += 1
        return float(loss.detach())

    def snapshot(self) -> tuple[dict, dict, dict]:
        return ({k: v.clone() for k, v in self.model.state_dict().items()},
                _clone_state(self.optimizer.state_dict()), self.scheduler.state_dict())

    def restore(self, snap) -> None:
        model_state, opt_state, sched_state = snap
        self.model.load_state_dict(model_state)
        self.optimizer.load_state_dict(opt_state)
        self.scheduler.load_state_dict(sched_state)


def _clone_state(state):
    if isinstance(state, torch.Tensor):
        return state.clone()
    if isinstance(state, dict):
        return {k: _clone_state(v) for k, v in state.items()}
    if isinstance(state, list):
        return [_clone_state(v) for v in state]
    return state


@dataclass(frozen=True)
class PretrainConfig:
    iterations: int = 2000
    batch_size: int = 256
    holdout_fraction: float = 0.1
    eval_every: int = 50
    seed: int = 0
    optim: OptimConfig = field(default_factory=OptimConfig)


@dataclass
class PretrainResult:
    model: NrrfModel
    curve: list[tuple[int, float, float]]   # (iteration, train loss, held-out mse)
    best_iteration: int
    best_holdout_mse: float
    wall_s: float


def pretrain(model: NrrfModel, locations, targets_dbm, config: PretrainConfig = PretrainConfig()) -> PretrainResult:
    """Offline fit on simulator samples; keeps the weights with the lowest held-out MSE."""
    locations = np.asarray(locations, dtype=float).reshape(-1, 3)
    targets_dbm = np.asarray(targets_dbm, dtype=float).reshape(-1)
    if len(targets_dbm) == 0:
        raise ValueError("pretraining dataset is empty")
    t0 = time.perf_counter()
    rng = np.random.default_rng([config.seed, 31337])
    order = rng.permutation(len(targets_dbm))
    n_hold = int(round(config.holdout_fraction * len(order))) if len(order) > 1 else 0
    n_hold = min(n_hold, len(order) - 1)
    hold, train = order[:n_hold], order[n_hold:]
    xh, yh = batch_tensors(model, locations[hold], targets_dbm[hold])
    learner = Learner(model, config.optim)
    curve = []
    best_state, best_mse, best_it = None, math.inf, 0

    def holdout_mse():
        if n_hold == 0:
            return math.nan
        with torch.no_grad():
            return float(torch.mean((model(xh) - yh) ** 2))

    last_loss = math.nan
    for it in range(config.iterations + 1):
        if it % config.eval_every == 0 or it == config.iterations:
            mse = holdout_mse()
            curve.append((it, last_loss, mse))
            score = mse if n_hold else last_loss
            if it > 0 and (score < best_mse or best_state is None):
                best_mse, best_it = score, it
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
        if it == config.iterations:
            break
        idx = rng.choice(train, size=config.batch_size, replace=len(train) < config.batch_size)
        x, y = batch_tensors(model, locations[idx], targets_dbm[idx])
        last_loss = learner.step(x, y)
    if best_state is not None:
        model.load_state_dict(best_state)
    return PretrainResult(model, curve, best_it, best_mse, time.perf_counter() - t0)


# --------------------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: NrrfModel, path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_json(),
        "bounds": list(model.bounds),
        "tx_position": model.tx_position.tolist(),
        "scene_d_max": model.scene_d_max,
        "shapes": {k: list(v.shape) for k, v in model.named_parameters()},
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.named_parameters()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path, expect: NrrfConfig | None = None) -> NrrfModel:
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
        config = NrrfConfig.from_json(meta["config"])
        if expect is not None and expect != config:
            raise CheckpointError("checkpoint config does not match the expected model config")
        model = NrrfModel(config, meta["bounds"], meta["tx_position"], meta["scene_d_max"])
        with torch.no_grad():
            for name, p in model.named_parameters():
                if name not in data.files:
                    raise CheckpointError(f"checkpoint is missing parameter {name}")
                arr = data[name]
                if list(arr.shape) != list(p.shape):
                    raise CheckpointError(f"shape mismatch for {name}: {list(arr.shape)} vs {list(p.shape)}")
                p.copy_(torch.from_numpy(arr).to(p.dtype))
            extra = set(data.files) - {"__meta__"} - set(dict(model.named_parameters()))
            if extra:
                raise CheckpointError(f"checkpoint has unexpected arrays {sorted(extra)}")
    return model
