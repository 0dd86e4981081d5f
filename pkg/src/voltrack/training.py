"""Supervised, self-supervised, and mixed training.

Supervised pairs use real template/search volumes with an affine-registered
anatomy prior; SSL pairs are built on the fly from a single volume and a
random augmentation whose geometry is tracked exactly so the target center
stays consistent.
"""

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from voltrack import autodiff as ad
from voltrack.anatomy import build_search_signal, build_template_signal, gaussian_field
from voltrack.errors import ContractError
from voltrack.model import ModelConfig, TrackerModel, save_checkpoint
from voltrack.registration import AffineTransform, affine_register, apply_point
from voltrack.volgeom import Lesion, Volume, sample_at_voxels


# -- manifest ----------------------------------------------------------------

@dataclass
class ManifestEntry:
    template: str
    search: str       # None marks SSL-only entries
    lesion_t: Lesion
    lesion_s: Lesion
    intensity_range: tuple = None
    diameter_t: float = None   # optional downstream measurement inputs (mm)
    diameter_s: float = None
    diameter_p: float = None


def _lesion_from_json(obj):
    if obj is None:
        return None
    return Lesion(tuple(obj["center_mm"]), float(obj["radius_mm"]))


def load_manifest(path):
    with open(path) as f:
        raw = json.load(f)
    entries = []
    for e in raw:
        entries.append(ManifestEntry(
            template=e["template"],
            search=e.get("search"),
            lesion_t=_lesion_from_json(e["lesion_t"]),
            lesion_s=_lesion_from_json(e.get("lesion_s")),
            intensity_range=tuple(e["intensity_range"]) if e.get("intensity_range") else None,
            diameter_t=e.get("diameter_t"),
            diameter_s=e.get("diameter_s"),
            diameter_p=e.get("diameter_p"),
        ))
    return entries


class VolumeStore:
    """Loads and caches manifest volumes, applying the optional linear
    intensity rescale hook (intensity_range -> [0,1])."""

    def __init__(self, root):
        self.root = root
        self._cache = {}

    def get(self, name, intensity_range=None) -> Volume:
        key = (name, intensity_range)
        if key not in self._cache:
            from voltrack.volgeom import read_raw_volume
            v = read_raw_volume(os.path.join(self.root, name))
            if intensity_range is not None:
                lo, hi = intensity_range
                if hi <= lo:
                    raise ContractError(f"bad intensity_range {intensity_range} for {name}")
                v = Volume((v.data - lo) / (hi - lo), v.spacing)
            self._cache[key] = v
        return self._cache[key]


# -- targets and losses -------------------------------------------------------

def target_heatmap(map_shape, center_mm, radius_mm, stride, spacing):
    """Ground-truth Gaussian (sigma = radius_mm) evaluated directly on the
    prediction grid; the voxel nearest the center is set to exactly 1.

    Returns (array, clipped) where clipped marks an out-of-grid center whose
    peak was moved to the nearest in-bounds voxel.
    """
    if radius_mm <= 0:
        raise ContractError(f"target radius must be positive, got {radius_mm}")
    step = tuple(st * sp for st, sp in zip(stride, spacing))
    y = gaussian_field(map_shape, step, center_mm, radius_mm)
    idx = [int(round(c / s)) for c, s in zip(center_mm, step)]
    clipped = any(i < 0 or i >= n for i, n in zip(idx, map_shape))
    idx = tuple(int(np.clip(i, 0, n - 1)) for i, n in zip(idx, map_shape))
    y[idx] = 1.0
    return y, clipped


def focal_loss(logits, y, alpha=2.0, beta=4.0):
    """Minimization-form focal loss over a predicted heatmap, taken on the
    pre-sigmoid logits for numerical stability."""
    return ad.focal_heatmap_loss_logits(logits, y, alpha=alpha, beta=beta)


def center_augment(center_mm, radius_mm, rng, shift_frac=0.25):
    """Uniform sample in the closed mm ball of radius shift_frac * radius."""
    if shift_frac <= 0:
        return tuple(center_mm)
    direction = rng.standard_normal(3)
    norm = np.linalg.norm(direction)
    if norm < 1e-12:
        return tuple(center_mm)
    direction /= norm
    r = shift_frac * radius_mm * rng.random() ** (1.0 / 3.0)
    return tuple(np.asarray(center_mm, dtype=np.float64) + r * direction)


# -- SSL augmentation ---------------------------------------------------------

@dataclass
class AugmentConfig:
    prob: float = 0.5
    elastic_scale: tuple = (0.0, 0.25)      # max displacement as patch-edge fraction
    rotate_deg: tuple = (-10.0, 10.0)       # xy-plane
    scale: tuple = (0.75, 1.25)
    crop_frac: tuple = (0.75, 1.0)          # retained fraction of each extent
    noise_var: tuple = (0.0, 0.05)
    blur_sigma: tuple = (0.5, 1.5)
    max_retries: int = 5


@dataclass
class AugmentedPair:
    image: Volume            # augmented search-side image
    heatmap: Volume          # anatomy signal warped with the same geometry
    lesion: Lesion           # tracked lesion in the augmented frame
    provenance: str = "ssl"


def _sample_geometry(shape, spacing, rng, cfg: AugmentConfig):
    """Forward affine (template mm -> augmented mm) composed of optional
    xy-rotation, isotropic scale, and crop-resize."""
    extent = np.asarray([(n - 1) * s for n, s in zip(shape, spacing)])
    c = 0.5 * extent
    A = np.eye(3)
    t = np.zeros(3)

    def compose(A2, t2):
        nonlocal A, t
        A = A2 @ A
        t = A2 @ t + t2

    if rng.random() < cfg.prob:
        th = np.deg2rad(rng.uniform(*cfg.rotate_deg))
        R = np.array([[1, 0, 0],
                      [0, np.cos(th), -np.sin(th)],
                      [0, np.sin(th), np.cos(th)]])
        compose(R, c - R @ c)
    if rng.random() < cfg.prob:
        s = rng.uniform(*cfg.scale)
        compose(s * np.eye(3), c - s * c)
    if rng.random() < cfg.prob:
        f = rng.uniform(*cfg.crop_frac, size=3)
        origin = rng.uniform(0, 1, size=3) * (1 - f) * extent
        # window [origin, origin + f*extent] stretched back to the full grid
        S = np.diag(1.0 / f)
        compose(S, -S @ origin)
    return AffineTransform(A, t)


def _elastic_field(shape, spacing, rng, amplitude_frac):
    """Smooth random mm-displacement field, one (Z,Y,X) array per axis."""
    extent = np.asarray([(n - 1) * s for n, s in zip(shape, spacing)])
    sigma_vox = [max(n / 4.0, 1.0) for n in shape]
    fields = []
    for ax in range(3):
        f = gaussian_filter(rng.standard_normal(shape), sigma_vox)
        peak = np.abs(f).max()
        if peak > 0:
            f = f / peak * amplitude_frac * extent[ax]
        fields.append(f.astype(np.float64))
    return fields


def ssl_augment(vol: Volume, lesion: Lesion, rng, cfg: AugmentConfig = None,
                heatmap: Volume = None) -> AugmentedPair:
    """Build one self-supervised pair: the input volume plus an augmented copy
    with the lesion geometry tracked through every transform."""
    cfg = cfg or AugmentConfig()
    shape, spacing = vol.shape, vol.spacing
    sp = np.asarray(spacing)
    for _ in range(max(cfg.max_retries, 1)):
        T = _sample_geometry(shape, spacing, rng, cfg)
        elastic = None
        if rng.random() < cfg.prob:
            amp = rng.uniform(*cfg.elastic_scale)
            if amp > 0:
                elastic = _elastic_field(shape, spacing, rng, amp)
        noise_sd = None
        if rng.random() < cfg.prob:
            noise_sd = float(np.sqrt(rng.uniform(*cfg.noise_var)))
        blur = None
        if rng.random() < cfg.prob:
            blur = rng.uniform(*cfg.blur_sigma)

        # tracked center: solve p with Tinv(p) + D(p) = mu by fixed point
        Ti = T.inverse()
        center = np.asarray(apply_point(T, lesion.center))
        if elastic is not None:
            for _ in range(25):
                vox = np.clip(np.round(center / sp).astype(int), 0, np.asarray(shape) - 1)
                disp = np.asarray([elastic[ax][tuple(vox)] for ax in range(3)])
                center = np.asarray(apply_point(T, np.asarray(lesion.center) - disp))
        radius = lesion.radius * abs(np.linalg.det(T.A)) ** (1.0 / 3.0)

        margin = np.asarray([radius] * 3)
        extent = np.asarray(vol.extent_mm())
        if np.any(center < margin) or np.any(center > extent - margin):
            continue

        grid = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"),
                        axis=-1).reshape(-1, 3).astype(np.float64)
        pts = grid * sp
        src = pts @ Ti.A.T + Ti.t
        if elastic is not None:
            disp = np.stack([f.reshape(-1) for f in elastic], axis=1)
            src = src + disp
        coords = src / sp
        img = sample_at_voxels(vol, coords).reshape(shape).astype(np.float32)
        hm = None
        if heatmap is not None:
            hm = sample_at_voxels(heatmap, coords).reshape(shape).astype(np.float32)
        if blur is not None:
            img = gaussian_filter(img, sigma=blur)  # sigma in voxels
        if noise_sd is not None and noise_sd > 0:
            img = img + rng.normal(0.0, noise_sd, size=shape).astype(np.float32)
        return AugmentedPair(
            Volume(img, spacing),
            Volume(hm, spacing) if hm is not None else None,
            Lesion(tuple(center), radius),
        )
    # retries exhausted: fall back to the identity pair
    return AugmentedPair(Volume(vol.data.copy(), spacing),
                         Volume(heatmap.data.copy(), spacing) if heatmap is not None else None,
                         lesion)


# -- optimizer ----------------------------------------------------------------

class RMSProp:
    """Momentum-free adaptive first-order update with a fixed step."""

    def __init__(self, params, lr=1e-3, decay=0.9, eps=1e-8):
        self.params = list(params.values())
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    def step(self):
        if self.lr == 0:
            return
        for p, v in zip(self.params, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            v *= self.decay
            v += (1 - self.decay) * g * g
            p.data = (p.data - self.lr * g / (np.sqrt(v) + self.eps)).astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# -- the training loop ----------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 400
    batch_size: int = 2
    lr: float = 1e-3
    seed: int = 0
    alpha: float = 2.0
    beta: float = 4.0
    tau: float = 0.25           # SSL mixing threshold
    lr_drops: tuple = ()        # (step, lr) pairs applied when step is reached
    ema_decay: float = 0.0      # >0 enables a parameter moving average; the
                                # averaged weights become the final model
    center_shift_frac: float = 0.25
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    reg_seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.tau <= 1.0):
            raise ContractError(f"tau must lie in [0,1], got {self.tau}")
        if self.center_shift_frac < 0:
            raise ContractError("center_shift_frac must be >= 0")
        if isinstance(self.aug, dict):
            self.aug = AugmentConfig(**self.aug)
        self.lr_drops = tuple((int(s), float(lr)) for s, lr in self.lr_drops)
        if any(lr < 0 or s < 0 for s, lr in self.lr_drops):
            raise ContractError(f"bad lr_drops {self.lr_drops}")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ContractError(f"ema_decay must lie in [0,1), got {self.ema_decay}")


def choose_branch(lam, tau, have_supervised, have_ssl, warnings=None):
    """Mixing rule: SSL when lam <= tau, with fallback when a branch is empty."""
    branch = "ssl" if lam <= tau else "supervised"
    if branch == "ssl" and not have_ssl:
        if warnings is not None:
            warnings.append("ssl branch requested but no ssl entries; using supervised")
        branch = "supervised"
    elif branch == "supervised" and not have_supervised:
        if warnings is not None:
            warnings.append("supervised branch requested but no pairs; using ssl")
        branch = "ssl"
    return branch


@dataclass
class TrainResult:
    loss_curve: list          # (step, branch, loss)
    checkpoint: str
    warnings: list


def _supervised_loss(model, store, entry, transform, cfg, rng):
    vol_t = store.get(entry.template, entry.intensity_range)
    vol_s = store.get(entry.search, entry.intensity_range)
    n = model.cfg.heatmap_n
    mu_t = center_augment(entry.lesion_t.center, entry.lesion_t.radius, rng,
                          cfg.center_shift_frac)
    shifted = Lesion(mu_t, entry.lesion_t.radius)
    sig_t = build_template_signal(vol_t.shape, vol_t.spacing, shifted, n)
    sig_s = build_search_signal(vol_s.shape, vol_s.spacing, shifted, transform, n)
    yhat = model.forward_pair(
        model._tensorize(vol_t), model._tensorize(sig_t.heatmap),
        model._tensorize(vol_s), model._tensorize(sig_s.heatmap),
        mu_t, vol_t.spacing, logits=True)
    y, _ = target_heatmap(yhat.shape[2:], entry.lesion_s.center,
                          entry.lesion_s.radius, model.cfg.scale_stride(1),
                          vol_s.spacing)
    return focal_loss(yhat, y[None, None], cfg.alpha, cfg.beta)


def _ssl_loss(model, store, entry, cfg, rng):
    vol_t = store.get(entry.template, entry.intensity_range)
    n = model.cfg.heatmap_n
    mu_t = center_augment(entry.lesion_t.center, entry.lesion_t.radius, rng,
                          cfg.center_shift_frac)
    shifted = Lesion(mu_t, entry.lesion_t.radius)
    sig_t = build_template_signal(vol_t.shape, vol_t.spacing, shifted, n)
    pair = ssl_augment(vol_t, entry.lesion_t, rng, cfg.aug, heatmap=sig_t.heatmap)
    yhat = model.forward_pair(
        model._tensorize(vol_t), model._tensorize(sig_t.heatmap),
        model._tensorize(pair.image), model._tensorize(pair.heatmap),
        mu_t, vol_t.spacing, logits=True)
    y, _ = target_heatmap(yhat.shape[2:], pair.lesion.center, pair.lesion.radius,
                          model.cfg.scale_stride(1), pair.image.spacing)
    return focal_loss(yhat, y[None, None], cfg.alpha, cfg.beta)


def register_pairs(store, entries, seed=0):
    """Affine transforms for all supervised pairs, cached by (template, search)."""
    cache = {}
    for e in entries:
        if e.search is None:
            continue
        key = (e.template, e.search)
        if key in cache:
            continue
        res = affine_register(store.get(e.template, e.intensity_range),
                              store.get(e.search, e.intensity_range), seed=seed)
        cache[key] = res.transform
    return cache


def train(model: TrackerModel, cfg: TrainConfig, manifest_path, out_ckpt,
          log_csv=None) -> TrainResult:
    entries = load_manifest(manifest_path)
    if not entries:
        raise ContractError(f"manifest {manifest_path} is empty")
    store = VolumeStore(os.path.dirname(os.path.abspath(manifest_path)))
    supervised = [e for e in entries if e.search is not None]
    ssl_entries = [e for e in entries if e.search is None]
    transforms = register_pairs(store, supervised, seed=cfg.reg_seed)

    rng = np.random.default_rng(cfg.seed)
    opt = RMSProp(model.params, lr=cfg.lr)
    curve, warnings = [], []
    drops = dict(cfg.lr_drops)
    # bias-corrected moving average of the weights; averaging out the
    # small-batch oscillations gives a steadier final model
    ema = {k: np.zeros_like(p.data, dtype=np.float64)
           for k, p in model.params.items()} if cfg.ema_decay > 0 else None
    ema_norm = 0.0
    for step in range(cfg.steps):
        if step in drops:
            opt.lr = drops[step]
        lam = rng.random()
        branch = choose_branch(lam, cfg.tau, bool(supervised), bool(ssl_entries), warnings)
        pool = supervised if branch == "supervised" else ssl_entries
        batch = [pool[int(i)] for i in rng.integers(0, len(pool), size=cfg.batch_size)]
        opt.zero_grad()
        total = None
        for entry in batch:
            if branch == "supervised":
                loss = _supervised_loss(model, store, entry,
                                        transforms[(entry.template, entry.search)],
                                        cfg, rng)
            else:
                loss = _ssl_loss(model, store, entry, cfg, rng)
            total = loss if total is None else ad.add(total, loss)
        total = ad.scale(total, 1.0 / len(batch))
        value = total.item()
        if not np.isfinite(value):
            ids = [e.template for e in batch]
            raise ContractError(f"non-finite loss at step {step}; batch={ids}")
        total.backward()
        opt.step()
        curve.append((step, branch, value))
        if ema is not None:
            ema_norm = cfg.ema_decay * ema_norm + (1 - cfg.ema_decay)
            for k, p in model.params.items():
                ema[k] *= cfg.ema_decay
                ema[k] += (1 - cfg.ema_decay) * p.data

    if ema is not None and ema_norm > 0:
        for k, p in model.params.items():
            p.data = (ema[k] / ema_norm).astype(p.dtype)
    save_checkpoint(model, out_ckpt)
    if log_csv:
        with open(log_csv, "w", newline="") as f:
            wtr = csv.writer(f)
            wtr.writerow(["step", "branch", "loss"])
            for row in curve:
                wtr.writerow([row[0], row[1], f"{row[2]:.10g}"])
    return TrainResult(curve, out_ckpt, warnings)
