"""Model container: configuration, parameters, the end-to-end forward pass,
checkpoint IO, and the single-pair tracking pipeline."""

import json
import struct
import time
from dataclasses import dataclass, asdict, field

import numpy as np

from voltrack import autodiff as ad
from voltrack import encoders, xcorr
from voltrack.anatomy import build_search_signal, build_template_signal
from voltrack.errors import ContractError
from voltrack.registration import AffineTransform, affine_register
from voltrack.volgeom import Lesion, Volume

CKPT_MAGIC = "voltrack-ckpt-v1"


@dataclass
class ModelConfig:
    embed_dim: int = 64
    stem_channels: int = 16
    growth: int = 8
    block_depth: int = 2
    ase_hidden: int = 8
    base_stride: tuple = (1, 2, 2)
    kernel_local: tuple = (3, 3, 3)
    kernel_global: tuple = (7, 11, 11)   # None disables the global kernel
    learned_flatten: bool = True
    fast_correlation: bool = True
    fuse: str = "multiply"               # or "concat"
    heatmap_n: float = 4.0
    dtype: str = "float32"

    def __post_init__(self):
        self.base_stride = tuple(self.base_stride)
        self.kernel_local = tuple(self.kernel_local)
        if self.kernel_global is not None:
            self.kernel_global = tuple(self.kernel_global)
        if self.fuse not in ("multiply", "concat"):
            raise ContractError(f"fuse must be 'multiply' or 'concat', got {self.fuse!r}")
        if self.embed_dim <= 0:
            raise ContractError("embed_dim must be positive")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def scale_stride(self, scale):
        """Voxel stride of pyramid scale 1..3 relative to the input grid."""
        bz, by, bx = self.base_stride
        f = 2 ** (scale - 1)
        return (bz, by * f, bx * f)

    def to_json(self):
        d = asdict(self)
        d["base_stride"] = list(self.base_stride)
        d["kernel_local"] = list(self.kernel_local)
        d["kernel_global"] = list(self.kernel_global) if self.kernel_global else None
        return d

    @staticmethod
    def from_json(obj):
        return ModelConfig(**{
            k: (tuple(v) if isinstance(v, list) else v) for k, v in obj.items()
        })

    @staticmethod
    def desk_scale(**overrides):
        """Small configuration for (16,64,64) synthetic volumes. The global
        kernel is shrunk so it fits the coarsest (z,8,8) feature map."""
        base = dict(embed_dim=16, stem_channels=8, growth=8, block_depth=2,
                    ase_hidden=8, kernel_global=(5, 7, 7))
        base.update(overrides)
        return ModelConfig(**base)


class TrackerModel:
    """All learnable parameters plus the forward pass built from them."""

    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        self.params = {}
        rng = np.random.default_rng(seed)
        encoders.init_image_encoder(self.params, cfg, rng)
        encoders.init_anatomy_encoder(self.params, cfg, rng)
        if cfg.fuse == "concat":
            for i in range(1, 4):
                encoders._init_conv(self.params, f"fuseproj{i}", cfg.embed_dim,
                                    2 * cfg.embed_dim, (1, 1, 1), rng, cfg.np_dtype)
        if cfg.kernel_global is not None:
            xcorr.init_flatten_params(self.params, cfg.kernel_global, cfg.np_dtype)
        xcorr.init_head_params(self.params, cfg.np_dtype)

    def param_count(self):
        return sum(int(np.prod(p.shape)) for p in self.params.values())

    def param_groups(self):
        """Logical parameter grouping (image encoder, anatomy encoder,
        flattening, head) used by gradient checks and diagnostics."""
        groups = {"image_encoder": [], "anatomy_encoder": [], "flatten": [], "head": []}
        for name in self.params:
            if name.startswith("img."):
                groups["image_encoder"].append(name)
            elif name.startswith("ana."):
                groups["anatomy_encoder"].append(name)
            elif name.startswith("flatten."):
                groups["flatten"].append(name)
            else:
                groups["head"].append(name)
        return {k: v for k, v in groups.items() if v}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- forward pieces -----------------------------------------------------

    def _tensorize(self, vol: Volume):
        return ad.tensor(vol.data[None, None], dtype=self.cfg.np_dtype)

    def feature_center(self, center_mm, spacing, scale):
        stride = self.cfg.scale_stride(scale)
        return tuple(
            int(round(c / sp / st)) for c, sp, st in zip(center_mm, spacing, stride)
        )

    def correspondence_maps(self, img_t, sig_t, img_s, sig_s, mu_t_mm, spacing_t):
        """Per-scale correspondence maps M1..M3 for a template/search pair.

        All image/signal arguments are 5D tensors; mu_t_mm is the template
        lesion center used for kernel extraction.
        """
        cfg = self.cfg
        psi_t = encoders.image_encode(self.params, cfg, img_t)
        phi_t = encoders.anatomy_encode(self.params, cfg, sig_t)
        F = xcorr.fuse(psi_t, phi_t, self.params, cfg)
        psi_s = encoders.image_encode(self.params, cfg, img_s)
        phi_s = encoders.anatomy_encode(self.params, cfg, sig_s)
        S = xcorr.fuse(psi_s, phi_s, self.params, cfg)
        corr = xcorr.correlate_fast if cfg.fast_correlation else xcorr.correlate_full
        maps = []
        for scale in (1, 2, 3):
            center = self.feature_center(mu_t_mm, spacing_t, scale)
            ks = xcorr.extract_kernels(
                F[scale - 1], center, self.params, cfg.kernel_local,
                cfg.kernel_global, cfg.learned_flatten)
            maps.append(corr(ks, S[scale - 1]))
        return maps

    def forward_pair(self, img_t, sig_t, img_s, sig_s, mu_t_mm, spacing_t,
                     logits=False):
        m1, m2, m3 = self.correspondence_maps(img_t, sig_t, img_s, sig_s,
                                              mu_t_mm, spacing_t)
        fn = xcorr.head_logits if logits else xcorr.head
        return fn(m1, m2, m3, self.params["head.W"], self.params["head.b"])

    def predict_heatmap(self, vol_t: Volume, sig_t: Volume, vol_s: Volume,
                        sig_s: Volume, mu_t_mm):
        with ad.no_grad():
            yhat = self.forward_pair(
                self._tensorize(vol_t), self._tensorize(sig_t),
                self._tensorize(vol_s), self._tensorize(sig_s),
                mu_t_mm, vol_t.spacing)
        return yhat.data


@dataclass
class TrackResult:
    center_mm: tuple
    peak_value: float
    transform: AffineTransform
    prior_converged: bool
    seconds: float


def track(model: TrackerModel, vol_t: Volume, lesion_t: Lesion, vol_s: Volume,
          transform: AffineTransform = None, reg_seed=0) -> TrackResult:
    """Full pipeline: affine prior, anatomy signals, encode, correlate, decode."""
    t0 = time.perf_counter()
    converged = True
    if transform is None:
        reg = affine_register(vol_t, vol_s, seed=reg_seed)
        transform, converged = reg.transform, reg.converged
    n = model.cfg.heatmap_n
    sig_t = build_template_signal(vol_t.shape, vol_t.spacing, lesion_t, n)
    sig_s = build_search_signal(vol_s.shape, vol_s.spacing, lesion_t, transform, n)
    yhat = model.predict_heatmap(vol_t, sig_t.heatmap, vol_s, sig_s.heatmap,
                                 lesion_t.center)
    center, peak, _ = xcorr.decode(yhat, model.cfg.scale_stride(1), vol_s.spacing)
    return TrackResult(center, peak, transform, converged, time.perf_counter() - t0)


# -- checkpoint IO ----------------------------------------------------------

def save_checkpoint(model: TrackerModel, path):
    """Single container: u64-length-prefixed JSON header, then the f32
    parameter payloads concatenated in registry order."""
    registry = [[name, list(p.shape)] for name, p in model.params.items()]
    header = json.dumps({
        "format": CKPT_MAGIC,
        "config": model.cfg.to_json(),
        "registry": registry,
    }).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for p in model.params.values():
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> TrackerModel:
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        if header.get("format") != CKPT_MAGIC:
            raise ContractError(f"not a voltrack checkpoint: {path}")
        cfg = ModelConfig.from_json(header["config"])
        model = TrackerModel(cfg, seed=0)
        for name, shape in header["registry"]:
            count = int(np.prod(shape))
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise ContractError(f"truncated checkpoint payload in {path}")
            arr = np.frombuffer(buf, dtype="<f4").reshape(shape)
            if name not in model.params or list(model.params[name].shape) != list(shape):
                raise ContractError(f"checkpoint parameter {name}{shape} does not "
                                    "match the model built from its config")
            model.params[name].data = arr.astype(cfg.np_dtype)
    return model
