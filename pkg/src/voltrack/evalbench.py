"""Evaluation protocol: bidirectional directed pairs, CPM/MED/spv metrics,
the 10x robustness expansion, and RECIST-style response classification."""

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from voltrack.errors import ContractError
from voltrack.model import TrackerModel, track
from voltrack.registration import affine_register
from voltrack.training import VolumeStore, load_manifest
from voltrack.volgeom import Lesion


@dataclass
class DirectedPair:
    pair_id: str
    direction: str           # "ab" or "ba"
    template: str
    search: str
    lesion_t: Lesion
    lesion_s: Lesion
    intensity_range: tuple = None
    init_index: int = 0      # robustness slot; 0 is the unshifted original


@dataclass
class PairResult:
    pair: DirectedPair
    pred_mm: tuple           # None on failure
    seconds: float
    error: str = None

    @property
    def offset_mm(self):
        if self.pred_mm is None:
            return None
        return tuple(p - t for p, t in zip(self.pred_mm, self.pair.lesion_s.center))

    @property
    def dist_mm(self):
        off = self.offset_mm
        return None if off is None else float(np.linalg.norm(off))


def directed_pairs(entries):
    """Both tracking directions for every annotated pair (SSL-only entries
    are skipped)."""
    out = []
    for i, e in enumerate(entries):
        if e.search is None or e.lesion_s is None:
            continue
        pid = f"pair_{i:04d}"
        out.append(DirectedPair(pid, "ab", e.template, e.search,
                                e.lesion_t, e.lesion_s, e.intensity_range))
        out.append(DirectedPair(pid, "ba", e.search, e.template,
                                e.lesion_s, e.lesion_t, e.intensity_range))
    return out


def robustness_expand(pairs, rng):
    """Exactly 10 initializations per directed pair: the original plus nine
    template centers shifted uniformly within the ball of radius 0.25 r_t."""
    from voltrack.training import center_augment
    out = []
    for p in pairs:
        out.append(p)
        for k in range(1, 10):
            mu = center_augment(p.lesion_t.center, p.lesion_t.radius, rng, 0.25)
            out.append(DirectedPair(p.pair_id, p.direction, p.template, p.search,
                                    Lesion(mu, p.lesion_t.radius), p.lesion_s,
                                    p.intensity_range, init_index=k))
    return out


# -- metrics ------------------------------------------------------------------

def _hit(res: PairResult, rule):
    d = res.dist_mm
    if d is None:
        return False
    r = res.pair.lesion_s.radius
    thr = r if rule == "radius" else min(r, 10.0)
    return d < thr  # strict: boundary hits count as misses


def cpm(results, rule="radius"):
    """Center-point-match percentage; None on an empty set (undefined)."""
    if rule not in ("radius", "min10"):
        raise ContractError(f"unknown CPM rule {rule!r}")
    if not results:
        return None
    return 100.0 * sum(_hit(r, rule) for r in results) / len(results)


def med(results):
    """Mean ± sd of the Euclidean distance and its per-axis projections (mm).
    Failed pairs carry no distance and are excluded here (they still count
    as misses for CPM)."""
    offs = [r.offset_mm for r in results if r.offset_mm is not None]
    if not offs:
        return None
    offs = np.abs(np.asarray(offs, dtype=np.float64))
    dist = np.linalg.norm(offs, axis=1)
    stat = lambda v: (float(v.mean()), float(v.std()))
    return {
        "med": stat(dist),
        "med_z": stat(offs[:, 0]),
        "med_y": stat(offs[:, 1]),
        "med_x": stat(offs[:, 2]),
    }


def response_classify(d_t, d):
    """RECIST-style response from template/follow-up diameters (mm)."""
    if d_t <= 0:
        raise ContractError(f"template diameter must be positive, got {d_t}")
    rho = (d - d_t) / d_t
    if rho <= -0.3:
        return "partial_response"
    if rho >= 0.2:
        return "progressive"
    return "stable"


def growth_correct(d_t, d_s, d_p):
    """Predicted growth direction agrees with the true one."""
    if d_t <= 0:
        raise ContractError(f"template diameter must be positive, got {d_t}")
    return (d_s - d_t) * (d_p - d_t) > 0


# -- the sweep ----------------------------------------------------------------

@dataclass
class EvalReport:
    cpm_radius: float
    cpm10: float
    med: tuple
    med_x: tuple
    med_y: tuple
    med_z: tuple
    spv: float
    pair_count: int

    def to_json(self):
        pack = lambda t: None if t is None else {"mean": t[0], "sd": t[1]}
        return {
            "cpm_radius": self.cpm_radius, "cpm10": self.cpm10,
            "med": pack(self.med), "med_x": pack(self.med_x),
            "med_y": pack(self.med_y), "med_z": pack(self.med_z),
            "spv": self.spv, "pair_count": self.pair_count,
        }


def _worker_count(workers):
    cap = os.environ.get("VOLTRACK_THREADS")
    if cap:
        workers = min(workers, max(int(cap), 1))
    return max(workers, 1)


def _registration_cache(store, pairs, seed):
    """One registration per unordered volume pair; the reverse direction
    reuses the inverse transform."""
    cache = {}
    for p in pairs:
        fwd = (p.template, p.search)
        if fwd in cache:
            continue
        rev = (p.search, p.template)
        if rev in cache:
            cache[fwd] = cache[rev].inverse()
        else:
            cache[fwd] = affine_register(store.get(p.template, p.intensity_range),
                                         store.get(p.search, p.intensity_range),
                                         seed=seed).transform
    return cache


def _snapshot(path, vol, pred_mm, true_mm):
    """Axial slice through the true center as a binary PGM with the predicted
    (black) and true (white) centers marked."""
    sp = vol.spacing
    z = int(np.clip(round(true_mm[0] / sp[0]), 0, vol.shape[0] - 1))
    img = vol.data[z]
    lo, hi = float(img.min()), float(img.max())
    pix = ((img - lo) / (hi - lo if hi > lo else 1.0) * 255).astype(np.uint8)

    def mark(c_mm, value):
        y = int(np.clip(round(c_mm[1] / sp[1]), 1, pix.shape[0] - 2))
        x = int(np.clip(round(c_mm[2] / sp[2]), 1, pix.shape[1] - 2))
        pix[y - 1:y + 2, x] = value
        pix[y, x - 1:x + 2] = value

    if pred_mm is not None:
        mark(pred_mm, 0)
    mark(true_mm, 255)
    with open(path, "wb") as f:
        f.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode())
        f.write(pix.tobytes())


def run_eval(model: TrackerModel, manifest_path, *, robustness=False, seed=0,
             reg_seed=0, workers=1, report_path=None, csv_path=None,
             snapshot_dir=None, track_fn=None):
    """Evaluate a model over every annotated pair in both directions.

    track_fn(pair, vol_t, vol_s, transform) -> (center_mm, seconds) may
    replace the model pipeline (used by oracle/stub tests).
    """
    entries = load_manifest(manifest_path)
    store = VolumeStore(os.path.dirname(os.path.abspath(manifest_path)))
    pairs = directed_pairs(entries)
    if not pairs:
        raise ContractError(f"manifest {manifest_path} has no annotated pairs")
    if robustness:
        pairs = robustness_expand(pairs, np.random.default_rng(seed))
    transforms = _registration_cache(store, pairs, reg_seed)

    if track_fn is None:
        def track_fn(pair, vol_t, vol_s, transform):
            r = track(model, vol_t, pair.lesion_t, vol_s, transform=transform)
            return r.center_mm, r.seconds

    def evaluate(p: DirectedPair):
        t0 = time.perf_counter()
        try:
            vt = store.get(p.template, p.intensity_range)
            vs = store.get(p.search, p.intensity_range)
            pred, seconds = track_fn(p, vt, vs, transforms[(p.template, p.search)])
            return PairResult(p, tuple(pred), seconds)
        except Exception as exc:  # a failed pair is a miss, never an abort
            return PairResult(p, None, time.perf_counter() - t0,
                              error=f"{type(exc).__name__}: {exc}")

    workers = _worker_count(workers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate, pairs))
    else:
        results = [evaluate(p) for p in pairs]

    m = med(results) or {}
    report = EvalReport(
        cpm_radius=cpm(results, "radius"),
        cpm10=cpm(results, "min10"),
        med=m.get("med"), med_x=m.get("med_x"),
        med_y=m.get("med_y"), med_z=m.get("med_z"),
        spv=float(np.mean([r.seconds for r in results])),
        pair_count=len(results),
    )

    if csv_path:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["pair_id", "direction", "dist_mm", "dx", "dy", "dz",
                        "hit_r", "hit_10", "seconds"])
            for r in results:
                off = r.offset_mm
                w.writerow([
                    r.pair.pair_id, r.pair.direction,
                    "" if r.dist_mm is None else f"{r.dist_mm:.6g}",
                    "" if off is None else f"{off[2]:.6g}",
                    "" if off is None else f"{off[1]:.6g}",
                    "" if off is None else f"{off[0]:.6g}",
                    int(_hit(r, "radius")), int(_hit(r, "min10")),
                    f"{r.seconds:.6g}",
                ] + ([r.error] if r.error else []))
    if snapshot_dir:
        os.makedirs(snapshot_dir, exist_ok=True)
        for r in results:
            if r.pair.init_index:
                continue
            name = f"{r.pair.pair_id}_{r.pair.direction}.pgm"
            _snapshot(os.path.join(snapshot_dir, name),
                      store.get(r.pair.search, r.pair.intensity_range),
                      r.pred_mm, r.pair.lesion_s.center)
    if report_path:
        with open(report_path, "w") as f:
            json.dump(report.to_json(), f, indent=1)
    return report, results
