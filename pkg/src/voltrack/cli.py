"""Command-line entry point: synth | train | track | eval | bench-flops |
gradcheck. All commands print JSON to stdout; failures exit with 2 (usage),
3 (IO), or 4 (contract violation) and a machine-readable error object."""

import argparse
import json
import os
import sys

import numpy as np

from voltrack.errors import ContractError, ShapeError

EXIT_USAGE, EXIT_IO, EXIT_CONTRACT = 2, 3, 4


def _emit(obj):
    json.dump(obj, sys.stdout, indent=1)
    sys.stdout.write("\n")


def _fail(code, kind, message):
    _emit({"error": {"kind": kind, "message": message}})
    sys.exit(code)


def _load_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        _fail(EXIT_IO, "io", f"cannot read {path}: {e}")
    except json.JSONDecodeError as e:
        _fail(EXIT_CONTRACT, "contract", f"invalid JSON in {path}: {e}")


def _model_config(path):
    from voltrack.model import ModelConfig
    if path is None:
        return ModelConfig.desk_scale()
    return ModelConfig.from_json(_load_json(path))


def cmd_synth(args):
    from voltrack.synthdata import PhantomSpec, generate_dataset
    spec = PhantomSpec.from_json(_load_json(args.spec)) if args.spec else None
    if spec is None:
        from voltrack.synthdata import PhantomSpec
        spec = PhantomSpec()
    manifest = generate_dataset(spec, args.out_dir, args.n,
                                ssl_fraction=args.ssl_fraction, seed=args.seed,
                                workers=_workers(args))
    _emit({"manifest": manifest, "studies": args.n, "seed": args.seed})


def cmd_train(args):
    from voltrack.model import TrackerModel
    from voltrack.training import TrainConfig, train
    cfg_obj = _load_json(args.config) if args.config else {}
    model_json = cfg_obj.pop("model", None)
    if model_json is not None:
        from voltrack.model import ModelConfig
        model_cfg = ModelConfig.from_json(model_json)
    else:
        model_cfg = _model_config(None)
    tcfg = TrainConfig(**cfg_obj)
    if args.seed is not None:
        tcfg.seed = args.seed
    model = TrackerModel(model_cfg, seed=tcfg.seed)
    result = train(model, tcfg, args.manifest, args.out_ckpt, log_csv=args.loss_log)
    _emit({
        "checkpoint": result.checkpoint,
        "steps": len(result.loss_curve),
        "final_loss": result.loss_curve[-1][2],
        "warnings": result.warnings,
    })


def cmd_track(args):
    from voltrack.model import load_checkpoint, track
    from voltrack.volgeom import Lesion, read_raw_volume
    model = load_checkpoint(args.ckpt)
    vol_t = read_raw_volume(args.template)
    vol_s = read_raw_volume(args.search)
    lj = _load_json(args.lesion)
    lesion = Lesion(tuple(lj["center_mm"]), float(lj["radius_mm"]))
    res = track(model, vol_t, lesion, vol_s, reg_seed=args.seed or 0)
    _emit({
        "center_mm": list(res.center_mm),
        "peak_value": res.peak_value,
        "affine": res.transform.to_json(),
        "seconds": res.seconds,
    })


def cmd_eval(args):
    from voltrack.evalbench import run_eval
    from voltrack.model import load_checkpoint
    model = load_checkpoint(args.ckpt)
    report, _ = run_eval(model, args.manifest, robustness=args.robustness,
                         seed=args.seed or 0, workers=_workers(args),
                         report_path=args.report, csv_path=args.csv,
                         snapshot_dir=args.snapshots)
    _emit(report.to_json())


def cmd_bench_flops(args):
    from voltrack.model import ModelConfig
    from voltrack.xcorr import flop_audit
    cfg = ModelConfig.from_json(_load_json(args.config)) if args.config \
        else ModelConfig()
    shape = tuple(args.map_shape)
    audit = flop_audit(shape, cfg.embed_dim, cfg.kernel_local, cfg.kernel_global)
    _emit(audit.to_json())


def cmd_gradcheck(args):
    from voltrack import autodiff as ad
    from voltrack.model import ModelConfig, TrackerModel
    from voltrack.training import target_heatmap

    dtype = "float64" if args.f64 else "float32"
    cfg = ModelConfig.desk_scale(dtype=dtype, embed_dim=8, stem_channels=4,
                                 growth=4)
    model = TrackerModel(cfg, seed=args.seed or 0)
    rng = np.random.default_rng(args.seed or 0)
    shape, spacing = (8, 64, 64), (2.0, 0.8, 0.8)
    img_t = ad.tensor(rng.standard_normal((1, 1) + shape), dtype=cfg.np_dtype)
    sig_t = ad.tensor(rng.random((1, 1) + shape), dtype=cfg.np_dtype)
    img_s = ad.tensor(rng.standard_normal((1, 1) + shape), dtype=cfg.np_dtype)
    sig_s = ad.tensor(rng.random((1, 1) + shape), dtype=cfg.np_dtype)
    mu = (8.0, 6.0, 6.0)
    y, _ = target_heatmap((8, 32, 32), (8.0, 5.0, 5.0), 3.0,
                          cfg.scale_stride(1), spacing)

    def loss_fn():
        z = model.forward_pair(img_t, sig_t, img_s, sig_s, mu, spacing,
                               logits=True)
        return ad.focal_heatmap_loss_logits(z, y[None, None])

    groups = model.param_groups()
    h = 1e-5 if args.f64 else 1e-3
    out, worst = {}, 0.0
    for group, names in groups.items():
        err = ad.gradcheck_group(
            loss_fn, {n: model.params[n] for n in names}, h=h,
            rng=np.random.default_rng(1))
        worst = max(worst, err)
        out[group] = err
    _emit({"dtype": dtype, "max_rel_err": worst, "groups": out})
    # 32-bit mode is informational only; finite differences are not reliable
    # enough in float32 to gate on
    if args.f64 and worst > 1e-4:
        _fail(EXIT_CONTRACT, "contract", f"gradient check failed: {worst}")


def _workers(args):
    w = getattr(args, "workers", None) or 1
    cap = os.environ.get("VOLTRACK_THREADS")
    if cap:
        w = min(w, max(int(cap), 1))
    return w


def build_parser():
    p = argparse.ArgumentParser(prog="voltrack",
                                description="volumetric lesion tracking toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic study dataset")
    s.add_argument("out_dir")
    s.add_argument("--spec", help="phantom spec JSON")
    s.add_argument("-n", type=int, default=10)
    s.add_argument("--ssl-fraction", type=float, default=0.0, dest="ssl_fraction")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a tracker from a manifest")
    s.add_argument("manifest")
    s.add_argument("out_ckpt")
    s.add_argument("--config", help="train config JSON (may embed 'model')")
    s.add_argument("--loss-log", dest="loss_log")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("track", help="track one lesion across a volume pair")
    s.add_argument("ckpt")
    s.add_argument("template", help="template volume path base (.f32raw/.json)")
    s.add_argument("search", help="search volume path base")
    s.add_argument("lesion", help="lesion JSON {center_mm, radius_mm}")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_track)

    s = sub.add_parser("eval", help="run the evaluation protocol")
    s.add_argument("ckpt")
    s.add_argument("manifest")
    s.add_argument("--robustness", action="store_true")
    s.add_argument("--report")
    s.add_argument("--csv")
    s.add_argument("--snapshots")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("bench-flops", help="audit the correlation FLOP budget")
    s.add_argument("--config", help="model config JSON")
    s.add_argument("--map-shape", type=int, nargs=3, default=[16, 32, 32],
                   dest="map_shape")
    s.set_defaults(fn=cmd_bench_flops)

    s = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    s.add_argument("--f64", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        raise SystemExit(EXIT_USAGE if e.code not in (0,) else 0)
    try:
        args.fn(args)
    except SystemExit:
        raise
    except (OSError, IOError) as e:
        _fail(EXIT_IO, "io", str(e))
    except (ContractError, ShapeError, ValueError, KeyError) as e:
        _fail(EXIT_CONTRACT, "contract", f"{type(e).__name__}: {e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
