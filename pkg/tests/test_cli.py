"""Command-line interface: output schemas and exit codes."""

import json
import os

import numpy as np
import pytest

from voltrack import cli, synthdata, training
from voltrack.model import ModelConfig, TrackerModel, save_checkpoint


def run_cli(capsys, *argv):
    try:
        code = cli.main(list(argv))
    except SystemExit as e:
        code = e.code
    out = capsys.readouterr().out
    payload = json.loads(out) if out.strip() else None
    return code or 0, payload


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_ws")
    spec = synthdata.PhantomSpec(shape=(8, 32, 32), lesion_radius_mm=(2.0, 3.0),
                                 radius_scale=(0.9, 1.1), seed=31)
    manifest = synthdata.generate_dataset(spec, str(root / "ds"), 2, seed=31)
    model = TrackerModel(ModelConfig.desk_scale(kernel_global=(3, 3, 3)), seed=0)
    ckpt = str(root / "model.ckpt")
    save_checkpoint(model, ckpt)
    return {"root": str(root), "manifest": manifest, "ckpt": ckpt}


class TestExitCodes:
    def test_usage_error(self, capsys):
        code, _ = run_cli(capsys, "no-such-command")
        assert code == cli.EXIT_USAGE

    def test_io_error(self, capsys):
        code, payload = run_cli(capsys, "eval", "/nope/model.ckpt", "/nope/m.json")
        assert code == cli.EXIT_IO
        assert payload["error"]["kind"] == "io"

    def test_contract_error(self, capsys, tmp_path, workspace):
        bad = tmp_path / "cfg.json"
        bad.write_text(json.dumps({"tau": 2.0, "steps": 1}))
        code, payload = run_cli(capsys, "train", workspace["manifest"],
                                str(tmp_path / "out.ckpt"), "--config", str(bad))
        assert code == cli.EXIT_CONTRACT
        assert payload["error"]["kind"] == "contract"


class TestCommands:
    def test_synth(self, capsys, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps(synthdata.PhantomSpec(
            shape=(8, 32, 32), lesion_radius_mm=(2.0, 3.0),
            radius_scale=(0.9, 1.1), seed=1).to_json()))
        out = str(tmp_path / "ds")
        code, payload = run_cli(capsys, "synth", out, "--spec", str(spec),
                                "-n", "2", "--seed", "1")
        assert code == 0
        assert payload["studies"] == 2
        assert len(training.load_manifest(payload["manifest"])) == 2

    def test_bench_flops_default_meets_reduction_bar(self, capsys):
        code, payload = run_cli(capsys, "bench-flops")
        assert code == 0
        assert payload["per_voxel_full"] == 847
        assert payload["per_voxel_fast"] == 275
        assert payload["reduction"] >= 0.65

    def test_train_then_track_and_eval(self, capsys, tmp_path, workspace):
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({
            "steps": 2, "batch_size": 1,
            "model": ModelConfig.desk_scale(kernel_global=(3, 3, 3)).to_json(),
        }))
        ckpt = str(tmp_path / "trained.ckpt")
        log = str(tmp_path / "loss.csv")
        code, payload = run_cli(capsys, "train", workspace["manifest"], ckpt,
                                "--config", str(cfg), "--loss-log", log)
        assert code == 0
        assert payload["steps"] == 2 and os.path.exists(ckpt)
        assert os.path.exists(log)

        entries = training.load_manifest(workspace["manifest"])
        ds = os.path.dirname(workspace["manifest"])
        lesion = tmp_path / "lesion.json"
        lesion.write_text(json.dumps({
            "center_mm": list(entries[0].lesion_t.center),
            "radius_mm": entries[0].lesion_t.radius,
        }))
        code, payload = run_cli(capsys, "track", ckpt,
                                os.path.join(ds, entries[0].template),
                                os.path.join(ds, entries[0].search),
                                str(lesion))
        assert code == 0
        assert len(payload["center_mm"]) == 3
        assert 0.0 <= payload["peak_value"] <= 1.0
        assert "A" in payload["affine"]

        report = str(tmp_path / "report.json")
        code, payload = run_cli(capsys, "eval", ckpt, workspace["manifest"],
                                "--report", report)
        assert code == 0
        assert payload["pair_count"] == 4
        assert os.path.exists(report)

    def test_gradcheck_f64_passes(self, capsys):
        code, payload = run_cli(capsys, "gradcheck", "--f64")
        assert code == 0
        assert payload["dtype"] == "float64"
        assert payload["max_rel_err"] < 1e-4
        assert set(payload["groups"]) == {
            "image_encoder", "anatomy_encoder", "flatten", "head"}
