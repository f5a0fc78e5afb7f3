import json

import pytest

from voco.cli import load_compressor, main, merge_fragments
from voco.errors import ProtocolError
from voco.model import ModelConfig, init_params, save_checkpoint

TINY = ["model.d_model=16", "model.n_layers=1", "model.n_heads=2", "train.steps=3", "train.batch_size=4",
        "train.eval_count=8", "train.warmup=1"]


def run(args, capsys=None):
    code = main(args)
    out = capsys.readouterr() if capsys else None
    return code, out


def overrides(extra=()):
    out = []
    for item in TINY + list(extra):
        out += ["--override", item]
    return out


@pytest.fixture
def ckpt(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_params(ModelConfig(), 0), path)
    return path


class TestTrain:
    def test_upper(self, tmp_path):
        code, _ = run(["train", "upper", "--out", str(tmp_path), "--quiet"] + overrides())
        assert code == 0
        report = json.loads((tmp_path / "train_upper.json").read_text())
        assert report["schema_version"] == 1 and "cell" in report["metrics"]
        assert (tmp_path / "upper.ckpt").exists()

    def test_rerun_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert run(["train", "voco", "--out", str(d), "--quiet"] + overrides()) == (0, None)
        ra, rb = (json.loads((d / "train_voco.json").read_text()) for d in (a, b))
        for r in (ra, rb):
            r.pop("created_at"), r.pop("wall_clock_s"), r.pop("artifacts")
        assert ra == rb

    def test_baseline_writes_compressor(self, tmp_path):
        code, _ = run(["train", "baseline-qformer", "--out", str(tmp_path), "--quiet"] + overrides())
        assert code == 0
        comp = load_compressor(tmp_path / "baseline-qformer.compressor.npz")
        assert comp.kind == "qformer" and comp.n_heads == 2

    def test_unknown_key(self, tmp_path, capsys):
        code, out = run(["train", "upper", "--out", str(tmp_path), "--override", "model.width=3"], capsys)
        assert code == 2 and "model.width" in out.err

    def test_video_needs_init(self, tmp_path):
        assert run(["train", "video", "--out", str(tmp_path), "--quiet"] + overrides())[0] == 2


class TestCompressInfer:
    def test_roundtrip(self, tmp_path, ckpt, capsys):
        cache = tmp_path / "img.vcch"
        image = " ".join(str(i % 16) for i in range(16))
        code, _ = run(["compress", "--checkpoint", str(ckpt), "--image", image, "--output", str(cache),
                       "--out", str(tmp_path), "--quiet"], capsys)
        assert code == 0
        code, out = run(["infer", "--checkpoint", str(ckpt), "--cache", str(cache), "--question", "cell 1 2",
                         "--out", str(tmp_path)], capsys)
        assert code == 0
        answer = out.out.strip().splitlines()[-1]
        report = json.loads((tmp_path / "infer.json").read_text())
        assert report["answer"] == answer and report["context_tokens"] == 1 + 3

    def test_same_image_same_bytes(self, tmp_path, ckpt):
        image = "1 2 3 4 5 6 7 8"
        for name in ("a", "b"):
            run(["compress", "--checkpoint", str(ckpt), "--image", image, "--output", str(tmp_path / name),
                 "--out", str(tmp_path), "--quiet"])
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_zero_voco(self, tmp_path, ckpt):
        code, _ = run(["compress", "--checkpoint", str(ckpt), "--image", "1 2", "--num-voco", "0",
                       "--output", str(tmp_path / "c"), "--out", str(tmp_path), "--quiet"])
        assert code == 2

    def test_video_bundle(self, tmp_path, ckpt):
        bundle = tmp_path / "v.bin"
        code, _ = run(["compress", "--checkpoint", str(ckpt), "--image", "1 2 3 4", "--image", "4 3 2 1",
                       "--num-voco", "2", "--output", str(bundle), "--out", str(tmp_path), "--quiet"])
        assert code == 0
        code, _ = run(["infer", "--checkpoint", str(ckpt), "--cache", str(bundle), "--question", "frame 3",
                       "--out", str(tmp_path), "--quiet"])
        assert code == 0
        assert json.loads((tmp_path / "infer.json").read_text())["context_tokens"] == 2 * 2 + 3

    def test_corrupt_checkpoint(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"VOCO" + b"\0" * 10)
        code, _ = run(["compress", "--checkpoint", str(bad), "--image", "1", "--output", str(tmp_path / "c"),
                       "--out", str(tmp_path), "--quiet"])
        assert code == 4

    def test_stale_cache(self, tmp_path, ckpt):
        cache = tmp_path / "c"
        run(["compress", "--checkpoint", str(ckpt), "--image", "1 2", "--output", str(cache),
             "--out", str(tmp_path), "--quiet"])
        other = tmp_path / "other.ckpt"
        save_checkpoint(init_params(ModelConfig(), 1), other)
        code, _ = run(["infer", "--checkpoint", str(other), "--cache", str(cache), "--out", str(tmp_path), "--quiet"])
        assert code == 4


class TestRetention:
    def frag(self, role, name, cell, eval_hash="abc"):
        return {"role": role, "name": name, "scores": {"cell": cell}, "eval_hash": eval_hash}

    def test_table1_row(self):
        merged = merge_fragments([self.frag("upper", "u", 61.1), self.frag("lower", "l", 37.7),
                                  self.frag("candidate", "voco", 57.0)])
        assert round(merged["rows"][0]["retention"], 1) == 82.5

    def test_mismatched_eval_sets(self):
        with pytest.raises(ProtocolError):
            merge_fragments([self.frag("upper", "u", 1.0), self.frag("lower", "l", 0.0, "zzz"),
                             self.frag("candidate", "c", 0.5)])

    def test_cli_undefined(self, tmp_path, capsys):
        paths = []
        for role, v in [("upper", 0.5), ("lower", 0.5), ("candidate", 0.6)]:
            p = tmp_path / f"{role}.json"
            p.write_text(json.dumps(self.frag(role, role, v)))
            paths.append(str(p))
        code, out = run(["retention", *paths, "--out", str(tmp_path), "--quiet"], capsys)
        assert code == 0 and "undefined" in out.err
        assert json.loads((tmp_path / "retention.json").read_text())["rows"][0]["retention"] is None

    def test_cli_mismatch_exit_5(self, tmp_path):
        paths = []
        for role, h in [("upper", "a"), ("lower", "b"), ("candidate", "a")]:
            p = tmp_path / f"{role}.json"
            p.write_text(json.dumps(self.frag(role, role, 0.5, h)))
            paths.append(str(p))
        assert run(["retention", *paths, "--out", str(tmp_path), "--quiet"])[0] == 5

    def test_eval_fragments_merge(self, tmp_path, ckpt):
        ov = ["--override", "train.eval_count=8"]
        for role, mask in [("upper", "causal"), ("lower", "voco"), ("candidate", "voco")]:
            code, _ = run(["eval", "--checkpoint", str(ckpt), "--mask", mask, "--role", role,
                           "--out", str(tmp_path), "--quiet"] + ov)
            assert code == 0
        paths = [str(tmp_path / f"eval_{r}.json") for r in ("upper", "lower", "candidate")]
        assert run(["retention", *paths, "--out", str(tmp_path), "--quiet"])[0] == 0


class TestBench:
    def test_three_rows(self, tmp_path):
        code, _ = run(["bench", "--out", str(tmp_path), "--quiet", "--override", "bench.scenarios=32:1:4",
                       "--override", "bench.repetitions=2"])
        assert code == 0
        report = json.loads((tmp_path / "bench.json").read_text())
        rows = report["scenarios"][0]["measured"]["rows"]
        assert [r["strategy"] for r in rows] == ["baseline-no-cache", "full-cache", "voco-cache"]
        assert all("delta_prefill_flops" in r and "delta_time" in r for r in rows)

    def test_storage_delta(self, tmp_path):
        run(["bench", "--out", str(tmp_path), "--quiet", "--override", "bench.repetitions=1"])
        report = json.loads((tmp_path / "bench.json").read_text())
        voco = report["scenarios"][0]["analytic"]["rows"][2]
        assert round(100 * voco["delta_storage"], 1) == 99.8

    def test_empty_scenarios(self, tmp_path):
        assert run(["bench", "--out", str(tmp_path), "--quiet", "--override", "bench.scenarios="])[0] == 2


class TestMisc:
    def test_gen_data(self, tmp_path):
        code, _ = run(["gen-data", "--count", "5", "--out", str(tmp_path), "--quiet",
                       "--override", "train.eval_count=3"])
        assert code == 0
        assert len((tmp_path / "train.tsv").read_text().splitlines()) == 1 + 5 * 4

    def test_validate_mask_ascii(self, tmp_path, capsys):
        code, out = run(["validate-mask", "--n", "2", "--v", "1", "--m", "2", "--ascii", "--out", str(tmp_path)],
                        capsys)
        assert code == 0
        assert out.out.split() == ["10000", "11000", "11100", "00110", "00111"]

    def test_validate_mask_violation(self, tmp_path):
        f = tmp_path / "mask.txt"
        f.write_text("100\n110\n111\n")
        code, _ = run(["validate-mask", "--n", "1", "--v", "1", "--m", "1", "--mask-file", str(f),
                       "--out", str(tmp_path), "--quiet"])
        assert code == 1
        assert json.loads((tmp_path / "validate_mask.json").read_text())["violations"] == 1

    def test_sweep_rows(self, tmp_path):
        code, _ = run(["sweep", "--out", str(tmp_path), "--quiet"] + overrides(["sweep.voco_counts=1,2,4,8"]))
        assert code == 0
        runs = json.loads((tmp_path / "sweep.json").read_text())["runs"]
        assert [r["model"] for r in runs[0]["rows"]] == ["voco_v1", "voco_v2", "voco_v4", "voco_v8"]

    def test_bad_subcommand(self):
        assert main(["frobnicate"]) == 2
