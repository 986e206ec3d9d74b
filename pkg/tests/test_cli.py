import json

from mmcot.cli import main
from mmcot.traces import read_traces


def run(argv):
    return main(argv)


class TestCli:
    def test_gen_train_sample_eval_roundtrip(self, tmp_path):
        data = tmp_path / "data"
        assert run(["gen-data", "--mode", "stage1", "--n", "20", "--seed", "1",
                    "--out", str(data), "--canvas-size", "4"]) == 0
        traces = read_traces(data / "traces.jsonl")
        assert traces and all(t.mode == "direct" for t in traces)

        run_dir = tmp_path / "run"
        assert run(["train", "--data", str(data / "traces.jsonl"), "--out", str(run_dir),
                    "--steps", "5", "--batch-size", "4", "--lr", "1e-3",
                    "--canvas-size", "4", "--layers", "1", "--heads", "2",
                    "--hidden-dim", "32", "--ff-dim", "64", "--context-length", "256",
                    "--seed", "0"]) == 0
        ckpt = run_dir / "ckpt_final.pt"
        assert ckpt.exists()
        assert (run_dir / "codebook.bin").exists()
        assert (run_dir / "metrics.jsonl").exists()

        trace_out = tmp_path / "sample" / "trace.jsonl"
        assert run(["sample", "--ckpt", str(ckpt), "--prompt", "a red square",
                    "--mode", "direct", "--seed", "3", "--out", str(trace_out),
                    "--png-dir", str(tmp_path / "sample" / "png")]) == 0
        assert trace_out.exists()
        pngs = list((tmp_path / "sample" / "png").glob("*.png"))
        assert len(pngs) == 1

        suite_dir = tmp_path / "suite"
        assert run(["gen-data", "--mode", "suite", "--seed", "9", "--out", str(suite_dir),
                    "--canvas-size", "4", "--counts", "single_obj=4"]) == 0
        eval_dir = tmp_path / "eval"
        assert run(["eval", "--ckpt", str(ckpt), "--suite", str(suite_dir / "suite.jsonl"),
                    "--mode", "direct", "--preset", "conditional", "--seed", "0",
                    "--out", str(eval_dir)]) == 0
        report = json.loads((eval_dir / "eval_report.json").read_text())
        assert report["n_items"] == 4
        assert (eval_dir / "report.md").exists()
        assert (eval_dir / "traces.png").exists()

        rerender = tmp_path / "rerender"
        assert run(["report", "--src", str(eval_dir / "eval_report.json"),
                    "--out", str(rerender)]) == 0
        assert (rerender / "report.md").exists()

    def test_env_seed_fallback(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("MMCOT_SEED", "123")
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        run(["gen-data", "--mode", "subgoal", "--n", "5", "--out", str(out_a),
             "--canvas-size", "4"])
        run(["gen-data", "--mode", "subgoal", "--n", "5", "--seed", "123",
             "--out", str(out_b), "--canvas-size", "4"])
        assert (out_a / "traces.jsonl").read_bytes() == (out_b / "traces.jsonl").read_bytes()

    def test_ablate_smoke(self, tmp_path):
        data = tmp_path / "data"
        run(["gen-data", "--mode", "stage1", "--n", "12", "--seed", "1",
             "--out", str(data), "--canvas-size", "4"])
        suite_dir = tmp_path / "suite"
        run(["gen-data", "--mode", "suite", "--seed", "2", "--out", str(suite_dir),
             "--canvas-size", "4", "--counts", "single_obj=3"])
        out = tmp_path / "ablate"
        assert run(["ablate", "--data", str(data / "traces.jsonl"),
                    "--suite", str(suite_dir / "suite.jsonl"), "--out", str(out),
                    "--lambdas", "0,1", "--seeds", "0", "--steps", "4",
                    "--batch-size", "4", "--canvas-size", "4",
                    "--layers", "1", "--heads", "2", "--hidden-dim", "32",
                    "--ff-dim", "64"]) == 0
        table = json.loads((out / "ablation.json").read_text())
        assert [r["label"] for r in table["rows"]] == ["L_mm", "L_mm+L_rec"]
        assert (out / "report.md").exists()
