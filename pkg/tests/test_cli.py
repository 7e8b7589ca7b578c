import csv

import numpy as np
import pytest

from topgnn import seeds
from topgnn.cli import main, read_config
from topgnn.compensation import load_cache, precompute_all
from topgnn.datasets import gen_duplication, mixed_copy_batches, load_dataset, save_dataset
from topgnn.models import GnnModel
from topgnn.samplers import Partition, load_partition, save_partition
from topgnn.training import TrainConfig, read_metrics_csv, train


def run(*args):
    return main([str(a) for a in args])


def rows_of(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def sbm_dir(tmp_path):
    d = tmp_path / "data"
    assert run("gen", "--kind", "sbm", "--n", 120, "--blocks", 4, "--out", d) == 0
    return d


@pytest.fixture
def pipeline(tmp_path, sbm_dir):
    assert run("partition", "--data", sbm_dir, "--num-clusters", 3, "--out", tmp_path / "part") == 0
    part = tmp_path / "part" / "partition.txt"
    assert run("precompute", "--data", sbm_dir, "--partition", part, "--hidden", 8, "--out", tmp_path / "pre") == 0
    return sbm_dir, part, tmp_path / "pre" / "compensation.bin"


def mixed_partition(base_n, copies):
    return Partition(mixed_copy_batches(base_n, copies))


class TestGenAndCheck:
    @pytest.mark.parametrize("kind", ["two-orbit", "duplication", "sbm"])
    def test_gen_writes_valid_dataset(self, kind, tmp_path):
        assert run("gen", "--kind", kind, "--n", 40, "--blocks", 4, "--out", tmp_path) == 0
        assert run("check", "--data", tmp_path) == 0
        cfg = read_config(tmp_path / "manifest.txt")
        assert cfg["command"] == "gen" and cfg["kind"] == kind
        assert "subseed.init" in cfg

    def test_check_reports_problem(self, tmp_path, capsys):
        assert run("gen", "--kind", "two-orbit", "--out", tmp_path) == 0
        (tmp_path / "masks.csv").write_text("0 1\n1\n\n")
        assert run("check", "--data", tmp_path) == 2
        assert "node 1" in capsys.readouterr().out

    def test_missing_data(self, tmp_path, capsys):
        assert run("partition", "--data", tmp_path / "nope", "--out", tmp_path) == 2
        assert "does not exist" in capsys.readouterr().err


class TestPrecompute:
    def test_two_orbit_two_blocks(self, tmp_path):
        run("gen", "--kind", "two-orbit", "--out", tmp_path / "d")
        run("partition", "--data", tmp_path / "d", "--num-clusters", 2, "--out", tmp_path / "p")
        assert run("precompute", "--data", tmp_path / "d", "--partition", tmp_path / "p" / "partition.txt",
                   "--hidden", 4, "--out", tmp_path / "c") == 0
        header, comps = load_cache(tmp_path / "c" / "compensation.bin")
        assert len(comps) == 2 and header.k == 4
        cfg = read_config(tmp_path / "c" / "manifest.txt")
        assert float(cfg["preprocess_seconds"]) >= 0 and int(cfg["result.cache_bytes"]) > 0

    def test_rerun_byte_identical(self, tmp_path, pipeline):
        data, part, cache = pipeline
        run("precompute", "--data", data, "--partition", part, "--hidden", 8, "--out", tmp_path / "pre2")
        assert cache.read_bytes() == (tmp_path / "pre2" / "compensation.bin").read_bytes()

    def test_invalid_k(self, tmp_path, pipeline, capsys):
        data, part, _ = pipeline
        assert run("precompute", "--data", data, "--partition", part, "--k", 0, "--out", tmp_path / "x") == 2
        assert "invalid k" in capsys.readouterr().err

    def test_cached_train_equals_inline(self, tmp_path, pipeline):
        data, part, cache = pipeline
        assert run("train", "--data", data, "--partition", part, "--cache", cache, "--hidden", 8,
                   "--epochs", 3, "--clock", "off", "--out", tmp_path / "t") == 0
        from_cli = read_metrics_csv(tmp_path / "t" / "metrics.csv")

        ds = load_dataset(data)
        p = load_partition(part)
        pre = precompute_all(ds.graph, ds.features, p, hidden=8, k=8, seed=seeds.derive(0, "subsample"))
        model = GnnModel.init("gcn", [ds.features.shape[1], 8, ds.num_classes], seed=seeds.derive(0, "init"))
        cfg = TrainConfig(method="top", epochs=3, lr=0.5, momentum=0.9, seed=seeds.derive(0, "batch-order"))
        _, inline = train(cfg, model, ds.graph, ds.features, ds.labels, ds.masks, p, pre.comps, clock=lambda: 0.0)
        assert from_cli == inline


class TestTrain:
    def test_full_monotone_steps(self, tmp_path, sbm_dir):
        assert run("train", "--data", sbm_dir, "--method", "full", "--epochs", 5, "--out", tmp_path / "t") == 0
        steps = [int(r["step"]) for r in rows_of(tmp_path / "t" / "metrics.csv")]
        assert steps == sorted(steps) and len(set(steps)) == len(steps)
        assert (tmp_path / "t" / "model.ckpt").is_file()

    def test_lr_zero_constant(self, tmp_path, pipeline):
        data, part, cache = pipeline
        run("train", "--data", data, "--partition", part, "--cache", cache, "--hidden", 8, "--lr", 0,
            "--epochs", 2, "--out", tmp_path / "t")
        accs = {(r["train_acc"], r["val_acc"], r["test_acc"]) for r in rows_of(tmp_path / "t" / "metrics.csv")}
        assert len(accs) == 1

    def test_step_directories_accepted(self, tmp_path, pipeline):
        data, part, cache = pipeline
        common = ["--data", data, "--method", "top", "--hidden", 8, "--epochs", 2, "--clock", "off"]
        assert run("train", *common, "--partition", part, "--cache", cache, "--out", tmp_path / "a") == 0
        assert run("train", *common, "--partition", part.parent, "--cache", cache.parent, "--out", tmp_path / "b") == 0
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert run("eval", "--data", data, "--checkpoint", tmp_path / "b", "--out", tmp_path / "e") == 0

    def test_top_without_cache(self, tmp_path, pipeline, capsys):
        data, part, _ = pipeline
        assert run("train", "--data", data, "--partition", part, "--method", "top", "--out", tmp_path / "t") == 2
        assert "needs --cache" in capsys.readouterr().err

    def test_cache_for_other_partition_rejected(self, tmp_path, pipeline, capsys):
        data, _, cache = pipeline
        run("partition", "--data", data, "--num-clusters", 5, "--out", tmp_path / "p5")
        assert run("train", "--data", data, "--partition", tmp_path / "p5" / "partition.txt",
                   "--cache", cache, "--hidden", 8, "--out", tmp_path / "t") == 2
        assert "different partition" in capsys.readouterr().err

    def test_top_beats_plain_on_duplication(self, tmp_path):
        ds = gen_duplication(base_n=12, copies=4, p_edge=0.3, feature_dim=6, seed=3)
        save_dataset(ds, tmp_path / "d")
        save_partition(mixed_partition(12, 4), tmp_path / "p.txt")
        common = ["--data", tmp_path / "d", "--partition", tmp_path / "p.txt", "--hidden", 8]
        assert run("precompute", *common, "--mode", "exact", "--out", tmp_path / "c") == 0
        acc = {}
        for method in ("top", "plain"):
            extra = ["--cache", tmp_path / "c" / "compensation.bin"] if method == "top" else []
            assert run("train", *common, *extra, "--method", method, "--epochs", 30, "--lr", 0.2,
                       "--out", tmp_path / method) == 0
            acc[method] = float(read_config(tmp_path / method / "manifest.txt")["result.final_test_acc"])
        assert acc["top"] >= acc["plain"]

    def test_eval_matches_training_log(self, tmp_path, sbm_dir):
        run("train", "--data", sbm_dir, "--method", "full", "--epochs", 3, "--out", tmp_path / "t")
        assert run("eval", "--data", sbm_dir, "--checkpoint", tmp_path / "t" / "model.ckpt",
                   "--chunk-size", 7, "--out", tmp_path / "e") == 0
        ev = {r["split"]: float(r["accuracy"]) for r in rows_of(tmp_path / "e" / "eval.csv")}
        last = rows_of(tmp_path / "t" / "metrics.csv")[-1]
        assert ev["test"] == float(last["test_acc"])


class TestConfigAndManifest:
    def test_config_file_and_flag_precedence(self, tmp_path, sbm_dir):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"# comment\ndata = {sbm_dir}\nmethod = full\nepochs = 4\neval-every = 2\n")
        assert run("train", "--config", cfg, "--epochs", 2, "--out", tmp_path / "t") == 0
        m = read_config(tmp_path / "t" / "manifest.txt")
        assert m["epochs"] == "2" and m["method"] == "full" and m["eval_every"] == "2"

    def test_bad_config_line(self, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("just words\n")
        assert run("train", "--config", tmp_path / "bad.cfg") == 2
        assert "bad.cfg:1" in capsys.readouterr().err

    def test_manifest_rerun_bit_identical(self, tmp_path, pipeline):
        data, part, cache = pipeline
        assert run("train", "--data", data, "--partition", part, "--cache", cache, "--hidden", 8,
                   "--method", "gas", "--epochs", 3, "--seed", 5, "--clock", "off", "--out", tmp_path / "a") == 0
        assert run("train", "--config", tmp_path / "a" / "manifest.txt", "--out", tmp_path / "b") == 0
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert read_config(tmp_path / "b" / "manifest.txt")["seed"] == "5"

    def test_threads_flag(self, tmp_path, sbm_dir):
        assert run("train", "--data", sbm_dir, "--method", "full", "--epochs", 1, "--threads", 2,
                   "--out", tmp_path / "t") == 0
        assert read_config(tmp_path / "t" / "manifest.txt")["threads"] == "2"


class TestInvarianceReport:
    def test_exact_dataset_top_zero(self, tmp_path):
        ds = gen_duplication(base_n=10, copies=4, p_edge=0.3, feature_dim=6, seed=1)
        save_dataset(ds, tmp_path / "d")
        save_partition(mixed_partition(10, 4), tmp_path / "p.txt")
        assert run("invariance-report", "--data", tmp_path / "d", "--partition", tmp_path / "p.txt",
                   "--hidden", 8, "--mode", "exact", "--epochs", 10, "--out", tmp_path / "r") == 0
        rows = {r["method"]: float(r["rel_error"]) for r in rows_of(tmp_path / "r" / "report.csv")}
        assert rows["top"] < 1e-6
        assert rows["plain"] > rows["top"]

    def test_whole_graph_row_zero(self, tmp_path, sbm_dir):
        assert run("invariance-report", "--data", sbm_dir, "--ratios", "0.5,1.0", "--hidden", 8,
                   "--epochs", 5, "--out", tmp_path / "r") == 0
        rows = rows_of(tmp_path / "r" / "report.csv")
        whole = [r for r in rows if float(r["ratio"]) == 1.0]
        assert len(whole) == 3 and all(float(r["rel_error"]) == 0 for r in whole)
        assert (tmp_path / "r" / "report.txt").read_text().startswith(" ratio")
