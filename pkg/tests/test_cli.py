"""Command-line front end: config merging, subcommands, exit codes."""

import hashlib
import os

import pytest

import synpara.kernels as kernels
from synpara.cli import main, merge_run_config, parse_config_file
from synpara.data import read_corpus, read_vocab
from synpara.errors import ValidationError


def _sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    code = main([
        "datagen", "--out-dir", str(d), "--seed", "7",
        "--n-train", "48", "--n-dev", "4", "--n-test", "4",
    ])
    assert code == 0
    return str(d)


@pytest.fixture(scope="module")
def fast_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "fast.cfg"
    path.write_text(
        "# hot settings for the tiny test corpus\n"
        "\n"
        "epochs=1\n"
        "batch_size=16\n"
        "lr=0.03\n"
        "init_scale=0.177\n"
    )
    return str(path)


# ---------------------------------------------------------------------------
# config plumbing

class TestRunConfig:
    def test_file_parsing_skips_comments_and_blanks(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\n\nepochs=3\n  lr = 0.01 \n")
        assert parse_config_file(str(p)) == {"epochs": "3", "lr": "0.01"}

    def test_malformed_line_rejected(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("epochs: 3\n")
        with pytest.raises(ValidationError):
            parse_config_file(str(p))

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("dropout=0.1\n")
        with pytest.raises(ValidationError, match="dropout"):
            merge_run_config(str(p))

    def test_overrides_win_over_file(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("lr=0.01\nepochs=5\n")
        rc = merge_run_config(str(p), {"lr": "0.02"})
        assert rc.lr == 0.02 and rc.epochs == 5

    def test_type_coercion(self):
        rc = merge_run_config(
            None,
            {"epochs": "4", "lr": "3e-3", "reparameterize_prefix": "true",
             "scheduler": "constant"},
        )
        assert rc.epochs == 4 and rc.lr == 3e-3
        assert rc.reparameterize_prefix is True and rc.scheduler == "constant"

    def test_bad_bool_rejected(self):
        with pytest.raises(ValidationError):
            merge_run_config(None, {"debug_checks": "maybe"})

    def test_configs_convert_to_module_types(self):
        rc = merge_run_config(None, {"mode": "pip-indirect", "dim_h": "16",
                                     "n_heads": "2"})
        mcfg = rc.model_config(vocab_size=62)
        assert mcfg.dim_h == 16 and mcfg.vocab_size == 62
        tcfg = rc.train_config()
        assert tcfg.mode == "pip-indirect" and tcfg.lr == pytest.approx(3e-4)


# ---------------------------------------------------------------------------
# datagen

class TestDatagen:
    def test_defaults_are_full_split_sizes(self):
        from synpara.cli import build_parser

        args = build_parser().parse_args(["datagen", "--out-dir", "x"])
        assert (args.n_train, args.n_dev, args.n_test) == (3000, 640, 640)
        assert args.seed == 0

    def test_writes_splits_and_vocab(self, data_dir):
        train = read_corpus(os.path.join(data_dir, "train.tsv"))
        dev = read_corpus(os.path.join(data_dir, "dev.tsv"))
        assert len(train) == 48 and len(dev) == 4
        vocab = read_vocab(os.path.join(data_dir, "vocab.txt"))
        assert vocab.size == 62

    def test_same_seed_identical_files(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert main([
                "datagen", "--out-dir", str(d), "--seed", "7",
                "--n-train", "48", "--n-dev", "4", "--n-test", "4",
            ]) == 0
        for name in ("train.tsv", "dev.tsv", "test.tsv", "vocab.txt"):
            assert _sha(a / name) == _sha(b / name), name

    def test_capacity_overflow_exits_nonzero(self, tmp_path, capsys):
        code = main([
            "datagen", "--out-dir", str(tmp_path / "big"),
            "--n-train", "9000", "--n-dev", "4", "--n-test", "4",
        ])
        assert code == 1
        assert "error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train

def _read_log(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("step="):
                records.append(dict(kv.split("=") for kv in line.split()))
    return records


class TestTrain:
    def test_pip_direct_logs_zero_pel(self, data_dir, fast_cfg, tmp_path):
        out = str(tmp_path / "d.ckpt")
        code = main([
            "train", "--mode", "pip-direct", "--data-dir", data_dir,
            "--out", out, "--config", fast_cfg, "--seed", "3",
        ])
        assert code == 0
        records = _read_log(out + ".log")
        assert len(records) == 3
        assert all(float(r["pel_loss"]) == 0.0 for r in records)

    def test_pip_indirect_logs_nonzero_pel(self, data_dir, fast_cfg, tmp_path):
        out = str(tmp_path / "i.ckpt")
        code = main([
            "train", "--mode", "pip-indirect", "--data-dir", data_dir,
            "--out", out, "--config", fast_cfg, "--seed", "3",
        ])
        assert code == 0
        records = _read_log(out + ".log")
        assert float(records[0]["pel_loss"]) > 0.0

    def test_missing_data_dir_exits_one(self, tmp_path, capsys):
        code = main([
            "train", "--mode", "prefix", "--data-dir", str(tmp_path / "nope"),
            "--out", str(tmp_path / "x.ckpt"),
        ])
        assert code == 1
        assert "data dir not found" in capsys.readouterr().err

    def test_creates_output_directory(self, data_dir, fast_cfg, tmp_path):
        out = str(tmp_path / "runs" / "nested" / "p.ckpt")
        code = main([
            "train", "--mode", "prefix", "--data-dir", data_dir,
            "--out", out, "--config", fast_cfg, "--seed", "3",
        ])
        assert code == 0
        assert os.path.exists(out)
        assert os.path.exists(out + ".log")

    def test_byte_identical_reruns(self, data_dir, fast_cfg, tmp_path):
        outs = [str(tmp_path / f"r{i}.ckpt") for i in (1, 2)]
        for out in outs:
            assert main([
                "train", "--mode", "prefix", "--data-dir", data_dir,
                "--out", out, "--config", fast_cfg, "--seed", "5",
            ]) == 0
        assert _sha(outs[0]) == _sha(outs[1])
        assert _sha(outs[0] + ".log") == _sha(outs[1] + ".log")

    def test_set_overrides_config_file(self, data_dir, fast_cfg, tmp_path, capsys):
        out = str(tmp_path / "o.ckpt")
        code = main([
            "train", "--mode", "prefix", "--data-dir", data_dir, "--out", out,
            "--config", fast_cfg, "--seed", "5", "--set", "epochs=2",
        ])
        assert code == 0
        assert len(_read_log(out + ".log")) == 6  # 2 epochs x 3 batches


# ---------------------------------------------------------------------------
# eval

@pytest.fixture(scope="module")
def trained_ckpt(data_dir, fast_cfg, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("ckpt") / "m.ckpt")
    assert main([
        "train", "--mode", "prefix", "--data-dir", data_dir,
        "--out", out, "--config", fast_cfg, "--seed", "5",
    ]) == 0
    return out


class TestEval:
    def test_header_matches_reporting_order(self, trained_ckpt, data_dir, capsys):
        code = main([
            "eval", "--checkpoint", trained_ckpt,
            "--data", os.path.join(data_dir, "dev.tsv"),
        ])
        assert code == 0
        header = capsys.readouterr().out.splitlines()[0].split()
        assert header == ["mode", "BLEU", "ROUGE-1", "ROUGE-2", "ROUGE-L", "TMA", "TED-3"]

    def test_eval_twice_identical(self, trained_ckpt, data_dir, capsys):
        argv = ["eval", "--checkpoint", trained_ckpt,
                "--data", os.path.join(data_dir, "dev.tsv"),
                "--vocab", os.path.join(data_dir, "vocab.txt")]
        assert main(argv) == 0
        first = capsys.readouterr().out
        assert main(argv) == 0
        assert capsys.readouterr().out == first

    def test_gold_as_generation_is_perfect(self, trained_ckpt, data_dir, capsys):
        code = main([
            "eval", "--checkpoint", trained_ckpt,
            "--data", os.path.join(data_dir, "dev.tsv"), "--gold-as-generation",
        ])
        assert code == 0
        out = capsys.readouterr().out
        assert "bleu=1.0" in out and "tma=100.0" in out and "ted3=0.0" in out
        assert "n_parse_failures=0" in out

    def test_corrupt_checkpoint_exits_one(self, trained_ckpt, tmp_path, capsys):
        bad = str(tmp_path / "bad.ckpt")
        with open(trained_ckpt, "rb") as fh:
            blob = bytearray(fh.read())
        blob[0] ^= 0xFF
        with open(bad, "wb") as fh:
            fh.write(bytes(blob))
        code = main(["eval", "--checkpoint", bad, "--data", "unused.tsv"])
        assert code == 1
        assert "error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# compare

class TestCompare:
    def test_single_mode_rejected(self, data_dir, capsys):
        code = main([
            "compare", "--data-dir", data_dir, "--modes", "prefix",
        ])
        assert code == 1
        assert "at least 2 modes" in capsys.readouterr().err

    def test_table_has_params_column_under_budget(self, data_dir, fast_cfg, capsys):
        code = main([
            "compare", "--data-dir", data_dir, "--config", fast_cfg,
            "--modes", "finetune,prefix", "--seeds", "5",
        ])
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        header = lines[1].split()
        assert header[:2] == ["mode", "#"] and header[2] == "Params"
        rows = {ln.split()[0]: ln.split() for ln in lines[2:] if ln.strip()}
        finetune_params = int(rows["finetune"][1])
        prefix_params = int(rows["prefix"][1])
        assert prefix_params < 0.15 * finetune_params

    def test_deterministic_per_seed_list(self, data_dir, fast_cfg, capsys):
        argv = ["compare", "--data-dir", data_dir, "--config", fast_cfg,
                "--modes", "prefix,pip-direct", "--seeds", "5"]
        assert main(argv) == 0
        first = capsys.readouterr().out
        assert main(argv) == 0
        assert capsys.readouterr().out == first


# ---------------------------------------------------------------------------
# gradcheck

class TestGradcheck:
    def test_all_modes_pass(self, capsys):
        code = main(["gradcheck"])
        assert code == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 4 and "FAIL" not in out

    def test_pip_indirect_lists_instructor_tensors(self, capsys):
        code = main(["gradcheck", "--mode", "pip-indirect"])
        assert code == 0
        out = capsys.readouterr().out
        assert "instructor/attn.wq" in out and "instructor/head.w" in out

    def test_corrupted_backward_detected(self, monkeypatch, capsys):
        real = kernels.gelu_bwd
        monkeypatch.setattr(kernels, "gelu_bwd", lambda x, g: 1.5 * real(x, g))
        code = main(["gradcheck", "--mode", "finetune"])
        assert code == 2
        assert "FAIL" in capsys.readouterr().out
