import numpy as np
import pytest

from synth import order2_sentences
from rrntn import cli
from rrntn.corpus import UNK_TOKEN
from rrntn.linalg import Rng
from rrntn.models import InitScheme, ModelSpec, init_params, param_shapes
from rrntn.training import fit


@pytest.fixture(scope="module")
def ptb_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("rawptb")
    sentences = order2_sentences(v=25, n_tokens=2600, seed=21, rich=5, sentence_mean=8)
    n = len(sentences)
    splits = {"train": sentences[: int(n * 0.8)],
              "valid": sentences[int(n * 0.8): int(n * 0.9)],
              "test": sentences[int(n * 0.9):]}
    for name, sents in splits.items():
        (root / f"{name}.txt").write_text(
            "\n".join(" ".join(s) for s in sents) + "\n", encoding="utf-8")
    return root, splits


@pytest.fixture(scope="module")
def prepped(ptb_dir, tmp_path_factory):
    root, _ = ptb_dir
    out = tmp_path_factory.mktemp("prepped")
    rc = cli.main(["prep", "--format", "ptb", "--input", str(root), "--out", str(out)])
    assert rc == 0
    return out


def _train_config(prepped, out_dir, **overrides):
    values = {
        "corpus_dir": str(prepped), "out_dir": str(out_dir), "family": "rrntn",
        "hidden": "6", "k": "3", "regime": "simple", "seed": "11",
        "max_epochs": "2", "init_stddev": "0.02", "p_drop": "0.5",
    }
    values.update({k: str(v) for k, v in overrides.items()})
    return "\n".join(f"{k} = {v}" for k, v in values.items()) + "\n"


# ---------------------------------------------------------------------------
# prep


def test_prep_prints_v_and_writes_splits(ptb_dir, prepped, capsys):
    root, splits = ptb_dir
    rc = cli.main(["prep", "--format", "ptb", "--input", str(root),
                   "--out", str(prepped)])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.startswith("V = ")
    for name in ("train", "valid", "test"):
        assert (prepped / f"{name}.ids").exists()
    # token count = words + one eos per line
    n_words = sum(len(s) for s in splits["train"])
    ids = np.frombuffer((prepped / "train.ids").read_bytes(), dtype="<u4")
    assert len(ids) == n_words + len(splits["train"])


def test_prep_reruns_byte_identical(ptb_dir, tmp_path, capsys):
    root, _ = ptb_dir
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        assert cli.main(["prep", "--format", "ptb", "--input", str(root),
                         "--out", str(out)]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    capsys.readouterr()
    assert outs[0] == outs[1]


def test_prep_text8_mode(tmp_path, capsys):
    stream = tmp_path / "stream.txt"
    words = order2_sentences(v=20, n_tokens=1200, seed=2, sentence_mean=10**9)[0]
    stream.write_text(" ".join(words), encoding="utf-8")
    out = tmp_path / "prep"
    rc = cli.main(["prep", "--format", "text8", "--input", str(stream), "--out", str(out),
                   "--min-count", "2", "--train-bytes", "4000",
                   "--valid-bytes", "600", "--test-bytes", "600"])
    assert rc == 0
    assert "V = " in capsys.readouterr().out
    vocab, corpus = cli.load_corpus(out)
    assert vocab.eos_id is None
    assert not corpus.train.has_sentences
    assert UNK_TOKEN in vocab.words


def test_prep_missing_input_is_io_error(tmp_path, capsys):
    rc = cli.main(["prep", "--format", "text8", "--input", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "o")])
    assert rc == 3


# ---------------------------------------------------------------------------
# train / eval


def test_train_zero_lr_zero_init_gives_ppl_v(prepped, tmp_path, capsys):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text(_train_config(prepped, tmp_path / "out", lr0="0.0",
                                     init_stddev="0.0", max_epochs="1"))
    assert cli.main(["train", str(cfgfile)]) == 0
    out = capsys.readouterr().out
    vocab, _ = cli.load_corpus(prepped)
    assert f"test PPL = {float(vocab.size):.6f}" in out


def test_train_metrics_csv_byte_identical_across_runs(prepped, tmp_path, capsys):
    csvs = []
    for sub in ("r1", "r2"):
        out_dir = tmp_path / sub
        cfgfile = tmp_path / f"{sub}.cfg"
        cfgfile.write_text(_train_config(prepped, out_dir))
        assert cli.main(["train", str(cfgfile)]) == 0
        csvs.append((out_dir / "metrics.csv").read_bytes())
    capsys.readouterr()
    assert csvs[0] == csvs[1]
    header = csvs[0].decode().splitlines()[0]
    assert header == "epoch,lr,train_ppl,valid_ppl,seconds"


def test_eval_reproduces_train_test_ppl(prepped, tmp_path, capsys):
    out_dir = tmp_path / "out"
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text(_train_config(prepped, out_dir))
    assert cli.main(["train", str(cfgfile)]) == 0
    train_out = capsys.readouterr().out
    train_ppl_line = [l for l in train_out.splitlines() if l.startswith("test PPL")][0]

    assert cli.main(["eval", str(out_dir / "checkpoint.bin"), "--split", "test"]) == 0
    eval_out = capsys.readouterr().out
    eval_ppl_line = [l for l in eval_out.splitlines() if "PPL =" in l][0]
    assert train_ppl_line.split("=")[1] == eval_ppl_line.split("=")[1]
    assert "conventions:" in eval_out
    assert cli.main(["eval", str(out_dir / "checkpoint.bin"), "--split", "test"]) == 0
    assert eval_ppl_line in capsys.readouterr().out  # repeatable


def test_eval_rejects_vocab_hash_mismatch(prepped, tmp_path, capsys):
    out_dir = tmp_path / "out"
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text(_train_config(prepped, out_dir, max_epochs="1"))
    assert cli.main(["train", str(cfgfile)]) == 0
    # clone the corpus with a perturbed vocabulary file
    other = tmp_path / "othercorpus"
    other.mkdir()
    for p in prepped.iterdir():
        (other / p.name).write_bytes(p.read_bytes())
    vocab_lines = (other / "vocab.tsv").read_text().splitlines()
    vocab_lines[0] = vocab_lines[0].split("\t")[0] + "\t999999"
    (other / "vocab.tsv").write_text("\n".join(vocab_lines) + "\n")
    capsys.readouterr()
    rc = cli.main(["eval", str(out_dir / "checkpoint.bin"), "--corpus-dir", str(other)])
    assert rc == 1
    assert "hash mismatch" in capsys.readouterr().err


def test_overfit_toy_train_ppl_below_test(prepped, tmp_path, capsys):
    out_dir = tmp_path / "out"
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text(_train_config(prepped, out_dir, max_epochs="6", p_drop="0.0",
                                     hidden="12", k="1", lr0="0.2"))
    assert cli.main(["train", str(cfgfile)]) == 0
    final = [l for l in capsys.readouterr().out.splitlines() if l.startswith("test PPL")][0]
    vocab, _ = cli.load_corpus(prepped)
    assert float(final.split("=")[1]) < vocab.size  # beats the uniform baseline
    assert cli.main(["eval", str(out_dir / "checkpoint.bin"), "--split", "train"]) == 0
    train_ppl = float(capsys.readouterr().out.splitlines()[-1].split("=")[1])
    assert cli.main(["eval", str(out_dir / "checkpoint.bin"), "--split", "test"]) == 0
    test_ppl = float(capsys.readouterr().out.splitlines()[-1].split("=")[1])
    assert train_ppl < test_ppl


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bitwise(tmp_path):
    spec = ModelSpec("lstm", v=15, h=5, e=4, k=2)
    params = init_params(spec, InitScheme.uniform(-0.5, 0.5), Rng(3))
    path = tmp_path / "ck.bin"
    cli.save_checkpoint(path, params, spec, "seed = 1\n", "ab" * 32, epoch=4)
    loaded = cli.load_checkpoint(path)
    assert loaded.spec == spec
    assert loaded.meta["epoch"] == "4"
    assert loaded.config_text == "seed = 1\n"
    assert all(np.array_equal(loaded.params[k], params[k]) for k in params)
    assert list(loaded.params) == list(param_shapes(spec))


def test_checkpoint_f32_storage_loses_only_precision(tmp_path):
    spec = ModelSpec("rrntn", v=9, h=3, k=2)
    params = init_params(spec, InitScheme.uniform(-0.5, 0.5), Rng(4))
    path = tmp_path / "ck32.bin"
    cli.save_checkpoint(path, params, spec, "", "00" * 32, epoch=1, dtype="f32")
    loaded = cli.load_checkpoint(path)
    for k in params:
        np.testing.assert_allclose(loaded.params[k], params[k], rtol=1e-6, atol=1e-7)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        cli.load_checkpoint(path)


# ---------------------------------------------------------------------------
# count-params and gradcheck


@pytest.mark.parametrize("argv,expect", [
    (["--family", "rrntn", "--v", "10000", "--hidden", "100", "--k", "1"], "2M"),
    (["--family", "rrntn", "--v", "10000", "--hidden", "100", "--k", "100"], "3M"),
    (["--family", "gru", "--v", "10000", "--hidden", "244", "--embed", "650",
      "--k", "100"], "15.5M"),
])
def test_count_params_labels(argv, expect, capsys):
    assert cli.main(["count-params", *argv]) == 0
    out = capsys.readouterr().out
    assert expect in out
    assert "V=" in out  # formula echoed


def test_count_params_rejects_bad_combo(capsys):
    rc = cli.main(["count-params", "--family", "rrntn", "--v", "10",
                   "--hidden", "4", "--k", "50"])
    assert rc == 1


def test_gradcheck_command_passes(capsys):
    rc = cli.main(["gradcheck", "--family", "rrntn", "--v", "16", "--hidden", "6",
                   "--k", "4", "--t-steps", "4"])
    assert rc == 0
    assert "pass" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# sweep


def test_sweep_csv_and_endpoint_equivalence(prepped, tmp_path, capsys):
    out_dir = tmp_path / "sweepout"
    cfgfile = tmp_path / "sweep.cfg"
    cfgfile.write_text(_train_config(prepped, out_dir, max_epochs="1", p_drop="0.0"))
    vocab, corpus = cli.load_corpus(prepped)
    assert cli.main(["sweep", str(cfgfile), "--k", f"1,{vocab.size}"]) == 0
    capsys.readouterr()
    lines = (out_dir / "sweep.csv").read_text().strip().splitlines()
    assert lines[0] == "policy,K,H,params,test_ppl,valid_ppl,seed"
    assert len(lines) == 1 + 2 * 2  # two K values x two policies

    # dedicated runs with the same seed must match the sweep endpoints
    run_cfg = cli.RunConfig.from_text(cfgfile.read_text())
    train_cfg = run_cfg.train_config()
    from rrntn.evaluation import perplexity
    srnn = fit(ModelSpec("rrntn", v=vocab.size, h=6, k=1), train_cfg, corpus)
    srnn_ppl = perplexity(srnn.params, ModelSpec("rrntn", v=vocab.size, h=6, k=1),
                          corpus.test, t_bptt=train_cfg.t_bptt)
    rntn_spec = ModelSpec("rrntn", v=vocab.size, h=6, k=vocab.size, policy="identity")
    rntn = fit(rntn_spec, train_cfg, corpus)
    rntn_ppl = perplexity(rntn.params, rntn_spec, corpus.test, t_bptt=train_cfg.t_bptt)

    f_rows = [l.split(",") for l in lines[1:] if l.startswith("f,")]
    assert f_rows[0][4] == f"{srnn_ppl:.6f}"
    assert f_rows[1][4] == f"{rntn_ppl:.6f}"


# ---------------------------------------------------------------------------
# config validation and exit codes


def test_config_unknown_and_missing_keys_reported_together(tmp_path):
    text = "corpus_dir = x\nbogus_key = 1\nanother = 2\n"
    with pytest.raises(cli.ConfigError) as err:
        cli.RunConfig.from_text(text)
    msg = str(err.value)
    assert "bogus_key" in msg and "another" in msg
    assert "family" in msg and "seed" in msg  # missing required keys listed


def test_config_duplicate_key_rejected():
    with pytest.raises(cli.ConfigError):
        cli.parse_config_text("a = 1\na = 2\n")


def test_config_comments_and_blank_lines():
    values = cli.parse_config_text("# comment\n\nlr0 = 0.5  # trailing\n")
    assert values == {"lr0": "0.5"}


def test_usage_error_exit_code(capsys):
    assert cli.main(["train"]) == 1
    assert cli.main(["no-such-command"]) == 1


def test_bad_config_exit_code(prepped, tmp_path, capsys):
    cfgfile = tmp_path / "bad.cfg"
    cfgfile.write_text("family = rrntn\n")
    assert cli.main(["train", str(cfgfile)]) == 1
    assert "missing required key" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(prepped, tmp_path, capsys):
    cfgfile = tmp_path / "diverge.cfg"
    cfgfile.write_text(_train_config(prepped, tmp_path / "out", lr0="1e18",
                                     init="uniform", init_lo="-0.5", init_hi="0.5",
                                     max_epochs="2", p_drop="0.0"))
    rc = cli.main(["train", str(cfgfile)])
    assert rc == 2
    assert "divergence" in capsys.readouterr().err
