import numpy as np
import pytest

from conftest import tiny_model
from ego import io as eio
from ego.cli import main


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    eio.save_checkpoint(d / "m.egod", tiny_model(np.float32).params)
    src = rng.uniform(-1, 1, (3, 16, 16)).astype(np.float32)
    ref = rng.uniform(-1, 1, (3, 16, 16)).astype(np.float32)
    eio.save_tensor(d / "src.egot", src)
    eio.save_tensor(d / "ref.egot", ref)
    m = np.zeros((16, 16), bool)
    m[4:12, 4:12] = True
    eio.save_mask(d / "mori.txt", m)
    eio.save_mask(d / "mref.egot", m)
    (d / "cfg.yaml").write_text("schedule:\n  steps: 6\n  t_hi: 900\n  t_lo: 100\n")
    return d


def _edit_argv(d, out, *extra):
    return ["edit", "--source", str(d / "src.egot"), "--reference", str(d / "ref.egot"),
            "--mask-ori", str(d / "mori.txt"), "--mask-ref", str(d / "mref.egot"),
            "--src-cat", "square", "--ref-cat", "0", "--config", str(d / "cfg.yaml"),
            "--checkpoint", str(d / "m.egod"), "--out", str(out), *extra]


def test_missing_flag_is_usage_error(files, capsys):
    argv = _edit_argv(files, files / "o.egot")
    i = argv.index("--mask-ori")
    del argv[i:i + 2]
    assert main(argv) == 2
    assert "--mask-ori" in capsys.readouterr().err


def test_unknown_subcommand_and_category(files, capsys):
    assert main(["paint"]) == 2
    argv = _edit_argv(files, files / "o.egot")
    argv[argv.index("square")] = "hexagon"
    assert main(argv) == 2
    assert "--src-cat" in capsys.readouterr().err


def test_bad_override_is_usage_error(files, capsys):
    assert main(_edit_argv(files, files / "o.egot", "--set", "text.omega=-3")) == 2
    assert main(_edit_argv(files, files / "o.egot", "--set", "omega")) == 2
    assert "--set" in capsys.readouterr().err


def test_runtime_error_exit_1(files, capsys):
    argv = _edit_argv(files, files / "o.egot")
    argv[argv.index(str(files / "src.egot"))] = str(files / "missing.egot")
    assert main(argv) == 1
    assert "missing.egot" in capsys.readouterr().err


def test_edit_writes_outputs_reproducibly(files, capsys):
    a, b = files / "a.egot", files / "b.egot"
    assert main(_edit_argv(files, a, "--seed", "3")) == 0
    out = capsys.readouterr().out
    assert "# resolved config" in out and "seed: 3" in out and "steps: 6" in out
    assert main(_edit_argv(files, b, "--seed", "3")) == 0
    assert a.read_bytes() == b.read_bytes()
    log = (files / "a.egot.log.csv").read_text().splitlines()
    assert log[0] == "iter,t,d_text,d_image,cc" and len(log) == 7
    assert log == (files / "b.egot.log.csv").read_text().splitlines()
    assert eio.load_tensor(a).shape == (3, 16, 16)


def test_eval_prints_report(files, capsys):
    main(_edit_argv(files, files / "e.egot"))
    capsys.readouterr()
    rc = main(["eval", "--before", str(files / "src.egot"), "--after", str(files / "e.egot"),
               "--reference", str(files / "ref.egot"), "--mask-ori", str(files / "mori.txt"),
               "--mask-ref", str(files / "mref.egot"), "--ref-cat", "disc",
               "--checkpoint", str(files / "m.egod")])
    out = capsys.readouterr().out
    assert rc == 0 and "identity " in out and "background " in out


def test_match_dumps_table(files, capsys):
    rc = main(["match", "--source", str(files / "src.egot"), "--reference", str(files / "ref.egot"),
               "--mask-ori", str(files / "mori.txt"), "--mask-ref", str(files / "mref.egot"),
               "--ref-cat", "0", "--t", "300", "--checkpoint", str(files / "m.egod"),
               "--out", str(files / "mm.txt")])
    assert rc == 0
    rows = (files / "mm.txt").read_text().splitlines()
    assert rows[0] == "p_r.y p_r.x p_o.y p_o.x distance" and len(rows) == 1 + 16


def test_simcurve(files, capsys):
    (files / "pairs.txt").write_text("src.egot ref.egot disc\nref.egot src.egot 1\n")
    rc = main(["simcurve", "--pairs", str(files / "pairs.txt"), "--out", str(files / "curve.csv"),
               "--t-grid", "0,500,900", "--checkpoint", str(files / "m.egod")])
    assert rc == 0
    lines = (files / "curve.csv").read_text().splitlines()
    assert lines[0] == "t,mean_src,std_src,mean_tgt,std_tgt" and len(lines) == 4
    assert lines[1].startswith("0,1.000000,0.000000")


def test_make_dataset_and_train(tmp_path, capsys):
    assert main(["make-dataset", "--out", str(tmp_path / "ds"), "--per-category", "2", "--seed", "1"]) == 0
    assert len((tmp_path / "ds" / "manifest.txt").read_text().splitlines()) == 8
    rc = main(["train", "--manifest", str(tmp_path / "ds" / "manifest.txt"), "--out", str(tmp_path / "m.egod"),
               "--epochs", "1", "--batch-size", "4", "--max-samples", "4", "--categories", "4"])
    assert rc == 0
    assert "epoch 0 mean_loss" in capsys.readouterr().out
    assert eio.load_checkpoint(tmp_path / "m.egod")["cat.emb"].shape[0] == 5
    assert (tmp_path / "m.egod.loss.csv").read_text().startswith("epoch,mean_loss\n0,")
