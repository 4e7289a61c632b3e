import json

import numpy as np
import pytest

from conceptmil.cli import main
from conceptmil.conceptprior import cosine_prior
from conceptmil.dataio import load_checkpoint, load_manifest, read_matrix, tree_digest, write_matrix

SYNTH = ["--per-class", "8", "--n", "8", "--d", "8", "--c-per-class", "2", "--seed", "1",
         "--background-types", "2", "--background-noise", "0.1"]
SMALL = ["--hidden", "8", "--attn-hidden", "8", "--k", "3", "--n-samples", "10", "--mixer-layers", "1",
         "--mixer-hidden", "4", "--gate-hidden", "4", "--batch", "4", "--epochs", "2", "--warmup", "1"]


@pytest.fixture
def ws(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["gen-synth", "--out", "ds", *SYNTH]) == 0
    return tmp_path


@pytest.fixture
def trained(ws):
    assert main(["pretrain", "--manifest", "ds/manifest.json", "--out", "run", "--seed", "7", *SMALL]) == 0
    return ws


def test_gen_synth_contract(ws):
    m = load_manifest("ds/manifest.json")
    assert (len(m.slides), m.D, m.C) == (16, 8, 4)
    doc = json.loads((ws / "ds" / "manifest.json").read_text())
    assert doc["schema"] == "gecko-manifest/1"
    assert doc["run_config"]["d"] == 8


def test_gen_synth_missing_dimension_is_usage_error(ws, capsys):
    assert main(["gen-synth", "--out", "x", "--per-class", "4"]) == 2
    assert "--d" in capsys.readouterr().err


def test_gen_synth_is_reproducible(ws, monkeypatch):
    # identical flags, including --out, from a second working directory
    (ws / "again").mkdir()
    monkeypatch.chdir(ws / "again")
    assert main(["gen-synth", "--out", "ds", *SYNTH]) == 0
    assert tree_digest(ws / "ds") == tree_digest(ws / "again" / "ds")


def test_unknown_flag_exits_two(ws):
    assert main(["gen-synth", "--out", "x", "--d", "4", "--bogus", "1"]) == 2


def test_prior_matches_library_bytes(ws):
    assert main(["prior", "--manifest", "ds/manifest.json", "--out", "priors"]) == 0
    m = load_manifest("ds/manifest.json")
    T = read_matrix("ds/concepts.geko")
    for rec in m.slides:
        F = read_matrix(m.resolve(rec.features_path))
        on_disk = read_matrix(f"priors/{rec.slide_id}.geko")
        assert on_disk.shape == (8, 4)
        assert on_disk.tobytes() == cosine_prior(F, T).tobytes()
    assert json.loads((ws / "priors" / "priors.json").read_text())["run_config"]["command"] == "prior"


def test_prior_dimension_mismatch_names_slide(ws, capsys):
    write_matrix("ds/features/c1_s0003.geko", np.ones((8, 5)))
    assert main(["prior", "--manifest", "ds/manifest.json", "--out", "priors"]) == 2
    assert "c1_s0003" in capsys.readouterr().err


def test_corrupt_matrix_is_data_error(ws):
    path = ws / "ds" / "features" / "c0_s0000.geko"
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    assert main(["prior", "--manifest", "ds/manifest.json", "--out", "priors"]) == 3


def test_pretrain_outputs_and_provenance(trained):
    lines = (trained / "run" / "loss_trace.csv").read_text().splitlines()
    assert lines[0].startswith("#") and "run_config" in lines[1]
    assert lines[2] == "epoch,mean_loss" and len(lines) == 5
    _, meta = load_checkpoint("run/checkpoint.npz")
    assert meta["extra"]["run_config"]["seed"] == 7


def test_r_keep_recorded_verbatim(ws):
    assert main(["pretrain", "--manifest", "ds/manifest.json", "--out", "r", "--seed", "3", "--r-keep", "0.7", *SMALL]) == 0
    _, meta = load_checkpoint("r/checkpoint.npz")
    assert meta["extra"]["run_config"]["r_keep"] == 0.7
    assert "0.7" in meta["extra"]["argv"]


def test_pretrain_requires_seed(ws):
    assert main(["pretrain", "--manifest", "ds/manifest.json", "--out", "r", *SMALL]) == 2


def test_aux_modality_without_aux_paths(ws, capsys):
    code = main(["pretrain", "--manifest", "ds/manifest.json", "--out", "r", "--seed", "1",
                 "--modality", "wsi_plus_aux", *SMALL])
    assert code == 2
    assert "aux" in capsys.readouterr().err


def test_aux_modality_trains_when_present(ws):
    assert main(["gen-synth", "--out", "dsa", *SYNTH, "--aux-dim", "6"]) == 0
    code = main(["pretrain", "--manifest", "dsa/manifest.json", "--out", "r", "--seed", "1",
                 "--modality", "wsi_plus_aux", "--aux-hidden", "5", *SMALL])
    assert code == 0
    model, _ = load_checkpoint("r/checkpoint.npz")
    assert model.config.aux_dim == 6


def test_numeric_failure_exit_code(ws):
    assert main(["pretrain", "--manifest", "ds/manifest.json", "--out", "r", "--seed", "1", *SMALL, "--tau", "1e-310"]) == 4


def test_config_file_with_flag_override(ws):
    (ws / "run.cfg").write_text("# pretraining\nseed = 5\nvariant = dual_abmil\nepochs = 3\n")
    assert main(["pretrain", "--config", "run.cfg", "--manifest", "ds/manifest.json", "--out", "r", *SMALL]) == 0
    rc = json.loads((ws / "r" / "run_config.json").read_text())
    assert (rc["seed"], rc["variant"], rc["epochs"]) == (5, "dual_abmil", 2)
    (ws / "bad.cfg").write_text("variant = transformer\n")
    assert main(["pretrain", "--config", "bad.cfg", "--manifest", "ds/manifest.json", "--out", "r", "--seed", "1"]) == 2


def test_eval_zero_reports_probabilities(trained):
    args = ["eval", "--manifest", "ds/manifest.json", "--checkpoint", "run/checkpoint.npz", "--seed", "1"]
    assert main([*args, "--out", "a.json", "--roc-csv", "roc.csv"]) == 0
    report = json.loads((trained / "a.json").read_text())
    probs = report["result"]["probabilities"]
    test_ids = [r.slide_id for r in load_manifest("ds/manifest.json").slides if r.split == "test"]
    assert sorted(probs) == sorted(test_ids)
    assert all(abs(sum(p) - 1) < 1e-9 for p in probs.values())
    assert report["result"]["heads"]["zero"]["mean_auc"] is not None
    assert (trained / "roc.csv").read_text().startswith("class,threshold,fpr,tpr\n")
    first = (trained / "a.json").read_bytes()
    assert main([*args, "--out", "a.json", "--roc-csv", "roc.csv"]) == 0
    assert (trained / "a.json").read_bytes() == first


def test_eval_few_trains_ten_probes_per_head(ws):
    big = ["--per-class", "14", "--n", "8", "--d", "8", "--c-per-class", "2", "--seed", "2"]
    assert main(["gen-synth", "--out", "big", *big]) == 0
    assert main(["pretrain", "--manifest", "big/manifest.json", "--out", "run", "--seed", "1", *SMALL]) == 0
    assert main(["eval", "--manifest", "big/manifest.json", "--checkpoint", "run/checkpoint.npz", "--seed", "1",
                 "--mode", "few", "--k", "10", "--reps", "10", "--out", "few.json"]) == 0
    fold = json.loads((ws / "few.json").read_text())["result"]["folds"][0]
    assert fold["heads"]["deep"]["n_probes"] == 10
    assert fold["heads"]["concept"]["n_probes"] == 10


def test_eval_requires_seed(trained):
    assert main(["eval", "--manifest", "ds/manifest.json", "--checkpoint", "run/checkpoint.npz", "--out", "x.json"]) == 2


def test_eval_rejects_mismatched_checkpoint(trained):
    assert main(["gen-synth", "--out", "other", "--per-class", "4", "--n", "8", "--d", "8", "--c-per-class", "3"]) == 0
    code = main(["eval", "--manifest", "other/manifest.json", "--checkpoint", "run/checkpoint.npz",
                 "--seed", "1", "--out", "x.json"])
    assert code == 3


def test_explain_top_j(trained, capsys):
    capsys.readouterr()
    code = main(["explain", "--manifest", "ds/manifest.json", "--checkpoint", "run/checkpoint.npz",
                 "--top-j", "3", "--slides", "c0_s0001", "--out", "ex.json"])
    assert code == 0
    out = capsys.readouterr().out
    assert "c0_s0001" in out
    entry = json.loads((trained / "ex.json").read_text())["slides"][0]
    assert len(entry["concepts"]) == 3
    values = [v for _, v in entry["concepts"]]
    assert values == sorted(values, reverse=True)
    assert len(entry["top_patches"]) == 3


def test_commands_do_not_mutate_inputs(trained):
    before = tree_digest("ds")
    main(["prior", "--manifest", "ds/manifest.json", "--out", "priors"])
    main(["eval", "--manifest", "ds/manifest.json", "--checkpoint", "run/checkpoint.npz", "--seed", "1", "--out", "e.json"])
    main(["explain", "--manifest", "ds/manifest.json", "--checkpoint", "run/checkpoint.npz"])
    assert tree_digest("ds") == before
