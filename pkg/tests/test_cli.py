import json
import time

import pytest

from defined.checkpoint import load_checkpoint
from defined.cli import main

TINY = {
    "experiment_id": "tiny_bpsk",
    "sim": {"scheme": "BPSK", "T": 6, "snr_db_min": 5, "snr_db_max": 5},
    "model": {"d_e": 16, "n_layers": 1, "n_heads": 2, "T_max": 6, "n_r": 1, "n_t": 1, "class_count": 2},
    "train": {"batch_size": 8, "pretrain_steps": 3, "finetune_steps": 2, "warmup_steps": 1},
    "eval": {"n_prompts": 120, "k_pilots": 1, "chunk_size": 50},
}


def _write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = _write(d, TINY)
    assert main(["train", "--config", cfg, "--out-dir", str(d / "run")]) == 0
    return d, cfg, d / "run" / "checkpoints" / "final.ckpt"


def test_train_writes_loadable_checkpoint(trained):
    d, _, ckpt = trained
    c = load_checkpoint(ckpt)
    assert c.step == 5
    assert (d / "run" / "loss.csv").read_text().count("\n") == 6


def test_eval_all_arms(trained, capsys):
    d, cfg, ckpt = trained
    out = d / "eval"
    assert main(["eval", "--config", cfg, "--checkpoint", str(ckpt), "--out-dir", str(out), "--workers", "1"]) == 0
    rep = json.loads((out / "tiny_bpsk.json").read_text())
    assert [a["arm"] for a in rep["arms"]] == ["icl", "df_p1", "mmse_p1", "mmse_df_p1", "csi"]
    assert len({a["frame_digest"] for a in rep["arms"]}) == 1
    assert rep["metadata"]["checkpoint_hash"]


def test_eval_output_is_deterministic(trained):
    d, cfg, ckpt = trained
    runs = []
    for i in range(2):
        out = d / f"det{i}"
        main(["eval", "--config", cfg, "--checkpoint", str(ckpt), "--arms", "df,mmse", "--out-dir", str(out), "--workers", "1"])
        runs.append((out / "tiny_bpsk.csv").read_bytes())
    assert runs[0] == runs[1]
    out = d / "det2"
    main(["eval", "--config", cfg, "--checkpoint", str(ckpt), "--arms", "df,mmse", "--out-dir", str(out), "--workers", "2"])
    assert (out / "tiny_bpsk.csv").read_bytes() == runs[0]


def test_baseline_only_eval_needs_no_checkpoint(tmp_path):
    cfg = _write(tmp_path, TINY)
    assert main(["eval", "--config", cfg, "--arms", "csi,mmse_df", "--out-dir", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "tiny_bpsk.csv").exists()


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DEFINED_OUT_DIR", str(tmp_path / "env"))
    cfg = _write(tmp_path, TINY)
    assert main(["eval", "--config", cfg, "--arms", "csi"]) == 0
    assert (tmp_path / "env" / "tiny_bpsk" / "tiny_bpsk.json").exists()


def test_seed_override_changes_frames(tmp_path):
    cfg = _write(tmp_path, TINY)
    digests = []
    for seed in ("3", "4"):
        out = tmp_path / seed
        main(["eval", "--config", cfg, "--arms", "csi", "--seed-override", seed, "--out-dir", str(out)])
        digests.append(json.loads((out / "tiny_bpsk.json").read_text())["metadata"]["frame_digest"])
    assert digests[0] != digests[1]


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2
    assert "not found" in capsys.readouterr().err


def test_bad_alpha_names_field(tmp_path, capsys):
    data = json.loads(json.dumps(TINY))
    data["train"]["alpha"] = 1.5
    assert main(["train", "--config", _write(tmp_path, data)]) == 2
    assert "train.alpha" in capsys.readouterr().err


def test_unknown_arm_and_missing_checkpoint(tmp_path):
    cfg = _write(tmp_path, TINY)
    assert main(["eval", "--config", cfg, "--arms", "zf"]) == 2
    assert main(["eval", "--config", cfg, "--arms", "icl", "--out-dir", str(tmp_path)]) == 2


def test_unknown_panel_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["repro", "fig9z"])
    assert err.value.code == 2


def test_mismatched_checkpoint_exits_2(trained, tmp_path):
    _, _, ckpt = trained
    data = json.loads(json.dumps(TINY))
    data["model"]["d_e"] = 8
    assert main(["eval", "--config", _write(tmp_path, data), "--checkpoint", str(ckpt), "--arms", "icl"]) == 2


def test_corrupt_checkpoint_exits_1(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"DEFCKPT1" + b"\0" * 8)
    cfg = _write(tmp_path, TINY)
    assert main(["eval", "--config", cfg, "--checkpoint", str(bad), "--arms", "icl", "--out-dir", str(tmp_path)]) == 1


@pytest.mark.slow
def test_repro_smoke_within_budget(tmp_path):
    t0 = time.perf_counter()
    assert main(["repro", "fig4a", "--smoke", "--out-dir", str(tmp_path), "--workers", "1"]) == 0
    elapsed = time.perf_counter() - t0
    rep = json.loads((tmp_path / "fig4a_siso_bpsk_snr0_p1_smoke.json").read_text())
    arms = [a["arm"] for a in rep["arms"]]
    assert arms == ["icl_icl", "icl_df_p1", "defined_icl", "defined_df_p1", "mmse_p1", "mmse_p30", "mmse_df_p1", "csi"]
    assert "gain_DF" in rep["gains"] and "gain_ICL" in rep["gains"]
    assert elapsed < 600, f"smoke repro took {elapsed:.0f}s"
