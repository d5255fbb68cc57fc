import dataclasses
import json
import shutil

import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from perceiver_prompt import pipeline
from perceiver_prompt.checkpoint import load_tensors
from perceiver_prompt.cli import LOG_ENV, main
from perceiver_prompt.config import (SWEEP_GRID, AdaptationSection, ConfigError, RunConfig, TrainingSection,
                                     config_from_dict, load_config, parse_config, sweep_configs)

MICRO = {
    "corpus": {"n_patients": 8, "n_healthy": 1, "utts_per_task": 2, "healthy_utts_per_task": 2},
    "model": {"d_model": 16, "n_heads": 2, "n_encoder_blocks": 1, "n_decoder_blocks": 1, "ffn_dim": 32},
    "adaptation": {"prompt_len": 4, "latent_dim": 16, "cross_attn_heads": 2, "self_attn_heads": 2,
                   "n_self_layers": 1},
    "training": {"pretrain_epochs": 1, "lora_epochs": 1, "ptune_epochs": 1, "lora_rank": 2},
}


def write_cfg(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


# -- config ---------------------------------------------------------------------------
def test_defaults_are_conf_2():
    a = RunConfig().adaptation
    assert {k: getattr(a, k) for k in SWEEP_GRID[2]} == SWEEP_GRID[2]
    assert (a.layer, a.concat, a.prompt_len, a.n_history, a.aux) == ("before_encoder_blocks", "end", 32, 0, "none")


def test_grid_has_fifteen_rows_each_one_step_from_conf_2():
    assert sorted(SWEEP_GRID) == list(range(1, 16))
    diffs = {c: {k for k in row if row[k] != SWEEP_GRID[2][k]} for c, row in SWEEP_GRID.items()}
    assert diffs[2] == set()
    assert diffs[1] == diffs[3] == {"prompt_len"}
    assert diffs[4] == diffs[5] == {"concat"}
    assert all(diffs[c] == {"n_history"} for c in (6, 7, 8))
    assert all(diffs[c] == {"n_history", "stochastic_history"} for c in (9, 10, 11))
    assert diffs[12] == {"layer"}
    assert [SWEEP_GRID[c]["aux"] for c in (13, 14, 15)] == ["speaker_classify", "fda_regress", "fda_classify"]


def test_sweep_configs_apply_rows():
    cfg = config_from_dict({"sweep": {"confs": [1, 12]}})
    got = dict(sweep_configs(cfg))
    assert got[1].adaptation.prompt_len == 64 and got[12].adaptation.layer == "log_mel"
    with pytest.raises(ConfigError, match="no configuration numbered 16"):
        sweep_configs(config_from_dict({"sweep": {"confs": [16]}}))


adaptations = st.builds(AdaptationSection, layer=st.sampled_from(["log_mel", "before_encoder_blocks"]),
                        concat=st.sampled_from(["beginning", "end", "both_sides"]), prompt_len=st.integers(1, 99),
                        n_history=st.integers(0, 9), stochastic_history=st.booleans(),
                        aux=st.sampled_from(["none", "speaker_classify", "fda_regress", "fda_classify"]),
                        aux_weight=st.floats(0, 10))
trainings = st.builds(TrainingSection, lora_epochs=st.integers(0, 200), ptune_lr=st.floats(1e-6, 1.0))


@given(st.integers(0, 2 ** 31), adaptations, trainings)
def test_yaml_round_trip(seed, adaptation, training):
    cfg = RunConfig(seed=seed, adaptation=adaptation, training=training)
    assert parse_config(cfg.to_yaml()) == cfg


def test_empty_file_means_defaults():
    assert parse_config("") == RunConfig()


def test_exponent_strings_are_numbers():
    assert parse_config("training: {ptune_lr: 3e-4}").training.ptune_lr == 3e-4


@pytest.mark.parametrize("text, match", [
    ("batchsize: 3", "unknown key"),
    ("training: {lr: 0.1}", "unknown key.*training"),
    ("adaptation: {layer: middle}", "adaptation"),
    ("adaptation: {prompt_len: 0}", "prompt_len"),
    ("training: {batch_size: two}", "integer"),
    ("adaptation: {stochastic_history: 1}", "true/false"),
    ("sweep: {confs: 3}", "list"),
    ("training: [1, 2]", "mapping"),
    ("a: [", "YAML"),
])
def test_bad_configs(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "none.yaml")


# -- CLI -----------------------------------------------------------------------------
@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(d / "micro.yaml", MICRO)
    run = d / "run"
    assert main(["all", "--config", str(cfg), "--run-dir", str(run)]) == 0
    return cfg, run


@pytest.fixture
def run_copy(trained, tmp_path):
    cfg, run = trained
    dst = tmp_path / "run"
    shutil.copytree(run, dst)
    return cfg, dst


def test_all_writes_the_documented_layout(trained, capsys):
    _, run = trained
    for rel in ("config.yaml", "metrics.jsonl", "checkpoints/backbone.ppck", "checkpoints/lora.ppck",
                "checkpoints/prompt.ppck", "reports/baseline.json", "reports/adapted.json",
                "reports/comparison.txt", "reports/comparison.json", "corpus/manifest.jsonl"):
        assert (run / rel).exists(), rel
    assert load_config(run / "config.yaml") == config_from_dict(MICRO)
    stages = {json.loads(line)["stage"] for line in (run / "metrics.jsonl").read_text().splitlines()}
    assert stages == {"pretrain", "lora_finetune", "p_tuning"}
    assert [load_tensors(run / "checkpoints" / f)[0]["kind"] for f in ("backbone.ppck", "lora.ppck",
                                                                        "prompt.ppck")] == ["full", "lora", "prompt"]


def test_rerunning_train_is_a_no_op(run_copy):
    cfg, run = run_copy
    before = {p.name: p.read_bytes() for p in (run / "checkpoints").iterdir()}
    metrics = (run / "metrics.jsonl").read_text()
    assert main(["train", "--config", str(cfg), "--run-dir", str(run)]) == 0
    assert {p.name: p.read_bytes() for p in (run / "checkpoints").iterdir()} == before
    assert (run / "metrics.jsonl").read_text() == metrics


def test_new_seed_retrains(run_copy):
    cfg, run = run_copy
    before = (run / "checkpoints" / "prompt.ppck").read_bytes()
    assert main(["train", "--config", str(cfg), "--run-dir", str(run), "--seed", "7"]) == 0
    assert (run / "checkpoints" / "prompt.ppck").read_bytes() != before
    assert load_config(run / "config.yaml").seed == 7


def test_identical_checkpoints_compare_at_zero(run_copy, capsys):
    cfg, run = run_copy
    model = pipeline._baseline_model(config_from_dict(MICRO), run)
    pipeline.save_model(run / "same.ppck", model, {"rank": 2, "alpha": 8.0})
    data = dict(MICRO, eval={"baseline_checkpoint": str(run / "same.ppck"),
                             "adapted_checkpoint": str(run / "same.ppck")})
    assert main(["eval", "--config", str(write_cfg(run / "same.yaml", data)), "--run-dir", str(run)]) == 0
    summary = json.loads((run / "reports" / "comparison.json").read_text())
    assert summary["relative_reduction"] == 0.0
    assert "relative CER reduction: 0.00%" in capsys.readouterr().out


def test_export_prompts(run_copy, capsys):
    cfg, run = run_copy
    assert main(["export-prompts", "--config", str(cfg), "--run-dir", str(run)]) == 0
    for rel in ("prompts/prompts_h0.tsv", "prompts/projection_h0.tsv", "prompts/probe_h0.json"):
        assert (run / rel).exists(), rel
    assert "speaker probe accuracy" in capsys.readouterr().out


def test_two_conf_sweep(run_copy, capsys):
    cfg, run = run_copy
    data = dict(MICRO, sweep={"confs": [2, 12], "ptune_epochs": 1})
    assert main(["sweep", "--config", str(write_cfg(run / "sw.yaml", data)), "--run-dir", str(run)]) == 0
    assert sorted(p.name for p in (run / "sweep").iterdir()) == ["conf02", "conf12"]
    for c in ("conf02", "conf12"):
        assert (run / "sweep" / c / "reports" / "comparison.json").exists()
        assert (run / "sweep" / c / "checkpoints" / "prompt.ppck").exists()
    assert load_config(run / "sweep" / "conf12" / "config.yaml").adaptation.layer == "log_mel"
    out = capsys.readouterr().out
    assert "Conf.2" in out and "Conf.12" in out


def test_unknown_key_exits_2_and_keeps_snapshot(run_copy, capsys):
    _, run = run_copy
    snap = (run / "config.yaml").read_text()
    bad = write_cfg(run / "bad.yaml", dict(MICRO, trainig={}))
    assert main(["train", "--config", str(bad), "--run-dir", str(run)]) == 2
    assert "unknown key(s) at top level: trainig" in capsys.readouterr().err
    assert (run / "config.yaml").read_text() == snap


def test_corpus_mismatch(run_copy, capsys):
    _, run = run_copy
    other = write_cfg(run / "other.yaml", dict(MICRO, corpus=dict(MICRO["corpus"], seed=5)))
    assert main(["generate", "--config", str(other), "--run-dir", str(run)]) == 2
    assert "error" in capsys.readouterr().err


def test_eval_before_train(tmp_path, trained, capsys):
    cfg, _ = trained
    run = tmp_path / "fresh"
    assert main(["generate", "--config", str(cfg), "--run-dir", str(run)]) == 0
    assert main(["eval", "--config", str(cfg), "--run-dir", str(run)]) == 2
    assert "run `train`" in capsys.readouterr().err


def test_bad_log_level(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(LOG_ENV, "LOUD")
    assert main(["generate", "--run-dir", str(tmp_path)]) == 2
    assert LOG_ENV in capsys.readouterr().err


def test_unknown_command():
    with pytest.raises(SystemExit) as e:
        main(["fly", "--run-dir", "x"])
    assert e.value.code == 2


def test_replace_keeps_sections():
    cfg = RunConfig().with_adaptation(n_history=3)
    assert cfg.adaptation.n_history == 3 and dataclasses.replace(cfg, seed=2).adaptation.n_history == 3
