"""End-to-end protocol: purity, isolation, reports, CLI, checkpoints."""

import json

import numpy as np
import pytest

from promptsearch.cli import main
from promptsearch.config import RunConfig, save_config
from promptsearch.harness import (METRIC_KEYS, PersonSearchSystem,
                                  build_report, evaluate_domain, load_system,
                                  pretrain, report_to_csv, save_system,
                                  train_continual)

TINY = dict(seed=0, num_domains=2, separation=1.0, identity_count=4,
            train_scenes=3, test_scenes=4, queries=2, gallery_size=3,
            corpus_size=4, warmup_steps=3, pretrain_epochs=1,
            continual_epochs=1, batch_size=2)


@pytest.fixture(scope="module")
def pretrained():
    return pretrain(RunConfig(**TINY))


@pytest.fixture(scope="module")
def trained(pretrained):
    config = RunConfig(**TINY)
    recorder = []
    history, slot_digests = train_continual(config, pretrained, recorder=recorder)
    return config, pretrained, recorder, history, slot_digests


def test_backbone_frozen_through_both_stages(trained):
    config, system = trained[0], trained[1]
    fresh = pretrain(config)
    # trunk weights after continual training match the pretrain output exactly
    assert system.backbone_digest() == fresh.backbone_digest()


def test_training_touches_one_domain_at_a_time(trained):
    recorder = trained[2]
    assert recorder, "training must go through the recorded view"
    domains_seen = [d for d, _, _ in recorder]
    # accesses are contiguous: domain 0 fully precedes domain 1
    switch = domains_seen.index(1)
    assert all(d == 0 for d in domains_seen[:switch])
    assert all(d == 1 for d in domains_seen[switch:])
    assert all(split == "train" for _, split, _ in recorder)


def test_finished_slots_never_change(trained):
    slot_digests = trained[4]
    assert slot_digests[0][0] == slot_digests[1][0]


def test_slot_trainable_count(trained):
    system = trained[1]
    config = trained[0]
    layer_dims = system.backbone_config.layer_dims()
    expected = (config.prompt_len * sum(layer_dims)
                + 2 * config.num_attributes * system.backbone_config.feature_dim)
    for slot in system.pool.slots:
        assert slot.trainable_count() == expected == 8192


def test_history_and_report_schema(trained):
    config, _, _, history, _ = trained
    assert [h["after_domain"] for h in history] == [0, 1]
    assert set(history[0]["metrics"]) == {"pops", "oracle_selection"}
    assert set(history[1]["metrics"]["pops"]) == {"0", "1"}
    report = build_report(config, history, "pops")
    assert [d["domain"] for d in report["per_domain"]] == [0, 1]
    for d in report["per_domain"]:
        for k in METRIC_KEYS:
            assert 0.0 <= d[k] <= 100.0
    assert set(report["weighted_average"]) == set(METRIC_KEYS)
    assert [row["domain"] for row in report["forgetting"]] == [0]
    # equal gallery weights make the weighted average a plain mean
    for k in METRIC_KEYS:
        vals = [d[k] for d in report["per_domain"]]
        assert report["weighted_average"][k] == pytest.approx(np.mean(vals))


def test_report_csv_format(trained):
    config, _, _, history, _ = trained
    report = build_report(config, history, "pops")
    csv = report_to_csv(report)
    lines = csv.strip().splitlines()
    assert lines[0] == "domain,metric,stage,value"
    assert all(len(line.split(",")) == 4 for line in lines)
    stages = {line.split(",")[2] for line in lines[1:]}
    assert {"final", "forgetting", "after_domain_0", "after_domain_1"} <= stages


def test_eval_threads_env_is_respected(trained, monkeypatch):
    from promptsearch.data import make_domain
    config, system = trained[0], trained[1]
    domain = make_domain(config.domain_specs()[0], config.seed,
                         config.dataset_sizes())
    monkeypatch.setenv("PROMPTSEARCH_EVAL_THREADS", "1")
    serial = evaluate_domain(system, domain, "pops")
    monkeypatch.setenv("PROMPTSEARCH_EVAL_THREADS", "3")
    threaded = evaluate_domain(system, domain, "pops")
    assert serial == threaded


def test_oracle_mode_requires_known_domain(trained):
    from promptsearch.data import make_domain
    config, system = trained[0], trained[1]
    spec = RunConfig(**{**TINY, "num_domains": 3}).domain_specs()[2]
    stranger = make_domain(spec, config.seed, config.dataset_sizes())
    with pytest.raises(LookupError):
        evaluate_domain(system, stranger, "oracle_selection")


def test_checkpoint_roundtrip(trained, tmp_path):
    config, system, _, history, digests = trained
    path = tmp_path / "sys.zip"
    save_system(path, system, config, stage="trained",
                history=history, slot_digests=digests)
    loaded, manifest = load_system(path)
    assert manifest["stage"] == "trained"
    assert manifest["num_domains"] == 2
    before = system.named_arrays()
    after = loaded.named_arrays()
    assert set(before) == set(after)
    for name in before:
        np.testing.assert_array_equal(before[name], after[name])
    assert loaded.backbone_digest() == system.backbone_digest()
    # loaded systems stay frozen
    assert all(not p.requires_grad for p in loaded.backbone.params())
    assert all(not p.requires_grad for p in loaded.head.params())


def test_ft_seq_shares_one_slot(pretrained):
    config = RunConfig(**{**TINY, "baseline": "ft_seq"})
    system = PersonSearchSystem(config)
    system.backbone = pretrained.backbone
    system.pyramid = pretrained.pyramid
    system.head = pretrained.head
    history, _ = train_continual(config, system)
    assert system.pool.num_domains == 1
    assert set(history[1]["metrics"]) == {"ft_seq"}


def test_cli_end_to_end(trained, tmp_path, capsys):
    config = trained[0]
    cfg_path = tmp_path / "run.json"
    save_config(config, cfg_path)

    pre = tmp_path / "pre.zip"
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(pre)]) == 0
    out = tmp_path / "trained.zip"
    assert main(["train", "--config", str(cfg_path), "--ckpt", str(pre),
                 "--out", str(out)]) == 0
    rep = tmp_path / "report.json"
    assert main(["eval", "--ckpt", str(out), "--mode", "pops",
                 "--out", str(rep)]) == 0
    report = json.loads(rep.read_text())
    assert report["mode"] == "pops"
    assert len(report["per_domain"]) == 2

    capsys.readouterr()
    assert main(["report", "--in", str(rep), "--format", "csv"]) == 0
    csv_out = capsys.readouterr().out
    assert csv_out.splitlines()[0] == "domain,metric,stage,value"

    rep2 = tmp_path / "report_oracle.json"
    assert main(["eval", "--ckpt", str(out), "--mode", "oracle",
                 "--out", str(rep2)]) == 0
    assert json.loads(rep2.read_text())["mode"] == "oracle_selection"


def test_cli_rejects_bad_mode(tmp_path):
    with pytest.raises(SystemExit):
        main(["eval", "--ckpt", "x.zip", "--mode", "magic", "--out", "y.json"])


def test_eval_requires_history(trained, tmp_path):
    config, system = trained[0], trained[1]
    pre = tmp_path / "pre_only.zip"
    save_system(pre, system, config, stage="pretrained")
    with pytest.raises(SystemExit, match="no training history"):
        main(["eval", "--ckpt", str(pre), "--mode", "pops",
              "--out", str(tmp_path / "r.json")])
