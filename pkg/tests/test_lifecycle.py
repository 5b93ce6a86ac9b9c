import logging

import numpy as np
import pytest

from lifelong_cd import cli, config, detector, lifecycle, prior_filter
from lifelong_cd.compositor import DETECTED, GENERIC
from lifelong_cd.errors import EmptyKnowledgeBaseError, InvalidConfigError, LifecycleOrderError
from lifelong_cd.knowledge_base import Detection
from lifelong_cd.lifecycle import DeployResult, LifelongLoop

TINY = {
    "styles": ["corridor_plain"],
    "world": {"canvas_size": [64, 256], "n_subgoals": 2, "frames_per_segment": 4, "objects_per_capture": 6},
    "compositor": {"n_samples": 16},
    "filter": {"per_class": 8, "epochs": 1, "min_positives": 2},
    "detector": {"iterations": 12, "batch": 4},
}


def tiny_cfg(**extra):
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in TINY.items()}
    for k, v in extra.items():
        data[k] = {**data.get(k, {}), **v} if isinstance(v, dict) else v
    return config.from_dict(data)


@pytest.fixture(scope="module")
def world():
    return lifecycle.build_world(tiny_cfg(), "corridor_plain")


@pytest.fixture(scope="module")
def gen0(world):
    loop = LifelongLoop(tiny_cfg(), name="t/gen0", clock=lambda: 0.0)
    loop.run_generation0(world.backgrounds, world.generic)
    return loop


def fake_detections(n, area=4, frame="x"):
    dets = []
    for i in range(n):
        side = int(np.sqrt(area)) if area else 2
        mask = np.ones((side, side), np.uint8) if area else np.zeros((2, 2), np.uint8)
        color = np.full((side, side, 3), 10 * i + 5, np.uint8)
        color[0, 0] = 250
        dets.append(Detection(f"{frame}{i}", mask, color, (0, 0, side, side), int(mask.sum()), 0.9))
    return DeployResult(dets, [], [])


def test_config_contracts(tmp_path):
    cfg = config.ExperimentConfig()
    assert cfg.detector.retrain_iters == cfg.detector.iterations // 4
    other = config.from_dict({"out": "elsewhere"})
    assert other.hash() == cfg.hash()
    assert config.from_dict({"seed": 1}).hash() != cfg.hash()
    for bad in ({"styles": ["moon"]}, {"compositor": {"mix_ratio": 2}}, {"detector": {"zzz": 1}},
                {"assignments": [["group1", "group1"]]}, {"generations": 0}):
        with pytest.raises(InvalidConfigError):
            config.from_dict(bad)
    path = tmp_path / "c.yaml"
    path.write_text(config.dump_config(cfg))
    assert config.load_config(path).hash() == cfg.hash()
    path.write_text("detector: [unclosed")
    with pytest.raises(InvalidConfigError):
        config.load_config(path)


def test_world_groups_are_disjoint(world):
    g1 = {p.id for p in world.groups["group1"]}
    g2 = {p.id for p in world.groups["group2"]}
    assert not g1 & g2
    assert {p.prior_id for p in world.placements["group1"]} <= g1
    assert {p.prior_id for p in world.placements["group2"]} <= g2
    assert not {p.id for p in world.generic} & (g1 | g2)


def test_generation0_requires_generic_priors(world):
    loop = LifelongLoop(tiny_cfg())
    with pytest.raises(EmptyKnowledgeBaseError):
        loop.run_generation0(world.backgrounds, [])
    assert loop.kb.is_empty and loop.model is None


def test_generation0_is_reproducible(world, gen0):
    again = LifelongLoop(tiny_cfg(), name="t/gen0", clock=lambda: 0.0)
    again.run_generation0(world.backgrounds, world.generic)
    assert again.ledger.hashes() == gen0.ledger.hashes()
    assert gen0.kb.current_index == 0
    with pytest.raises(LifecycleOrderError):
        gen0.clone("x").run_generation0(world.backgrounds, world.generic)


def test_deploy_is_deterministic(world, gen0):
    cap = world.captures["group1"]
    a = gen0.clone("a").deploy(cap)
    b = gen0.clone("b").deploy(cap)
    assert [(d.frame_id, d.bbox, d.area_px) for d in a.detections] == \
        [(d.frame_id, d.bbox, d.area_px) for d in b.detections]
    assert all(d.area_px >= gen0.cfg.detector.min_area for d in a.detections)
    assert len(a.prob_maps) == len(cap.live)
    with pytest.raises(LifecycleOrderError):
        LifelongLoop(tiny_cfg()).deploy(cap)


def test_update_bookkeeping_with_filter(gen0, monkeypatch):
    loop = gen0.clone("t/update")
    generic = [p for p in loop.kb.priors_of(loop.kb.generations[0]) if p.provenance == GENERIC]
    doomed = {p.id for p in generic[:3]}

    def fake_filter(priors, model, threshold=None):
        return [p for p in priors if p.id not in doomed], [p for p in priors if p.id in doomed]

    monkeypatch.setattr(prior_filter, "filter_priors", fake_filter)
    rec = loop.prior_update(fake_detections(4), use_filter=True)
    kinds = [loop.kb.priors[p].provenance for p in rec.prior_ids]
    assert kinds.count(GENERIC) == len(generic) - 3
    assert kinds.count(DETECTED) == 4
    assert rec.index == 1
    assert loop.filter_model is not None


def test_update_with_empty_detections_warns(gen0, caplog):
    loop = gen0.clone("t/empty")
    before = loop.kb.generations[-1].prior_ids
    with caplog.at_level(logging.WARNING):
        rec = loop.prior_update(fake_detections(3, area=0), use_filter=True)
    assert rec.prior_ids == before and rec.index == 1
    assert "no detection accepted" in caplog.text


def test_filter_skipped_below_min_positives(gen0):
    loop = gen0.clone("t/few")
    rec = loop.prior_update(fake_detections(1), use_filter=True)
    assert loop.filter_model is None
    generic = [p for p in rec.prior_ids if loop.kb.priors[p].provenance == GENERIC]
    assert len(generic) == len(gen0.kb.generations[0].prior_ids)


def test_retrain_freezes_encoder_and_drops_removed_priors(gen0, monkeypatch):
    loop = gen0.clone("t/retrain")
    with pytest.raises(LifecycleOrderError):
        loop.retrain()
    generic = [p for p in loop.kb.priors_of(loop.kb.generations[0]) if p.provenance == GENERIC]
    doomed = {p.id for p in generic[:4]}
    monkeypatch.setattr(prior_filter, "filter_priors",
                        lambda priors, model, threshold=None: ([p for p in priors if p.id not in doomed],
                                                               [p for p in priors if p.id in doomed]))
    loop.prior_update(fake_detections(4), use_filter=True)
    used_before = set(loop.training_prior_ids)
    seen = []
    original = loop._synthesize

    def spy(kb, rec, step):
        data, used = original(kb, rec, step)
        seen.append(used)
        return data, used

    loop._synthesize = spy
    model = loop.retrain()
    assert not seen[0] & doomed
    assert loop.checksum_audit[-1]["before"]["encoder"] == loop.checksum_audit[-1]["after"]["encoder"]
    assert detector.group_checksums(model)["encoder"] == detector.group_checksums(gen0.model)["encoder"]
    assert len(model.loss_history) == loop.cfg.detector.retrain_iters
    assert used_before <= loop.training_prior_ids
    with pytest.raises(LifecycleOrderError):
        LifelongLoop(tiny_cfg()).retrain()


def test_loop_state_round_trip(tmp_path, gen0, world):
    loop = gen0.clone("t/save")
    loop.save(tmp_path / "loop")
    back = LifelongLoop.load(tiny_cfg(), tmp_path / "loop")
    assert detector.group_checksums(back.model) == detector.group_checksums(loop.model)
    assert back.ledger.hashes() == loop.ledger.hashes()
    dep = loop.deploy(world.captures["group1"])
    lifecycle.save_deploy(tmp_path / "dep", dep)
    again = lifecycle.load_deploy(tmp_path / "dep")
    assert [d.bbox for d in again.detections] == [d.bbox for d in dep.detections]
    assert len(again.harvested) == len(dep.harvested)


def test_benchmark_cells_and_disjointness(tmp_path):
    cfg = tiny_cfg()
    result = lifecycle.run_benchmark(cfg, tmp_path / "bench")
    cells = {f"{r.workspace}-{r.group[-1]}" for r in result.records}
    assert cells == {"COR-1", "COR-2"}
    assert {r.method_tag for r in result.records} == set(cfg.methods)
    for cell, methods in result.disjointness.items():
        for method, overlap in methods.items():
            assert overlap == [], (cell, method)
    for a in result.freeze_audit:
        assert a["before"]["encoder"] == a["after"]["encoder"]
    for name in ("metrics.csv", "report.md", "config.yaml", "freeze_audit.json", "manifest.json"):
        assert (tmp_path / "bench" / name).exists()
    assert cfg.hash() in (tmp_path / "bench" / "metrics.csv").read_text()


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("LCD_OUT", raising=False)
    assert cli.main(["train", "--set", "nope=1"]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [")
    assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["retrain", "--out", str(tmp_path / "nothing")]) == cli.EXIT_DATA
    assert cli.main(["report", "--out", str(tmp_path / "nothing")]) == cli.EXIT_DATA


def test_cli_pipeline_and_env_override(tmp_path, monkeypatch):
    cfg_path = tmp_path / "tiny.yaml"
    cfg_path.write_text(config.dump_config(tiny_cfg()))
    monkeypatch.setenv("LCD_OUT", str(tmp_path / "env_run"))
    args = ["--config", str(cfg_path), "--out", str(tmp_path / "ignored")]
    for cmd in ("simulate", "synth", "train", "deploy", "update", "retrain", "eval"):
        assert cli.main([cmd, *args]) == cli.EXIT_OK, cmd
    root = tmp_path / "env_run"
    assert not (tmp_path / "ignored").exists()
    assert (root / "world" / "corridor_plain" / "manifest.json").exists()
    assert (root / "synth" / "corridor_plain" / "samples.json").exists()
    assert (root / "loops" / "corridor_plain" / "detector" / "1" / "meta.json").exists()
    assert (root / "loops" / "corridor_plain" / "metrics.csv").exists()


def test_filter_ablation_shares_random_streams(gen0):
    # with nothing removed, the filtered and unfiltered variants must coincide exactly
    a = gen0.clone("t/with", seed_key="t/adapt")
    b = gen0.clone("t/without", seed_key="t/adapt")
    a.prior_update(fake_detections(1), use_filter=True)
    b.prior_update(fake_detections(1), use_filter=False)
    ma, mb = a.retrain(), b.retrain()
    assert detector.group_checksums(ma) == detector.group_checksums(mb)
    c = gen0.clone("t/other")
    c.prior_update(fake_detections(1), use_filter=False)
    assert detector.group_checksums(c.retrain()) != detector.group_checksums(mb)
