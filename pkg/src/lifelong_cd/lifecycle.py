"""The lifelong loop (train, deploy, update priors, retrain) and the benchmark protocol."""
import copy
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import compositor, detector, evaluator, imaging, prior_filter, simworld, sprites
from .compositor import GENERIC, HARVESTED, SamplePair
from .errors import EmptyKnowledgeBaseError, LCDError, LifecycleOrderError
from .knowledge_base import KnowledgeBase, check_detection

log = logging.getLogger(__name__)


def derive_seed(*keys):
    """Stable 31-bit seed from arbitrary printable keys."""
    blob = "/".join(str(k) for k in keys).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little") & 0x7FFFFFFF


def hash_arrays(arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def hash_samples(samples):
    return hash_arrays([x for s in samples for x in (s.reference, s.live, s.mask)])


@dataclass
class LedgerEvent:
    generation: int
    step: str
    inputs: dict
    outputs: dict
    wall_time: float


@dataclass
class RunLedger:
    events: list = field(default_factory=list)

    def append(self, generation, step, inputs, outputs, wall_time):
        self.events.append(LedgerEvent(generation, step, dict(inputs), dict(outputs), float(wall_time)))

    def hashes(self):
        """Ledger content without wall times; equal across replays of one config."""
        return [(e.generation, e.step, e.inputs, e.outputs) for e in self.events]

    def to_jsonl(self):
        return "".join(json.dumps(e.__dict__, sort_keys=True) + "\n" for e in self.events)


@dataclass
class DeployResult:
    detections: list
    prob_maps: list
    harvested: list


class LifelongLoop:
    """One workspace's knowledge base and detector, advanced one lifecycle step at a time.

    Every step builds its outputs first and commits them to the knowledge base
    and ledger only once nothing else can fail.
    """

    def __init__(self, cfg, name="loop", clock=time.time):
        self.cfg = cfg
        self.name = name
        self.seed_key = name
        self.kb = KnowledgeBase(min_area_px=cfg.detector.min_area, clock=clock)
        self.model = None
        self.gen0_trained = False
        self.ledger = RunLedger()
        self.filter_model = None
        self.training_prior_ids = set()
        self.checksum_audit = []

    def clone(self, name, seed_key=None):
        """Independent copy. Clones sharing a ``seed_key`` draw identical random streams."""
        other = copy.copy(self)
        other.name = name
        other.seed_key = seed_key or name
        other.kb = copy.deepcopy(self.kb)
        other.model = copy.deepcopy(self.model)
        other.ledger = copy.deepcopy(self.ledger)
        other.training_prior_ids = set(self.training_prior_ids)
        other.checksum_audit = list(self.checksum_audit)
        return other

    def _seed(self, *keys):
        return derive_seed(self.cfg.seed, self.seed_key, *keys)

    def _train_cfg(self, iterations, freeze, step):
        d = self.cfg.detector
        return detector.TrainConfig(iterations=iterations, lr=d.lr, batch=d.batch, optimizer=d.optimizer,
                                    freeze_encoder=freeze, rng_seed=self._seed(step, "train"),
                                    pos_weight_max=d.pos_weight_max, shift=d.train_shift)

    def _synthesize(self, kb, rec, step):
        c = self.cfg.compositor
        priors = kb.priors_of(rec)
        backgrounds = kb.backgrounds_of(rec)
        data = compositor.synthesize_dataset(backgrounds, priors, c.n_samples, tuple(c.objects_per_image),
                                             tuple(c.scale_range), self._seed(step, "synth"),
                                             generation=rec.index, alpha_threshold=c.alpha_threshold)
        used = {o["prior_id"] for s in data for o in s.meta["objects"]}
        return data, used

    def run_generation0(self, backgrounds, generic):
        """Seed the knowledge base with backgrounds and generic priors and train the first detector."""
        if not self.kb.is_empty or self.model is not None:
            raise LifecycleOrderError("generation 0 requires an empty knowledge base")
        if not generic:
            raise EmptyKnowledgeBaseError("generation 0 needs generic priors")
        t0 = time.time()
        staged = KnowledgeBase(min_area_px=self.kb.min_area_px, clock=self.kb._clock)
        staged.add_backgrounds(backgrounds)
        rec = staged.init_with_generic(generic)
        data, used = self._synthesize(staged, rec, "gen0")
        d = self.cfg.detector
        model = detector.build_model(d.scale, d.max_disp, self._seed("gen0", "init"))
        model = detector.train(model, data, self._train_cfg(d.iterations, False, "gen0"))
        self.kb, self.model, self.gen0_trained = staged, model, True
        self.training_prior_ids |= used
        self.ledger.append(0, "train", {"priors": hash_arrays([p.sprite for p in generic]),
                                        "backgrounds": hash_arrays(backgrounds),
                                        "synthetic": hash_samples(data)},
                           {"model": detector.group_checksums(model)}, time.time() - t0)
        return model, rec

    def deploy(self, capture, frame_prefix="f"):
        """Run the detector over a capture and harvest detections and scene samples."""
        if self.model is None:
            raise LifecycleOrderError("deploy needs a trained detector")
        t0 = time.time()
        d = self.cfg.detector
        gen = self.kb.current_index
        pmaps = detector.predict_batch(self.model, capture.reference, capture.live)
        dets, harvested = [], []
        for i, (pm, ref, live) in enumerate(zip(pmaps, capture.reference, capture.live)):
            fid = f"{frame_prefix}{i:04d}"
            found = detector.binarize_and_extract(pm, live, d.threshold, d.min_area, frame_id=fid)
            if found:
                dets.extend(found)
                mask = detector.binarize(pm, d.threshold, d.min_area)
                harvested.append(SamplePair(ref.copy(), live.copy(), mask, HARVESTED, gen + 1,
                                            {"frame_id": fid}))
        self.ledger.append(gen, "deploy", {"capture": hash_arrays(capture.live)},
                           {"detections": len(dets), "harvested": hash_samples(harvested)},
                           time.time() - t0)
        return DeployResult(dets, pmaps, harvested)

    def prior_update(self, deployed, use_filter=None):
        """Ingest detections, optionally refilter generic priors, snapshot the next generation."""
        t0 = time.time()
        fc = self.cfg.filter
        use_filter = fc.enabled if use_filter is None else use_filter
        staged = copy.deepcopy(self.kb)
        accepted, rejected = staged.ingest_detections(deployed.detections)
        removed = []
        filter_model = None
        if not accepted:
            log.warning("%s: no detection accepted; generation advances with unchanged priors", self.name)
        else:
            frames = {d.frame_id for d in deployed.detections}
            staged.add_samples([s for s in deployed.harvested if s.meta.get("frame_id") in frames])
        positives = [d for d in deployed.detections if check_detection(d, staged.min_area_px) is None]
        if use_filter and len(accepted) >= fc.min_positives:
            rec = self.kb.generations[-1]
            train_set = prior_filter.build_filter_training_set(
                positives, self.kb.backgrounds_of(rec), fc.per_class, self._seed("filter", rec.index))
            filter_model = prior_filter.train_filter(train_set, fc.epochs, fc.lr, fc.batch,
                                                     self._seed("filter-train", rec.index),
                                                     fc.decision_threshold)
            generic = [staged.priors[p] for p in staged.active_prior_ids()
                       if staged.priors[p].provenance == GENERIC]
            _, removed = prior_filter.filter_priors(generic, filter_model)
            if len(removed) == len(generic):
                # keep the loop alive: never drop every generic prior
                removed = []
            staged.remove_generic_priors([p.id for p in removed])
        elif use_filter:
            log.info("%s: %d accepted detections < %d, filter skipped", self.name, len(accepted),
                     fc.min_positives)
        rec = staged.snapshot_generation(force=True)
        self.kb = staged
        self.filter_model = filter_model
        self.ledger.append(rec.index, "update",
                           {"detections": len(deployed.detections)},
                           {"accepted": len(accepted), "rejected": len(rejected),
                            "removed_generic": sorted(p.id for p in removed),
                            "priors": list(rec.prior_ids)}, time.time() - t0)
        return rec

    def retrain(self):
        """Retrain on surviving priors plus harvested samples with the encoder frozen."""
        if not self.gen0_trained:
            raise LifecycleOrderError("retrain before generation 0 was trained")
        rec = self.kb.generations[-1]
        if rec.index < 1:
            raise LifecycleOrderError("retrain needs a generation >= 1 snapshot")
        t0 = time.time()
        synthetic, used = self._synthesize(self.kb, rec, f"gen{rec.index}")
        harvested = self.kb.samples_of(rec)
        c = self.cfg.compositor
        data = compositor.mix_generations(synthetic, harvested, c.mix_ratio, n_out=c.n_samples,
                                          rng_seed=self._seed("mix", rec.index))
        before = detector.group_checksums(self.model)
        model = detector.train(self.model, data,
                               self._train_cfg(self.cfg.detector.retrain_iters, True, f"gen{rec.index}"))
        after = detector.group_checksums(model)
        self.checksum_audit.append({"generation": rec.index, "before": before, "after": after})
        self.model = model
        self.training_prior_ids |= used
        self.ledger.append(rec.index, "retrain", {"dataset": hash_samples(data),
                                                  "encoder_before": before["encoder"]},
                           {"model": after}, time.time() - t0)
        return model


    def save(self, root):
        """Persist knowledge base, current detector, filter and ledger under ``root``."""
        root = Path(root)
        self.kb.save(root / "kb")
        gen = self.kb.current_index
        if self.model is not None:
            detector.save_detector(root / "detector" / str(gen), self.model, {"generation": gen})
        if self.filter_model is not None:
            prior_filter.save_filter(root / "filter" / str(gen), self.filter_model)
        state = {"name": self.name, "seed_key": self.seed_key, "generation": gen, "gen0_trained": self.gen0_trained,
                 "training_prior_ids": sorted(self.training_prior_ids),
                 "checksum_audit": self.checksum_audit}
        imaging.atomic_write_text(root / "loop.json", json.dumps(state, indent=1, sort_keys=True))
        imaging.atomic_write_text(root / "ledger.jsonl", self.ledger.to_jsonl())

    @classmethod
    def load(cls, cfg, root):
        root = Path(root)
        if not (root / "loop.json").exists():
            raise LifecycleOrderError(f"no lifecycle state under {root}; run train first")
        state = json.loads((root / "loop.json").read_text())
        loop = cls(cfg, state["name"])
        loop.seed_key = state.get("seed_key", loop.name)
        loop.kb = KnowledgeBase.load(root / "kb")
        gen = state["generation"]
        det_dir = root / "detector" / str(gen)
        if not det_dir.exists():
            # the update step advances the generation without a new model
            older = sorted((int(p.name) for p in (root / "detector").iterdir()), reverse=True)
            det_dir = root / "detector" / str(older[0]) if older else None
        loop.model = detector.load_detector(det_dir) if det_dir else None
        if (root / "filter" / str(gen)).exists():
            loop.filter_model = prior_filter.load_filter(root / "filter" / str(gen))
        loop.gen0_trained = state["gen0_trained"]
        loop.training_prior_ids = set(state["training_prior_ids"])
        loop.checksum_audit = state["checksum_audit"]
        for line in (root / "ledger.jsonl").read_text().splitlines():
            loop.ledger.events.append(LedgerEvent(**json.loads(line)))
        return loop


def save_deploy(root, result):
    """Detections and harvested scene samples of one deployment."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    compositor.save_samples(root / "harvested", result.harvested, {})
    rows = []
    for i, d in enumerate(result.detections):
        imaging.write_png(root / "detections" / f"{i:05d}_mask.png", d.mask_crop, mask=True)
        imaging.write_png(root / "detections" / f"{i:05d}_color.png", d.color_crop)
        rows.append({"frame_id": d.frame_id, "bbox": list(d.bbox), "area_px": d.area_px, "score": d.score})
    imaging.atomic_write_text(root / "detections.json", json.dumps(rows, indent=1))


def load_deploy(root):
    from .knowledge_base import Detection
    root = Path(root)
    if not (root / "detections.json").exists():
        raise LifecycleOrderError(f"no deployment under {root}; run deploy first")
    rows = json.loads((root / "detections.json").read_text())
    dets = []
    for i, r in enumerate(rows):
        dets.append(Detection(r["frame_id"], imaging.read_png(root / "detections" / f"{i:05d}_mask.png", mask=True),
                              imaging.read_png(root / "detections" / f"{i:05d}_color.png"),
                              tuple(r["bbox"]), r["area_px"], r["score"]))
    harvested = compositor.load_samples(root / "harvested") if (root / "harvested").exists() else []
    return DeployResult(dets, [], harvested)

def evaluate(model, capture, threshold=0.5, min_area=1, **tags):
    pmaps = detector.predict_batch(model, capture.reference, capture.live)
    per_image = [evaluator.pixel_metrics(detector.binarize(p, threshold, min_area), gt, **tags)
                 for p, gt in zip(pmaps, capture.masks)]
    return evaluator.aggregate(per_image), per_image


def train_supervised(cfg, capture, seed):
    """Comparator trained on ground-truth masks of a capture of the other object group."""
    d = cfg.detector
    data = [SamplePair(r, l, m, compositor.SYNTHETIC, 0, {"supervised": True}) for r, l, m in capture]
    model = detector.build_model(d.scale, d.max_disp, derive_seed(seed, "init"))
    tc = detector.TrainConfig(iterations=d.iterations, lr=d.lr, batch=d.batch, optimizer=d.optimizer,
                              rng_seed=derive_seed(seed, "train"), pos_weight_max=d.pos_weight_max)
    return detector.train(model, data, tc)


@dataclass
class StyleWorld:
    workspace: object
    traversal: object
    backgrounds: list
    generic: list
    groups: dict
    captures: dict
    placements: dict


def build_world(cfg, style):
    """Workspace, empty reference pass and one planted capture per object group."""
    w = cfg.world
    ws = simworld.generate_workspace(derive_seed(cfg.seed, style, "ws"), style, tuple(w.canvas_size))
    trav = simworld.make_traversal(ws, tuple(w.frame_size), w.n_subgoals, w.frames_per_segment,
                                   derive_seed(cfg.seed, style, "traversal"))
    empty = simworld.render_traversal(ws, trav, [], [], {}, jitter=0)
    generic = sprites.generic_priors(cfg.priors.generic_instances_per_class,
                                     derive_seed(cfg.seed, "generic"), cfg.priors.cluttered_fraction)
    groups, captures, placements = {}, {}, {}
    for g in sprites.GROUPS:
        groups[g] = sprites.group_priors(g, w.group_instances_per_class, derive_seed(cfg.seed, g))
        pl = simworld.plant_objects(ws, groups[g], w.objects_per_capture, tuple(w.plant_scale_range),
                                    derive_seed(cfg.seed, style, g, "plant"), group_tag=g)
        placements[g] = pl
        captures[g] = simworld.render_traversal(ws, trav, [], pl, groups[g], w.jitter, w.brightness,
                                                derive_seed(cfg.seed, style, g, "render"))
    return StyleWorld(ws, trav, empty.reference, generic, groups, captures, placements)


def cell_name(style, test_group):
    return f"{simworld.STYLE_CODES[style]}-{test_group[-1]}"


@dataclass
class BenchmarkResult:
    records: list
    per_image: dict
    report: object
    freeze_audit: list
    disjointness: dict
    failures: dict
    ledgers: dict
    config_hash: str

    def fscore(self, cell, method):
        for r in self.records:
            if r.workspace + "-" + r.group[-1] == cell and r.method_tag == method:
                return r.f_score
        return None


def run_cell(cfg, world, style, train_group, test_group, gen0_loop, run_id):
    """One benchmark cell: adapt on the train-group capture, evaluate on the test group."""
    d = cfg.detector
    cap_train = world.captures[train_group]
    cap_test = world.captures[test_group]
    test_ids = {p.prior_id for p in world.placements[test_group]}
    tags = dict(run_id=run_id, workspace=simworld.STYLE_CODES[style], group=test_group)
    name = cell_name(style, test_group)
    models, audit, ledgers, disjoint = {}, [], {}, {}

    if "generic" in cfg.methods:
        models["generic"] = gen0_loop.model
    variants = [m for m in ("proposed", "proposed_nofilter") if m in cfg.methods]
    for method in variants:
        # common random numbers: the filter is the only difference between the two variants
        loop = gen0_loop.clone(f"{name}/{method}", seed_key=f"{name}/adapt")
        for _ in range(1, cfg.generations):
            deployed = loop.deploy(cap_train, frame_prefix=f"{train_group}-g{loop.kb.current_index}-")
            loop.prior_update(deployed, use_filter=(method == "proposed"))
            loop.retrain()
        models[method] = loop.model
        audit.extend({"cell": name, "method": method, **a} for a in loop.checksum_audit)
        ledgers[method] = loop.ledger
        disjoint[method] = sorted(loop.training_prior_ids & test_ids)
    if "supervised" in cfg.methods:
        models["supervised"] = train_supervised(cfg, cap_train, derive_seed(cfg.seed, name, "supervised"))
        disjoint["supervised"] = sorted({p.prior_id for p in world.placements[train_group]} & test_ids)
    disjoint["generic"] = sorted(gen0_loop.training_prior_ids & test_ids)

    records, per_image = [], {}
    for method in cfg.methods:
        agg, imgs = evaluate(models[method], cap_test, d.threshold, d.min_area, method_tag=method, **tags)
        records.append(agg)
        per_image[(name, method)] = imgs
    return records, per_image, audit, ledgers, disjoint


def run_benchmark(cfg, out=None, progress=None):
    """Every style x group assignment; writes metrics.csv, report.md and audits under ``out``."""
    cfg.validate()
    run_id = cfg.hash()
    records, per_image, audit, failures, ledgers, disjoint = [], {}, [], {}, {}, {}
    for style in cfg.styles:
        try:
            world = build_world(cfg, style)
            gen0 = LifelongLoop(cfg, name=f"{simworld.STYLE_CODES[style]}/gen0")
            gen0.run_generation0(world.backgrounds, world.generic)
        except LCDError as exc:
            for a, b in cfg.assignments:
                failures[cell_name(style, b)] = f"{type(exc).__name__}: {exc}"
            continue
        for train_group, test_group in cfg.assignments:
            name = cell_name(style, test_group)
            try:
                recs, imgs, aud, led, dis = run_cell(cfg, world, style, train_group, test_group, gen0, run_id)
            except LCDError as exc:
                log.error("cell %s failed: %s", name, exc)
                failures[name] = f"{type(exc).__name__}: {exc}"
                continue
            records.extend(recs)
            per_image.update(imgs)
            audit.extend(aud)
            ledgers[name] = {m: l for m, l in led.items()}
            disjoint[name] = dis
            if progress:
                progress(name, recs)
    report = make_report(records, per_image, cfg.methods)
    result = BenchmarkResult(records, per_image, report, audit, disjoint, failures, ledgers, run_id)
    if out is not None:
        write_benchmark(out, cfg, result)
    return result


def make_report(records, per_image, methods):
    runs = {m: {} for m in methods}
    for r in records:
        runs[r.method_tag][f"{r.workspace}-{r.group[-1]}"] = r
    macro = {k: evaluator.macro_f(v) for k, v in per_image.items()}
    pairs = []
    if "generic" in runs and "proposed" in runs:
        pairs.append(("generic", "proposed"))
    if "supervised" in runs and "proposed" in runs:
        pairs.append(("supervised", "proposed"))
    if "supervised" in runs and "generic" in runs:
        pairs.append(("supervised", "generic"))
    if "proposed_nofilter" in runs and "proposed" in runs:
        pairs.append(("proposed_nofilter", "proposed"))
    runs = {m: v for m, v in runs.items() if v}
    if len(runs) < 2:
        return None
    return evaluator.compare_report(runs, [p for p in pairs if p[0] in runs and p[1] in runs], macro)


def write_benchmark(out, cfg, result):
    from .config import dump_config
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    evaluator.write_metrics_csv(out / "metrics.csv", result.records)
    if result.report is not None:
        text = result.report.to_markdown("Change detection F-scores")
        if result.failures:
            text += "\n## Missing cells\n\n" + "".join(f"- {k}: {v}\n" for k, v in sorted(result.failures.items()))
        imaging.atomic_write_text(out / "report.md", text)
        evaluator.plot_report(result.report, out / "report_plots")
    imaging.atomic_write_text(out / "config.yaml", dump_config(cfg))
    imaging.atomic_write_text(out / "freeze_audit.json", json.dumps(result.freeze_audit, indent=1, sort_keys=True))
    imaging.atomic_write_text(out / "disjointness.json", json.dumps(result.disjointness, indent=1, sort_keys=True))
    for cell, led in result.ledgers.items():
        for method, ledger in led.items():
            imaging.atomic_write_text(out / "ledgers" / f"{cell}_{method}.jsonl", ledger.to_jsonl())
    manifest = {"config_hash": result.config_hash, "cells": sorted({f"{r.workspace}-{r.group[-1]}" for r in result.records}),
                "failures": result.failures}
    imaging.atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
