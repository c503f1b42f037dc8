"""Stage functions that read and write a run directory.

Layout: ``captions/`` (schema, annotations, caption corpus, vocabulary),
``images/`` (rendered blobs and split manifests), ``ckpt/``, ``reports/``,
``logs/``. Every artifact carries ``{config_hash, seed, stage}``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from vtbr.attributes import AttributeRecord, AttributeSchema, attribute_frequencies, load_annotations, save_annotations
from vtbr.captions import (
    CaptionTemplate,
    RSConfig,
    Vocabulary,
    build_vocabulary,
    encode_caption,
    generate_corpus,
    load_corpus,
    rs_select,
    save_corpus,
)
from vtbr.checkpoint import load_checkpoint, save_checkpoint, subset_state
from vtbr.config import lineage
from vtbr.errors import ConfigError
from vtbr.evaluation import RetrievalSet, cross_domain_eval, evaluate, save_saliency, saliency_map
from vtbr.finetune import FinetuneConfig, ReIDModel, fresh_backbone, run_finetune
from vtbr.model import Backbone, ModelConfig, VTBRModel
from vtbr.pretrain import CaptionPairs, PretrainConfig, run_pretraining, split_holdout
from vtbr.synth import (
    DEFAULT_DOMAINS,
    TOY_TEMPLATES,
    DomainSpec,
    RenderConfig,
    SplitManifest,
    generate_records,
    load_images,
    make_split,
    render_entries,
    save_images,
    toy_schema,
)

log = logging.getLogger(__name__)

SUBDIRS = ("captions", "images", "ckpt", "reports", "logs")


def prepare_run_dir(out: str | Path) -> Path:
    out = Path(out)
    for sub in SUBDIRS:
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, rows: Sequence[dict], meta: dict):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def get_schema(cfg: dict) -> AttributeSchema:
    s = cfg.get("schema")
    if s is None:
        return toy_schema()
    if isinstance(s, str):
        return AttributeSchema.load(s)
    return AttributeSchema.from_dict(s)


def get_templates(cfg: dict, schema: AttributeSchema) -> list[CaptionTemplate]:
    texts = cfg.get("templates") or list(TOY_TEMPLATES)
    templates = [CaptionTemplate.parse(t) for t in texts]
    for t in templates:
        t.check_schema(schema)
    return templates


def get_domains(cfg: dict) -> list[DomainSpec]:
    spec = cfg["world"].get("domains")
    if spec is None:
        return list(DEFAULT_DOMAINS)
    return [DomainSpec(d["name"], {k: tuple(v) for k, v in d.get("scene_values", {}).items()},
                       int(d.get("identity_offset", 0))) for d in spec]


def _domain(cfg: dict, name: str) -> DomainSpec:
    for d in get_domains(cfg):
        if d.name == name:
            return d
    raise ConfigError("world.domains", f"no domain named {name!r}")


def model_config(cfg: dict, vocab_size: int, max_caption: int) -> ModelConfig:
    render = RenderConfig(**cfg["render"])
    fields = dict(cfg["model"])
    fields.setdefault("max_len", max_caption + 2)
    mc = ModelConfig(vocab_size=vocab_size, image_height=render.height, image_width=render.width, **fields)
    if mc.max_len < max_caption:
        raise ConfigError("model.max_len", f"{mc.max_len} is shorter than the longest caption ({max_caption})")
    return mc


def stage_gen_captions(cfg: dict, out: Path) -> dict:
    """Sample records for every domain, caption the source domain, apply RS, build the vocabulary."""
    out = prepare_run_dir(out)
    meta = lineage(cfg, "gen-captions")
    schema = get_schema(cfg)
    templates = get_templates(cfg, schema)
    w = cfg["world"]
    _write_json(out / "captions" / "schema.json", schema.to_dict())
    for dom in get_domains(cfg):
        recs = generate_records(schema, dom, int(w["identities"]), int(w["cameras"]), cfg["seed"])
        save_annotations(recs, out / "captions" / f"annotations_{dom.name}.jsonl", meta)

    source = load_annotations(out / "captions" / f"annotations_{w['source_domain']}.jsonl", schema)
    rs = RSConfig(float(cfg["rs"]["alpha"]))
    freq = attribute_frequencies(source, schema, cfg["rs"].get("scene_unit", "observation"))
    captions = generate_corpus(source, templates, freq, rs)
    kept = rs_select(source, captions) if cfg["rs"].get("dedup", True) else list(range(len(source)))
    save_corpus(captions, out / "captions" / "corpus_full.jsonl", meta)
    save_corpus([captions[i] for i in kept], out / "captions" / "corpus.jsonl", meta)
    vocab = build_vocabulary([captions[i] for i in kept], int(cfg["rs"].get("min_freq", 1)))
    vocab.save(out / "captions" / "vocab.json")
    _write_json(out / "captions" / "frequencies.json", {
        "meta": meta,
        "id_count": freq.id_count,
        "probabilities": {f"{c}={v}": p for (c, v), p in sorted(freq.probabilities.items())},
    })
    summary = {"records": len(source), "kept_after_rs": len(kept), "vocab_size": len(vocab)}
    log.info("gen-captions: %s", summary)
    return summary


@dataclass
class DomainData:
    name: str
    records: list[AttributeRecord]
    split: SplitManifest
    train_images: np.ndarray
    query_images: np.ndarray
    gallery_images: np.ndarray

    def labels(self, entries) -> np.ndarray:
        return np.array([self.records[i].identity_id for i, _ in entries])

    def cams(self, entries) -> np.ndarray:
        return np.array([self.records[i].camera_id for i, _ in entries])

    @property
    def train_labels(self) -> np.ndarray:
        return self.labels(self.split.train)

    def retrieval_set(self) -> RetrievalSet:
        s = self.split
        return RetrievalSet(self.query_images, self.labels(s.query), self.cams(s.query),
                            self.gallery_images, self.labels(s.gallery), self.cams(s.gallery), self.name)


def stage_synth_data(cfg: dict, out: Path) -> dict:
    """Split each domain's identities and render every split entry."""
    out = prepare_run_dir(out)
    meta = lineage(cfg, "synth-data")
    schema = AttributeSchema.load(out / "captions" / "schema.json")
    render = RenderConfig(**cfg["render"])
    w = cfg["world"]
    summary = {}
    for dom in get_domains(cfg):
        recs = load_annotations(out / "captions" / f"annotations_{dom.name}.jsonl", schema)
        split = make_split(recs, float(w["train_ratio"]), cfg["seed"], int(w["images_per_record"]))
        entries = list(split.train) + list(split.query) + list(split.gallery)
        images = render_entries(recs, entries, render, schema)
        save_images(out / "images" / f"{dom.name}.f32", images, meta)
        _write_json(out / "images" / f"manifest_{dom.name}.json", {
            "meta": meta,
            "domain": dom.name,
            "schema": "../captions/schema.json",
            "annotations": f"../captions/annotations_{dom.name}.jsonl",
            "images": f"{dom.name}.f32",
            "render": render.to_dict(),
            "split": split.to_dict(),
        })
        summary[dom.name] = {"train": len(split.train), "query": len(split.query), "gallery": len(split.gallery)}
    log.info("synth-data: %s", summary)
    return summary


def load_domain(manifest_path: str | Path) -> DomainData:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    m = json.loads(manifest_path.read_text(encoding="utf-8"))
    schema = AttributeSchema.load(base / m["schema"])
    records = load_annotations(base / m["annotations"], schema)
    split = SplitManifest.from_dict(m["split"])
    images, _ = load_images(base / m["images"])
    a, b = len(split.train), len(split.train) + len(split.query)
    if len(images) != b + len(split.gallery):
        raise ConfigError("manifest", f"{manifest_path}: image count does not match the split")
    return DomainData(m["domain"], records, split, images[:a], images[a:b], images[b:])


def pretraining_pairs(cfg: dict, out: Path, data: DomainData, vocab: Vocabulary) -> CaptionPairs:
    """Train-split images whose record survived RS, paired with that record's caption."""
    corpus = {(c.source_identity, c.camera_id): c for c in load_corpus(out / "captions" / "corpus.jsonl")}
    idx, ids = [], []
    for n, (ri, _) in enumerate(data.split.train):
        r = data.records[ri]
        cap = corpus.get((r.identity_id, r.camera_id))
        if cap is not None:
            idx.append(n)
            ids.append(encode_caption(cap, vocab))
    return CaptionPairs(data.train_images[idx], ids)


def stage_pretrain(cfg: dict, out: Path) -> dict:
    out = prepare_run_dir(out)
    meta = lineage(cfg, "pretrain")
    vocab = Vocabulary.load(out / "captions" / "vocab.json")
    src = load_domain(out / "images" / f"manifest_{cfg['world']['source_domain']}.json")
    pairs = pretraining_pairs(cfg, out, src, vocab)
    pcfg = PretrainConfig(**{"seed": cfg["seed"], **cfg["pretrain"]})
    train, hold = split_holdout(pairs, pcfg.holdout_fraction, pcfg.seed)
    mcfg = model_config(cfg, len(vocab), max(len(t) for t in pairs.token_ids))
    model, metrics = run_pretraining(mcfg, pcfg, train, hold)
    _write_jsonl(out / "logs" / "pretrain.jsonl", metrics, meta)
    save_checkpoint(model.state_dict(), {**meta, "model": mcfg.to_dict(), "pretrain": pcfg.to_dict(),
                                         "step": pcfg.total_steps, "kind": "vtbr"},
                    out / "ckpt" / "pretrain.ckpt")
    final = metrics[-1] if metrics else {}
    summary = {"pairs": len(train), "holdout": len(hold), "vocab_size": len(vocab),
               "ppl_holdout": final.get("ppl_holdout")}
    log.info("pretrain: %s", summary)
    return summary


def load_vtbr(path: str | Path) -> tuple[VTBRModel, dict]:
    state, meta = load_checkpoint(path)
    model = VTBRModel(ModelConfig(**meta["model"]))
    model.load_state_dict(state)
    return model, meta


def backbone_from_checkpoint(path: str | Path) -> tuple[Backbone, dict]:
    state, meta = load_checkpoint(path)
    mcfg = ModelConfig(**meta["model"])
    backbone = Backbone(mcfg)
    prefix = "visual" if meta.get("kind") == "vtbr" else "backbone"
    backbone.load_state_dict(subset_state(state, prefix))
    return backbone, meta


def load_reid(path: str | Path) -> tuple[ReIDModel, dict]:
    state, meta = load_checkpoint(path)
    mcfg = ModelConfig(**meta["model"])
    model = ReIDModel(Backbone(mcfg), int(meta["num_classes"]))
    model.load_state_dict(state)
    return model, meta


def stage_finetune(cfg: dict, out: Path, init: str | None = None, data: str | Path | None = None,
                   tag: str = "finetune") -> dict:
    """Fine-tune from ``ckpt/pretrain.ckpt`` (init='checkpoint') or from scratch ('random')."""
    out = prepare_run_dir(out)
    meta = lineage(cfg, "finetune")
    fields = {"seed": cfg["seed"], **cfg["finetune"]}
    if init is not None:
        fields["init"] = {"checkpoint": "vtbr-checkpoint", "random": "random"}.get(init, "external")
    fcfg = FinetuneConfig(**fields)
    manifest = Path(data) if data else out / "images" / f"manifest_{cfg['world']['source_domain']}.json"
    dom = load_domain(manifest)
    if fcfg.init == "random":
        pre_meta = load_checkpoint(out / "ckpt" / "pretrain.ckpt")[1] if (out / "ckpt" / "pretrain.ckpt").exists() else None
        if pre_meta is not None:
            mcfg = ModelConfig(**pre_meta["model"])
        else:
            mcfg = model_config(cfg, 4, 30)
        backbone = fresh_backbone(mcfg, fcfg.seed)
    else:
        src = out / "ckpt" / "pretrain.ckpt" if fcfg.init == "vtbr-checkpoint" else Path(init)
        backbone, pre_meta = backbone_from_checkpoint(src)
        mcfg = ModelConfig(**pre_meta["model"])
    model, metrics = run_finetune(fcfg, dom.train_images, dom.train_labels, backbone)
    _write_jsonl(out / "logs" / f"{tag}.jsonl", metrics, meta)
    save_checkpoint(model.state_dict(), {**meta, "model": mcfg.to_dict(), "finetune": fcfg.to_dict(),
                                         "num_classes": model.classifier.out_features,
                                         "step": fcfg.steps, "kind": "reid", "init": fcfg.init},
                    out / "ckpt" / f"{tag}.ckpt")
    return {"steps": fcfg.steps, "init": fcfg.init, "final_loss": metrics[-1]["loss"] if metrics else None}


def stage_eval(cfg: dict, out: Path, model_path: str | Path | None = None, data: str | Path | None = None,
               cross_domain: str | Path | None = None, tag: str = "eval") -> dict:
    out = prepare_run_dir(out)
    meta = lineage(cfg, "eval")
    w = cfg["world"]
    model, mmeta = load_reid(model_path or out / "ckpt" / "finetune.ckpt")
    ranks = tuple(cfg["eval"].get("ranks", (1, 5, 10)))
    src = load_domain(data or out / "images" / f"manifest_{w['source_domain']}.json")
    proto = {"train_domain": src.name, "init": mmeta.get("init")}
    reports = {"in_domain": evaluate(model.backbone, src.retrieval_set(), proto, ranks)}
    tgt_path = cross_domain
    if tgt_path is None and data is None:
        cand = out / "images" / f"manifest_{w['target_domain']}.json"
        tgt_path = cand if cand.exists() else None
    if tgt_path is not None:
        tgt = load_domain(tgt_path)
        reports["cross_domain"] = cross_domain_eval(model.backbone, tgt.retrieval_set(), src.name,
                                                    {"init": mmeta.get("init")}, ranks)
    summary = {}
    for kind, rep in reports.items():
        rep.meta = meta
        rep.save(out / "reports" / f"{tag}_{kind}.json")
        summary[kind] = {"mAP": rep.mAP, "cmc": rep.cmc}
    log.info("eval: %s", summary)
    return summary


def stage_saliency(cfg: dict, out: Path, model_path: str | Path | None = None, indices: Sequence[int] | None = None) -> list[dict]:
    """Grad-CAM maps for source-domain gallery images against their own captions."""
    out = prepare_run_dir(out)
    model, _ = load_vtbr(model_path or out / "ckpt" / "pretrain.ckpt")
    vocab = Vocabulary.load(out / "captions" / "vocab.json")
    corpus = {(c.source_identity, c.camera_id): c for c in load_corpus(out / "captions" / "corpus_full.jsonl")}
    dom = load_domain(out / "images" / f"manifest_{cfg['world']['source_domain']}.json")
    if indices is None:
        indices = range(min(int(cfg["eval"].get("saliency_images", 10)), len(dom.split.gallery)))
    sal_dir = out / "reports" / "saliency"
    sal_dir.mkdir(exist_ok=True)
    rows = []
    for i in indices:
        ri, seed = dom.split.gallery[i]
        rec = dom.records[ri]
        cap = corpus[(rec.identity_id, rec.camera_id)]
        heat = saliency_map(model, dom.gallery_images[i], encode_caption(cap, vocab))
        save_saliency(heat, sal_dir / f"gallery_{i:04d}")
        rows.append({"index": i, "id": rec.identity_id, "cam": rec.camera_id, "caption": cap.text})
    _write_json(sal_dir / "index.json", {"meta": lineage(cfg, "saliency"), "maps": rows})
    return rows


def run_pipeline(cfg: dict, out: str | Path) -> dict:
    out = prepare_run_dir(out)
    _write_json(out / "config.json", cfg)
    summary = {}
    for name, fn in (("gen-captions", stage_gen_captions), ("synth-data", stage_synth_data),
                     ("pretrain", stage_pretrain), ("finetune", stage_finetune), ("eval", stage_eval)):
        try:
            summary[name] = fn(cfg, out)
        except Exception as exc:
            raise StageError(name, exc) from exc
    return summary


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {cause}")


def set_determinism(threads: int = 1):
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
