"""Command-line entry point: ``ldanon {anonymize,build-pool,extract,evaluate,report}``.

Outputs land under ``--out``: ``images/``, ``manifest.json`` and
``reports/``. All randomness flows from ``--seed``. The annotation cache
directory may also be set through ``LDANON_CACHE_DIR``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import binfmt
from .annotators import AnnotationCache, extract_controls
from .attributes import ToyFaceDetector, ToyFaceEmbedder, detect_faces, write_faces_jsonl
from .embeddings import EmbeddingSet, load_embeddings
from .errors import AnonError, ConfigError, UndefinedMetricError
from .evaluation import (
    ReIDReport,
    ToyActivationModel,
    ToyImageEmbedder,
    dataset_dna_report,
    downstream_auc,
    embedding_protocol,
    face_level_protocol,
    fid,
    image_level_protocol,
    quality_table,
    reid_table,
    visual_dna_images,
)
from .identity_pool import build_pool, load_pool, save_pool
from .pipeline import (
    PipelineConfig,
    config_from_mapping,
    dump_config,
    list_inputs,
    load_config,
    read_image,
    run_batch,
    toy_adapters,
)

log = logging.getLogger("ldanon")

EXIT_OK, EXIT_FAILURES, EXIT_USAGE = 0, 1, 2
SCHEMA_PATH = Path(__file__).with_name("config.schema.yaml")


class UsageError(Exception):
    pass


def _cache(args):
    root = args.cache_dir or os.environ.get("LDANON_CACHE_DIR")
    return AnnotationCache(root) if root else None


def _config_from_args(args) -> PipelineConfig:
    data = {}
    if args.config:
        cfg = load_config(args.config)
        data = cfg.to_dict()
        data.pop("variant")
        variant = args.variant or cfg.variant
        if args.variant and args.variant != cfg.variant:
            # switching variant resets the variant-specific defaults
            for key in ("steps", "noise_strength", "a_s"):
                data.pop(key)
    else:
        variant = args.variant or "base"
    overrides = {
        "a_s": args.a_s, "omega": args.omega, "steps": args.steps, "noise_strength": args.noise,
        "resolution": args.resolution, "seed": args.seed, "pool_path": args.pool,
        "workers": args.workers, "failure_policy": args.failure_policy,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    cache = args.cache_dir or os.environ.get("LDANON_CACHE_DIR")
    if cache:
        data["cache_dir"] = str(cache)
    data["variant"] = variant
    return config_from_mapping(data)


def cmd_anonymize(args) -> int:
    if args.print_schema:
        print(SCHEMA_PATH.read_text(), end="")
        return EXIT_OK
    if not (args.inp and args.out):
        print("error: anonymize needs --in and --out", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = _config_from_args(args)
    except (ConfigError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    src = Path(args.inp)
    if not src.exists():
        print(f"error: input {src} does not exist", file=sys.stderr)
        return EXIT_USAGE
    if args.dry_run:
        n = len(list_inputs(src))
        print(f"config ok (hash {config.hash()[:12]}); {n} input(s) would be processed")
        print(dump_config(config), end="")
        return EXIT_OK
    pool = None
    if config.variant == "light":
        if not config.pool_path:
            print("error: the light variant needs --pool or pool_path in the config", file=sys.stderr)
            return EXIT_USAGE
        try:
            pool = load_pool(config.pool_path)
        except (OSError, ValueError) as exc:
            print(f"error: cannot load pool: {exc}", file=sys.stderr)
            return EXIT_USAGE
    cache = AnnotationCache(config.cache_dir) if config.cache_dir else None
    adapters = toy_adapters(config.adapter_seed, pool=pool, cache=cache)
    manifest = run_batch(src, config, adapters, args.out)
    s = manifest.summary
    mean_t = (sum(manifest.timings.values()) / len(manifest.timings)) if manifest.timings else 0.0
    print(f"processed {s['ok']} image(s), failed {s['failed']}, skipped {s['not_run']}; "
          f"mean {mean_t:.3f} s/image; manifest at {Path(args.out) / 'manifest.json'}")
    return EXIT_OK if s["failed"] == 0 and s["not_run"] == 0 else EXIT_FAILURES


def _read_embedding_source(path: Path) -> EmbeddingSet:
    """Embedding container, JSON-lines ``{"id", "embedding"}`` or an image directory."""
    if path.is_dir():
        detector, embedder = ToyFaceDetector(), ToyFaceEmbedder()
        ids, vecs = [], []
        for p in list_inputs(path):
            img = read_image(p)
            faces = detect_faces(img, detector)
            if not faces:
                raise UsageError(f"record {p.name}: no face found")
            ids.append(p.stem)
            vecs.append(faces[0].identity_embedding)
        if not ids:
            raise UsageError(f"no images in {path}")
        return EmbeddingSet(tuple(ids), np.stack(vecs), "toy-face")
    if path.suffix == ".jsonl":
        ids, vecs = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    rid = str(rec["id"])
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise UsageError(f"record at line {lineno}: unreadable ({exc})") from exc
                try:
                    vec = np.asarray(rec["embedding"], dtype=np.float64)
                    if vec.ndim != 1 or vec.size == 0 or not np.all(np.isfinite(vec)):
                        raise ValueError("embedding must be a non-empty finite vector")
                except (KeyError, TypeError, ValueError) as exc:
                    raise UsageError(f"record {rid}: bad embedding ({exc})") from exc
                if vecs and vec.shape != vecs[0].shape:
                    raise UsageError(f"record {rid}: dimension {vec.size} != {vecs[0].size}")
                if rid in ids:
                    raise UsageError(f"record {rid}: duplicate id")
                ids.append(rid)
                vecs.append(vec)
        if not ids:
            raise UsageError(f"no records in {path}")
        return EmbeddingSet(tuple(ids), np.stack(vecs), "jsonl")
    emb, _ = load_embeddings(path)
    return emb


def cmd_build_pool(args) -> int:
    src = Path(args.source)
    if not src.exists():
        print(f"error: source {src} does not exist", file=sys.stderr)
        return EXIT_USAGE
    try:
        emb = _read_embedding_source(src)
        pool = build_pool(emb, {"source": src.name})
    except (UsageError, AnonError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    save_pool(args.out, pool)
    print(f"pool N={len(pool)} dimension={pool.dim} -> {args.out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    src = Path(args.inp)
    if not src.exists():
        print(f"error: input {src} does not exist", file=sys.stderr)
        return EXIT_USAGE
    root = args.cache_dir or os.environ.get("LDANON_CACHE_DIR") or str(Path(args.out) / "cache")
    cache = AnnotationCache(root)
    adapters = toy_adapters(args.seed)
    faces_out = []
    failures = 0
    for p in list_inputs(src):
        try:
            img = read_image(p)
            extract_controls(img, adapters.extractors, cache=cache)
            faces_out.extend((p.stem, f) for f in detect_faces(img, adapters.detector))
        except Exception as exc:
            failures += 1
            print(f"warning: {p.name}: {exc}", file=sys.stderr)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    write_faces_jsonl(Path(args.out) / "faces.jsonl", faces_out)
    print(f"cached controls under {root}; {len(faces_out)} face record(s) in {Path(args.out) / 'faces.jsonl'}")
    return EXIT_OK if failures == 0 else EXIT_FAILURES


def _load_side(path: Path) -> dict:
    """Either an image directory (id = file stem) or an embedding file."""
    if path.is_dir():
        return {p.stem: read_image(p) for p in list_inputs(path)}
    emb, _ = load_embeddings(path)
    return {"__embeddings__": emb}


def _pairing(real: dict, anon: dict, policy: str):
    unpaired = sorted(set(real) ^ set(anon))
    if unpaired and policy == "error":
        raise UsageError(f"unpaired ids: {unpaired}")
    if unpaired:
        print(f"warning: excluding unpaired ids: {unpaired}", file=sys.stderr)
    return unpaired


def _write_report(out: Path | None, name: str, doc: dict):
    if out is None:
        return
    path = Path(out) / "reports" / f"{name}.json"
    binfmt.atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def cmd_evaluate(args) -> int:
    try:
        real = _load_side(Path(args.real))
        anon = _load_side(Path(args.anon))
        if args.metric == "reid":
            return _eval_reid(args, real, anon)
        if args.metric == "fid":
            value = fid(_features(real), _features(anon))
            print(f"FID {value:.6f}")
            _write_report(args.out, "fid", {"metric": "fid", "value": value})
            return EXIT_OK
        if args.metric == "dna":
            _pairing(real, anon, args.unpaired)
            model = ToyActivationModel(args.seed)
            keys = sorted(set(real) & set(anon))
            dists = [visual_dna_images(real[k], anon[k], model) for k in keys]
            mean, std = dataset_dna_report(dists)
            print(f"Visual DNA EMD {mean:.6f} ± {std:.6f} over {len(keys)} pair(s)")
            _write_report(args.out, "dna", {"metric": "visual_dna", "mean": mean, "std": std,
                                            "pairs": dict(zip(keys, dists))})
            return EXIT_OK
    except (UsageError, AnonError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    raise AssertionError(args.metric)


def _features(side: dict) -> np.ndarray:
    if "__embeddings__" in side:
        return side["__embeddings__"].vectors
    embedder = ToyImageEmbedder()
    return np.stack([embedder(side[k]) for k in sorted(side)])


def _eval_reid(args, real, anon) -> int:
    reports = {}
    if "__embeddings__" in real:
        rep = embedding_protocol(real["__embeddings__"], anon["__embeddings__"], "embedding")
        if rep.excluded and args.unpaired == "error":
            raise UsageError(f"unpaired ids: {rep.excluded}")
        reports["embedding"] = rep
    else:
        _pairing(real, anon, args.unpaired)
        if args.protocol in ("face", "both"):
            try:
                reports["face_level"] = face_level_protocol(real, anon, ToyFaceDetector(args.seed),
                                                            ToyFaceEmbedder(args.seed))
            except UndefinedMetricError as exc:
                if args.protocol == "face":
                    raise
                print(f"warning: face-level protocol skipped: {exc}", file=sys.stderr)
        if args.protocol in ("image", "both"):
            reports["image_level"] = image_level_protocol(real, anon, ToyImageEmbedder(args.seed))
    for name, rep in reports.items():
        _write_report(args.out, f"reid_{name}", rep.to_dict())
    print(reid_table({args.method: reports}, "reid@1"))
    for name, rep in reports.items():
        at = ", ".join(f"Re-ID@{k}={v:.4f}" for k, v in rep.reid_at.items())
        print(f"{name}: {at}, mAP={rep.map_score:.4f}, queries={rep.n_queries}, excluded={rep.n_excluded}")
    return EXIT_OK


def cmd_report(args) -> int:
    rdir = Path(args.reports)
    if not rdir.is_dir():
        print(f"error: {rdir} is not a directory", file=sys.stderr)
        return EXIT_USAGE
    reid, quality = {}, {}
    for path in sorted(rdir.glob("*.json")):
        doc = json.loads(path.read_text())
        if "reid_at" in doc:
            doc["reid_at"] = {int(k): v for k, v in doc["reid_at"].items()}
            rep = ReIDReport(**doc)
            reid[rep.protocol] = rep
        elif doc.get("metric") == "fid":
            quality.setdefault(args.method, {})["fid"] = doc["value"]
        elif doc.get("metric") == "visual_dna":
            quality.setdefault(args.method, {})["dna"] = (doc["mean"], doc["std"])
    if reid:
        for metric in ("reid@1", "reid@5", "reid@10", "map"):
            print(f"[{metric}]")
            print(reid_table({args.method: reid}, metric))
    if quality:
        print(quality_table(quality))
    if not reid and not quality:
        print("no reports found", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def cmd_auc(args) -> int:
    scores, labels = [], []
    with open(args.csv, newline="") as fh:
        for row in csv.DictReader(fh):
            scores.append(float(row["score"]))
            labels.append(int(row["label"]))
    try:
        value = downstream_auc(scores, labels)
    except AnonError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"AUC {value:.6f}")
    _write_report(args.out, "auc", {"metric": "auc", "value": value, "n": len(scores)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ldanon", description="Latent-diffusion image anonymization toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("anonymize", help="anonymize a directory of images",
                       epilog="Flags override config-file values. Print the documented config schema "
                              "with --print-schema.")
    a.add_argument("--config", help="YAML config file (see --print-schema)")
    a.add_argument("--print-schema", action="store_true", help="print the config schema and exit")
    a.add_argument("--variant", choices=["base", "light"])
    a.add_argument("--as", dest="a_s", type=float, help="anonymization scale")
    a.add_argument("--omega", type=float, help="guidance scale")
    a.add_argument("--steps", type=int)
    a.add_argument("--noise", type=float, help="img2img noise strength in (0, 1]")
    a.add_argument("--resolution", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--pool", help="identity pool file (light variant)")
    a.add_argument("--workers", type=int)
    a.add_argument("--failure-policy", choices=["skip", "abort"])
    a.add_argument("--cache-dir", help="annotation cache directory (env LDANON_CACHE_DIR)")
    a.add_argument("--in", dest="inp")
    a.add_argument("--out")
    a.add_argument("--dry-run", action="store_true", help="validate the config and stop")
    a.set_defaults(func=cmd_anonymize)

    b = sub.add_parser("build-pool", help="build an identity pool file")
    b.add_argument("--source", required=True, help="embedding file, .jsonl records or image directory")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_pool)

    x = sub.add_parser("extract", help="precompute control maps and face records")
    x.add_argument("--in", dest="inp", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--cache-dir")
    x.add_argument("--seed", type=int, default=0)
    x.set_defaults(func=cmd_extract)

    e = sub.add_parser("evaluate", help="re-identification, FID, Visual DNA or AUC")
    e.add_argument("metric", choices=["reid", "fid", "dna", "auc"])
    e.add_argument("--real", help="real image directory or embedding file")
    e.add_argument("--anon", help="anonymized image directory or embedding file")
    e.add_argument("--csv", help="score,label CSV for auc")
    e.add_argument("--protocol", choices=["face", "image", "both"], default="both")
    e.add_argument("--unpaired", choices=["exclude", "error"], default="exclude")
    e.add_argument("--method", default="anonymized")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="write JSON reports to OUT/reports/")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="print tables from saved JSON reports")
    r.add_argument("reports", help="directory of report JSON files")
    r.add_argument("--method", default="anonymized")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "evaluate":
        if args.metric == "auc":
            if not args.csv:
                parser.error("evaluate auc needs --csv")
            return cmd_auc(args)
        if not (args.real and args.anon):
            parser.error(f"evaluate {args.metric} needs --real and --anon")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
