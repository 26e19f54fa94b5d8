"""Command-line entry point: ``retina-bench {synth,audit,extract,eval,report}``.

All randomness derives from ``--seed``: fold assignment uses ``seed``,
k-means uses ``seed + 1`` and corpus synthesis uses ``seed + 2``.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .bovw import BovwError, Codebook, CodebookConfig, encode_histogram, kmeans_fit
from .dataset import ManifestError, audit_distribution, load_image, load_manifest
from .deepfeat import (DeepFeatError, FeatureRecord, extract_deep, parse_backend,
                       read_features, write_features)
from .descriptors import (DEFAULT_SURF_THRESHOLD, Channel, DescriptorError, DescriptorSet,
                          detect_surf, extract_all, write_keypoints_csv)
from .evaluation import (BovwPipeline, CvReport, EvalError, PrecomputedPipeline, parse_csv,
                         render_report, run_cv)
from .imageproc import ImageError, preprocess_bovw, preprocess_deep
from .svm import SvmConfig, SvmError
from .synthgen import SynthConfig, generate

log = logging.getLogger("retina_bench")
CACHE_ENV = "RETINA_BENCH_CACHE"
RUNTIME_ERRORS = (ManifestError, ImageError, DescriptorError, BovwError, DeepFeatError,
                  SvmError, EvalError, OSError, ValueError)


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return vals


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals or min(vals) <= 0:
        raise argparse.ArgumentTypeError("values must be positive")
    return vals


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def _folds(text: str) -> int:
    v = int(text)
    if v < 2:
        raise argparse.ArgumentTypeError("need at least 2 folds")
    return v


# ------------------------------------------------------------ feature work


def _bovw_descriptors(path: str, threshold: float) -> DescriptorSet:
    return extract_all(preprocess_bovw(load_image(path)), threshold)


def _deep_vector(args) -> np.ndarray:
    path, spec = args
    return extract_deep(preprocess_deep(load_image(path)), _backend_cached(spec))


_BACKENDS: dict = {}


def _backend_cached(spec: str):
    if spec not in _BACKENDS:
        _BACKENDS[spec] = parse_backend(spec)
    return _BACKENDS[spec]


def _map(fn, items, jobs: int):
    items = list(items)
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))
    return [fn(i) for i in items]


def _cache_dir() -> Path | None:
    d = os.environ.get(CACHE_ENV)
    if not d:
        return None
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _cache_key(manifest_path: Path, *parts) -> str:
    h = hashlib.sha256(Path(manifest_path).read_bytes())
    for p in parts:
        h.update(repr(p).encode())
    return h.hexdigest()[:16]


def _load_descriptor_sets(args, manifest) -> list[DescriptorSet]:
    cache = _cache_dir()
    key = _cache_key(args.manifest, "bovw", args.threshold)
    cached = cache / f"descriptors-{key}.npz" if cache else None
    if cached and cached.exists():
        log.info("descriptor cache hit %s", cached)
        z = np.load(cached)
        bounds = z["bounds"]
        return [DescriptorSet(z["values"][a:b], z["kinds"][a:b], z["channels"][a:b])
                for a, b in zip(bounds[:-1], bounds[1:])]
    paths = [str(manifest.resolve(e)) for e in manifest]
    sets = _map(partial(_bovw_descriptors, threshold=args.threshold), paths, args.jobs)
    if cached:
        bounds = np.cumsum([0] + [len(s) for s in sets])
        joined = DescriptorSet.concat(sets)
        np.savez(cached, values=joined.values, kinds=joined.kinds,
                 channels=joined.channels, bounds=bounds)
    return sets


def _load_deep_features(args, manifest) -> np.ndarray:
    backend = _backend_cached(args.backend)
    cache = _cache_dir()
    key = _cache_key(args.manifest, backend.model_id)
    cached = cache / f"deep-{key}.rfv" if cache else None
    if cached and cached.exists():
        log.info("feature cache hit %s", cached)
        return np.array([r.vector for r in read_features(cached)], dtype=np.float64)
    paths = [(str(manifest.resolve(e)), args.backend) for e in manifest]
    vecs = np.array(_map(_deep_vector, paths, args.jobs))
    # stored features are float32; round here too so cache use never changes results
    vecs = vecs.astype(np.float32).astype(np.float64)
    if cached:
        write_features(cached, [FeatureRecord(e.label, v.astype(np.float32))
                                for e, v in zip(manifest, vecs)])
    return vecs


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = SynthConfig(per_class=args.per_class, size=args.size, seed=args.seed + 2)
    _, manifest = generate(cfg, args.out)
    print(f"wrote {len(manifest)} images and manifest.csv to {args.out}")
    return 0


def cmd_audit(args) -> int:
    dist = audit_distribution(load_manifest(args.manifest))
    print(dist.render())
    return 0


def cmd_extract(args) -> int:
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.pipeline == "deep":
        vecs = _load_deep_features(args, manifest)
    else:
        sets = _load_descriptor_sets(args, manifest)
        pool = np.concatenate([s.values for s in sets])
        cb = kmeans_fit(pool, CodebookConfig(words=args.words, seed=args.seed + 1))
        if args.codebook_out:
            cb.save(args.codebook_out)
        vecs = np.array([encode_histogram(s, cb).values for s in sets])
        if args.keypoints_dir:
            kdir = Path(args.keypoints_dir)
            kdir.mkdir(parents=True, exist_ok=True)
            for e in manifest:
                img = preprocess_bovw(load_image(manifest.resolve(e)))
                for c in Channel:
                    kps = detect_surf(img[:, :, c], args.threshold)
                    write_keypoints_csv(kps, kdir / f"{Path(e.path).stem}_{c.name}.csv")
    write_features(out, [FeatureRecord(e.label, v.astype(np.float32)) for e, v in zip(manifest, vecs)])
    print(f"wrote {len(vecs)} x {vecs.shape[1]} features to {out}")
    return 0


def _write_reports(out_dir: Path, stem: str, reports: list[CvReport]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for r in reports:
        name = f"{r.pipeline}-{r.param}".replace("=", "").replace(":", "_").replace("/", "_")
        (out_dir / f"{name}.md").write_text(render_report([r], "markdown"), encoding="utf-8")
        (out_dir / f"{name}.csv").write_text(render_report([r], "csv"), encoding="utf-8")
    (out_dir / f"{stem}.md").write_text(render_report(reports, "markdown"), encoding="utf-8")
    (out_dir / f"{stem}.csv").write_text(render_report(reports, "csv"), encoding="utf-8")


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    labels = [int(e.label) for e in manifest]
    c_values = args.c_grid or [args.C]
    reports = []
    if args.pipeline == "bovw":
        sets = _load_descriptor_sets(args, manifest)
        for w in args.words:
            for c in c_values:
                pipe = BovwPipeline(sets, CodebookConfig(words=w, seed=args.seed + 1),
                                    SvmConfig(C=c, kernel="linear"))
                param = f"W={w}" if len(c_values) == 1 else f"W={w},C={c:g}"
                log.info("running %s", param)
                reports.append(run_cv(pipe, labels, args.folds, args.seed, "bovw", param, args.jobs))
    else:
        feats = _load_deep_features(args, manifest)
        model_id = _backend_cached(args.backend).model_id
        for c in c_values:
            pipe = PrecomputedPipeline(feats, SvmConfig(C=c, kernel="rbf", gamma=args.gamma))
            param = model_id if len(c_values) == 1 else f"{model_id},C={c:g}"
            reports.append(run_cv(pipe, labels, args.folds, args.seed, "deep", param, args.jobs))
    _write_reports(Path(args.out), args.pipeline, reports)
    print(render_report(reports, "markdown"))
    return 0


def cmd_report(args) -> int:
    reports = []
    for p in args.inputs:
        reports.extend(parse_csv(Path(p).read_text(encoding="utf-8")))
    text = render_report(reports, args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retina-bench",
        description="Bright retinal lesion classification benchmark (BoVW and deep features).")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic three-class corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-class", type=int, default=10, help="images per class (default 10)")
    p.add_argument("--size", type=int, default=224, help="image side in pixels (default 224)")
    p.add_argument("--seed", type=int, default=0, help="base seed; synthesis uses seed+2")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("audit", help="print the class distribution of a manifest")
    p.add_argument("--manifest", required=True, help="CSV with header path,label,source")
    p.set_defaults(func=cmd_audit)

    def add_features(p):
        p.add_argument("--manifest", required=True, help="CSV with header path,label,source")
        p.add_argument("--pipeline", choices=("bovw", "deep"), required=True)
        p.add_argument("--backend", default="mock:42:1024",
                       help="deep backend: mock:SEED:DIM or onnx:PATH (default mock:42:1024)")
        p.add_argument("--threshold", type=_positive_float, default=DEFAULT_SURF_THRESHOLD,
                       help=f"SURF det-of-Hessian threshold (default {DEFAULT_SURF_THRESHOLD})")
        p.add_argument("--seed", type=int, default=0,
                       help="base seed: folds use seed, k-means seed+1")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                       help="worker processes (default: logical cores)")

    p = sub.add_parser("extract", help="write an RFV1 feature file")
    add_features(p)
    p.add_argument("--words", type=int, default=200, help="codebook size for bovw (default 200)")
    p.add_argument("--out", required=True, help="output .rfv file")
    p.add_argument("--codebook-out", help="also save the RCB1 codebook here (bovw)")
    p.add_argument("--keypoints-dir", help="dump per-channel SURF keypoint CSVs here (bovw)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="stratified k-fold cross-validation")
    add_features(p)
    p.add_argument("--words", type=_int_list, default=[100, 200, 300, 400, 500],
                   help="comma-separated codebook sizes (default 100,200,300,400,500)")
    p.add_argument("--folds", type=_folds, default=10, help="number of folds (default 10)")
    p.add_argument("--C", type=_positive_float, default=8.0, help="SVM penalty (default 8)")
    p.add_argument("--c-grid", type=_float_list, default=None,
                   help="comma-separated C values to sweep instead of --C (off by default)")
    p.add_argument("--gamma", type=_positive_float, default=None,
                   help="RBF gamma for deep features (default 1/dim)")
    p.add_argument("--out", default="reports", help="report directory (default ./reports)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render combined tables from eval CSV files")
    p.add_argument("inputs", nargs="+", help="CSV files written by eval")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--out", help="write here instead of stdout")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except RUNTIME_ERRORS as exc:
        print(f"retina-bench {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
