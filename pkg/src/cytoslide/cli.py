"""Command-line pipeline: import, register, roi, cellgraph, patchify, split,
train, predict, eval and report.

Each subcommand writes its artifacts plus a ``run_manifest.json`` into its
output directory. Exit status is 0 on success and 1 on any error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import cellgraph, evaluation, inkroi, patchgen, raster, register
from .config import ConfigError, PipelineConfig, load_config
from .pyramid import ImagePyramid, PyramidError, build_pyramid

log = logging.getLogger("cytoslide")


class StageError(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    def __init__(self, command: str, cfg: PipelineConfig, out_dir):
        self.command = command
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.timings: dict[str, float] = {}

    def add_input(self, path) -> None:
        p = Path(path)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            self.inputs[str(f)] = sha256_file(f)

    def add_output(self, path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(f"[{name}] {exc}") from exc
        finally:
            self.timings[name] = round(time.perf_counter() - t0, 6)

    def write(self) -> Path:
        outs = {str(p.relative_to(self.out_dir)): sha256_file(p) for p in sorted(set(self.outputs))}
        doc = {"command": self.command, "config": self.cfg.snapshot(), "inputs": self.inputs,
               "outputs": outs, "timings": self.timings}
        path = self.out_dir / "run_manifest.json"
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path


def verify_manifest(run_dir) -> list[str]:
    """Paths whose recorded digest no longer matches (missing files included)."""
    run_dir = Path(run_dir)
    doc = json.loads((run_dir / "run_manifest.json").read_text(encoding="utf-8"))
    bad = []
    for rel, digest in doc["outputs"].items():
        p = run_dir / rel
        if not p.is_file() or sha256_file(p) != digest:
            bad.append(rel)
    return bad


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _out(out_dir) -> Path:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_pyramid(path) -> ImagePyramid:
    return ImagePyramid.load(path)


def format_homography(H: np.ndarray) -> str:
    return "".join(" ".join(f"{v:.12e}" for v in row) + "\n" for row in H)


def read_homography(path) -> np.ndarray:
    vals = [float(v) for v in Path(path).read_text(encoding="utf-8").split()]
    if len(vals) != 9:
        raise ValueError(f"{path}: expected 9 numbers, got {len(vals)}")
    return np.array(vals).reshape(3, 3)


def rescale_homography(H: np.ndarray, from_level: int, to_level: int, factor: int) -> np.ndarray:
    s = float(factor) ** (from_level - to_level)
    S = np.diag([s, s, 1.0])
    return register.normalize_h(S @ H @ np.linalg.inv(S))


# --- stages -----------------------------------------------------------------

def run_import(raster_path, out_dir, cfg: PipelineConfig, pixel_um: float | None = None) -> Path:
    out = _out(out_dir)
    run = RunManifest("import", cfg, out)
    with run.stage("read"):
        run.add_input(raster_path)
        img = raster.as_image(raster.read_png(raster_path))
    with run.stage("pyramid"):
        pyr = build_pyramid(img, cfg.levels, cfg.factor, pixel_um)
        pyr.save(out)
    run.add_output(out / "meta.txt")
    for k in range(pyr.n_levels):
        run.add_output(out / f"level_{k}.png")
    return run.write()


def run_register(clean_dir, inked_dir, out_dir, cfg: PipelineConfig) -> np.ndarray:
    out = _out(out_dir)
    run = RunManifest("register", cfg, out)
    run.add_input(clean_dir)
    run.add_input(inked_dir)
    level = cfg.register_level
    with run.stage("load"):
        clean = _load_pyramid(clean_dir).level(level)
        inked = _load_pyramid(inked_dir).level(level)
    rcfg = register.RegisterConfig(cfg.fast_threshold, cfg.max_keypoints, cfg.match_ratio,
                                   cfg.inlier_px, cfg.max_iters, cfg.stage_seed("register"))
    with run.stage("register"):
        res = register.register_detailed(clean, inked, rcfg)
    with run.stage("write"):
        hp = run.add_output(out / "homography.txt")
        hp.write_text(format_homography(res.homography), encoding="utf-8")
        mp = run.add_output(out / "matches.csv")
        mp.write_text(res.match_table(), encoding="utf-8")
        h, w = clean.shape[:2]
        pp = run.add_output(out / f"aligned_level{level}.png")
        raster.write_png(pp, register.warp(inked, res.homography, w, h))
    log.info("registered with %d matches, %d inliers", len(res.matches), int(res.inliers.sum()))
    run.write()
    return res.homography


def run_roi(clean_dir, inked_dir, homography_path, out_dir, cfg: PipelineConfig,
            homography_level: int | None = None) -> inkroi.RoiSet:
    out = _out(out_dir)
    run = RunManifest("roi", cfg, out)
    for p in (clean_dir, inked_dir, homography_path):
        run.add_input(p)
    with run.stage("load"):
        clean_pyr = _load_pyramid(clean_dir)
        inked_pyr = _load_pyramid(inked_dir)
        H = read_homography(homography_path)
        lvl = cfg.detect_level
        hl = cfg.register_level if homography_level is None else homography_level
        if hl != lvl:
            H = rescale_homography(H, hl, lvl, clean_pyr.factor)
        clean = clean_pyr.level(lvl)
        inked = inked_pyr.level(lvl)
    icfg = inkroi.InkConfig(min_ink_score=cfg.min_ink_score, min_diff=cfg.min_diff,
                            min_skeleton_px=cfg.min_skeleton_px, margin_px=cfg.margin_px)
    with run.stage("detect"):
        h, w = clean.shape[:2]
        aligned = register.warp(inked, H, w, h)
        # Pixels the warp could not fill are excluded from the clean comparison.
        covered = register.warp(np.full(inked.shape[:2] + (1,), 255, np.uint8), H, w, h)[:, :, 0] > 0
        ink = inkroi.detect_ink_mask(aligned, np.where(covered[:, :, None], clean, aligned), icfg)
        rois = inkroi.extract_roi_boxes(ink, lvl, clean_pyr, icfg, slide_id=Path(clean_dir).name)
    if len(rois) == 0:
        log.warning("no ink ROIs detected")
    with run.stage("crop"):
        crops = inkroi.crop_rois(clean_pyr, rois, cfg.crop_level, cfg.threads)
        mp = run.add_output(out / "rois.jsonl")
        inkroi.write_manifest(mp, rois)
        raster.write_png(run.add_output(out / "ink_mask.png"), ink)
        for roi, img in crops:
            raster.write_png(run.add_output(out / "crops" / f"roi{roi.id}.png"), img)
    run.write()
    return rois


def run_cellgraph(image_path, out_dir, cfg: PipelineConfig) -> list[cellgraph.CellSubgraph]:
    out = _out(out_dir)
    run = RunManifest("cellgraph", cfg, out)
    run.add_input(image_path)
    img = raster.as_image(raster.read_png(image_path))
    with run.stage("quickshift"):
        sp = cellgraph.quickshift(img, cfg.qs_kernel_size, cfg.qs_max_dist, cfg.qs_ratio)
    with run.stage("graph"):
        g = cellgraph.build_region_graph(sp)
        nuclei = cellgraph.nuclei_cut(g, cfg.cut_threshold)
        cells = cellgraph.cell_subgraphs(g, nuclei, cfg.grow_threshold)
    with run.stage("write"):
        cellgraph.write_label_map(run.add_output(out / "superpixels.png"), sp)
        raster.write_png(run.add_output(out / "mean_color.png"), cellgraph.mean_color_image(sp, img))
        raster.write_png(run.add_output(out / "nuclei.png"), nuclei.mask)
        run.add_output(out / "edges.csv").write_text(g.edge_table(), encoding="utf-8")
        doc = [{"nucleus": c.nucleus, "nucleus_nodes": list(nuclei.components[c.nucleus]),
                "members": list(c.members), "area": int(c.mask.sum())} for c in cells]
        run.add_output(out / "cells.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    run.write()
    return cells


def run_patchify(crops_dir, out_dir, cfg: PipelineConfig, masks_dir=None,
                 centroid: bool = False) -> list[patchgen.PatchRecord]:
    out = _out(out_dir)
    run = RunManifest("patchify", cfg, out)
    run.add_input(crops_dir)
    if masks_dir is not None:
        run.add_input(masks_dir)
    crops = sorted(Path(crops_dir).glob("roi*.png"), key=lambda p: int(p.stem[3:]))

    def one(path: Path):
        roi_id = int(path.stem[3:])
        img = raster.as_image(raster.read_png(path))
        mask = None
        if masks_dir is not None and (Path(masks_dir) / path.name).exists():
            mask = np.asarray(raster.read_png(Path(masks_dir) / path.name))
            mask = (mask[:, :, 0] if mask.ndim == 3 else mask) > 0
        if centroid:
            if mask is None:
                return []
            return patchgen.centroid_patches(mask, img, cfg.patch_size, roi_id, cfg.white_cutoff)
        return patchgen.extract_patches(img, mask, roi_id, cfg.patch_size, cfg.stride,
                                        cfg.white_cutoff, cfg.max_background)

    with run.stage("extract"):
        records = [r for batch in _map(one, crops, cfg.threads) for r in batch]
    with run.stage("write"):
        pdir = out / "patches"
        pdir.mkdir(exist_ok=True)
        for r in records:
            raster.write_png(run.add_output(pdir / r.filename), r.image)
        mp = run.add_output(out / "patches.csv")
        mp.write_text(patchgen.dump_patch_manifest(records, prefix="patches/"), encoding="utf-8")
    log.info("%d patches (%d abnormal)", len(records),
             sum(r.label == patchgen.ABNORMAL for r in records))
    run.write()
    return records


def _relative_items(table, source: str, out: Path) -> list[patchgen.SplitItem]:
    base = Path(table).parent
    items = []
    for row in patchgen.read_labelled_table(table):
        ref = row.get("patch_path") or row.get("path")
        if ref is None:
            raise ValueError(f"{table}: needs a patch_path or path column")
        p = Path(ref) if Path(ref).is_absolute() else base / ref
        items.append(patchgen.SplitItem(os.path.relpath(p, out), source, row["label"]))
    return items


def run_split(patch_manifest, out_dir, cfg: PipelineConfig, external=None) -> patchgen.DatasetSplit:
    out = _out(out_dir)
    run = RunManifest("split", cfg, out)
    run.add_input(patch_manifest)
    with run.stage("read"):
        patches = _relative_items(patch_manifest, "patch", out)
        ext = []
        if external is not None:
            run.add_input(external)
            ext = _relative_items(external, "external", out)
    with run.stage("split"):
        if cfg.split_counts == "published":
            counts = patchgen.SplitCounts()
        else:
            n_abn = sum(r.label == patchgen.ABNORMAL for r in patches)
            counts = patchgen.SplitCounts.proportional(
                n_abn, sum(r.label == patchgen.NORMAL for r in ext),
                sum(r.label == patchgen.ABNORMAL for r in ext))
        split = patchgen.balance_and_split(patches, ext, cfg.stage_seed("split"), counts)
    with run.stage("write"):
        for p in patchgen.write_split(out, split):
            run.add_output(p)
        doc = json.dumps(split.counts(), indent=1, sort_keys=True) + "\n"
        run.add_output(out / "counts.json").write_text(doc, encoding="utf-8")
    run.write()
    return split


def _features_for(table, threads: int):
    base = Path(table).parent
    rows = patchgen.read_labelled_table(table)

    def one(row):
        img = raster.read_png(base / row["path"])
        return evaluation.extract_features(img)

    X = np.array(_map(one, rows, threads)).reshape(len(rows), len(evaluation.FEATURE_NAMES))
    y = np.array([row["label"] == patchgen.ABNORMAL for row in rows], dtype=np.float64)
    return rows, X, y


def run_train(split_dir, out_dir, cfg: PipelineConfig) -> evaluation.LogisticModel:
    out = _out(out_dir)
    run = RunManifest("train", cfg, out)
    split_dir = Path(split_dir)
    run.add_input(split_dir / "train.csv")
    run.add_input(split_dir / "validation.csv")
    with run.stage("features"):
        _, X, y = _features_for(split_dir / "train.csv", cfg.threads)
        _, Xv, yv = _features_for(split_dir / "validation.csv", cfg.threads)
    tcfg = evaluation.TrainConfig(cfg.learning_rate, cfg.momentum, cfg.batch_size,
                                  cfg.max_epochs, cfg.stage_seed("train"))
    with run.stage("train"):
        model = evaluation.train_logistic(X, y, Xv, yv, tcfg)
    run.add_output(out / "model.json").write_text(model.to_json(), encoding="utf-8")
    run.write()
    return model


def run_predict(model_path, manifest, out_dir, cfg: PipelineConfig) -> list[evaluation.ScoreRecord]:
    out = _out(out_dir)
    run = RunManifest("predict", cfg, out)
    run.add_input(model_path)
    run.add_input(manifest)
    with run.stage("predict"):
        model = evaluation.LogisticModel.from_json(Path(model_path).read_text(encoding="utf-8"))
        rows, X, _ = _features_for(manifest, cfg.threads)
        scores = np.atleast_1d(evaluation.predict(model, X)) if len(rows) else []
        records = [evaluation.ScoreRecord(row["path"], row["label"], float(s))
                   for row, s in zip(rows, scores)]
    run.add_output(out / "scores.csv").write_text(evaluation.dump_scores(records), encoding="utf-8")
    run.write()
    return records


def run_eval(scores_path, out_dir, cfg: PipelineConfig):
    out = _out(out_dir)
    run = RunManifest("eval", cfg, out)
    run.add_input(scores_path)
    with run.stage("eval"):
        records = evaluation.ingest_scores(scores_path)
        if not records:
            raise ValueError(f"{scores_path}: no score records to evaluate")
        cm, m, curve = evaluation.evaluate(records, cfg.score_threshold)
    run.add_output(out / "report.txt").write_text(evaluation.format_report(cm, m, curve),
                                                  encoding="utf-8")
    if curve is not None:
        run.add_output(out / "roc.csv").write_text(evaluation.roc_table(curve), encoding="utf-8")
    run.write()
    return cm, m, curve


def run_report(run_dir) -> str:
    run_dir = Path(run_dir)
    doc = json.loads((run_dir / "run_manifest.json").read_text(encoding="utf-8"))
    bad = verify_manifest(run_dir)
    lines = [f"command: {doc['command']}", f"outputs: {len(doc['outputs'])}"]
    lines += [f"  {stage}: {secs:.3f}s" for stage, secs in doc["timings"].items()]
    if (run_dir / "report.txt").exists():
        lines.append((run_dir / "report.txt").read_text(encoding="utf-8").split("auc")[0].rstrip())
    lines.append("digests: OK" if not bad else "digests: MISMATCH " + ", ".join(bad))
    if bad:
        raise StageError("\n".join(lines))
    return "\n".join(lines)


# --- argument parsing -------------------------------------------------------

def _config_flags(parser: argparse.ArgumentParser) -> None:
    grp = parser.add_argument_group("config overrides")
    for f in fields(PipelineConfig):
        grp.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, default=None,
                         metavar=f.type.upper())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("-v", "--verbose", action="store_true")
    _config_flags(common)

    ap = argparse.ArgumentParser(prog="cytoslide", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("import", parents=[common], help="build a pyramid from a lossless raster")
    p.add_argument("raster")
    p.add_argument("out")
    p.add_argument("--pixel-um", type=float, default=None)

    p = sub.add_parser("register", parents=[common], help="align inked pyramid to clean pyramid")
    p.add_argument("clean")
    p.add_argument("inked")
    p.add_argument("out")

    p = sub.add_parser("roi", parents=[common], help="detect ink ROIs and crop the clean slide")
    p.add_argument("clean")
    p.add_argument("inked")
    p.add_argument("homography")
    p.add_argument("out")
    p.add_argument("--homography-level", type=int, default=None,
                   help="level the homography was estimated at (default: register_level)")

    p = sub.add_parser("cellgraph", parents=[common], help="graph-based cell detection on a crop")
    p.add_argument("image")
    p.add_argument("out")

    p = sub.add_parser("patchify", parents=[common], help="sliding-window labelled patches")
    p.add_argument("crops")
    p.add_argument("out")
    p.add_argument("--masks", default=None, help="directory of abnormal masks named like the crops")
    p.add_argument("--centroid", action="store_true", help="one patch per abnormal mask object")

    p = sub.add_parser("split", parents=[common], help="balanced train/validation/test split")
    p.add_argument("manifest")
    p.add_argument("out")
    p.add_argument("--external", default=None, help="CSV with path,label of external single-cell images")

    p = sub.add_parser("train", parents=[common], help="train the logistic baseline")
    p.add_argument("split_dir")
    p.add_argument("out")

    p = sub.add_parser("predict", parents=[common], help="score a manifest with a trained model")
    p.add_argument("model")
    p.add_argument("manifest")
    p.add_argument("out")

    p = sub.add_parser("eval", parents=[common], help="metrics report from a scores file")
    p.add_argument("scores")
    p.add_argument("out")

    p = sub.add_parser("report", parents=[common], help="summarize and verify a run directory")
    p.add_argument("run_dir")
    return ap


def _config_from_args(args) -> PipelineConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config_from_args(args)
        cmd = args.command
        if cmd == "import":
            run_import(args.raster, args.out, cfg, args.pixel_um)
        elif cmd == "register":
            run_register(args.clean, args.inked, args.out, cfg)
        elif cmd == "roi":
            run_roi(args.clean, args.inked, args.homography, args.out, cfg, args.homography_level)
        elif cmd == "cellgraph":
            run_cellgraph(args.image, args.out, cfg)
        elif cmd == "patchify":
            run_patchify(args.crops, args.out, cfg, args.masks, args.centroid)
        elif cmd == "split":
            run_split(args.manifest, args.out, cfg, args.external)
        elif cmd == "train":
            run_train(args.split_dir, args.out, cfg)
        elif cmd == "predict":
            run_predict(args.model, args.manifest, args.out, cfg)
        elif cmd == "eval":
            run_eval(args.scores, args.out, cfg)
        elif cmd == "report":
            print(run_report(args.run_dir))
    except (StageError, ConfigError, PyramidError, ValueError, OSError,
            register.RegistrationError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
