"""Command-line driver: synth -> features -> adapt -> fit -> detect -> eval.

Every command reads one JSON config file (see README for the keys).  Paths
in the config are relative to the config file.  All artifacts embed the
config hash and seed, and rerunning a command with the same inputs rewrites
the same bytes; timestamps only ever reach the log.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from glfm.adaptation import (TrainConfig, TrainingDiverged, load_head, logit_stats,
                             patch_labels, save_head, train_seg_head)
from glfm.bank import build_model, load_model, save_model
from glfm.cloud import read_cloud, remove_dominant_plane, write_cloud
from glfm.detection import detect
from glfm.features import (ExtractorConfig, FeatureError, extract_local_features,
                           load_external_features, save_features)
from glfm.metrics import evaluate, score_distribution_dump
from glfm.rng import SeededRng
from glfm.synthesis import SynthesisConfig, synthesize_anomaly

LOGGER = logging.getLogger("glfm")

CLOUD_EXTS = (".ply", ".xyz", ".txt")
# stream keys for SeededRng.split, one per pipeline stage
KEY_PLANE, KEY_SYNTH, KEY_ADAPT = 11, 12, 13

DEFAULTS = {
    "seed": 0,
    "output_dir": "run",
    "classes": {},
    "extractor": {},
    "external_features": None,
    "synthesis": {},
    "train": {},
    "k": None,
    "coreset_fraction": 0.1,
    "fusion_weight": 0.0,
    "smoothing": "nearest",
    "fpr_limit": 0.3,
    "region_radius": None,
    "remove_plane": False,
    "train_per_class": None,
}


class ConfigError(ValueError):
    pass


class Run:
    """Resolved configuration plus the helpers every command shares."""

    def __init__(self, raw: dict, base: Path):
        unknown = sorted(set(raw) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = copy.deepcopy(DEFAULTS)
        cfg.update(copy.deepcopy(raw))
        self.cfg = cfg
        self.hash = hashlib.sha256(
            json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]
        self.seed = int(cfg["seed"])
        self.rng = SeededRng(self.seed)
        self.base = base
        self.out = self._path(cfg["output_dir"])
        try:
            self.extractor = ExtractorConfig(**cfg["extractor"])
            self.synthesis = SynthesisConfig(**cfg["synthesis"])
            self.train_cfg = TrainConfig(**{**cfg["train"], "seed": self.seed})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config section: {exc}") from exc
        if not cfg["classes"]:
            raise ConfigError("config lists no classes")
        self.classes = sorted(cfg["classes"])
        self.threads = max(1, int(os.environ.get("GLFM_THREADS", os.cpu_count() or 1)))

    @property
    def stamp(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed}

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    def class_dir(self, cls: str, split: str) -> Path:
        entry = self.cfg["classes"][cls]
        if split not in entry:
            raise ConfigError(f"class {cls!r} has no {split!r} directory")
        d = self._path(entry[split])
        if not d.is_dir():
            raise ConfigError(f"class {cls!r}: {split} directory {d} does not exist")
        return d

    def samples(self, split: str) -> list[tuple[str, str, Path]]:
        """(class, sample id, path) for every cloud of ``split``, sorted."""
        out = []
        for cls in self.classes:
            files = sorted(p for p in self.class_dir(cls, split).iterdir()
                           if p.suffix.lower() in CLOUD_EXTS)
            stems = [p.stem for p in files]
            if len(set(stems)) != len(stems):
                raise ConfigError(f"class {cls!r}: duplicate sample ids in {split}")
            if split == "train" and self.cfg["train_per_class"] is not None:
                files = files[:int(self.cfg["train_per_class"])]
            out.extend((cls, p.stem, p) for p in files)
        return out

    def sample_key(self, cls: str, sid: str) -> int:
        return zlib.crc32(f"{cls}/{sid}".encode())

    def load(self, cls: str, sid: str, path: Path):
        try:
            cloud = read_cloud(path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{cls}/{sid}: {exc}") from exc
        if self.cfg["remove_plane"]:
            rng = self.rng.split(KEY_PLANE).split(self.sample_key(cls, sid))
            cloud = remove_dominant_plane(cloud, rng=rng)
        return cloud

    def feature_path(self, split: str, cls: str, sid: str) -> Path:
        if self.extractor.kind == "external":
            if not self.cfg["external_features"]:
                raise ConfigError("extractor kind 'external' needs external_features")
            return self._path(self.cfg["external_features"]) / split / cls / f"{sid}.gft"
        return self.out / "features" / split / cls / f"{sid}.gft"

    def features(self, split: str, cls: str, sid: str, cloud=None, source=None):
        """Stored features if present, else computed from ``cloud`` (or the
        cloud at ``source``) with the configured extractor."""
        path = self.feature_path(split, cls, sid)
        if path.exists():
            return load_external_features(path, self.extractor.extractor_id)
        if self.extractor.kind == "external":
            raise ConfigError(f"{split}/{cls}/{sid}: missing feature file {path}")
        if cloud is None and source is not None:
            cloud = self.load(cls, sid, source)
        if cloud is None:
            raise ConfigError(f"{split}/{cls}/{sid}: no features; run the features command")
        try:
            return extract_local_features(cloud, self.extractor)
        except FeatureError as exc:
            raise ConfigError(f"{split}/{cls}/{sid}: {exc}") from exc

    def pmap(self, fn, items):
        items = list(items)
        if self.threads == 1 or len(items) < 2:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(self.threads) as pool:
            return list(pool.map(fn, items))

    def write_json(self, path: Path, payload: dict) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        body = {**payload, **self.stamp}
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")

    def csv_writer(self, fh):
        fh.write(f"# config_hash={self.hash} seed={self.seed}\n")
        return csv.writer(fh, lineterminator="\n")

    def comments(self) -> tuple:
        return (f"config_hash {self.hash}", f"seed {self.seed}")


def load_config(path, overrides: dict | None = None) -> Run:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    return Run(raw, path.resolve().parent)


def _log_speed(what: str, n: int, seconds: float) -> None:
    rate = n / seconds if seconds > 0 else float("inf")
    LOGGER.info("%s: %d samples in %.2f s (%.3f s/sample, %.1f samples/s)",
                what, n, seconds, seconds / max(n, 1), rate)


def cmd_synth(run: Run) -> dict:
    samples = run.samples("train")
    root = run.out / "synth"
    stream = run.rng.split(KEY_SYNTH)

    def work(item):
        cls, sid, path = item
        cloud = run.load(cls, sid, path)
        try:
            s = synthesize_anomaly(cloud, run.synthesis, stream.split(run.sample_key(cls, sid)))
        except ValueError as exc:
            raise ConfigError(f"{cls}/{sid}: {exc}") from exc
        out = root / cls / f"{sid}.ply"
        out.parent.mkdir(parents=True, exist_ok=True)
        write_cloud(s.cloud, out, comments=run.comments())
        entry = s.provenance()
        entry.update({"class": cls, "source": os.path.relpath(path, run.base),
                      "output": str(out.relative_to(run.out))})
        return entry

    t0 = time.perf_counter()
    entries = run.pmap(work, samples)
    _log_speed("synth", len(entries), time.perf_counter() - t0)
    manifest = {"samples": entries, "synthesis": run.cfg["synthesis"]}
    run.write_json(root / "manifest.json", manifest)
    return manifest


def _synth_entries(run: Run) -> list[dict]:
    path = run.out / "synth" / "manifest.json"
    if not path.exists():
        raise ConfigError(f"synth manifest {path} not found; run the synth command first")
    return json.loads(path.read_text())["samples"]


def cmd_features(run: Run) -> dict:
    if run.extractor.kind == "external":
        raise ConfigError("features are external; nothing to extract")
    jobs = [("train", c, s, p) for c, s, p in run.samples("train")]
    jobs += [("test", c, s, p) for c, s, p in run.samples("test")]
    synth_manifest = run.out / "synth" / "manifest.json"
    if synth_manifest.exists():
        jobs += [("synth", e["class"], e["id"], run.out / e["output"])
                 for e in _synth_entries(run)]

    def work(job):
        split, cls, sid, path = job
        # synthetic clouds are already preprocessed
        cloud = read_cloud(path) if split == "synth" else run.load(cls, sid, path)
        try:
            fs = extract_local_features(cloud, run.extractor)
        except FeatureError as exc:
            raise ConfigError(f"{split}/{cls}/{sid}: {exc}") from exc
        out = run.feature_path(split, cls, sid)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_features(fs, out)
        return {"split": split, "class": cls, "id": sid, "patches": len(fs),
                "file": str(out.relative_to(run.out))}

    t0 = time.perf_counter()
    rows = run.pmap(work, jobs)
    _log_speed("features", len(rows), time.perf_counter() - t0)
    manifest = {"extractor_id": run.extractor.extractor_id, "files": rows}
    run.write_json(run.out / "features" / "manifest.json", manifest)
    return manifest


def cmd_adapt(run: Run) -> dict:
    entries = _synth_entries(run)
    feats, labels = [], []
    for e in entries:
        cloud = read_cloud(run.out / e["output"])
        fs = run.features("synth", e["class"], e["id"], cloud)
        feats.append(fs)
        labels.append(patch_labels(fs.centers, cloud.points, cloud.mask))
    n_pos = int(sum(int(l.sum()) for l in labels))
    LOGGER.info("adapt: %d synthetic samples, %d patches, %d positive",
                len(feats), sum(len(f) for f in feats), n_pos)
    t0 = time.perf_counter()
    try:
        result = train_seg_head(feats, labels, run.train_cfg, run.rng.split(KEY_ADAPT))
    except TrainingDiverged as exc:
        _write_trace(run, exc.trace)
        raise
    LOGGER.info("adapt: trained in %.2f s, final loss %.6g",
                time.perf_counter() - t0, result.trace[-1][1])
    out = run.out / "head"
    out.mkdir(parents=True, exist_ok=True)
    save_head(result.head, out / "head.bin",
              meta={**run.stamp, "extractor_id": run.extractor.extractor_id})
    _write_trace(run, result.trace)
    return {"trace": result.trace, "positives": n_pos}


def _write_trace(run: Run, trace) -> None:
    out = run.out / "head"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        w = run.csv_writer(fh)
        w.writerow(["iteration", "loss"])
        for it, loss in trace:
            w.writerow([it, repr(float(loss))])


def _head_path(run: Run) -> Path:
    return run.out / "head" / "head.bin"


def cmd_fit(run: Run) -> dict:
    samples = run.samples("train")
    if run.cfg["k"] is None:
        raise ConfigError("the number of clusters is required: set k in the config or pass --k")
    k = int(run.cfg["k"])
    if k < 1:
        raise ConfigError(f"K={k} must be at least 1")
    if k > len(samples):
        raise ConfigError(f"K={k} exceeds the number of training samples ({len(samples)})")
    t0 = time.perf_counter()
    feats = run.pmap(lambda it: run.features("train", it[0], it[1], source=it[2]), samples)
    model = build_model(feats, k, float(run.cfg["coreset_fraction"]),
                        normalize=run.extractor.normalize == "zscore",
                        seed=run.seed)
    if run.cfg["fusion_weight"] > 0:
        if not _head_path(run).exists():
            raise ConfigError("fusion_weight > 0 needs a trained head; run adapt first")
        model.score_stats.update(logit_stats(load_head(_head_path(run)), feats))
    model.provenance.update(run.stamp)
    model.provenance["samples"] = [f"{c}/{s}" for c, s, _ in samples]
    out = run.out / "model"
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.glfm")
    report = {
        "k": model.k,
        "extractor_id": model.extractor_id,
        "coreset_fraction": model.coreset_fraction,
        "cluster_sizes": model.provenance["cluster_sizes"],
        "bank_sizes_before_coreset": model.provenance["bank_sizes_before_coreset"],
        "bank_sizes": model.provenance["bank_sizes"],
        "routing": {f"{c}/{s}": r for (c, s, _), r in
                    zip(samples, model.provenance["routing"])},
        "score_stats": model.score_stats,
    }
    run.write_json(out / "build_report.json", report)
    _log_speed("fit", len(samples), time.perf_counter() - t0)
    return report


def cmd_detect(run: Run) -> list[dict]:
    model_path = run.out / "model" / "model.glfm"
    if not model_path.exists():
        raise ConfigError(f"model {model_path} not found; run fit first")
    model = load_model(model_path)
    if model.extractor_id != run.extractor.extractor_id:
        raise ConfigError(f"extractor mismatch: model built with {model.extractor_id!r}, "
                          f"config uses {run.extractor.extractor_id!r}")
    head = None
    weight = float(run.cfg["fusion_weight"])
    if weight > 0:
        head = load_head(_head_path(run))
    root = run.out / "detect"
    samples = run.samples("test")

    def work(item):
        cls, sid, path = item
        t = time.perf_counter()
        cloud = run.load(cls, sid, path)
        fs = run.features("test", cls, sid, cloud)
        res = detect(cloud, model, fs, head=head, fusion_weight=weight,
                     smoothing=run.cfg["smoothing"])
        out = root / cls / f"{sid}.ply"
        out.parent.mkdir(parents=True, exist_ok=True)
        write_cloud(cloud, out, extra={"score": res.point_scores}, comments=run.comments())
        label = None if cloud.mask is None else int(np.any(cloud.mask))
        rec = {"class": cls, "id": sid, "object_score": res.object_score, "label": label,
               "routed_cluster": res.routed_idx, "n_points": len(cloud),
               "n_patches": len(res.patch_scores)}
        run.write_json(root / cls / f"{sid}.json", rec)
        LOGGER.info("detect %s/%s: %.3f s", cls, sid, time.perf_counter() - t)
        return rec

    t0 = time.perf_counter()
    recs = run.pmap(work, samples)
    _log_speed("detect", len(recs), time.perf_counter() - t0)
    with open(root / "scores.csv", "w", newline="") as fh:
        w = run.csv_writer(fh)
        w.writerow(["class", "id", "object_score", "routed_cluster", "label"])
        for r in recs:
            w.writerow([r["class"], r["id"], repr(r["object_score"]), r["routed_cluster"],
                        "" if r["label"] is None else r["label"]])
    return recs


def _read_scores_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    return rows


def _na(v):
    return "n/a" if v is None else v


def cmd_eval(run: Run) -> dict:
    scores_path = run.out / "detect" / "scores.csv"
    if not scores_path.exists():
        raise ConfigError(f"{scores_path} not found; run detect first")
    rows = {(r["class"], r["id"]): r for r in _read_scores_csv(scores_path)}
    items = []
    t0 = time.perf_counter()
    for cls, sid, path in run.samples("test"):
        if (cls, sid) not in rows:
            raise ConfigError(f"{cls}/{sid}: no detection result in {scores_path}")
        truth = run.load(cls, sid, path)
        _, props = read_cloud(run.out / "detect" / cls / f"{sid}.ply", with_properties=True)
        scores = np.asarray(props["score"], dtype=np.float64)
        if len(scores) != len(truth):
            raise ConfigError(f"{cls}/{sid}: {len(scores)} scores for {len(truth)} points")
        items.append({"class": cls, "cloud": truth, "mask": truth.mask,
                      "object_score": float(rows[(cls, sid)]["object_score"]),
                      "point_scores": scores})
    rep = evaluate(items, fpr_limit=float(run.cfg["fpr_limit"]),
                   region_radius=run.cfg["region_radius"])
    out = run.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    body = {"o_roc": _na(rep.o_roc), "p_roc": _na(rep.p_roc), "p_pro": _na(rep.p_pro),
            "fpr_limit": rep.fpr_limit, "n_samples": len(items),
            "mean_point_score": float(np.mean(np.concatenate([i["point_scores"] for i in items]))),
            "per_class": {c: {k: _na(v) for k, v in row.items()}
                          for c, row in rep.per_class.items()}}
    run.write_json(out / "report.json", body)
    for name, pts, cols in (("roc", rep.roc_points, ("fpr", "tpr")),
                            ("pro", rep.pro_points, ("fpr", "pro"))):
        with open(out / f"{name}.csv", "w", newline="") as fh:
            w = run.csv_writer(fh)
            w.writerow(cols)
            if len(pts):
                for a, b in zip(*pts):
                    w.writerow([repr(float(a)), repr(float(b))])
    score_distribution_dump(
        ((i["class"], i["point_scores"],
          np.zeros(len(i["point_scores"]), int) if i["mask"] is None else i["mask"])
         for i in items),
        out / "score_distribution.csv", comment=f"config_hash={run.hash} seed={run.seed}")
    _log_speed("eval", len(items), time.perf_counter() - t0)
    LOGGER.info("eval: O-ROC %s  P-ROC %s  P-PRO %s",
                *(f"{v:.4f}" if v is not None else "n/a" for v in (rep.o_roc, rep.p_roc, rep.p_pro)))
    return body


COMMANDS = {"synth": cmd_synth, "features": cmd_features, "adapt": cmd_adapt,
            "fit": cmd_fit, "detect": cmd_detect, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glfm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=f"run the {name} stage")
        sp.add_argument("config", help="path to the JSON run config")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--k", type=int, default=None, help="override the number of clusters")
        sp.add_argument("--train-per-class", type=int, default=None, metavar="N",
                        help="use only the first N training clouds of each class")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        run = load_config(args.config, {"seed": args.seed, "k": args.k,
                                        "train_per_class": args.train_per_class})
        t0 = time.perf_counter()
        COMMANDS[args.command](run)
        LOGGER.info("%s finished in %.2f s", args.command, time.perf_counter() - t0)
    except (ConfigError, FeatureError, TrainingDiverged) as exc:
        LOGGER.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
