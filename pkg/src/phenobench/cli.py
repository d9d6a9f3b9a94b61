"""Command-line entry point: ``phenobench <subcommand> ...``.

Subcommands: benchmark, baseline, flops, scaling-plot, mae, tile-count.
Every command is deterministic in its inputs and seeds; outputs written by a
failing command are removed before exiting non-zero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import aggregate, baselines, embedding_store, normalize, relbench, similarity, toy_mae
from .errors import PhenobenchError, UsageError

log = logging.getLogger("phenobench")


@dataclass
class RelationshipSource:
    name: str
    path: Path
    min_score: float | None = None


@dataclass
class PipelineConfig:
    embeddings: Path
    relationships: list[RelationshipSource]
    out: Path
    arm_map: Path | None = None
    gene_subset: Path | None = None
    epsilon: float = normalize.DEFAULT_EPSILON
    q: float = 0.05
    alpha: float = 0.05
    label: str = "model"
    flops: float | None = None
    threads: int = 1
    control_label: str = embedding_store.DEFAULT_CONTROL_LABEL
    seeds: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not 0 < self.q < 0.5:
            raise UsageError(f"q must lie in (0, 0.5), got {self.q}")
        if not 0 < self.alpha < 1:
            raise UsageError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.epsilon < 0:
            raise UsageError("epsilon must be >= 0")
        if self.threads < 1:
            raise UsageError("threads must be >= 1")
        if not self.relationships:
            raise UsageError("at least one relationships file is required")
        paths = [self.embeddings] + [r.path for r in self.relationships]
        paths += [p for p in (self.arm_map, self.gene_subset) if p is not None]
        for p in paths:
            if not Path(p).is_file():
                raise UsageError(f"input file not found: {p}")

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent

        def p(v):
            return None if v is None else (base / v if not Path(v).is_absolute() else Path(v))

        rels = []
        for name, spec in raw.pop("relationships", {}).items():
            if isinstance(spec, str):
                spec = {"path": spec}
            rels.append(RelationshipSource(name, p(spec["path"]), spec.get("min_score")))
        for k in ("embeddings", "out", "arm_map", "gene_subset"):
            if k in raw:
                raw[k] = p(raw[k])
        try:
            return cls(relationships=rels, **raw)
        except TypeError as exc:
            raise UsageError(f"{path}: {exc}") from None


def _parse_rel(items: Sequence[str], min_scores: Sequence[str]) -> list[RelationshipSource]:
    scores = {}
    for item in min_scores or ():
        name, _, val = item.partition("=")
        if not val:
            raise UsageError(f"--min-score expects NAME=VALUE, got {item!r}")
        scores[name] = float(val)
    out = []
    for item in items or ():
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        out.append(RelationshipSource(name, Path(path), scores.pop(name, None)))
    if scores:
        raise UsageError(f"--min-score given for unknown databases: {sorted(scores)}")
    return out


class _Outputs:
    """Collects written files so a failed command can remove them."""

    def __init__(self, out_dir: Path):
        self.dir = Path(out_dir)
        self.written: list[Path] = []

    def write_text(self, name: str, text: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / name
        self.written.append(path)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        return path

    def track(self, path: Path) -> Path:
        self.written.append(path)
        return path

    def rollback(self) -> None:
        for p in self.written:
            Path(p).unlink(missing_ok=True)


def run_benchmark(cfg: PipelineConfig) -> tuple[list[relbench.BenchmarkReport],
                                                 similarity.SimilarityThresholds]:
    """controls -> TVN -> arm correction -> spherical means -> recalls per database."""
    cfg.validate()
    table = embedding_store.load_embeddings(cfg.embeddings, control_label=cfg.control_label)
    rels = [relbench.load_relationships(r.path, r.min_score, name=r.name) for r in cfg.relationships]
    ctrl = embedding_store.controls(table)
    model = normalize.tvn_fit(ctrl.vectors, cfg.epsilon, threads=cfg.threads)
    aligned = normalize.tvn_apply(model, table)
    origin = similarity.Origin(aligned.vectors[aligned.control_mask()].mean(axis=0))
    if cfg.arm_map is not None:
        corr = normalize.arm_correct(aligned, normalize.load_arm_map(cfg.arm_map))
        if corr.unmapped_genes:
            log.info("arm correction left %d genes unmapped", len(corr.unmapped_genes))
        aligned = corr.table
    profiles = aggregate.profile_perturbations(aligned)
    if cfg.gene_subset is not None:
        profiles = relbench.filter_profiles(profiles, relbench.load_gene_subset(cfg.gene_subset))
    engine = similarity.SimilarityEngine.from_profiles(profiles, origin, threads=cfg.threads)
    thresholds = similarity.thresholds_from_engine(engine, cfg.q)

    pct, fpr = [], []
    for rel in rels:
        recall, d = relbench.recall_at_percentile(profiles, rel, origin, cfg.q, engine=engine,
                                                  thresholds=thresholds)
        pct.append(relbench.DatabaseResult(rel.name, recall, d.n_covered_pairs, d.n_pairs,
                                           {"low": thresholds.low, "high": thresholds.high}))
        recall, f = relbench.recall_at_fpr(profiles, rel, origin, cfg.alpha, engine=engine)
        fpr.append(relbench.DatabaseResult(rel.name, recall, f.n_covered_pairs, len(rel),
                                           {"threshold": f.threshold}))
    reports = [relbench.make_report(cfg.label, pct, "percentile", cfg.q, cfg.flops),
               relbench.make_report(cfg.label, fpr, "fpr", cfg.alpha, cfg.flops)]
    return reports, thresholds


def cmd_benchmark(args) -> int:
    if args.config:
        cfg = PipelineConfig.from_json(args.config)
        if args.out:
            cfg.out = Path(args.out)
        if args.threads:
            cfg.threads = args.threads
    else:
        if not args.embeddings or not args.out:
            raise UsageError("--embeddings and --out are required without --config")
        cfg = PipelineConfig(
            embeddings=Path(args.embeddings),
            relationships=_parse_rel(args.rel, args.min_score),
            out=Path(args.out),
            arm_map=Path(args.arm_map) if args.arm_map else None,
            gene_subset=Path(args.gene_subset) if args.gene_subset else None,
            epsilon=args.epsilon, q=args.q, alpha=args.alpha, label=args.label,
            flops=args.flops, threads=args.threads or 1, control_label=args.control_label)
    reports, thresholds = run_benchmark(cfg)
    outputs = _Outputs(cfg.out)
    try:
        outputs.write_text("report.json", relbench.reports_to_json(reports))
        outputs.write_text("report.txt", "\n".join(r.text() for r in reports))
        outputs.write_text("thresholds.json", thresholds.to_json())
    except BaseException:
        outputs.rollback()
        raise
    print(reports[0].text(), end="")
    return 0


def cmd_baseline(args) -> int:
    out = Path(args.out)
    if args.kind == "random":
        table = baselines.random_embeddings(args.n, args.dim, args.seed, n_controls=args.controls,
                                            replicates=args.replicates)
    elif args.kind == "shuffle":
        if not args.input:
            raise UsageError("--input is required for kind=shuffle")
        table = baselines.shuffle_labels(embedding_store.load_embeddings(args.input), args.seed)
    elif args.kind == "pixelstats":
        table = _pixelstats_table(args)
    else:  # argparse restricts choices; kept for programmatic calls
        raise UsageError(f"unknown baseline kind {args.kind!r}")
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        embedding_store.save_embeddings(table, out)
    except BaseException:
        out.unlink(missing_ok=True)
        raise
    print(f"wrote {len(table)} records of dim {table.dim} to {out}")
    return 0


def _read_well_metadata(path) -> dict[str, tuple[str, str, str, str, str]]:
    import csv
    meta = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            meta[row["well_id"]] = tuple(row[c] for c in embedding_store.META_COLUMNS)
    return meta


def _pixelstats_table(args) -> embedding_store.EmbeddingTable:
    if not args.images and not args.raw:
        raise UsageError("kind=pixelstats needs --images DIR or --raw FILE ...")
    images: list[tuple[str, baselines.ImagePlanes]] = []
    if args.images:
        for well, paths in baselines.scan_png_wells(args.images).items():
            images.append((well, baselines.load_png_planes(paths)))
    for raw in args.raw or ():
        images.append((Path(raw).stem, baselines.load_raw_planes(raw)))
    if not images:
        raise UsageError("no images found")
    meta = _read_well_metadata(args.metadata) if args.metadata else {}
    rows = []
    for well, img in images:
        m = meta.get(well, (well, "EXP0", "P0", well, embedding_store.PERTURBATION))
        rows.append((m, img))
    return baselines.pixel_stats_table(rows)


def cmd_flops(args) -> int:
    if args.crops is None or args.crops <= 0:
        raise UsageError("--crops must be a positive number")
    if args.base_flops <= 0:
        raise UsageError("--base-flops must be positive")
    try:
        spec = relbench.FlopsSpec(args.base_flops, args.crops, args.patch, args.crop, args.base)
    except PhenobenchError as exc:
        raise UsageError(str(exc)) from None
    cf = relbench.crop_factor(spec.crop_side, spec.base_side)
    pf = relbench.patch_factor(spec.patch_side)
    total = relbench.flops_estimate(spec)
    result = {"crop_factor": cf, "patch_factor": pf, "total_flops": total,
              "printed_crop_factor": relbench.PRINTED_CROP_FACTOR, **asdict(spec)}
    if args.json:
        print(json.dumps(result, sort_keys=True))
    else:
        print(f"crop factor  {cf:.4f}  (({spec.crop_side}/16)^2 / ({spec.base_side}/16)^2)^2; "
              f"commonly printed as {relbench.PRINTED_CROP_FACTOR}")
        print(f"patch factor {pf:g}")
        print(f"total FLOps  {total:.6g}")
    return 0


def cmd_scaling_plot(args) -> int:
    reports = []
    for path in args.reports:
        chosen = [r for r in relbench.read_reports(path) if r.metric == args.metric]
        if not chosen:
            raise UsageError(f"{path}: no {args.metric} report")
        for r in chosen:
            if r.flops is None:
                raise UsageError(f"{path}: report {r.model_label!r} has no flops value")
        reports.extend(chosen)
    series = relbench.scaling_curve(reports)
    outputs = _Outputs(Path(args.out))
    try:
        outputs.write_text("scaling.csv", relbench.scaling_csv(series))
        outputs.write_text("scaling.svg", relbench.scaling_svg(series))
    except BaseException:
        outputs.rollback()
        raise
    print(f"{len(series)} series, {sum(map(len, series.values()))} points -> {args.out}")
    return 0


MAE_DATA_KEYS = {"steps": 500, "n_images": 64, "n_validation": 16, "image_side": 32,
                 "rank": 4, "noise": 0.05, "data_seed": 0}


def cmd_mae(args) -> int:
    raw = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    data = {k: raw.pop(k, v) for k, v in MAE_DATA_KEYS.items()}
    if args.steps:
        data["steps"] = args.steps
    config = toy_mae.MaeConfig.from_dict(raw)
    imgs = dict(side=data["image_side"], channels=config.channels, patch_side=config.patch_side,
                rank=data["rank"], noise=data["noise"], basis_seed=data["data_seed"])
    train = toy_mae.synthetic_images(data["n_images"], seed=0, **imgs)
    val = toy_mae.synthetic_images(data["n_validation"], seed=1, **imgs)
    model, curve = toy_mae.train(config, train, int(data["steps"]), val)
    outputs = _Outputs(Path(args.out))
    try:
        outputs.dir.mkdir(parents=True, exist_ok=True)
        toy_mae.save_checkpoint(model, outputs.track(outputs.dir / "checkpoint.bin"))
        outputs.write_text("loss_curve.csv", curve.to_csv())
    except BaseException:
        outputs.rollback()
        raise
    v0, v1 = curve.validation[0], curve.validation[-1]
    print(f"validation masked MSE {v0:.6g} -> {v1:.6g} ({v1 / v0:.1%} of initial)")
    return 0


def cmd_tile_count(args) -> int:
    spec = aggregate.TilingSpec(args.height, args.width, args.channels, args.crop)
    crops = len(aggregate.tile_offsets(spec))
    total = aggregate.inference_sample_count(crops, args.wells, args.plates, args.experiments)
    print(json.dumps({"crops_per_well": crops, "grid": list(spec.grid),
                      "samples": total}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phenobench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("benchmark", help="TVN -> aggregation -> recall report")
    b.add_argument("--config", help="PipelineConfig JSON; flags below are ignored except --out/--threads")
    b.add_argument("--embeddings")
    b.add_argument("--rel", action="append", metavar="NAME=PATH",
                   help="relationships TSV (repeatable)")
    b.add_argument("--min-score", action="append", metavar="NAME=VALUE",
                   help="keep pairs with score > VALUE for database NAME")
    b.add_argument("--arm-map")
    b.add_argument("--gene-subset")
    b.add_argument("--epsilon", type=float, default=normalize.DEFAULT_EPSILON)
    b.add_argument("--q", type=float, default=0.05)
    b.add_argument("--alpha", type=float, default=0.05)
    b.add_argument("--label", default="model")
    b.add_argument("--flops", type=float)
    b.add_argument("--control-label", default=embedding_store.DEFAULT_CONTROL_LABEL)
    b.add_argument("--threads", type=int)
    b.add_argument("--out")
    b.set_defaults(func=cmd_benchmark)

    bl = sub.add_parser("baseline", help="write a baseline embeddings file")
    bl.add_argument("kind", choices=["random", "shuffle", "pixelstats"])
    bl.add_argument("--out", required=True)
    bl.add_argument("--n", type=int, default=1000)
    bl.add_argument("--dim", type=int, default=128)
    bl.add_argument("--controls", type=int, default=200)
    bl.add_argument("--replicates", type=int, default=1)
    bl.add_argument("--seed", type=int, default=0)
    bl.add_argument("--input", help="embeddings file to shuffle")
    bl.add_argument("--images", help="directory of <well_id>_c<k>.png planes")
    bl.add_argument("--raw", nargs="+", help="raw plane files with .json sidecars")
    bl.add_argument("--metadata", help="CSV mapping well_id to embedding metadata columns")
    bl.set_defaults(func=cmd_baseline)

    f = sub.add_parser("flops", help="training FLOps estimate")
    f.add_argument("--base-flops", type=float, default=1.0,
                   help="FLOps per 224x224 crop at patch 16")
    f.add_argument("--crop", type=int, default=256)
    f.add_argument("--base", type=int, default=224)
    f.add_argument("--patch", type=int, default=16, choices=[8, 16])
    f.add_argument("--crops", type=float, default=1.0, help="training crops seen")
    f.add_argument("--json", action="store_true")
    f.set_defaults(func=cmd_flops)

    s = sub.add_parser("scaling-plot", help="recall vs FLOps series from report files")
    s.add_argument("reports", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--metric", default="percentile", choices=["percentile", "fpr"])
    s.set_defaults(func=cmd_scaling_plot)

    m = sub.add_parser("mae", help="train the desk-scale masked autoencoder")
    m.add_argument("--config", help="JSON with MaeConfig fields and synthetic-data settings")
    m.add_argument("--steps", type=int)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mae)

    t = sub.add_parser("tile-count", help="crops per well and total inference samples")
    t.add_argument("--height", type=int, default=aggregate.WELL_IMAGE_SIDE)
    t.add_argument("--width", type=int, default=aggregate.WELL_IMAGE_SIDE)
    t.add_argument("--channels", type=int, default=aggregate.CHANNELS)
    t.add_argument("--crop", type=int, default=aggregate.CROP_SIDE)
    t.add_argument("--wells", type=int, default=1380)
    t.add_argument("--plates", type=int, default=9)
    t.add_argument("--experiments", type=int, default=175)
    t.set_defaults(func=cmd_tile_count)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"phenobench {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (PhenobenchError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"phenobench {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
