"""Command line surface: fit, score, evaluate, synth, ablate."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import evaluation
from . import __version__
from .aggregate_bank import aggregate_features, build_centroid_bank
from .channel_reduce import (
    DEFAULT_CHANNELS,
    apply_selection,
    count_nonzero_per_channel,
    select_channels,
)
from .errors import ConfigError, NpadError
from .gaussian_field import fit_pixel_gaussians, mahalanobis_grid
from .inference import (
    ImageScore,
    ModelBundle,
    combine_maps,
    image_score,
    load_bundle,
    normalize_preview,
    save_bundle,
    score_d1,
    shift_feature_map,
    shift_offsets,
    shifted_manifest_scores,
    write_pgm,
)
from .neighbor_sim import fit_weighted_field
from .synthetic import generate_dataset
from .tensor_store import DatasetManifest, ManifestEntry, load_manifest, load_mask, read_tensor, write_tensor


@dataclasses.dataclass
class RunConfig:
    p: int = 3
    q: int = 2
    r: int = 4
    gamma: float = 0.25
    epsilon: float = 0.01
    d: int = DEFAULT_CHANNELS
    ratio: float = 0.1
    k_top: int = 5
    seed: int = 0
    nonzero_abs: bool = False
    full_bc: bool = False
    medoid: bool = False
    smooth_sigma: float = 0.0
    max_points: int = 100_000
    threads: int = 1
    memory_budget_mb: int = 4096

    def validate(self) -> None:
        if self.p < 1 or self.q < 1:
            raise ConfigError("p and q must be >= 1")
        if self.r < 0:
            raise ConfigError("r must be >= 0")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if not 0 < self.ratio <= 1:
            raise ConfigError("ratio must be in (0, 1]")
        if self.k_top < 1 or self.d < 1:
            raise ConfigError("k_top and d must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def echo(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path: str | None, overrides: dict) -> RunConfig:
    """JSON config file, then explicit flag overrides on top."""
    cfg = RunConfig()
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = dataclasses.replace(cfg, **doc)
    cfg = dataclasses.replace(
        cfg, **{k: v for k, v in overrides.items() if v is not None}
    )
    cfg.validate()
    return cfg


def image_id_for(tensor_path: Path) -> str:
    """Group key for shift variants: the stem before any '.shift_a_b' tag."""
    stem = tensor_path.name
    if stem.endswith(".npad"):
        stem = stem[: -len(".npad")]
    if ".shift_" in stem:
        stem = stem.split(".shift_")[0]
    return stem


def _group_test_entries(manifest: DatasetManifest) -> list[tuple[str, list[ManifestEntry]]]:
    groups: dict[str, list[ManifestEntry]] = {}
    order: list[str] = []
    for entry in manifest.test_entries:
        key = image_id_for(entry.tensor)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(entry)
    return [(key, groups[key]) for key in order]


def _load_selected(entry_path: Path, bundle: ModelBundle) -> np.ndarray:
    fm = read_tensor(entry_path)
    if fm.ndim != 3 or fm.shape[2] != bundle.selection.source_channels:
        raise ConfigError(
            f"tensor {entry_path} has shape {fm.shape}, bundle expects "
            f"{bundle.selection.source_channels} source channels"
        )
    return np.asarray(apply_selection(fm, bundle.selection), dtype=np.float64)


def cmd_fit(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    manifest = load_manifest(args.manifest)
    train_entries = manifest.train_entries
    if args.limit_train is not None:
        train_entries = train_entries[: args.limit_train]
    if len(train_entries) < 2:
        raise NpadError(
            f"fitting needs at least 2 nominal images, manifest has "
            f"{len(train_entries)} (covariance is undefined for N < 2)"
        )

    tensors = [read_tensor(e.tensor) for e in train_entries]
    counts = count_nonzero_per_channel(tensors, absolute=cfg.nonzero_abs)
    d_eff = min(cfg.d, manifest.channels)
    selection = select_channels(counts, d_eff)
    selected = [apply_selection(t, selection) for t in tensors]

    h, w = manifest.feature_hw
    # per field: covariance + Cholesky + cached inverse factor; two fields
    projected_mb = 6 * h * w * d_eff * d_eff * 8 / 2**20
    if projected_mb > cfg.memory_budget_mb:
        print(
            f"warning: covariance fields project to ~{projected_mb:.0f} MiB "
            f"(budget {cfg.memory_budget_mb} MiB); consider lowering d "
            "(cost shrinks quadratically with fewer channels)",
            file=sys.stderr,
        )

    base = fit_pixel_gaussians(selected, cfg.epsilon)
    wfield, weighted = fit_weighted_field(
        selected, base, cfg.p, cfg.gamma, cfg.epsilon, simplified=not cfg.full_bc
    )
    aggregated = [aggregate_features(fm, cfg.p) for fm in selected]
    aggregate_field = fit_pixel_gaussians(aggregated, cfg.epsilon)
    bank = build_centroid_bank(
        aggregated, cfg.ratio, cfg.seed, cfg.max_points, medoid=cfg.medoid
    )

    config_echo = cfg.echo()
    config_echo["d"] = d_eff  # effective value after clamping to C
    bundle = ModelBundle(selection, weighted, aggregate_field, bank, config_echo)
    extra = {"weights.json": wfield.to_jsonable()} if args.dump_weights else None
    content_hash = save_bundle(bundle, args.out, extra)
    print(f"bundle written to {args.out} (hash {content_hash[:16]})")
    return 0


def _score_one_group(
    image_id: str,
    entries: list[ManifestEntry],
    bundle: ModelBundle,
    manifest: DatasetManifest,
    q: int,
    r: int,
    k_top: int,
    smooth_sigma: float,
) -> tuple[str, int, float, np.ndarray]:
    p = int(bundle.config["p"])
    labels = {e.label for e in entries}
    if len(labels) != 1:
        raise ConfigError(f"image {image_id}: shift variants disagree on the label")
    label = labels.pop()

    def score_features(fm: np.ndarray) -> tuple[np.ndarray, ImageScore]:
        d1 = score_d1(fm, bundle.weighted, q)
        agg = aggregate_features(fm, p)
        d2 = mahalanobis_grid(agg, bundle.aggregate)
        return combine_maps(d1, d2), image_score(d1, agg, bank=bundle.bank, k_top=k_top)

    variants = []
    if len(entries) == 1 and entries[0].shift in (None, (0, 0)):
        fm = _load_selected(entries[0].tensor, bundle)
        if r > 0:
            # self-contained fallback: shift the feature map itself
            for a, b in shift_offsets(r):
                amap, iscore = score_features(shift_feature_map(fm, a, b))
                variants.append(((a, b), amap, iscore))
        else:
            amap, iscore = score_features(fm)
            variants.append(((0, 0), amap, iscore))
        scale = (1.0, 1.0)
    else:
        for entry in entries:
            offset = entry.shift if entry.shift is not None else (0, 0)
            amap, iscore = score_features(_load_selected(entry.tensor, bundle))
            variants.append((offset, amap, iscore))
        scale = (
            manifest.feature_hw[0] / manifest.image_hw[0],
            manifest.feature_hw[1] / manifest.image_hw[1],
        )
    final_map, final_score = shifted_manifest_scores(variants, max(r, 0), scale)
    if smooth_sigma > 0:
        final_map = gaussian_filter(final_map, smooth_sigma)
    return image_id, int(label), final_score, final_map


def cmd_score(args) -> int:
    bundle = load_bundle(args.bundle)
    manifest = load_manifest(args.manifest)
    if manifest.channels != bundle.selection.source_channels:
        raise ConfigError(
            f"manifest tensors have {manifest.channels} channels, bundle was "
            f"fitted on {bundle.selection.source_channels}"
        )
    q = args.q if args.q is not None else int(bundle.config["q"])
    r = args.r if args.r is not None else int(bundle.config["r"])
    k_top = args.k_top if args.k_top is not None else int(bundle.config["k_top"])
    smooth_sigma = (
        args.smooth_sigma
        if args.smooth_sigma is not None
        else float(bundle.config.get("smooth_sigma", 0.0))
    )
    threads = args.threads if args.threads is not None else 1

    groups = _group_test_entries(manifest)
    if not groups:
        raise NpadError("manifest has no test entries to score")
    # materialize the cached factors once, before any worker threads start
    bundle.weighted.chol_inv()
    bundle.aggregate.chol_inv()

    def work(item):
        image_id, entries = item
        return _score_one_group(
            image_id, entries, bundle, manifest, q, r, k_top, smooth_sigma
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, groups))
    else:
        results = [work(item) for item in groups]

    out_dir = Path(args.out)
    (out_dir / "maps").mkdir(parents=True, exist_ok=True)
    (out_dir / "previews").mkdir(parents=True, exist_ok=True)
    lines = ["image_id,label,score"]
    for image_id, label, score, amap in results:
        lines.append(f"{image_id},{label},{score!r}")
        write_tensor(out_dir / "maps" / f"{image_id}.npad", amap.astype(np.float64))
        write_pgm(out_dir / "previews" / f"{image_id}.pgm", normalize_preview(amap))
    (out_dir / "scores.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {
        "bundle_hash": bundle.config.get("content_hash"),
        "params": {"q": q, "r": r, "k_top": k_top, "smooth_sigma": smooth_sigma},
        "config": bundle.config,
        "n_images": len(results),
    }
    with open(out_dir / "score_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"scored {len(results)} images into {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    scores_dir = Path(args.scores)
    csv_path = scores_dir / "scores.csv"
    if not csv_path.is_file():
        raise NpadError(f"{scores_dir} has no scores.csv")
    rows = []
    for line in csv_path.read_text(encoding="utf-8").strip().splitlines()[1:]:
        image_id, label, score = line.split(",")
        rows.append((image_id, int(label), float(score)))

    groups = dict(_group_test_entries(manifest))
    unknown = [rid for rid, _, _ in rows if rid not in groups]
    if unknown:
        raise NpadError(f"scores reference image ids missing from manifest: {unknown}")
    missing = [gid for gid in groups if gid not in {r[0] for r in rows}]
    if missing:
        raise NpadError(f"manifest test images missing from scores: {missing}")

    image_auroc = evaluation.auroc(
        np.array([r[2] for r in rows]), np.array([r[1] for r in rows])
    )

    ih, iw = manifest.image_hw
    maps, masks = [], []
    for image_id, label, _ in rows:
        amap = read_tensor(scores_dir / "maps" / f"{image_id}.npad")
        upsampled = evaluation.upsample_map(amap, ih, iw)
        entries = groups[image_id]
        mask_entry = next(
            (e for e in entries if e.shift in (None, (0, 0)) and e.mask), None
        )
        if mask_entry is not None:
            mask = load_mask(mask_entry.mask, manifest.image_hw)
        else:
            mask = np.zeros((ih, iw), dtype=np.uint8)
        if label == 0 and mask.any():
            raise NpadError(f"image {image_id} is labeled nominal but has mask pixels")
        maps.append(upsampled)
        masks.append(mask)

    pixel_scores = np.concatenate([m.ravel() for m in maps])
    pixel_labels = np.concatenate([m.ravel() for m in masks])
    pixel_auroc = evaluation.auroc(pixel_scores, pixel_labels)
    pro = evaluation.pro_score(maps, masks, n_thresholds=args.pro_thresholds)

    report = {
        "image_auroc": image_auroc,
        "pixel_auroc": pixel_auroc,
        "pro_score": pro,
        "per_image": [
            {"image_id": rid, "label": label, "score": score}
            for rid, label, score in rows
        ],
        "params": {"pro_fpr_cap": evaluation.PRO_FPR_CAP, "pro_thresholds": args.pro_thresholds},
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    if args.curves_out:
        fprs, overlaps = evaluation.pro_curve(maps, masks, args.pro_thresholds)
        _, roc_fpr, roc_tpr = evaluation.roc_curve_points(
            np.array([r[2] for r in rows]), np.array([r[1] for r in rows])
        )
        lines = ["curve,x,y"]
        lines += [f"pro,{f!r},{o!r}" for f, o in zip(fprs, overlaps)]
        lines += [f"roc,{f!r},{t!r}" for f, t in zip(roc_fpr, roc_tpr)]
        Path(args.curves_out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(
        f"image AUROC {image_auroc:.4f}  pixel AUROC {pixel_auroc:.4f}  "
        f"PRO {pro:.4f}"
    )
    return 0


def cmd_synth(args) -> int:
    manifest_path = generate_dataset(
        args.out,
        n_train=args.n_train,
        n_test_nominal=args.n_test_nominal,
        n_test_anomalous=args.n_test_anomalous,
        height=args.height,
        width=args.width,
        channels=args.channels,
        image_scale=args.image_scale,
        anomaly_amplitude=args.amplitude,
        weak_amplitude=args.weak_amplitude,
        jitter=args.jitter,
        seed=args.seed,
    )
    print(f"synthetic dataset written, manifest at {manifest_path}")
    return 0


def _pixel_auroc_for_maps(
    maps: list[np.ndarray], masks: list[np.ndarray], image_hw: tuple[int, int]
) -> float:
    ih, iw = image_hw
    ups = [evaluation.upsample_map(m, ih, iw) for m in maps]
    scores = np.concatenate([m.ravel() for m in ups])
    labels = np.concatenate([m.ravel() for m in masks])
    return evaluation.auroc(scores, labels)


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    manifest = load_manifest(args.manifest)
    train_entries = manifest.train_entries
    if len(train_entries) < 2:
        raise NpadError("ablation needs at least 2 training images")

    tensors = [read_tensor(e.tensor) for e in train_entries]
    counts = count_nonzero_per_channel(tensors, absolute=cfg.nonzero_abs)
    selection = select_channels(counts, min(cfg.d, manifest.channels))
    selected = [apply_selection(t, selection) for t in tensors]

    base = fit_pixel_gaussians(selected, cfg.epsilon)
    fields = {}
    _, fields["similarity"] = fit_weighted_field(
        selected, base, cfg.p, cfg.gamma, cfg.epsilon, simplified=not cfg.full_bc
    )
    _, fields["uniform"] = fit_weighted_field(
        selected, base, cfg.p, cfg.gamma, cfg.epsilon, scheme="uniform"
    )
    random_seeds = (cfg.seed + 1, cfg.seed + 2)
    for s in random_seeds:
        _, fields[f"random_{s}"] = fit_weighted_field(
            selected,
            base,
            cfg.p,
            cfg.gamma,
            cfg.epsilon,
            scheme="random",
            rng=np.random.default_rng(s),
        )
    aggregated = [aggregate_features(fm, cfg.p) for fm in selected]
    aggregate_field = fit_pixel_gaussians(aggregated, cfg.epsilon)

    test_groups = _group_test_entries(manifest)
    test_maps = []
    masks = []
    ih, iw = manifest.image_hw
    for image_id, entries in test_groups:
        if len(entries) != 1:
            raise NpadError("the ablation runner expects single-variant manifests")
        entry = entries[0]
        fm = np.asarray(apply_selection(read_tensor(entry.tensor), selection), np.float64)
        test_maps.append(fm)
        masks.append(
            load_mask(entry.mask, manifest.image_hw)
            if entry.mask
            else np.zeros((ih, iw), dtype=np.uint8)
        )

    def d1_maps(field, q):
        return [score_d1(fm, field, q) for fm in test_maps]

    def d2_maps():
        return [
            mahalanobis_grid(aggregate_features(fm, cfg.p), aggregate_field)
            for fm in test_maps
        ]

    def fused(d1s, d2s):
        return [combine_maps(a, b) for a, b in zip(d1s, d2s)]

    def shifted_full(field):
        out = []
        for fm in test_maps:
            variants = []
            for a, b in shift_offsets(cfg.r):
                shifted = shift_feature_map(fm, a, b)
                amap = combine_maps(
                    score_d1(shifted, field, cfg.q),
                    mahalanobis_grid(
                        aggregate_features(shifted, cfg.p), aggregate_field
                    ),
                )
                variants.append(((a, b), amap, 0.0))
            final_map, _ = shifted_manifest_scores(variants, cfg.r)
            out.append(final_map)
        return out

    d2s = d2_maps()
    exp1 = d1_maps(fields["similarity"], 1)
    exp4 = d1_maps(fields["similarity"], cfg.q)
    results = [
        ("exper1_weighted_only", _pixel_auroc_for_maps(exp1, masks, manifest.image_hw)),
        ("exper2_aggregate_only", _pixel_auroc_for_maps(d2s, masks, manifest.image_hw)),
        (
            "exper3_weighted_plus_aggregate",
            _pixel_auroc_for_maps(fused(exp1, d2s), masks, manifest.image_hw),
        ),
        (
            "exper4_weighted_neighbor_inference",
            _pixel_auroc_for_maps(exp4, masks, manifest.image_hw),
        ),
        (
            "exper5_no_shift",
            _pixel_auroc_for_maps(fused(exp4, d2s), masks, manifest.image_hw),
        ),
        (
            "full_with_shift",
            _pixel_auroc_for_maps(
                shifted_full(fields["similarity"]), masks, manifest.image_hw
            ),
        ),
    ]
    for name in ["uniform"] + [f"random_{s}" for s in random_seeds] + ["similarity"]:
        maps = fused(d1_maps(fields[name], cfg.q), d2s)
        results.append(
            (f"weights_{name}", _pixel_auroc_for_maps(maps, masks, manifest.image_hw))
        )

    lines = ["experiment,pixel_auroc"]
    for name, value in results:
        lines.append(f"{name},{value!r}")
        print(f"{name:38s} {value:.4f}")
    out = Path(args.out)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with open(out.with_suffix(out.suffix + ".meta.json"), "w", encoding="utf-8") as fh:
        json.dump({"config": cfg.echo(), "random_seeds": list(random_seeds)}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return 0


def _config_overrides(args) -> dict:
    names = [f.name for f in dataclasses.fields(RunConfig)]
    return {name: getattr(args, name, None) for name in names}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags win over it")
    parser.add_argument("--p", type=int, help="training neighborhood size (default 3)")
    parser.add_argument("--q", type=int, help="inference neighborhood size (default 2)")
    parser.add_argument("--r", type=int, help="shift ensemble size (default 4)")
    parser.add_argument("--gamma", type=float, help="similarity balance (default 0.25)")
    parser.add_argument("--epsilon", type=float, help="covariance regularizer (default 0.01)")
    parser.add_argument("--d", type=int, help="channels kept (default 550, clamped to C)")
    parser.add_argument("--ratio", type=float, help="centroid fraction (default 0.1)")
    parser.add_argument("--k-top", dest="k_top", type=int, help="top-k pixels (default 5)")
    parser.add_argument("--seed", type=int, help="RNG seed (default 0)")
    parser.add_argument("--max-points", dest="max_points", type=int)
    parser.add_argument("--threads", type=int, help="worker cap (default 1)")
    parser.add_argument("--smooth-sigma", dest="smooth_sigma", type=float)
    parser.add_argument(
        "--nonzero-abs",
        dest="nonzero_abs",
        action="store_const",
        const=True,
        help="count |x| > 0 for channel selection (pre-ReLU exports)",
    )
    parser.add_argument(
        "--full-bc",
        dest="full_bc",
        action="store_const",
        const=True,
        help="use the full Bhattacharyya form with the log-det term",
    )
    parser.add_argument(
        "--medoid",
        action="store_const",
        const=True,
        help="snap centroids to their nearest real features",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="npad",
        description="Neighborhood-weighted per-pixel Gaussian anomaly detection",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model bundle from nominal data")
    _add_config_flags(p_fit)
    p_fit.add_argument("--manifest", required=True)
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--limit-train", dest="limit_train", type=int)
    p_fit.add_argument("--dump-weights", dest="dump_weights", action="store_true")
    p_fit.set_defaults(func=cmd_fit)

    p_score = sub.add_parser("score", help="score test images against a bundle")
    p_score.add_argument("--bundle", required=True)
    p_score.add_argument("--manifest", required=True)
    p_score.add_argument("--out", required=True)
    p_score.add_argument("--q", type=int)
    p_score.add_argument("--r", type=int)
    p_score.add_argument("--k-top", dest="k_top", type=int)
    p_score.add_argument("--smooth-sigma", dest="smooth_sigma", type=float)
    p_score.add_argument("--threads", type=int)
    p_score.set_defaults(func=cmd_score)

    p_eval = sub.add_parser("evaluate", help="AUROC and PRO-score from saved scores")
    p_eval.add_argument("--scores", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--curves-out", dest="curves_out")
    p_eval.add_argument(
        "--pro-thresholds", dest="pro_thresholds", type=int, default=evaluation.PRO_THRESHOLDS
    )
    p_eval.set_defaults(func=cmd_evaluate)

    p_synth = sub.add_parser("synth", help="generate a synthetic feature dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--n-train", dest="n_train", type=int, default=50)
    p_synth.add_argument("--n-test-nominal", dest="n_test_nominal", type=int, default=20)
    p_synth.add_argument("--n-test-anomalous", dest="n_test_anomalous", type=int, default=20)
    p_synth.add_argument("--height", type=int, default=16)
    p_synth.add_argument("--width", type=int, default=16)
    p_synth.add_argument("--channels", type=int, default=8)
    p_synth.add_argument("--image-scale", dest="image_scale", type=int, default=4)
    p_synth.add_argument("--amplitude", type=float, default=3.0)
    p_synth.add_argument("--weak-amplitude", dest="weak_amplitude", type=float)
    p_synth.add_argument("--jitter", type=int, default=0)
    p_synth.add_argument("--seed", type=int, default=7)
    p_synth.set_defaults(func=cmd_synth)

    p_abl = sub.add_parser("ablate", help="module and weighting ablation table")
    _add_config_flags(p_abl)
    p_abl.add_argument("--manifest", required=True)
    p_abl.add_argument("--out", required=True)
    p_abl.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NpadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
