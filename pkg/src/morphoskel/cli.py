"""Command-line entry point: ``morphoskel <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Machine-readable results go to stdout or the requested file; diagnostics go
to stderr. All randomness comes from ``--seed`` through SeedSequence.spawn.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .diffusion import EmpiricalBayesDenoiser, IdentityCodec, NumericalError, karras_sigmas, sample
from .evaluation import (REPORT_SCHEMA_VERSION, conditional_fidelity_morph, conditional_fidelity_skel,
                         features_2d, features_3d, frechet_distance, precision_recall, topo_summary)
from .guidance import (AdaptiveNullGuidance, AnalyticGradient, ClassifierFreeGuidance, GuidanceLoss,
                       LossGuidance, masked_edit_sampler, parse_guidance, region_mask, tissue_mask)
from .morphology import (MorphRegressor, SoftMorphRegressor, build_morph_condition_map, extract_feature_matrix,
                         normalize_features, percentile_bounds, smooth_features)
from .phantom import PhantomSpec, generate
from .skeleton import TeasarParams, hard_skeletonize, soft_skeletonize
from .topology import violation_rate
from .volume import (CLASS_IDS, LUMEN, MSV_SCHEMA_VERSION, ConditioningMaps, SegmentationMap, VolumeFormatError,
                     argmax_labels, read_features, read_volume, write_array, write_features, write_volume)

log = logging.getLogger("morphoskel")

SAMPLER_KEYS = {"steps", "mode", "sigma_min", "sigma_max", "rho", "tau"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise DataError(f"{path}: expected a JSON object")
    return data


def _volumes(directory) -> list[tuple[str, SegmentationMap]]:
    files = sorted(Path(directory).glob("*.msv"))
    if not files:
        raise DataError(f"{directory}: no .msv volumes")
    return [(f.stem, read_volume(f)) for f in files]


# --- subcommands -----------------------------------------------------------------

def cmd_phantom(args) -> int:
    spec = PhantomSpec.from_dict(_load_json(args.spec))
    write_volume(generate(spec), args.output)
    return 0


def cmd_topo_validate(args) -> int:
    out = []
    for path in args.volumes:
        seg = read_volume(path)
        row = {"file": str(path)}
        for cls in ("lumen", "calcium"):
            row[f"violation_rate_{cls}"] = violation_rate(seg, cls, args.radius, not args.no_border)
        out.append(row)
    print(json.dumps(out[0] if len(out) == 1 else out))
    return 0


def _parse_features(text: str) -> tuple[str, ...]:
    return tuple(f.strip() for f in text.split(",") if f.strip())


def cmd_morph_extract(args) -> int:
    seg = read_volume(args.volume)
    mtx = extract_feature_matrix(seg, _parse_features(args.features))
    if args.smooth:
        mtx = smooth_features(mtx, args.smooth)
    if args.normalize:
        mtx = normalize_features(mtx, _load_json(args.normalize))
    write_features(mtx, args.output)
    return 0


def cmd_skeletonize(args) -> int:
    seg = read_volume(args.volume)
    lumen = seg.labels == LUMEN
    if args.method == "hard":
        params = TeasarParams.from_dict(_load_json(args.params)) if args.params else TeasarParams()
        graph = hard_skeletonize(lumen, params)
        if str(args.output).endswith(".json"):
            Path(args.output).write_text(graph.to_json())
        else:
            write_volume(SegmentationMap(graph.to_grid(seg.shape).astype(np.uint8), seg.spacing), args.output)
    else:
        skel = soft_skeletonize(lumen.astype(np.float64), args.iterations, downsample=not args.no_downsample)
        write_array(skel, args.output, seg.spacing)
    return 0


def _sampler_config(args) -> dict:
    cfg = {"steps": 25, "mode": "sde", "sigma_min": 0.01, "sigma_max": 80.0, "rho": 3.0, "tau": 0.1}
    if args.config:
        user = _load_json(args.config)
        unknown = set(user) - SAMPLER_KEYS
        if unknown:
            raise UsageError(f"unknown sampler config keys {sorted(unknown)}")
        cfg.update(user)
    for key in SAMPLER_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _build_model(dataset, feature_names, tau, latent_shape):
    """Reference denoiser over the dataset with each item's morphological condition."""
    mats = [extract_feature_matrix(seg, feature_names) for _, seg in dataset]
    bounds = percentile_bounds(mats)
    for n, (lo, hi) in bounds.items():
        if hi <= lo:
            bounds[n] = (lo, lo + 1.0)  # constant feature across the corpus
    conds = [ConditioningMaps(morph=build_morph_condition_map(normalize_features(m, bounds), latent_shape))
             for m in mats]
    codec = IdentityCodec()
    den = EmpiricalBayesDenoiser([codec.encode(seg) for _, seg in dataset], conds, tau=tau)
    return den, bounds, codec


def _target_condition(args, names, bounds, latent_shape):
    if args.target is not None:
        mtx = extract_feature_matrix(read_volume(args.target), names)
    elif args.features is not None:
        mtx = read_features(args.features)
        if mtx.names != tuple(names):
            raise DataError(f"feature file columns {mtx.names} != guidance features {tuple(names)}")
    else:
        return None
    return ConditioningMaps(morph=build_morph_condition_map(normalize_features(mtx, bounds), latent_shape))


def _guided(spec, den, cond, bounds, latent_shape, codec):
    if spec.kind == "none":
        return den
    if cond is None:
        raise UsageError("guidance needs a target (--target or --features)")
    if spec.kind == "cfg":
        return ClassifierFreeGuidance(den, spec.w)
    if spec.kind == "ang":
        return AdaptiveNullGuidance(den, MorphRegressor(spec.features, latent_shape, bounds), spec.w, codec)
    loss = GuidanceLoss(den, SoftMorphRegressor(spec.features, latent_shape[2], bounds), None, codec, spec.kind)
    return LossGuidance(den, AnalyticGradient(loss), spec.w)


def _prepare(args):
    if args.seed is None:
        raise UsageError(f"{args.command}: --seed is required")
    cfg = _sampler_config(args)
    if cfg["mode"] not in ("sde", "ode"):
        raise UsageError("mode must be sde or ode")
    spec = parse_guidance(args.guidance)
    dataset = _volumes(args.dataset)
    shape = dataset[0][1].shape
    den, bounds, codec = _build_model(dataset, spec.features, cfg["tau"], shape)
    cond = _target_condition(args, spec.features, bounds, shape)
    model = _guided(spec, den, cond, bounds, shape, codec)
    schedule = karras_sigmas(int(cfg["steps"]), cfg["sigma_min"], cfg["sigma_max"], cfg["rho"])
    return cfg, dataset, shape, model, cond, schedule, codec


def cmd_sample(args) -> int:
    cfg, dataset, shape, model, cond, schedule, codec = _prepare(args)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(args.seed).spawn(args.num_samples)]
    out = Path(args.output)
    if args.num_samples > 1:
        out.mkdir(parents=True, exist_ok=True)
    for k, rng in enumerate(rngs):
        z = sample(model, schedule, (4, *shape), cond, cfg["mode"], rng)
        seg = argmax_labels(codec.decode(z), dataset[0][1].spacing)
        write_volume(seg, out / f"sample_{k:03d}.msv" if args.num_samples > 1 else out)
    return 0


def _edit_mask(args, ref: SegmentationMap) -> np.ndarray:
    if (args.frames is None) == (args.tissue is None):
        raise UsageError("edit: give exactly one of --frames or --tissue")
    if args.frames is not None:
        try:
            a, b = (int(v) for v in args.frames.split(":"))
        except ValueError:
            raise UsageError("--frames expects START:STOP") from None
        return region_mask(ref.shape, a, b)
    names = [t.strip() for t in args.tissue.split(",")]
    unknown = [t for t in names if t not in CLASS_IDS]
    if unknown:
        raise UsageError(f"unknown tissue classes {unknown}")
    return tissue_mask(ref, [CLASS_IDS[t] for t in names], args.dilate)


def cmd_edit(args) -> int:
    cfg, dataset, shape, model, cond, schedule, codec = _prepare(args)
    ref = read_volume(args.reference)
    if ref.shape != shape:
        raise DataError(f"reference shape {ref.shape} != dataset shape {shape}")
    rng = np.random.default_rng(np.random.SeedSequence(args.seed).spawn(1)[0])
    seg = masked_edit_sampler(model, schedule, ref, _edit_mask(args, ref), cond, cfg["mode"], rng, codec)
    write_volume(seg, args.output)
    return 0


def cmd_evaluate(args) -> int:
    real = [s for _, s in _volumes(args.real)]
    gen = [s for _, s in _volumes(args.gen)]
    metrics = set(_parse_features(args.metrics))
    unknown = metrics - {"fd", "pr", "fidelity", "topo"}
    if unknown:
        raise UsageError(f"unknown metrics {sorted(unknown)}")
    report = {k: None for k in ("fd_3d", "fd_2d", "precision_3d", "recall_3d", "precision_2d", "recall_2d",
                                "morph_mae", "skel_mae", "topo_violation_lumen", "topo_violation_calcium")}
    report["schema_version"] = REPORT_SCHEMA_VERSION
    if metrics & {"fd", "pr"}:
        r3, g3, r2, g2 = features_3d(real), features_3d(gen), features_2d(real), features_2d(gen)
        if "fd" in metrics:
            report["fd_3d"], report["fd_2d"] = frechet_distance(r3, g3), frechet_distance(r2, g2)
        if "pr" in metrics:
            report["precision_3d"], report["recall_3d"] = precision_recall(r3, g3)
            report["precision_2d"], report["recall_2d"] = precision_recall(r2, g2)
    if "fidelity" in metrics:
        # generated item i was conditioned on real item i
        if len(real) != len(gen):
            raise DataError("fidelity pairs real and generated volumes one to one")
        names = _parse_features(args.features)
        report["morph_mae"] = conditional_fidelity_morph([extract_feature_matrix(r, names) for r in real], gen)
        report["skel_mae"] = float(np.mean([conditional_fidelity_skel(r, [g]) for r, g in zip(real, gen)]))
    if "topo" in metrics:
        report.update(topo_summary(gen))
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


# --- parser ----------------------------------------------------------------------------

def _add_sampler_args(p):
    p.add_argument("--dataset", required=True, help="directory of .msv training volumes")
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=["sde", "ode"])
    p.add_argument("--sigma-min", dest="sigma_min", type=float)
    p.add_argument("--sigma-max", dest="sigma_max", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--tau", type=float, help="condition bandwidth of the reference denoiser")
    p.add_argument("--config", help="sampler JSON (steps, mode, sigma_min, sigma_max, rho, tau)")
    p.add_argument("--seed", type=int)
    p.add_argument("--guidance", default="none")
    p.add_argument("--target", help="volume whose features are the conditioning target")
    p.add_argument("--features", help="feature CSV to use as the conditioning target")
    p.add_argument("-o", "--output", required=True)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="morphoskel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version",
                   version=f"morphoskel {__version__} (MSV1 schema {MSV_SCHEMA_VERSION}, report schema {REPORT_SCHEMA_VERSION})")
    p.add_argument("--log-level", default="WARNING", type=str.upper,
                   choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])
    p.add_argument("--threads", type=int, default=1, help="accepted for config parity; work is single-threaded")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate a phantom volume from a JSON spec")
    s.add_argument("--spec", required=True)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("topo-validate", help="per-class topological violation rates")
    s.add_argument("volumes", nargs="+")
    s.add_argument("--radius", type=int, default=3)
    s.add_argument("--no-border", action="store_true", help="do not treat outside-grid pixels as background")
    s.set_defaults(func=cmd_topo_validate)

    s = sub.add_parser("morph-extract", help="per-frame feature curves as CSV")
    s.add_argument("volume")
    s.add_argument("--features", default="lumen_area,calcium_area")
    s.add_argument("--smooth", type=int)
    s.add_argument("--normalize", help="bounds JSON {feature: [p2, p98]}")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_morph_extract)

    s = sub.add_parser("skeletonize", help="lumen centerline (graph JSON, grid or soft map)")
    s.add_argument("volume")
    s.add_argument("--method", choices=["hard", "soft"], default="hard")
    s.add_argument("--params", help="TEASAR parameter JSON")
    s.add_argument("--iterations", type=int, default=10)
    s.add_argument("--no-downsample", action="store_true")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_skeletonize)

    s = sub.add_parser("sample", help="draw samples from the reference denoiser")
    _add_sampler_args(s)
    s.add_argument("--num-samples", type=int, default=1)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("edit", help="resample a masked region of a reference volume")
    s.add_argument("reference")
    _add_sampler_args(s)
    s.add_argument("--frames", help="editable frame range START:STOP")
    s.add_argument("--tissue", help="comma-separated classes to edit, e.g. lumen")
    s.add_argument("--dilate", type=int, default=0)
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("evaluate", help="FD, precision/recall, fidelity and topology report")
    s.add_argument("--real", required=True)
    s.add_argument("--gen", required=True)
    s.add_argument("--metrics", default="fd,pr,fidelity,topo")
    s.add_argument("--features", default="lumen_area,calcium_area")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level, stream=sys.stderr)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, VolumeFormatError, OSError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
