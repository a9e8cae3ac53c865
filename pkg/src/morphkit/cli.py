"""Command-line entry point: run, eval, caption, analyze-freq.

Exit codes: 0 success, 2 unreadable inputs or bad configuration, 3 backend
failure, 4 VLM endpoint unreachable (caption command only; the run command
degrades to an empty anchor with a warning instead).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .analysis import DEFAULT_CUTOFF, profile
from .engine import MorphConfig, MorphEngine
from .errors import BackendError, MorphkitError, VlmClientError
from .feature_cache import FeatureCache, load_cache
from .metrics import evaluate_sequence
from .prompting import PromptTriplet, VlmClient, save_triplet
from . import reporting

VLM_URL_ENV = "CHIMERA_VLM_URL"

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_BACKEND = 3
EXIT_VLM = 4

_CONFIG_KEYS = {f.name for f in dataclasses.fields(MorphConfig)}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BackendError as exc:
        print(f"error: backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (OSError, ValueError, KeyError, MorphkitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="morphkit",
        description="Zero-shot diffusion image morphing and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="generate a morph sequence between two images")
    run.add_argument("--pair", nargs=2, metavar=("A", "B"), required=True)
    run.add_argument("--frames", type=int, default=None, help="frame count K")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--config", default=None, help="JSON config file")
    run.add_argument("--backend", choices=["toy", "adapter"], default=None)
    run.add_argument("--seed", type=int, default=None, help="toy backend seed")
    run.add_argument("--steps", type=int, default=None,
                     help="set n_inv and n_dng together")
    run.add_argument("--lambda", dest="lambda_all", type=float, default=None,
                     help="injection weight for all three stages")
    run.add_argument("--no-aci", action="store_true",
                     help="disable cached-feature injection")
    run.add_argument("--no-sap", action="store_true",
                     help="disable anchored attention (empty anchor)")
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--anchor", default=None, help="override the anchor text")
    run.add_argument("--caption-a", default=None)
    run.add_argument("--caption-b", default=None)
    run.add_argument("--vlm-url", default=None,
                     help=f"captioning endpoint (default ${VLM_URL_ENV})")
    run.add_argument("--vlm-model", default="")
    run.add_argument("--no-contact-sheet", action="store_true")
    run.add_argument("--save-cache", action="store_true",
                     help="write the two inversion caches next to the frames")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="score a stored morph sequence")
    ev.add_argument("--seq", required=True, help="sequence directory")
    ev.add_argument("--gamma", type=float, default=1.0)
    ev.add_argument("--provider", choices=["cosine"], default="cosine")
    ev.add_argument("--trend", choices=["angle", "linear"], default="angle",
                    help="endpoint-trend interpolation for the global score")
    ev.add_argument("--out", default=None, help="metrics JSON path")
    ev.set_defaults(func=cmd_eval)

    cap = sub.add_parser("caption", help="query the VLM for an anchored triplet")
    cap.add_argument("--pair", nargs=2, metavar=("A", "B"), required=True)
    cap.add_argument("--out", required=True, help="triplet JSON path")
    cap.add_argument("--vlm-url", default=None)
    cap.add_argument("--vlm-model", default="")
    cap.add_argument("--timeout", type=float, default=30.0)
    cap.set_defaults(func=cmd_caption)

    freq = sub.add_parser("analyze-freq",
                          help="frequency-band profile of cached features")
    source = freq.add_mutually_exclusive_group(required=True)
    source.add_argument("--cache", default=None, help=".chimcache file")
    source.add_argument("--image", default=None,
                        help="invert this image with the toy backend first")
    freq.add_argument("--axis", choices=["layer", "timestep"], default="layer")
    freq.add_argument("--out", required=True, help="CSV path")
    freq.add_argument("--cutoff", type=float, default=DEFAULT_CUTOFF)
    freq.add_argument("--config", default=None)
    freq.add_argument("--seed", type=int, default=None)
    freq.add_argument("--steps", type=int, default=None)
    freq.set_defaults(func=cmd_analyze_freq)
    return parser


def _load_config(args) -> MorphConfig:
    values: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file {config_path} is not valid JSON: {exc}")
        unknown = set(raw) - _CONFIG_KEYS
        if unknown:
            raise ValueError(
                f"unknown config key(s) {sorted(unknown)}; valid keys: "
                f"{sorted(_CONFIG_KEYS)}"
            )
        values.update(raw)

    overrides = {
        "k": getattr(args, "frames", None),
        "backend": getattr(args, "backend", None),
        "toy_seed": getattr(args, "seed", None),
        "workers": getattr(args, "workers", None),
    }
    steps = getattr(args, "steps", None)
    if steps is not None:
        overrides["n_inv"] = steps
        overrides["n_dng"] = steps
    lambda_all = getattr(args, "lambda_all", None)
    if lambda_all is not None:
        overrides["lambda_d"] = lambda_all
        overrides["lambda_m"] = lambda_all
        overrides["lambda_u"] = lambda_all
    if getattr(args, "no_aci", False):
        overrides["aci"] = False
    if getattr(args, "no_sap", False):
        overrides["sap"] = False
    values.update({k: v for k, v in overrides.items() if v is not None})
    return reporting.config_from_dict(values)


def _resolve_triplet(args, config) -> tuple[PromptTriplet, str]:
    """Caption the pair via the VLM when configured, else fall back.

    Explicit --anchor/--caption-* flags override whatever the VLM returned
    (or stand alone when no endpoint is configured).
    """
    url = args.vlm_url or os.environ.get(VLM_URL_ENV)
    triplet, source = PromptTriplet.empty(), "none"
    if url:
        try:
            client = VlmClient(url, model=args.vlm_model)
            triplet = client.caption_pair(args.pair[0], args.pair[1])
            source = "vlm"
        except MorphkitError as exc:
            print(f"warning: VLM captioning failed ({exc}); "
                  "falling back to an empty anchor", file=sys.stderr)
            triplet, source = PromptTriplet.empty(), "fallback"
    if args.anchor is not None or args.caption_a is not None or args.caption_b is not None:
        triplet = PromptTriplet(
            anchor=args.anchor if args.anchor is not None else triplet.anchor,
            caption_a=args.caption_a if args.caption_a is not None else triplet.caption_a,
            caption_b=args.caption_b if args.caption_b is not None else triplet.caption_b,
        )
        source = "override" if source == "none" else f"{source}+override"
    if not config.sap:
        triplet = PromptTriplet(anchor="", caption_a=triplet.caption_a,
                                caption_b=triplet.caption_b)
    return triplet, source


def cmd_run(args) -> int:
    config = _load_config(args)
    engine = MorphEngine.from_config(config)
    size = engine.backend.descriptor.image_shape
    image_a = reporting.load_image(args.pair[0], size=size)
    image_b = reporting.load_image(args.pair[1], size=size)
    triplet, source = _resolve_triplet(args, config)

    seq = engine.generate_sequence(image_a, image_b, triplet)
    reporting.write_run_dir(seq, args.out, args.pair[0], args.pair[1],
                            triplet_source=source,
                            contact_sheet=not args.no_contact_sheet)
    if args.save_cache:
        for image, name in ((image_a, "A"), (image_b, "B")):
            cache = FeatureCache(name, timesteps=engine.schedule.t_inv)
            embedding = seq.triplet.e_a if name == "A" else seq.triplet.e_b
            engine.invert(image, cache, embedding)
            cache.save(Path(args.out) / f"cache_{name.lower()}.chimcache")
    print(f"wrote {config.k} frames to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    seq_dir = Path(args.seq)
    image_a, image_b, frames, latent_path = reporting.load_run_dir(seq_dir)
    report = evaluate_sequence(image_a, image_b, frames, gamma=args.gamma,
                               latent_path=latent_path, trend_mode=args.trend)
    out_path = Path(args.out) if args.out else seq_dir / "metrics.json"
    reporting.write_metrics_json(report, out_path)
    alphas = [ (k + 1) / (len(frames) + 1) for k in range(len(frames)) ]
    reporting.write_metrics_csv(report, alphas, out_path.with_suffix(".csv"))
    reporting.write_metrics_figure(report, alphas,
                                   out_path.with_name("per_frame_scores.png"))
    print(f"GLCS {report.glcs_display:.3f} "
          f"(GCS {report.gcs:.5f}, LCS {report.lcs:.5f}) -> {out_path}")
    return EXIT_OK


def cmd_caption(args) -> int:
    url = args.vlm_url or os.environ.get(VLM_URL_ENV)
    if not url:
        print(f"error: no VLM endpoint; pass --vlm-url or set ${VLM_URL_ENV}",
              file=sys.stderr)
        return EXIT_VLM
    for path in args.pair:
        if not Path(path).exists():
            print(f"error: unreadable image {path}", file=sys.stderr)
            return EXIT_INPUT
    try:
        client = VlmClient(url, model=args.vlm_model, timeout=args.timeout)
        triplet = client.caption_pair(args.pair[0], args.pair[1])
    except VlmClientError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VLM
    save_triplet(triplet, args.out, source="vlm")
    print(f"wrote triplet to {args.out}")
    return EXIT_OK


def cmd_analyze_freq(args) -> int:
    if args.cache:
        cache = load_cache(args.cache)
    else:
        config = _load_config(args)
        engine = MorphEngine.from_config(config)
        image = reporting.load_image(args.image,
                                     size=engine.backend.descriptor.image_shape)
        cache = FeatureCache("X", timesteps=engine.schedule.t_inv)
        engine.invert(image, cache)
    band_profile = profile(cache, axis=args.axis, cutoff_fraction=args.cutoff)
    out_path = Path(args.out)
    reporting.write_profile_csv(band_profile, out_path)
    reporting.write_profile_figure(band_profile,
                                   out_path.with_suffix(".png"))
    print(f"wrote {len(band_profile.points)} profile points to {out_path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
