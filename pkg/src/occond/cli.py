"""Command-line surface: bundle rendering, guidance math, shape control, eval.

Exit codes: 0 success, 1 validation or semantic error, 2 I/O error.  With
``--json-errors`` failures are emitted to stderr as a JSON object instead
of plain text.  The environment variable ``OCCOND_THREADS`` caps internal
render parallelism (0 = auto); outputs are bitwise identical for any
setting.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import guidance, imgio, metrics, occlusion, raster, shapectl
from .bodymodel import load_body_model
from .errors import OccondError
from .scene import load_scene

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occond",
        description="Occlusion-aware conditioning buffers, guidance math, and metrics.",
    )
    parser.add_argument("--json-errors", action="store_true",
                        help="emit failures as JSON on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    render = sub.add_parser("render", help="render a scene to a conditioning bundle")
    render.add_argument("scene", help="scene JSON (occond-scene/1)")
    render.add_argument("model", help="body model JSON (occond-body/1)")
    render.add_argument("out_dir", help="output directory for the bundle")
    render.add_argument("--size", type=int, nargs=2, metavar=("W", "H"),
                        help="override the render size, rescaling intrinsics")
    render.add_argument("--area-min", type=int, default=None,
                        help="minimum occlusion component area in pixels")
    render.add_argument("--dilation", type=int, default=None,
                        help="occlusion mask dilation radius in pixels")
    render.add_argument("--edge-method", choices=("canny", "gradient"), default="canny")
    render.add_argument("--tau", type=float, default=occlusion.DEFAULT_TAU,
                        help="gradient edge threshold (meters)")
    render.add_argument("--canny-low", type=float, default=occlusion.DEFAULT_CANNY_LOW)
    render.add_argument("--canny-high", type=float, default=occlusion.DEFAULT_CANNY_HIGH)
    render.add_argument("--depth-clip", type=float, default=None,
                        help="override the camera depth clip (meters)")
    render.add_argument("--normal-vis", action="store_true",
                        help="also write normal_vis.png ((n+1)/2*255 encoding)")
    render.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: OCCOND_THREADS, 0 = auto)")

    occcfg = sub.add_parser("occcfg", help="apply region-weighted guidance to fields")
    occcfg.add_argument("uncond", help="unconditional prediction, PFM")
    occcfg.add_argument("cond", help="conditional prediction, PFM")
    occcfg.add_argument("mask", help="occlusion mask: PNG (0..255 maps to 0..1) or PFM weights")
    occcfg.add_argument("out", help="output PFM")
    occcfg.add_argument("--k-base", type=float, default=guidance.DEFAULT_K_BASE)
    occcfg.add_argument("--k-occ", type=float, default=guidance.DEFAULT_K_OCC)

    evalp = sub.add_parser("eval", help="run geometry metrics over annotations")
    evalp.add_argument("annotations", help="annotation JSON (occond-eval/1)")
    evalp.add_argument("--metric", choices=metrics.ALL_METRICS + ("all",), default="all")
    evalp.add_argument("--oks-threshold", type=float, default=metrics.DEFAULT_OKS_THRESHOLD)
    evalp.add_argument("--sigma", type=float, default=metrics.DEFAULT_SIGMA)
    evalp.add_argument("--absolute-joints", action="store_true",
                       help="skip root alignment in MPJPE")
    evalp.add_argument("--out", default=None, help="write the report JSON here (default stdout)")

    preview = sub.add_parser("preview", help="compose a bundle into one preview image")
    preview.add_argument("bundle_dir", help="directory produced by render")
    preview.add_argument("out", help="output PNG")

    shape = sub.add_parser("shape", help="shape-vector operations")
    shape_sub = shape.add_subparsers(dest="shape_command", required=True)
    lerp = shape_sub.add_parser("lerp", help="blend two shape files")
    lerp.add_argument("--a", required=True, help="first shape JSON ({'betas': [...]})")
    lerp.add_argument("--b", required=True, help="second shape JSON")
    lerp.add_argument("--gamma", type=float, required=True,
                      help="blend ratio; outside [0, 1] extrapolates")
    lerp.add_argument("--out", required=True, help="output shape JSON")
    return parser


def cmd_render(args) -> int:
    scene = load_scene(args.scene)
    model = load_body_model(args.model)
    camera = scene.camera
    if args.size is not None:
        camera = camera.with_size(args.size[0], args.size[1])
    if args.depth_clip is not None:
        camera = dataclasses.replace(camera, depth_clip=args.depth_clip)
    if camera is not scene.camera:
        scene = dataclasses.replace(scene, camera=camera)
    manifest = raster.render_bundle(
        scene,
        model,
        args.out_dir,
        area_min=args.area_min,
        dilation_radius=args.dilation,
        edge_method=args.edge_method,
        tau=args.tau,
        canny_low=args.canny_low,
        canny_high=args.canny_high,
        normal_vis=args.normal_vis,
        threads=args.threads,
    )
    print(json.dumps({"out_dir": args.out_dir, "outputs": sorted(manifest["outputs"])}))
    return EXIT_OK


def cmd_occcfg(args) -> int:
    uncond, _ = imgio.read_pfm(args.uncond)
    cond, _ = imgio.read_pfm(args.cond)
    for path, data in ((args.uncond, uncond), (args.cond, cond)):
        if not np.all(np.isfinite(data)):
            raise OccondError(f"{path}: prediction fields must be finite")
    if str(args.mask).endswith(".pfm"):
        mask = imgio.read_pfm(args.mask)[0].astype(np.float64)
    else:
        mask_img = imgio.read_png(args.mask)
        if mask_img.ndim == 3:
            mask_img = mask_img[:, :, 0]
        denom = 65535.0 if mask_img.dtype == np.uint16 else 255.0
        mask = mask_img.astype(np.float64) / denom
    params = guidance.GuidanceParams(k_base=args.k_base, k_occ=args.k_occ)
    out = guidance.occ_cfg(uncond.astype(np.float64), cond.astype(np.float64), mask, params)
    imgio.write_pfm(args.out, out, comments=[f"k_base={params.k_base}", f"k_occ={params.k_occ}"])
    return EXIT_OK


def cmd_eval(args) -> int:
    doc = metrics.load_annotations(args.annotations)
    selected = metrics.ALL_METRICS if args.metric == "all" else (args.metric,)
    report = metrics.evaluate_annotations(
        doc,
        metrics=selected,
        oks_threshold=args.oks_threshold,
        sigma=args.sigma,
        root_align=not args.absolute_joints,
    )
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="ascii") as f:
            f.write(payload + "\n")
    else:
        print(payload)
    return EXIT_OK


MASK_TINT = np.array([255, 64, 64], dtype=np.uint8)


def _depth_panel(depth: np.ndarray) -> np.ndarray:
    finite = np.isfinite(depth)
    gray = np.zeros(depth.shape, dtype=np.uint8)
    if finite.any():
        lo, hi = depth[finite].min(), depth[finite].max()
        span = hi - lo
        if span > 0:
            gray[finite] = np.round((depth[finite] - lo) / span * 255.0).astype(np.uint8)
        else:
            gray[finite] = 255
    return np.repeat(gray[:, :, None], 3, axis=2)


def cmd_preview(args) -> int:
    depth, _ = imgio.read_pfm(os.path.join(args.bundle_dir, "depth.pfm"))
    normal, _ = imgio.read_pfm(os.path.join(args.bundle_dir, "normal.pfm"))
    mask = imgio.png_u8_to_mask(imgio.read_png(os.path.join(args.bundle_dir, "mask.png")))
    edges = imgio.read_png(os.path.join(args.bundle_dir, "edges.png"))

    depth_panel = _depth_panel(depth)
    normal_panel = imgio.encode_normal_u8(normal)
    overlay_panel = depth_panel.copy()
    overlay_panel[mask != 0] = MASK_TINT
    edge_panel = np.repeat(edges[:, :, None].astype(np.uint8), 3, axis=2)
    composite = np.concatenate([depth_panel, normal_panel, overlay_panel, edge_panel], axis=1)
    imgio.write_png_u8(args.out, composite)
    return EXIT_OK


def cmd_shape_lerp(args) -> int:
    def read_betas(path):
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        if "betas" not in doc:
            raise OccondError(f"{path}: shape file must contain a 'betas' array")
        return np.asarray(doc["betas"], dtype=np.float64)

    blended = shapectl.blend_shapes(read_betas(args.a), read_betas(args.b), args.gamma)
    with open(args.out, "w", encoding="ascii") as f:
        json.dump({"betas": blended.betas.tolist()}, f)
        f.write("\n")
    return EXIT_OK


def _fail(args_json: bool, kind: str, message: str, code: int) -> int:
    if args_json:
        print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    else:
        print(f"occond: {kind}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "render": cmd_render,
        "occcfg": cmd_occcfg,
        "eval": cmd_eval,
        "preview": cmd_preview,
    }
    try:
        if args.command == "shape":
            return cmd_shape_lerp(args)
        return handlers[args.command](args)
    except OSError as e:
        return _fail(args.json_errors, "io", str(e), EXIT_IO)
    except (OccondError, ValueError, json.JSONDecodeError) as e:
        return _fail(args.json_errors, "validation", str(e), EXIT_VALIDATION)


if __name__ == "__main__":
    sys.exit(main())
