"""Batch entry points: ``python -m splatedit <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage (no or unknown command),
3 invalid flags, 4 missing input file. Failures print one JSON line to stderr.
"""
import argparse
import json
import os
import sys

import numpy as np

from . import io
from .attention import (
    persona_blend_attention,
    reference_concat_attention,
    sdp_attention,
    softmax,
)
from .diffusion import (
    DenoiserConfig,
    NoiseSchedule,
    ToyDenoiser,
    train_base,
    train_lora,
)
from .gradcheck import rasterizer_gradcheck
from .lora import load_deltas, save_deltas
from .masklift import label_editable
from .rasterizer import RenderSettings, render_forward
from .toydata import read_dataset, write_dataset
from .training import (
    EditConfig,
    FitConfig,
    IdentityEditor,
    OracleRecolorEditor,
    ToyDiffusionEditor,
    TrainingLog,
    fit_scene,
    run_edit,
)
from .turntable import render_turntable

EXIT_RUNTIME, EXIT_USAGE, EXIT_FLAGS, EXIT_MISSING = 1, 2, 3, 4
GRADCHECK_TOLERANCE = 1e-2


class CliError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_FLAGS, "invalid_flags", message)


def _color(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected r,g,b floats, got {text!r}")
    if len(vals) != 3 or not all(0.0 <= v <= 1.0 for v in vals):
        raise argparse.ArgumentTypeError(f"expected three values in [0, 1], got {text!r}")
    return tuple(vals)


def _positive_int(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _render_flags(p):
    p.add_argument("--background", type=_color, default=(0.0, 0.0, 0.0))
    p.add_argument("--tile-size", type=_positive_int, default=16)


def build_parser():
    parser = _Parser(prog="splatedit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a scene to posed images")
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-init", type=_positive_int, default=500)
    p.add_argument("--log")
    _render_flags(p)

    p = sub.add_parser("label", help="mark editable Gaussians from garment masks")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--masks", help="directory of mask_0000.png ... (default: camera JSON)")
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=0.6)
    p.add_argument("--min-views", type=_positive_int, default=2)
    p.add_argument("--seed", type=int, default=0)
    _render_flags(p)

    p = sub.add_parser("edit", help="optimize editable Gaussians toward edited renders")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--masks")
    p.add_argument("--out", required=True)
    p.add_argument("--editor", choices=("oracle", "toy-diffusion", "identity"), default="oracle")
    p.add_argument("--iters", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.55)
    p.add_argument("--lambda1", type=float, default=10.0)
    p.add_argument("--lambda2", type=float, default=15.0)
    p.add_argument("--views", type=_positive_int, default=4)
    p.add_argument("--refresh-interval", type=_positive_int, default=2500)
    p.add_argument("--target-color", type=_color, default=(0.1, 0.2, 0.9))
    p.add_argument("--denoiser", help="toy denoiser .npz (toy-diffusion editor)")
    p.add_argument("--lora", help="LORA delta file applied to the denoiser")
    p.add_argument("--label", type=int, default=0)
    p.add_argument("--log")
    _render_flags(p)

    p = sub.add_parser("render", help="render one PNG per camera, or an orbit")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras")
    p.add_argument("--out", required=True)
    p.add_argument("--orbit", type=_positive_int, help="frame count of a turntable orbit")
    p.add_argument("--radius", type=float, default=3.5)
    p.add_argument("--elevation", type=float, default=0.2)
    p.add_argument("--size", type=_positive_int, default=64)
    p.add_argument("--seed", type=int, default=0)
    _render_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the rasterizer")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gaussians", type=_positive_int, default=8)
    p.add_argument("--size", type=_positive_int, default=32)

    p = sub.add_parser("attn-demo", help="print attention identities on random inputs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.55)
    p.add_argument("--views", type=_positive_int, default=4)

    p = sub.add_parser("lora-train", help="fine-tune low-rank deltas of the toy denoiser")
    p.add_argument("--data", required=True, help="manifest.json from gen-toydata")
    p.add_argument("--out", required=True)
    p.add_argument("--denoiser", help="base .npz; trained from --data when omitted")
    p.add_argument("--save-base")
    p.add_argument("--base-steps", type=_positive_int, default=3000)
    p.add_argument("--iters", type=_positive_int, default=1000)
    p.add_argument("--rank", type=_positive_int, default=8)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-toydata", help="write the procedural mannequin dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=_positive_int, default=512)
    p.add_argument("--size", type=_positive_int, default=16)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _require_file(path, what):
    if path is None or not os.path.exists(path):
        raise CliError(EXIT_MISSING, "missing_file", f"{what} not found: {path}")
    return path


def _settings(args):
    return RenderSettings(background=args.background, tile_size=args.tile_size)


def _load_masks(args, cameras):
    if args.masks:
        if not os.path.isdir(args.masks):
            raise CliError(EXIT_MISSING, "missing_file", f"mask directory not found: {args.masks}")
        paths = [os.path.join(args.masks, f"mask_{i:04d}.png") for i in range(len(cameras))]
    else:
        paths = [c.mask_path for c in cameras]
        if any(p is None for p in paths):
            raise CliError(EXIT_FLAGS, "invalid_flags",
                           "cameras lack mask paths; pass --masks")
    return [io.read_mask(_require_file(p, "mask")) for p in paths]


def cmd_fit(args):
    cameras = io.load_cameras(_require_file(args.cameras, "cameras"))
    if any(c.image_path is None for c in cameras):
        raise CliError(EXIT_FLAGS, "invalid_flags", "every camera needs an image path")
    images = [io.read_png(_require_file(c.image_path, "image")) for c in cameras]
    cfg = FitConfig(iters=args.iters, n_init=args.n_init, seed=args.seed,
                    background=args.background, tile_size=args.tile_size)
    log = TrainingLog(args.log)
    try:
        scene = fit_scene(images, cameras, cfg=cfg, log=log)
    finally:
        log.close()
    io.save_scene(scene, args.out)
    print(json.dumps({"gaussians": len(scene), "out": args.out}))


def cmd_label(args):
    scene = io.load_scene(_require_file(args.scene, "scene"))
    cameras = io.load_cameras(_require_file(args.cameras, "cameras"))
    masks = _load_masks(args, cameras)
    out = label_editable(scene, cameras, masks, tau=args.tau, min_views=args.min_views,
                         settings=_settings(args))
    io.save_scene(out, args.out)
    print(json.dumps({"editable": int(out.editable.sum()), "total": len(out)}))


def _editor(args):
    if args.editor == "identity":
        return IdentityEditor(), None
    if args.editor == "oracle":
        return OracleRecolorEditor(args.target_color), None
    if args.denoiser is None:
        raise CliError(EXIT_FLAGS, "invalid_flags", "--editor toy-diffusion needs --denoiser")
    denoiser = ToyDenoiser.load(_require_file(args.denoiser, "denoiser"))
    if args.lora:
        deltas = load_deltas(_require_file(args.lora, "lora"))
        for name, delta in deltas.items():
            denoiser.layers[name].delta = delta
    editor = ToyDiffusionEditor(denoiser, NoiseSchedule.linear(denoiser.config.T),
                                label=args.label, lam=args.lam, n_views=args.views,
                                seed=args.seed)
    return editor, args.label


def cmd_edit(args):
    scene = io.load_scene(_require_file(args.scene, "scene"))
    cameras = io.load_cameras(_require_file(args.cameras, "cameras"))
    masks = _load_masks(args, cameras)
    try:
        cfg = EditConfig(lam=args.lam, lambda1=args.lambda1, lambda2=args.lambda2,
                         n_views=args.views, refresh_interval=args.refresh_interval,
                         edit_iters=args.iters, background=args.background,
                         tile_size=args.tile_size, seed=args.seed)
    except ValueError as exc:
        raise CliError(EXIT_FLAGS, "invalid_flags", str(exc))
    editor, conditioning = _editor(args)
    log = TrainingLog(args.log)
    try:
        out = run_edit(scene, cameras, masks, editor, cfg, conditioning=conditioning, log=log)
    finally:
        log.close()
    io.save_scene(out, args.out)
    print(json.dumps({"refreshes": len(log.events("refresh")), "out": args.out}))


def cmd_render(args):
    scene = io.load_scene(_require_file(args.scene, "scene"))
    settings = _settings(args)
    if args.orbit:
        paths = render_turntable(scene, args.out, args.orbit, args.radius, args.elevation,
                                 width=args.size, height=args.size, settings=settings)
    else:
        if args.cameras is None:
            raise CliError(EXIT_FLAGS, "invalid_flags", "render needs --cameras or --orbit")
        cameras = io.load_cameras(_require_file(args.cameras, "cameras"))
        os.makedirs(args.out, exist_ok=True)
        paths = []
        for i, cam in enumerate(cameras):
            path = os.path.join(args.out, f"view_{i:04d}.png")
            io.write_png(path, render_forward(scene, cam, settings).rgb)
            paths.append(path)
    print(json.dumps({"frames": len(paths), "out": args.out}))


def cmd_gradcheck(args):
    res = rasterizer_gradcheck(args.seed, args.gaussians, args.size)
    ok = bool(res.max_rel_error < GRADCHECK_TOLERANCE)
    print(json.dumps({"max_rel_error": float(res.max_rel_error), "checked": res.checked,
                      "tolerance": GRADCHECK_TOLERANCE, "pass": ok}))
    return 0 if ok else EXIT_RUNTIME


def cmd_attn_demo(args):
    if not 0.0 <= args.lam <= 1.0:
        raise CliError(EXIT_FLAGS, "invalid_flags", "--lambda must lie in [0, 1]")
    rng = np.random.default_rng(args.seed)
    Q, K, V = (rng.normal(size=(6, 8)) for _ in range(3))
    bank = [(rng.normal(size=(6, 8)), rng.normal(size=(6, 8))) for _ in range(args.views)]
    plain = sdp_attention(Q, K, V)
    report = {
        "softmax_row_sum_error": float(np.abs(softmax(Q @ K.T).sum(-1) - 1).max()),
        "duplication_error": float(np.abs(reference_concat_attention(Q, K, V, K, V)
                                          - plain).max()),
        "lambda": args.lam,
        "persona_vs_own_distance": float(np.abs(persona_blend_attention(Q, K, V, bank, args.lam)
                                                - plain).max()),
        "lambda_one_error": float(np.abs(persona_blend_attention(Q, K, V, bank, 1.0)
                                         - plain).max()),
    }
    print(json.dumps(report))


def cmd_lora_train(args):
    data = read_dataset(_require_file(args.data, "dataset manifest"))
    schedule = NoiseSchedule.linear()
    h, w = data["images"].shape[1:3]
    if args.denoiser:
        denoiser = ToyDenoiser.load(_require_file(args.denoiser, "denoiser"))
    else:
        denoiser = ToyDenoiser(DenoiserConfig(height=h, width=w), seed=args.seed)
        train_base(denoiser, data["images"], data["labels"], schedule,
                   steps=args.base_steps, seed=args.seed)
        if args.save_base:
            denoiser.save(args.save_base)
    denoiser.attach_lora(args.rank, seed=args.seed)
    losses = train_lora(denoiser, data["images"], data["labels"], schedule,
                        iters=args.iters, seed=args.seed)
    save_deltas(denoiser.layers, args.out)
    print(json.dumps({"first_loss": float(losses[0]), "last_loss": float(losses[-1]),
                      "out": args.out}))


def cmd_gen_toydata(args):
    path = write_dataset(args.out, args.count, args.size, args.size, args.seed)
    print(json.dumps({"manifest": path, "count": args.count}))


COMMANDS = {
    "fit": cmd_fit,
    "label": cmd_label,
    "edit": cmd_edit,
    "render": cmd_render,
    "gradcheck": cmd_gradcheck,
    "attn-demo": cmd_attn_demo,
    "lora-train": cmd_lora_train,
    "gen-toydata": cmd_gen_toydata,
}


def _fail(code, kind, message):
    print(json.dumps({"error": kind, "message": message, "exit": code}), file=sys.stderr)
    return code


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if argv[0] in ("-h", "--help"):
        parser.print_help()
        return 0
    if argv[0] not in COMMANDS:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, "unknown_command", f"unknown command {argv[0]!r}")
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except SystemExit as exc:
        return int(exc.code or 0)
    print(json.dumps({"config": vars(args)}))
    try:
        code = COMMANDS[args.command](args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except Exception as exc:
        return _fail(EXIT_RUNTIME, type(exc).__name__, str(exc))
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
