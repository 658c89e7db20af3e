"""Command-line surface: convert, train, encode, decode, eval, bdrate,
params, selftest.

Exit codes are fixed for scripting: 0 success, 1 usage error, 2 data error
(bad files, bad values, failed preconditions), 3 internal invariant failure.
Messages go to standard error; all outputs are deterministic for identical
inputs.  ``YDLC_CHECKPOINT_DIR`` supplies a fallback directory for bare
checkpoint filenames.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile

import numpy as np

from . import autograd as ag
from . import codec as cd
from . import evaluation as ev
from . import frames as fr
from . import networks as nw
from . import rans
from . import synthetic as sy
from . import training as tr
from .errors import ConfigError

CHECKPOINT_DIR_ENV = "YDLC_CHECKPOINT_DIR"


def _resolve_checkpoint(path: str) -> str:
    if os.path.exists(path):
        return path
    env = os.environ.get(CHECKPOINT_DIR_ENV)
    if env:
        cand = os.path.join(env, path)
        if os.path.exists(cand):
            return cand
    return path


def _kind(path: str) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".ppm", ".yuv", ".ydlb", ".ydlc"):
        return ext[1:]
    raise ConfigError(f"cannot tell what {path!r} is; expected a .ppm, .yuv, "
                      f".ydlb or .ydlc extension")


def _need_dims(args, what: str):
    if args.width is None or args.height is None:
        raise ConfigError(f"--width and --height are required to read {what}")
    return args.width, args.height


def _read_frames(args, path):
    """Frames named by an input path: raw .yuv (with dims) or one .ppm."""
    if _kind(path) == "ppm":
        return [fr.rgb_to_yuv420(fr.read_ppm(path))]
    w, h = _need_dims(args, "raw YUV")
    return fr.read_yuv(path, w, h, start=args.start, count=args.count,
                       step=args.step)


# ---------------------------------------------------------------------------
# Subcommands.

def cmd_convert(args) -> int:
    out_kind = _kind(args.out)
    in_kinds = {_kind(p) for p in args.inputs}
    if in_kinds == {"ppm"} and out_kind == "yuv":
        frames = [fr.rgb_to_yuv420(fr.read_ppm(p)) for p in args.inputs]
        fr.write_yuv(args.out, frames)
    elif in_kinds == {"yuv"} and len(args.inputs) == 1:
        w, h = _need_dims(args, "raw YUV")
        frames = fr.read_yuv(args.inputs[0], w, h, start=args.start,
                             count=args.count, step=args.step)
        if out_kind == "yuv":
            fr.write_yuv(args.out, frames)
        elif out_kind == "ppm":
            if len(frames) != 1:
                raise ConfigError(f"a .ppm holds one frame; selection "
                                  f"yielded {len(frames)} (use --count 1)")
            fr.write_ppm(args.out, fr.yuv420_to_rgb(frames[0]))
        else:
            raise ConfigError(f"cannot convert to {out_kind}")
    else:
        raise ConfigError("supported conversions: N x .ppm -> .yuv, "
                          ".yuv -> .yuv (frame selection), .yuv -> .ppm")
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    with open(args.config, encoding="utf-8") as f:
        cfg = tr.parse_config(f.read())
    frames = _read_frames(args, args.data)

    def progress(step, stats):
        if not args.quiet:
            print(f"step {step}  loss {stats['loss']:.4f}  "
                  f"rate {stats['rate_bpp']:.4f} bpp  "
                  f"dist {stats['distortion']:.2f}")

    model, log = tr.train(cfg, frames, ckpt_path=args.out, progress=progress)
    if args.log:
        log.write_csv(args.log)
    last = log.records[-1]
    print(f"trained {cfg.codec} N={cfg.n} M={cfg.m} for {cfg.steps} steps; "
          f"final loss {last['loss']:.4f}; checkpoint {args.out}")
    return 0


def cmd_encode(args) -> int:
    model = cd.load_model(_resolve_checkpoint(args.model))
    frames = _read_frames(args, args.input)
    if len(frames) > 1 and "{i" not in args.out:
        raise ConfigError(f"{len(frames)} frames selected; --out needs an "
                          "{i} placeholder, e.g. out_{i:04d}.ydlb")
    for idx, frame in enumerate(frames):
        res = cd.encode_frame(model, frame, quality=args.quality)
        path = args.out.format(i=idx) if "{i" in args.out else args.out
        with open(path, "wb") as f:
            f.write(res.data)
        bpp = 8 * len(res.data) / (frame.width * frame.height)
        print(f"{path}: {len(res.data)} bytes  {bpp:.4f} bpp  "
              f"psnr_y {fr.psnr(frame.y, res.recon.y):.2f} dB")
    return 0


def cmd_decode(args) -> int:
    model = cd.load_model(_resolve_checkpoint(args.model))
    frames = []
    for path in args.inputs:
        with open(path, "rb") as f:
            frames.append(cd.decode_frame(model, f.read()))
    if _kind(args.out) == "ppm":
        if len(frames) != 1:
            raise ConfigError("a .ppm holds one frame; decode one bitstream")
        fr.write_ppm(args.out, fr.yuv420_to_rgb(frames[0]))
    else:
        fr.write_yuv(args.out, frames)
    print(f"decoded {len(frames)} frame(s) -> {args.out}")
    return 0


def _parse_labeled(pairs):
    out = []
    for item in pairs:
        label, sep, path = item.partition("=")
        if not sep or not label or not path:
            raise ConfigError(f"--model expects LABEL=PATH, got {item!r}")
        out.append((label, _resolve_checkpoint(path)))
    return out


def cmd_eval(args) -> int:
    checkpoints = _parse_labeled(args.model)
    frames = _read_frames(args, args.data)
    curve = ev.sweep(checkpoints, frames, stride=args.stride, fps=args.fps,
                     sequence=args.sequence, group=args.group)
    curves = [curve]
    if args.append and os.path.exists(args.curves):
        key = (curve.codec, curve.sequence, curve.group)
        curves = [c for c in ev.read_curves(args.curves)
                  if (c.codec, c.sequence, c.group) != key] + curves
    ev.write_curves(args.curves, curves)
    if args.plot:
        ev.plot_curves_svg(args.plot, curves)
    for p in curve.points:
        print(f"{curve.codec} {p.label}: {p.rate_bpp:.4f} bpp  "
              f"{p.rate_kbps:.1f} kbps  Y {p.psnr_y:.2f}  U {p.psnr_u:.2f}  "
              f"V {p.psnr_v:.2f} dB")
    print(f"wrote {args.curves}")
    return 0


def cmd_bdrate(args) -> int:
    curves = ev.read_curves(args.curves)
    report = ev.bd_report(curves, args.anchor)
    sys.stdout.write(ev.format_report(report))
    if args.out:
        ev.write_report(args.out, report)
    if args.plot:
        ev.plot_curves_svg(args.plot, curves)
    return 0


def cmd_params(args) -> int:
    archs = (("separate-y", "separate-uv") if args.arch == "separate"
             else (args.arch,))
    total = 0
    for arch in archs:
        spec = nw.build_network(arch, args.n, args.m)
        print(f"{arch}  N={args.n} M={args.m}")
        for gname, layers in spec.groups():
            for i, layer in enumerate(layers):
                geom = (f"{layer.k}x{layer.k} s{layer.stride}"
                        if layer.kind in ("conv", "tconv") else "")
                print(f"  {gname:<11} {i}  {layer.kind:<6} "
                      f"{layer.cin:>4} -> {layer.cout:<4} {geom:<8} "
                      f"{layer.param_count():>10,}")
        sub = spec.count_params()
        total += sub
        print(f"  {arch} transform params: {sub:,}")
    print(f"transform total: {total:,}")
    if args.with_hyper:
        if args.arch not in cd.CODECS:
            raise ConfigError(f"--with-hyper needs a codec name, one of "
                              f"{cd.CODECS}")
        print(f"codec total (with hyper networks): "
              f"{cd.count_total_params(args.arch, args.n, args.m):,}")
    return 0


# ---------------------------------------------------------------------------
# Self test.

def _st_gradients():
    rng = np.random.default_rng(0)
    x = ag.Tensor(rng.normal(0, 1, (1, 2, 6, 6)), requires_grad=True)
    w1 = ag.Tensor(rng.normal(0, 0.4, (3, 2, 3, 3)), requires_grad=True)
    slope = ag.Tensor(np.full((1, 3, 1, 1), 0.3), requires_grad=True)
    w2 = ag.Tensor(rng.normal(0, 0.4, (3, 2, 3, 3)), requires_grad=True)

    def forward():
        t = ag.conv2d(x, w1, stride=1)
        t = ag.prelu(t, slope)
        t = ag.tconv2d(t, w2, stride=2)
        return ag.mean(ag.square(t))

    loss = forward()
    ag.backward(loss)
    h = 1e-6
    for t in (x, w1, slope, w2):
        flat = t.data.reshape(-1)
        for idx in range(0, flat.size, max(1, flat.size // 5)):
            keep = flat[idx]
            flat[idx] = keep + h
            up = forward().item()
            flat[idx] = keep - h
            dn = forward().item()
            flat[idx] = keep
            num = (up - dn) / (2 * h)
            got = t.grad.reshape(-1)[idx]
            if abs(got - num) > 1e-4 * max(1.0, abs(num)):
                raise AssertionError(f"gradient mismatch {got} vs {num}")


def _st_rans():
    rng = np.random.default_rng(1)
    data = rng.integers(0, 256, 5000).tolist()
    blob = rans.rans_encode(data, [rans.BYTE_TABLE] * len(data))
    if rans.rans_decode(blob, [rans.BYTE_TABLE] * len(data)) != data:
        raise AssertionError("byte roundtrip mismatch")
    bad = bytearray(blob)
    bad[len(bad) // 2] ^= 0x55
    try:
        out = rans.rans_decode(bytes(bad), [rans.BYTE_TABLE] * len(data))
    except ValueError:
        return
    if out == data:
        raise AssertionError("corruption went unnoticed")


def _st_codec():
    frame = sy.synthetic_frames(1, 32, 32, seed=2)[0]
    for codec in cd.CODECS:
        model = cd.new_model(codec, 4, 6, seed=0)
        res = cd.encode_frame(model, frame)
        dec = cd.decode_frame(model, res.data)
        if not (np.array_equal(dec.y, res.recon.y)
                and np.array_equal(dec.u, res.recon.u)
                and np.array_equal(dec.v, res.recon.v)):
            raise AssertionError(f"{codec}: decode != encoder reconstruction")


def _st_bdrate():
    rates, psnrs = [0.1, 0.2, 0.4, 0.8], [32.0, 35.0, 38.0, 41.0]
    pts = [ev.RdPoint(str(i), r, r, p, p, p)
           for i, (r, p) in enumerate(zip(rates, psnrs))]
    a = ev.RdCurve.make("a", pts)
    b = ev.RdCurve.make("b", [ev.RdPoint(p.label, 2 * p.rate_bpp, p.rate_kbps,
                                         p.psnr_y, p.psnr_u, p.psnr_v)
                              for p in pts])
    if abs(ev.bd_rate(a, a)) > 1e-9:
        raise AssertionError("self BD-rate not zero")
    if abs(ev.bd_rate(a, b) - 100.0) > 1e-6:
        raise AssertionError("doubled-rate BD-rate not +100%")


def _st_checkpoint():
    model = cd.new_model("proposed-mixed", 3, 5, seed=4)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ydlc")
        cd.save_model(model, path)
        back = cd.load_model(path)
    for part, bpart in zip(model.parts, back.parts):
        for name, p in part.params.items():
            if not np.array_equal(p.data, bpart.params[name].data):
                raise AssertionError(f"checkpoint mismatch at {name}")


SELFTESTS = (
    ("autograd-gradients", _st_gradients),
    ("rans-roundtrip", _st_rans),
    ("codec-roundtrip", _st_codec),
    ("bdrate-identities", _st_bdrate),
    ("checkpoint-io", _st_checkpoint),
)


def cmd_selftest(args) -> int:
    failed = 0
    for name, fn in SELFTESTS:
        try:
            fn()
        except Exception as exc:  # report every suite before exiting
            failed += 1
            print(f"FAIL {name}: {exc}")
        else:
            print(f"PASS {name}")
    if failed:
        print(f"{failed} of {len(SELFTESTS)} self tests failed",
              file=sys.stderr)
        return 3
    print(f"all {len(SELFTESTS)} self tests passed")
    return 0


# ---------------------------------------------------------------------------
# Parser plumbing.

def _add_frame_selection(p):
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--step", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ydlc", description="Learned YUV 4:2:0 image codec laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="PPM <-> raw YUV and frame selection")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    _add_frame_selection(p)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help=".yuv or .ppm source")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log CSV")
    p.add_argument("--quiet", action="store_true")
    _add_frame_selection(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="frames -> bitstream files")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True,
                   help="output path; use an {i} placeholder for sequences")
    p.add_argument("--quality", type=int, default=0,
                   help="informational operating-point tag stored in headers")
    _add_frame_selection(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="bitstream files -> frames")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help=".yuv (or .ppm for one frame)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="sweep checkpoints into an RD curve")
    p.add_argument("--model", action="append", required=True,
                   metavar="LABEL=PATH")
    p.add_argument("--data", required=True)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--fps", type=float, default=ev.DEFAULT_FPS)
    p.add_argument("--sequence", default="all")
    p.add_argument("--group", default="all")
    p.add_argument("--curves", required=True, help="curve CSV to write")
    p.add_argument("--append", action="store_true",
                   help="merge with existing curves in the CSV")
    p.add_argument("--plot", help="also write an SVG rate/PSNR plot")
    _add_frame_selection(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bdrate", help="BD-rate table from a curve CSV")
    p.add_argument("--curves", required=True)
    p.add_argument("--anchor", required=True)
    p.add_argument("--out", help="report CSV")
    p.add_argument("--plot", help="SVG plot of the curves")
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("params", help="per-layer and total parameter counts")
    p.add_argument("--arch", required=True,
                   choices=sorted(set(nw.ARCH_IDS) | set(cd.CODECS)))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--with-hyper", action="store_true",
                   help="include hyper-network and prior parameters")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("selftest", help="run built-in invariant checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
