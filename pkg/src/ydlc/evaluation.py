"""Rate-distortion curves, Bjontegaard-delta rates, and report emission.

A sweep encodes every ``stride``-th frame of a sequence with one checkpoint
per operating point and averages real bitstream sizes and per-component PSNR
into an :class:`RdCurve`.  ``bd_rate`` compares two curves with the classic
cubic-fit formulation: fit log10(rate) as a cubic in PSNR for each curve,
average the difference over the overlapping PSNR span, and map the mean log
offset back to a percentage.  ``cbdr`` folds the three component BD-rates
into the single 12:1:1 luma-weighted figure.

Reports aggregate sequence rows into class rows and an overall row by plain
averaging at each level (sequence -> class -> overall); the CSV header notes
the method since pooling instead would shift second decimals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import codec as cd
from . import frames as fr
from .errors import ConfigError, DomainError

BD_GRID_SAMPLES = 1000
CBDR_WEIGHTS = (12.0, 1.0, 1.0)
DEFAULT_FPS = 30.0
AGGREGATION_NOTE = "mean per sequence, then per class, then overall"


@dataclass(frozen=True)
class RdPoint:
    """One operating point: real coded rate plus component fidelities."""
    label: str
    rate_bpp: float
    rate_kbps: float
    psnr_y: float
    psnr_u: float
    psnr_v: float

    def validate(self) -> "RdPoint":
        if not (self.rate_bpp > 0 and math.isfinite(self.rate_bpp)):
            raise DomainError(f"rate must be positive, got {self.rate_bpp}")
        for name in ("psnr_y", "psnr_u", "psnr_v"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"{name} must be finite ({self.label})")
        return self

    def psnr(self, component: str) -> float:
        return getattr(self, f"psnr_{component}")


@dataclass(frozen=True)
class RdCurve:
    """Operating points of one codec, sorted by strictly increasing rate.

    ``sequence`` and ``group`` identify the coded content for report
    aggregation; single-dataset sweeps can leave the defaults.
    """
    codec: str
    points: tuple
    sequence: str = "all"
    group: str = "all"

    @staticmethod
    def make(codec, points, sequence="all", group="all") -> "RdCurve":
        pts = tuple(sorted((p.validate() for p in points),
                           key=lambda p: p.rate_bpp))
        if not pts:
            raise DomainError(f"curve {codec!r} has no points")
        for a, b in zip(pts, pts[1:]):
            if b.rate_bpp <= a.rate_bpp:
                raise DomainError(
                    f"curve {codec!r}: rates must be distinct, "
                    f"{a.label} and {b.label} both near {a.rate_bpp:.6g} bpp")
        return RdCurve(codec, pts, sequence, group)

    def rates(self):
        return np.array([p.rate_bpp for p in self.points])

    def psnrs(self, component: str):
        return np.array([p.psnr(component) for p in self.points])


def _cubic_fit(curve: RdCurve, component: str):
    if len(curve.points) < 4:
        raise DomainError(f"curve {curve.codec!r} has {len(curve.points)} "
                          f"points; BD-rate needs at least 4")
    return np.polyfit(curve.psnrs(component), np.log10(curve.rates()), 3)


def bd_rate(anchor: RdCurve, test: RdCurve, component: str = "y") -> float:
    """Percent rate change of ``test`` against ``anchor``; negative is better.

    Cubic fit of log10(rate) vs PSNR per curve, mean fitted-log-rate gap over
    the common PSNR interval (trapezoid on a fixed fine grid), mapped through
    10**gap.  Curves whose PSNR ranges do not overlap are not comparable.
    """
    if component not in ("y", "u", "v"):
        raise DomainError(f"component must be y, u or v, got {component!r}")
    fa = _cubic_fit(anchor, component)
    ft = _cubic_fit(test, component)
    lo = max(anchor.psnrs(component).min(), test.psnrs(component).min())
    hi = min(anchor.psnrs(component).max(), test.psnrs(component).max())
    if not hi > lo:
        raise DomainError(
            f"no PSNR-{component} overlap between {anchor.codec!r} "
            f"[{anchor.psnrs(component).min():.2f}, "
            f"{anchor.psnrs(component).max():.2f}] and {test.codec!r} "
            f"[{test.psnrs(component).min():.2f}, "
            f"{test.psnrs(component).max():.2f}]")
    grid = np.linspace(lo, hi, BD_GRID_SAMPLES)
    diff = np.polyval(ft, grid) - np.polyval(fa, grid)
    avg = float(np.trapezoid(diff, grid) / (hi - lo))
    return (10.0 ** avg - 1.0) * 100.0


def cbdr(y_bdr: float, u_bdr: float, v_bdr: float) -> float:
    """Combined BD-rate: luma dominates chroma twelve to one to one."""
    wy, wu, wv = CBDR_WEIGHTS
    return (wy * y_bdr + wu * u_bdr + wv * v_bdr) / (wy + wu + wv)


# ---------------------------------------------------------------------------
# Sweeps: checkpoints -> measured curve.

def sweep(checkpoints, frames, stride: int = 8, fps: float = DEFAULT_FPS,
          sequence: str = "all", group: str = "all") -> RdCurve:
    """Encode every ``stride``-th frame with each checkpoint; average.

    ``checkpoints`` is a sequence of (label, source) pairs where a source is
    a loaded model or a checkpoint path; all entries must share one
    architecture.  Rates are whole-bitstream sizes over luma pixels.
    """
    if stride < 1:
        raise ConfigError(f"stride must be at least 1, got {stride}")
    coded = list(frames)[::stride]
    if not coded:
        raise ConfigError("no frames to code after stride sampling")
    entries = list(checkpoints)
    if not entries:
        raise ConfigError("no checkpoints supplied")
    models = []
    for label, src in entries:
        if isinstance(src, cd.CodecModel):
            models.append((str(label), src))
            continue
        try:
            models.append((str(label), cd.load_model(src)))
        except FileNotFoundError:
            raise ConfigError(
                f"missing checkpoint for operating point {label}: {src}") \
                from None
    codec, n, m = models[0][1].codec, models[0][1].n, models[0][1].m
    for label, model in models[1:]:
        if (model.codec, model.n, model.m) != (codec, n, m):
            raise ConfigError(
                f"checkpoint {label} is {model.codec} N={model.n} "
                f"M={model.m}; expected {codec} N={n} M={m}")
    points = []
    for label, model in models:
        bpp, kbps, ps = [], [], []
        for frame in coded:
            res = cd.encode_frame(model, frame)
            bits = 8 * len(res.data)
            pixels = frame.width * frame.height
            bpp.append(bits / pixels)
            kbps.append(bits * fps / 1000.0)
            ps.append([fr.psnr(frame.y, res.recon.y),
                       fr.psnr(frame.u, res.recon.u),
                       fr.psnr(frame.v, res.recon.v)])
        py, pu, pv = np.mean(ps, axis=0)
        points.append(RdPoint(label, float(np.mean(bpp)), float(np.mean(kbps)),
                              float(py), float(pu), float(pv)))
    return RdCurve.make(codec, points, sequence, group)


# ---------------------------------------------------------------------------
# Curve CSV.

CURVE_HEADER = "codec,sequence,group,label,rate_bpp,rate_kbps,psnr_y,psnr_u,psnr_v"


def write_curves(path, curves) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(CURVE_HEADER + "\n")
        for c in curves:
            for p in c.points:
                f.write(f"{c.codec},{c.sequence},{c.group},{p.label},"
                        f"{p.rate_bpp!r},{p.rate_kbps!r},{p.psnr_y!r},"
                        f"{p.psnr_u!r},{p.psnr_v!r}\n")


def read_curves(path):
    """Parse a curve CSV back into RdCurves, one per (codec, sequence)."""
    grouped: dict = {}
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if header != CURVE_HEADER:
            raise ConfigError(f"{path}: unexpected curve header {header!r}")
        for lineno, line in enumerate(f, 2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 9:
                raise ConfigError(f"{path}:{lineno}: expected 9 columns, "
                                  f"got {len(parts)}")
            codec, sequence, group, label = parts[:4]
            try:
                nums = [float(x) for x in parts[4:]]
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: non-numeric field") from None
            grouped.setdefault((codec, sequence, group), []).append(
                RdPoint(label, *nums))
    return [RdCurve.make(codec, pts, sequence, group)
            for (codec, sequence, group), pts in grouped.items()]


# ---------------------------------------------------------------------------
# BDR report.

@dataclass(frozen=True)
class BdRow:
    kind: str     # "sequence" | "class" | "overall"
    codec: str
    group: str
    sequence: str
    y_bdr: float
    u_bdr: float
    v_bdr: float

    @property
    def cbdr(self) -> float:
        return cbdr(self.y_bdr, self.u_bdr, self.v_bdr)


@dataclass
class BdReport:
    anchor: str
    method: str = AGGREGATION_NOTE
    rows: list = field(default_factory=list)

    def of_kind(self, kind):
        return [r for r in self.rows if r.kind == kind]


def _mean_rows(rows, kind, codec, group, sequence) -> BdRow:
    return BdRow(kind, codec, group, sequence,
                 float(np.mean([r.y_bdr for r in rows])),
                 float(np.mean([r.u_bdr for r in rows])),
                 float(np.mean([r.v_bdr for r in rows])))


def bd_report(curves, anchor: str) -> BdReport:
    """BD-rates of every non-anchor codec against the anchor.

    Curves pair up within each (group, sequence); every pairing must have an
    anchor curve.  Sequence rows average into class rows, class rows into an
    overall row per codec.
    """
    curves = list(curves)
    if len(curves) < 2:
        raise ConfigError("need at least two curves for a report")
    anchors = {(c.group, c.sequence): c for c in curves if c.codec == anchor}
    if not anchors:
        raise ConfigError(f"anchor codec {anchor!r} not among curves")
    report = BdReport(anchor=anchor)
    codecs = []
    for c in curves:
        if c.codec != anchor and c.codec not in codecs:
            codecs.append(c.codec)
    for codec in codecs:
        tests = [c for c in curves if c.codec == codec]
        seq_rows = []
        for t in tests:
            key = (t.group, t.sequence)
            if key not in anchors:
                raise ConfigError(f"no {anchor!r} curve for group={t.group} "
                                  f"sequence={t.sequence}")
            a = anchors[key]
            seq_rows.append(BdRow("sequence", codec, t.group, t.sequence,
                                  bd_rate(a, t, "y"), bd_rate(a, t, "u"),
                                  bd_rate(a, t, "v")))
        report.rows.extend(seq_rows)
        class_rows = []
        for group in dict.fromkeys(r.group for r in seq_rows):
            members = [r for r in seq_rows if r.group == group]
            class_rows.append(_mean_rows(members, "class", codec, group, "-"))
        report.rows.extend(class_rows)
        report.rows.append(_mean_rows(class_rows, "overall", codec, "-", "-"))
    return report


REPORT_HEADER = "kind,codec,group,sequence,y_bdr,u_bdr,v_bdr,cbdr"


def write_report(path, report: BdReport) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# anchor: {report.anchor}\n")
        f.write(f"# aggregation: {report.method}\n")
        f.write(REPORT_HEADER + "\n")
        for r in report.rows:
            f.write(f"{r.kind},{r.codec},{r.group},{r.sequence},"
                    f"{r.y_bdr:.4f},{r.u_bdr:.4f},{r.v_bdr:.4f},"
                    f"{r.cbdr:.4f}\n")


def format_report(report: BdReport) -> str:
    """Fixed-width text table of the report for terminal output."""
    lines = [f"anchor: {report.anchor}   aggregation: {report.method}",
             f"{'kind':<9} {'codec':<16} {'group':<8} {'sequence':<12} "
             f"{'Y-BDR%':>9} {'U-BDR%':>9} {'V-BDR%':>9} {'CBDR%':>9}"]
    for r in report.rows:
        lines.append(f"{r.kind:<9} {r.codec:<16} {r.group:<8} "
                     f"{r.sequence:<12} {r.y_bdr:>9.2f} {r.u_bdr:>9.2f} "
                     f"{r.v_bdr:>9.2f} {r.cbdr:>9.2f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# SVG plot.

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#e377c2", "#17becf")
_W, _H = 640, 440
_ML, _MR, _MT, _MB = 62, 16, 18, 46


def _ticks(lo: float, hi: float, want: int = 5):
    span = hi - lo
    if span <= 0:
        return [lo]
    raw = span / want
    mag = 10.0 ** math.floor(math.log10(raw))
    step = min((m for m in (1.0, 2.0, 2.5, 5.0, 10.0)), key=lambda m:
               abs(m * mag - raw)) * mag
    first = math.ceil(lo / step) * step
    out = []
    t = first
    while t <= hi + 1e-9 * span:
        out.append(round(t, 10))
        t += step
    return out or [lo]


def plot_curves_svg(path, curves, component: str = "y") -> None:
    """Rate (bpp) vs PSNR line plot; data rows embedded as an SVG comment."""
    curves = list(curves)
    if not curves:
        raise ConfigError("nothing to plot")
    rates = np.concatenate([c.rates() for c in curves])
    psnrs = np.concatenate([c.psnrs(component) for c in curves])
    x0, x1 = float(rates.min()), float(rates.max())
    y0, y1 = float(psnrs.min()), float(psnrs.max())
    if x1 - x0 <= 0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 - y0 <= 0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    x0, x1 = x0 - 0.04 * (x1 - x0), x1 + 0.04 * (x1 - x0)
    y0, y1 = y0 - 0.06 * (y1 - y0), y1 + 0.06 * (y1 - y0)

    def sx(x):
        return _ML + (x - x0) / (x1 - x0) * (_W - _ML - _MR)

    def sy(y):
        return _H - _MB - (y - y0) / (y1 - y0) * (_H - _MT - _MB)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" '
             f'height="{_H}" viewBox="0 0 {_W} {_H}">',
             "<!-- data",
             CURVE_HEADER]
    for c in curves:
        for p in c.points:
            parts.append(f"{c.codec},{c.sequence},{c.group},{p.label},"
                         f"{p.rate_bpp!r},{p.rate_kbps!r},{p.psnr_y!r},"
                         f"{p.psnr_u!r},{p.psnr_v!r}")
    parts.append("-->")
    parts.append(f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>')
    parts.append(f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" '
                 f'height="{_H - _MT - _MB}" fill="none" stroke="#333"/>')
    for t in _ticks(x0, x1):
        px = sx(t)
        parts.append(f'<line x1="{px:.2f}" y1="{_H - _MB}" x2="{px:.2f}" '
                     f'y2="{_H - _MB + 5}" stroke="#333"/>')
        parts.append(f'<text x="{px:.2f}" y="{_H - _MB + 18}" '
                     f'font-size="11" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1):
        py = sy(t)
        parts.append(f'<line x1="{_ML - 5}" y1="{py:.2f}" x2="{_ML}" '
                     f'y2="{py:.2f}" stroke="#333"/>')
        parts.append(f'<text x="{_ML - 8}" y="{py + 4:.2f}" font-size="11" '
                     f'text-anchor="end">{t:g}</text>')
    parts.append(f'<text x="{(_ML + _W - _MR) / 2:.1f}" y="{_H - 10}" '
                 f'font-size="12" text-anchor="middle">rate (bpp)</text>')
    parts.append(f'<text x="14" y="{(_MT + _H - _MB) / 2:.1f}" font-size="12" '
                 f'text-anchor="middle" transform="rotate(-90 14 '
                 f'{(_MT + _H - _MB) / 2:.1f})">PSNR-{component.upper()} (dB)'
                 f'</text>')
    for i, c in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(p.rate_bpp):.2f},{sy(p.psnr(component)):.2f}"
                       for p in c.points)
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        for p in c.points:
            parts.append(f'<circle cx="{sx(p.rate_bpp):.2f}" '
                         f'cy="{sy(p.psnr(component)):.2f}" r="3" '
                         f'fill="{color}"/>')
        ly = _MT + 16 + 16 * i
        parts.append(f'<line x1="{_ML + 10}" y1="{ly - 4}" x2="{_ML + 34}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="1.5"/>')
        label = c.codec if c.sequence == "all" else f"{c.codec} ({c.sequence})"
        parts.append(f'<text x="{_ML + 40}" y="{ly}" font-size="11">'
                     f'{label}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")
