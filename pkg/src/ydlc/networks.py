"""Transform-network construction and execution.

Six buildable networks cover five codec designs:

* ``separate-y`` / ``separate-uv``: one net per channel group.  Four
  stride-2 convs down, mirrored transposed convs up, GDN/IGDN between.
  The chroma net swaps the outermost 5x5 kernels for 3x3.
* ``six-channel``: same trunk on a stack of four luma polyphase channels
  plus U and V at chroma resolution.
* ``proposed-gdn`` / ``proposed-mixed`` / ``proposed-prelu``: a branched
  front end.  Luma passes a 5x5 stride-2 conv, chroma a 3x3 stride-1 conv
  (already at half resolution, so the grids align); the 2N-channel concat
  funnels through a 1x1 conv into the shared trunk.  Synthesis mirrors this
  with a 1x1 conv out to 2N and a split into per-group tails.  The variants
  differ only in which of the ten activation sites use GDN/IGDN vs PReLU:
  all GDN, PReLU only at the two sites adjacent to the 1x1 convs, or all
  PReLU.

Weight checkpoints serialize any parameter dict; see FORMATS.md.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import FormatError, ShapeError

ARCH_IDS = {
    "separate-y": 1,
    "separate-uv": 2,
    "six-channel": 3,
    "proposed-gdn": 4,
    "proposed-mixed": 5,
    "proposed-prelu": 6,
}
ARCH_NAMES = {v: k for k, v in ARCH_IDS.items()}

# checkpoint/bitstream headers also allow the composite two-network codec
FORMAT_ARCH_IDS = {"separate": 0, **ARCH_IDS}
FORMAT_ARCH_NAMES = {v: k for k, v in FORMAT_ARCH_IDS.items()}

GDN_BETA_FLOOR = 1e-6
PRELU_INIT = 0.25


@dataclass(frozen=True)
class LayerSpec:
    """One layer: conv/tconv carry geometry, activations carry channel count."""

    kind: str  # conv | tconv | gdn | igdn | prelu
    cin: int
    cout: int
    k: int = 0
    stride: int = 1

    def param_count(self) -> int:
        if self.kind in ("conv", "tconv"):
            return self.cin * self.cout * self.k * self.k + self.cout
        if self.kind in ("gdn", "igdn"):
            return self.cout * self.cout + self.cout
        if self.kind == "prelu":
            return self.cout
        raise ShapeError(f"unknown layer kind {self.kind!r}")


def _conv(cin, cout, k, stride):
    return LayerSpec("conv", cin, cout, k, stride)


def _tconv(cin, cout, k, stride):
    return LayerSpec("tconv", cin, cout, k, stride)


def _act(kind, c):
    return LayerSpec(kind, c, c)


@dataclass(frozen=True)
class NetworkSpec:
    """A transform network: analysis/synthesis layer groups plus geometry.

    Single-input designs keep everything in the trunk groups; the branched
    designs add per-group heads and tails.  ``input_kind`` is one of
    "y", "uv", "six", "yuv".
    """

    arch: str
    n: int
    m: int
    input_kind: str
    ana_luma: tuple
    ana_chroma: tuple
    ana_trunk: tuple
    syn_trunk: tuple
    syn_luma: tuple
    syn_chroma: tuple

    @property
    def branched(self) -> bool:
        return self.input_kind == "yuv"

    def groups(self):
        return (("ana_luma", self.ana_luma), ("ana_chroma", self.ana_chroma),
                ("ana_trunk", self.ana_trunk), ("syn_trunk", self.syn_trunk),
                ("syn_luma", self.syn_luma), ("syn_chroma", self.syn_chroma))

    def count_params(self) -> int:
        return sum(l.param_count() for _, layers in self.groups() for l in layers)

    def luma_divisor(self) -> int:
        """Luma dims must divide this for the analysis ladder to be exact."""
        return 16 if self.input_kind in ("y", "yuv") else 32

    def latent_factor(self) -> int:
        """Luma-to-latent spatial downsampling factor."""
        return 16 if self.input_kind in ("y", "yuv") else 32


def build_network(arch: str, n: int, m: int) -> NetworkSpec:
    """Construct the layer graph for one architecture at width N, depth M."""
    if arch not in ARCH_IDS:
        raise ShapeError(f"unknown architecture {arch!r}; choose from {sorted(ARCH_IDS)}")
    if n <= 0 or m <= 0:
        raise ShapeError(f"channel counts must be positive, got N={n} M={m}")
    empty = ()
    if arch in ("separate-y", "separate-uv", "six-channel"):
        cio = {"separate-y": 1, "separate-uv": 2, "six-channel": 6}[arch]
        k_outer = 3 if arch == "separate-uv" else 5
        ana = (_conv(cio, n, k_outer, 2), _act("gdn", n),
               _conv(n, n, 5, 2), _act("gdn", n),
               _conv(n, n, 5, 2), _act("gdn", n),
               _conv(n, m, 5, 2))
        syn = (_tconv(m, n, 5, 2), _act("igdn", n),
               _tconv(n, n, 5, 2), _act("igdn", n),
               _tconv(n, n, 5, 2), _act("igdn", n),
               _tconv(n, cio, k_outer, 2))
        kind = {"separate-y": "y", "separate-uv": "uv", "six-channel": "six"}[arch]
        return NetworkSpec(arch, n, m, kind, empty, empty, ana, syn, empty, empty)

    # branched designs; site index -> activation kind
    if arch == "proposed-gdn":
        ana_acts, syn_acts = ["gdn"] * 5, ["igdn"] * 5
    elif arch == "proposed-prelu":
        ana_acts, syn_acts = ["prelu"] * 5, ["prelu"] * 5
    else:  # proposed-mixed: PReLU only beside the 1x1 funnel convs
        ana_acts = ["gdn", "gdn", "prelu", "gdn", "gdn"]
        syn_acts = ["igdn", "igdn", "prelu", "igdn", "igdn"]
    return NetworkSpec(
        arch, n, m, "yuv",
        ana_luma=(_conv(1, n, 5, 2), _act(ana_acts[0], n)),
        ana_chroma=(_conv(2, n, 3, 1), _act(ana_acts[1], n)),
        ana_trunk=(_conv(2 * n, n, 1, 1), _act(ana_acts[2], n),
                   _conv(n, n, 5, 2), _act(ana_acts[3], n),
                   _conv(n, n, 5, 2), _act(ana_acts[4], n),
                   _conv(n, m, 5, 2)),
        syn_trunk=(_tconv(m, n, 5, 2), _act(syn_acts[4], n),
                   _tconv(n, n, 5, 2), _act(syn_acts[3], n),
                   _tconv(n, n, 5, 2), _act(syn_acts[2], n),
                   _conv(n, 2 * n, 1, 1)),
        syn_luma=(_act(syn_acts[0], n), _tconv(n, 1, 5, 2)),
        syn_chroma=(_act(syn_acts[1], n), _tconv(n, 2, 3, 1)))


# ---------------------------------------------------------------------------
# Parameter initialization and layer execution.

def init_layer_params(layer: LayerSpec, rng: np.random.Generator) -> dict:
    if layer.kind == "conv":
        std = np.sqrt(2.0 / (layer.cin * layer.k * layer.k))
        return {
            "weight": ag.Param(rng.normal(0.0, std, (layer.cout, layer.cin,
                                                     layer.k, layer.k)).astype(np.float32)),
            "bias": ag.Param(np.zeros((1, layer.cout, 1, 1), np.float32)),
        }
    if layer.kind == "tconv":
        std = np.sqrt(2.0 / (layer.cin * layer.k * layer.k))
        return {
            "weight": ag.Param(rng.normal(0.0, std, (layer.cin, layer.cout,
                                                     layer.k, layer.k)).astype(np.float32)),
            "bias": ag.Param(np.zeros((1, layer.cout, 1, 1), np.float32)),
        }
    if layer.kind in ("gdn", "igdn"):
        c = layer.cout
        gamma = np.float32(np.sqrt(0.1)) * np.eye(c, dtype=np.float32)
        gamma = gamma.reshape(c, c, 1, 1)
        return {
            # both reparameterized as squares: beta starts at 1, gamma at 0.1*I
            "beta_raw": ag.Param(np.ones((1, c, 1, 1), np.float32)),
            "gamma_raw": ag.Param(gamma),
        }
    if layer.kind == "prelu":
        return {"slope": ag.Param(np.full((1, layer.cout, 1, 1), PRELU_INIT, np.float32))}
    raise ShapeError(f"unknown layer kind {layer.kind!r}")


def init_network_params(spec: NetworkSpec, rng: np.random.Generator) -> dict:
    params: dict[str, ag.Param] = {}
    for gname, layers in spec.groups():
        for i, layer in enumerate(layers):
            for field, p in init_layer_params(layer, rng).items():
                params[f"{gname}.{i}.{field}"] = p
    return params


def gdn(x: ag.Tensor, beta_raw: ag.Tensor, gamma_raw: ag.Tensor,
        inverse: bool = False) -> ag.Tensor:
    """(Inverse) generalized divisive normalization.

    y_c = x_c / sqrt(beta_c + sum_d gamma_cd x_d^2); the inverse multiplies
    instead.  beta and gamma are squares of the raw parameters (beta floored
    at 1e-6), which keeps the denominator positive without projection steps.
    """
    beta = ag.clamp_min(ag.square(beta_raw), GDN_BETA_FLOOR)
    gamma = ag.square(gamma_raw)
    denom = ag.conv2d(ag.square(x), gamma, beta, stride=1)
    if inverse:
        return ag.mul(x, ag.sqrt(denom))
    return ag.mul(x, ag.rsqrt(denom))


def apply_layer(layer: LayerSpec, params: dict, path: str, x: ag.Tensor) -> ag.Tensor:
    if layer.kind == "conv":
        return ag.conv2d(x, params[f"{path}.weight"], params[f"{path}.bias"],
                         stride=layer.stride)
    if layer.kind == "tconv":
        return ag.tconv2d(x, params[f"{path}.weight"], params[f"{path}.bias"],
                          stride=layer.stride)
    if layer.kind in ("gdn", "igdn"):
        return gdn(x, params[f"{path}.beta_raw"], params[f"{path}.gamma_raw"],
                   inverse=layer.kind == "igdn")
    if layer.kind == "prelu":
        return ag.prelu(x, params[f"{path}.slope"])
    raise ShapeError(f"unknown layer kind {layer.kind!r}")


def run_group(spec: NetworkSpec, params: dict, gname: str, x: ag.Tensor) -> ag.Tensor:
    layers = dict(spec.groups())[gname]
    for i, layer in enumerate(layers):
        x = apply_layer(layer, params, f"{gname}.{i}", x)
    return x


_INPUT_CHANNELS = {"y": 1, "uv": 2, "six": 6}


def analysis_forward(spec: NetworkSpec, params: dict, inputs) -> ag.Tensor:
    """Source tensor(s) -> latent (B,M,h,w).

    Branched designs take ``(y, uv)`` with y at (B,1,H,W) and uv at
    (B,2,H/2,W/2); the rest take one tensor with the matching channel count.
    Input dims must divide the ladder's total downsampling (16) so every
    stride-2 stage halves exactly and synthesis restores the dims.
    """
    ref = inputs[0] if spec.branched else inputs
    if ref.shape[2] % 16 or ref.shape[3] % 16:
        raise ShapeError(
            f"{spec.arch} input dims {ref.shape[2]}x{ref.shape[3]} must be "
            f"multiples of 16; pad the source (luma to a multiple of "
            f"{spec.luma_divisor()})")
    if spec.branched:
        y, uv = inputs
        if y.shape[1] != 1 or uv.shape[1] != 2:
            raise ShapeError(f"branched input wants 1 luma + 2 chroma channels, "
                             f"got {y.shape} and {uv.shape}")
        if (y.shape[2], y.shape[3]) != (2 * uv.shape[2], 2 * uv.shape[3]):
            raise ShapeError(f"luma {y.shape} must be exactly twice chroma {uv.shape}")
        hy = run_group(spec, params, "ana_luma", y)
        huv = run_group(spec, params, "ana_chroma", uv)
        if hy.shape[2:] != huv.shape[2:]:
            raise ShapeError(f"branch outputs misaligned: {hy.shape} vs {huv.shape}")
        return run_group(spec, params, "ana_trunk", ag.concat([hy, huv]))
    x = inputs
    want = _INPUT_CHANNELS[spec.input_kind]
    if x.shape[1] != want:
        raise ShapeError(f"{spec.arch} wants {want} input channels, got {x.shape[1]}")
    return run_group(spec, params, "ana_trunk", x)


def synthesis_forward(spec: NetworkSpec, params: dict, latent: ag.Tensor):
    """Latent -> reconstruction; branched designs return ``(y, uv)``."""
    if latent.shape[1] != spec.m:
        raise ShapeError(f"latent has {latent.shape[1]} channels, expected {spec.m}")
    h = run_group(spec, params, "syn_trunk", latent)
    if not spec.branched:
        return h
    hy, huv = ag.split(h, [spec.n, spec.n])
    return (run_group(spec, params, "syn_luma", hy),
            run_group(spec, params, "syn_chroma", huv))


# ---------------------------------------------------------------------------
# Checkpoint serialization (see FORMATS.md).

CKPT_MAGIC = b"YDLC"
CKPT_VERSION = 1


def save_checkpoint(path, arch: str, n: int, m: int, params: dict) -> None:
    if arch not in FORMAT_ARCH_IDS:
        raise ShapeError(f"unknown architecture {arch!r}")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<HBII", CKPT_VERSION, FORMAT_ARCH_IDS[arch], n, m))
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            p = params[name]
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<4I", *p.shape))
            f.write(np.ascontiguousarray(p.data, dtype=np.float32).tobytes())


def load_checkpoint(path):
    """Returns (arch, n, m, params) with fresh optimizer state."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 19 or data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, arch_id, n, m = struct.unpack_from("<HBII", data, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if arch_id not in FORMAT_ARCH_NAMES:
        raise FormatError(f"{path}: unknown architecture id {arch_id}")
    (count,) = struct.unpack_from("<I", data, 15)
    pos = 19
    params: dict[str, ag.Param] = {}
    for _ in range(count):
        if pos + 2 > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        if pos + 16 > len(data):
            raise FormatError(f"{path}: truncated checkpoint at {name!r}")
        shape = struct.unpack_from("<4I", data, pos)
        pos += 16
        nbytes = 4 * int(np.prod(shape))
        raw = data[pos:pos + nbytes]
        if len(raw) < nbytes:
            raise FormatError(f"{path}: truncated tensor data at {name!r}")
        pos += nbytes
        params[name] = ag.Param(np.frombuffer(raw, np.float32).reshape(shape).copy())
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return FORMAT_ARCH_NAMES[arch_id], n, m, params
