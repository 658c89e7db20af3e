"""Entropy model and bitstream codec over the transform networks.

A codec bundles one transform network (or two for the ``separate`` design:
a luma net plus a chroma net) with a mean-scale hyperprior per network.
Encoding runs analysis, quantizes the latent, derives per-element Gaussian
(mu, sigma) from a coded hyper-latent, and range-codes everything; decoding
replays the same table construction bit-exactly, so reconstruction from a
file equals the encoder's in-process reconstruction.

Latent symbols outside the modeled range [mu - 16 sigma, mu + 16 sigma]
(clamped to int16) are escape-coded: an ESC symbol followed by the raw
16-bit value in two bypass bytes.

Container layout lives in FORMATS.md.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import autograd as ag
from . import frames as fr
from . import networks as nw
from . import rans
from .errors import BitstreamError, DomainError, FormatError, ShapeError

SIGMA_FLOOR = 0.11
LIKELIHOOD_FLOOR = 2.0 ** -16
RANGE_SIGMAS = 16.0
MAX_TABLE_WIDTH = 8192          # symbols per table before the escape path takes over
SYMBOL_MIN, SYMBOL_MAX = -32768, 32767

CODECS = ("separate", "six-channel", "proposed-gdn", "proposed-mixed", "proposed-prelu")

BITSTREAM_MAGIC = b"YDLB"
BITSTREAM_VERSION = 1


def codec_archs(codec: str):
    if codec == "separate":
        return ("separate-y", "separate-uv")
    if codec in CODECS:
        return (codec,)
    raise ShapeError(f"unknown codec {codec!r}; choose from {CODECS}")


def pad_multiple(codec: str) -> int:
    """Smallest luma-dimension multiple every net in the codec accepts."""
    return max(nw.build_network(a, 1, 1).luma_divisor() for a in codec_archs(codec))


# ---------------------------------------------------------------------------
# Quantization and Gaussian likelihoods.

def quantize(values: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero, clamped to int16 range."""
    q = np.sign(values) * np.floor(np.abs(values) + 0.5)
    return np.clip(q, SYMBOL_MIN, SYMBOL_MAX).astype(np.int32)


def _phi(t: ag.Tensor) -> ag.Tensor:
    return ag.mul_scalar(ag.add_scalar(ag.erf(ag.mul_scalar(t, 1.0 / np.sqrt(2.0))), 1.0), 0.5)


def gaussian_bits(v: ag.Tensor, mu: ag.Tensor, sigma: ag.Tensor) -> ag.Tensor:
    """Elementwise -log2 P(v | mu, sigma) under the unit-bin Gaussian integral.

    P = Phi((v - mu + 1/2)/sigma) - Phi((v - mu - 1/2)/sigma), floored at
    2^-16 so the rate term stays finite for far-out values.
    """
    d = ag.sub(v, mu)
    hi = _phi(ag.div(ag.add_scalar(d, 0.5), sigma))
    lo = _phi(ag.div(ag.add_scalar(d, -0.5), sigma))
    p = ag.clamp_min(ag.sub(hi, lo), LIKELIHOOD_FLOOR)
    return ag.mul_scalar(ag.log(p), -1.0 / np.log(2.0))


def scale_from_raw(raw: ag.Tensor) -> ag.Tensor:
    """Strictly positive scale: softplus(raw) + 0.11."""
    return ag.add_scalar(ag.softplus(raw), SIGMA_FLOOR)


def gaussian_bits_np(v: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> float:
    """Summed model bits for integer symbols (float64 reference path)."""
    d = v.astype(np.float64) - mu.astype(np.float64)
    s = sigma.astype(np.float64)
    p = special.ndtr((d + 0.5) / s) - special.ndtr((d - 0.5) / s)
    return float(-np.log2(np.maximum(p, LIKELIHOOD_FLOOR)).sum())


# ---------------------------------------------------------------------------
# Hyperprior networks (shared LayerSpec machinery, own parameter paths).

def hyper_groups(n: int, m: int) -> dict:
    ls = nw.LayerSpec
    return {
        "hyper_ana": (
            ls("conv", m, n, 3, 1), ls("prelu", n, n),
            ls("conv", n, n, 5, 2), ls("prelu", n, n),
            ls("conv", n, n, 5, 2)),
        "hyper_syn": (
            ls("tconv", n, n, 5, 2), ls("prelu", n, n),
            ls("tconv", n, n, 5, 2), ls("prelu", n, n),
            ls("conv", n, 2 * m, 3, 1)),
    }


def hyper_dims(lh: int, lw: int):
    """Hyper-latent spatial dims: the stride-2 convs ceil-halve twice."""
    ceil_half = lambda x: (x + 1) // 2  # noqa: E731
    return ceil_half(ceil_half(lh)), ceil_half(ceil_half(lw))


@dataclass
class Part:
    """One transform network plus its hyperprior parameters."""

    spec: nw.NetworkSpec
    params: dict


@dataclass
class CodecModel:
    codec: str
    n: int
    m: int
    parts: list

    def all_params(self):
        return [p for part in self.parts for p in part.params.values()]


_PART_PREFIXES = {"separate": ("y.", "uv.")}


def new_part(arch: str, n: int, m: int, rng: np.random.Generator) -> Part:
    spec = nw.build_network(arch, n, m)
    params = nw.init_network_params(spec, rng)
    for gname, layers in hyper_groups(n, m).items():
        for i, layer in enumerate(layers):
            for field, p in nw.init_layer_params(layer, rng).items():
                params[f"{gname}.{i}.{field}"] = p
    params["hyper_prior.mu"] = ag.Param(np.zeros((1, n, 1, 1), np.float32))
    params["hyper_prior.sigma_raw"] = ag.Param(np.ones((1, n, 1, 1), np.float32))
    return Part(spec, params)


def new_model(codec: str, n: int, m: int, seed: int = 0) -> CodecModel:
    rng = np.random.default_rng(seed)
    parts = [new_part(a, n, m, rng) for a in codec_archs(codec)]
    return CodecModel(codec, n, m, parts)


def count_codec_params(codec: str, n: int, m: int) -> int:
    """Transform parameters only; hyper networks are tallied separately."""
    return sum(nw.build_network(a, n, m).count_params() for a in codec_archs(codec))


def count_total_params(codec: str, n: int, m: int) -> int:
    """Everything a checkpoint stores: transforms, hyper networks, priors."""
    per_part = sum(l.param_count() for layers in hyper_groups(n, m).values()
                   for l in layers) + 2 * n
    return count_codec_params(codec, n, m) + len(codec_archs(codec)) * per_part


def save_model(model: CodecModel, path) -> None:
    prefixes = _PART_PREFIXES.get(model.codec, ("",))
    merged = {}
    for prefix, part in zip(prefixes, model.parts):
        for k, p in part.params.items():
            merged[prefix + k] = p
    nw.save_checkpoint(path, model.codec, model.n, model.m, merged)


def load_model(path) -> CodecModel:
    arch, n, m, flat = nw.load_checkpoint(path)
    if arch not in CODECS:
        raise FormatError(
            f"{path}: checkpoint holds a bare {arch!r} network, not a codec")
    fresh = new_model(arch, n, m, seed=0)
    prefixes = _PART_PREFIXES.get(arch, ("",))
    for prefix, part in zip(prefixes, fresh.parts):
        expected = set(part.params)
        present = {k[len(prefix):] for k in flat if k.startswith(prefix)} if prefix \
            else set(flat)
        if present != expected:
            missing = sorted(expected - present)[:3]
            extra = sorted(present - expected)[:3]
            raise FormatError(f"{path}: parameter set mismatch "
                              f"(missing {missing}, unexpected {extra})")
        for k in part.params:
            saved = flat[prefix + k]
            if saved.shape != part.params[k].shape:
                raise FormatError(f"{path}: {prefix + k} has shape {saved.shape}, "
                                  f"expected {part.params[k].shape}")
            part.params[k] = saved
    return CodecModel(arch, n, m, fresh.parts)


# ---------------------------------------------------------------------------
# Forward wrappers.

def part_analysis(part: Part, inputs):
    return nw.analysis_forward(part.spec, part.params, inputs)


def part_synthesis(part: Part, latent):
    return nw.synthesis_forward(part.spec, part.params, latent)


def _run_hyper(part: Part, gname: str, x: ag.Tensor) -> ag.Tensor:
    layers = hyper_groups(part.spec.n, part.spec.m)[gname]
    for i, layer in enumerate(layers):
        x = nw.apply_layer(layer, part.params, f"{gname}.{i}", x)
    return x


def hyper_analysis(part: Part, latent: ag.Tensor) -> ag.Tensor:
    return _run_hyper(part, "hyper_ana", latent)


def hyper_synthesis(part: Part, z_hat: ag.Tensor, latent_hw):
    """Hyper-latent -> (mu, sigma), cropped to the latent's spatial dims."""
    out = _run_hyper(part, "hyper_syn", z_hat)
    lh, lw = latent_hw
    if out.shape[2] < lh or out.shape[3] < lw:
        raise ShapeError(f"hyper synthesis output {out.shape} smaller than "
                         f"latent {latent_hw}")
    out = ag.crop(out, lh, lw)
    mu, sigma_raw = ag.split(out, [part.spec.m, part.spec.m])
    return mu, scale_from_raw(sigma_raw)


def hyper_prior(part: Part):
    """(mu, sigma) tensors of the per-channel hyper-latent prior."""
    return part.params["hyper_prior.mu"], scale_from_raw(part.params["hyper_prior.sigma_raw"])


# ---------------------------------------------------------------------------
# Per-element coding tables.

def build_table(mu: float, sigma: float):
    """(CdfTable, lo) for one Gaussian; the last slot is the escape symbol."""
    half = min(RANGE_SIGMAS * sigma, MAX_TABLE_WIDTH / 2.0)
    lo = int(np.floor(mu - half))
    hi = int(np.ceil(mu + half))
    lo = max(SYMBOL_MIN, min(lo, SYMBOL_MAX))
    hi = max(lo, min(hi, SYMBOL_MAX))
    edges = np.arange(lo, hi + 2, dtype=np.float64) - 0.5
    cdf = special.ndtr((edges - mu) / sigma)
    pmf = np.diff(cdf)
    esc = max(cdf[0] + 1.0 - cdf[-1], 0.0)
    freqs = rans.quantize_pmf(np.append(pmf, esc))
    return rans.table_from_freqs(freqs), lo


def _push_symbol(enc: rans.Encoder, v: int, table: rans.CdfTable, lo: int) -> None:
    esc = table.num_symbols - 1
    hi = lo + esc - 1
    if lo <= v <= hi:
        enc.push(table, v - lo)
    else:
        raw = int(np.int64(v)) & 0xFFFF  # int16 two's complement
        enc.push(table, esc)
        enc.push(rans.BYTE_TABLE, raw >> 8)
        enc.push(rans.BYTE_TABLE, raw & 0xFF)


def _pop_symbol(dec: rans.Decoder, table: rans.CdfTable, lo: int) -> int:
    esc = table.num_symbols - 1
    s = dec.decode(table)
    if s != esc:
        return lo + s
    raw = (dec.decode(rans.BYTE_TABLE) << 8) | dec.decode(rans.BYTE_TABLE)
    return raw - 0x10000 if raw >= 0x8000 else raw


def _check_entropy_params(mu: np.ndarray, sigma: np.ndarray) -> None:
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
        raise DomainError("non-finite entropy parameters; the model has diverged")
    if np.any(sigma <= 0):
        raise DomainError("entropy scale must be strictly positive")


def encode_elementwise(values: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> bytes:
    """Range-code integer symbols under per-element Gaussians."""
    if values.shape != mu.shape or values.shape != sigma.shape:
        raise ShapeError(f"mismatched coding shapes {values.shape} {mu.shape} "
                         f"{sigma.shape}")
    _check_entropy_params(mu, sigma)
    enc = rans.Encoder()
    vf = values.ravel()
    muf = mu.astype(np.float64).ravel()
    sf = sigma.astype(np.float64).ravel()
    for i in range(vf.size):
        table, lo = build_table(muf[i], sf[i])
        _push_symbol(enc, int(vf[i]), table, lo)
    return enc.flush()


def decode_elementwise(dec: rans.Decoder, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    muf = mu.astype(np.float64).ravel()
    sf = sigma.astype(np.float64).ravel()
    out = np.empty(muf.size, dtype=np.int32)
    for i in range(muf.size):
        table, lo = build_table(muf[i], sf[i])
        out[i] = _pop_symbol(dec, table, lo)
    return out.reshape(mu.shape)


def encode_channelwise(values: np.ndarray, mu_c: np.ndarray, sigma_c: np.ndarray) -> bytes:
    """Like :func:`encode_elementwise` with one shared table per channel."""
    _check_entropy_params(mu_c, sigma_c)
    c = values.shape[0]
    entries = [build_table(float(mu_c[i]), float(sigma_c[i])) for i in range(c)]
    enc = rans.Encoder()
    for ci in range(c):
        table, lo = entries[ci]
        for v in values[ci].ravel():
            _push_symbol(enc, int(v), table, lo)
    return enc.flush()


def decode_channelwise(dec: rans.Decoder, mu_c: np.ndarray, sigma_c: np.ndarray,
                       shape) -> np.ndarray:
    c, h, w = shape
    entries = [build_table(float(mu_c[i]), float(sigma_c[i])) for i in range(c)]
    out = np.empty((c, h, w), dtype=np.int32)
    for ci in range(c):
        table, lo = entries[ci]
        flat = out[ci].reshape(-1)
        for i in range(h * w):
            flat[i] = _pop_symbol(dec, table, lo)
    return out


# ---------------------------------------------------------------------------
# Frame <-> network input packing.

def pack_inputs(codec: str, y: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Float planes (B,H,W)/(B,H/2,W/2) -> per-part network inputs."""
    yt = ag.Tensor(y[:, None].astype(np.float32))
    uvt = ag.Tensor(np.stack([u, v], axis=1).astype(np.float32))
    if codec == "separate":
        return [yt, uvt]
    if codec == "six-channel":
        six = np.concatenate([
            y[:, None, 0::2, 0::2], y[:, None, 0::2, 1::2],
            y[:, None, 1::2, 0::2], y[:, None, 1::2, 1::2],
            u[:, None], v[:, None]], axis=1).astype(np.float32)
        return [ag.Tensor(six)]
    return [(yt, uvt)]


def recon_planes(codec: str, outputs):
    """Synthesis output(s) -> float planes (B,H,W), (B,H/2,W/2) x2."""
    if codec == "separate":
        y = outputs[0].data[:, 0]
        uv = outputs[1].data
        return y, uv[:, 0], uv[:, 1]
    if codec == "six-channel":
        six = outputs[0].data
        b, _, hh, hw = six.shape
        y = np.empty((b, hh * 2, hw * 2), dtype=six.dtype)
        y[:, 0::2, 0::2] = six[:, 0]
        y[:, 0::2, 1::2] = six[:, 1]
        y[:, 1::2, 0::2] = six[:, 2]
        y[:, 1::2, 1::2] = six[:, 3]
        return y, six[:, 4], six[:, 5]
    yt, uvt = outputs[0]
    return yt.data[:, 0], uvt.data[:, 0], uvt.data[:, 1]


# ---------------------------------------------------------------------------
# Frame encode/decode.

@dataclass
class EncodeResult:
    data: bytes
    recon: fr.Yuv420Frame
    payload_bits: int
    model_bits: float

    @property
    def total_bits(self) -> int:
        return 8 * len(self.data)


def _encode_part(part: Part, inputs):
    latent = part_analysis(part, inputs)
    y_int = quantize(latent.data)
    z = hyper_analysis(part, latent)
    z_int = quantize(z.data)

    pmu, psig = hyper_prior(part)
    mu_c = pmu.data.reshape(-1).astype(np.float64)
    sig_c = psig.data.reshape(-1).astype(np.float64)
    hyper_bytes = encode_channelwise(z_int[0], mu_c, sig_c)

    z_hat = ag.Tensor(z_int.astype(np.float32))
    mu, sigma = hyper_synthesis(part, z_hat, latent.shape[2:])
    latent_bytes = encode_elementwise(y_int[0], mu.data[0], sigma.data[0])

    model_bits = (gaussian_bits_np(y_int, mu.data, sigma.data)
                  + gaussian_bits_np(z_int, pmu.data.reshape(1, -1, 1, 1),
                                     psig.data.reshape(1, -1, 1, 1)))
    return hyper_bytes, latent_bytes, y_int, model_bits


def _decode_part(part: Part, hyper_bytes: bytes, latent_bytes: bytes, latent_hw):
    lh, lw = latent_hw
    hh, hw = hyper_dims(lh, lw)
    pmu, psig = hyper_prior(part)
    dec = rans.Decoder(hyper_bytes)
    z_int = decode_channelwise(dec, pmu.data.reshape(-1).astype(np.float64),
                               psig.data.reshape(-1).astype(np.float64),
                               (part.spec.n, hh, hw))
    dec.verify_end()
    z_hat = ag.Tensor(z_int[None].astype(np.float32))
    mu, sigma = hyper_synthesis(part, z_hat, (lh, lw))
    dec = rans.Decoder(latent_bytes)
    y_int = decode_elementwise(dec, mu.data[0], sigma.data[0])
    dec.verify_end()
    return y_int[None]


def _part_latent_hw(part: Part, padded_w: int, padded_h: int):
    f = part.spec.latent_factor()
    return padded_h // f, padded_w // f


def _reconstruct(model: CodecModel, latents, padded_w, padded_h, width, height):
    outputs = []
    for part, y_int in zip(model.parts, latents):
        out = part_synthesis(part, ag.Tensor(y_int.astype(np.float32)))
        outputs.append(out)
    y, u, v = recon_planes(model.codec, outputs)
    recon = fr.floats_to_frame(y[0], u[0], v[0])
    return fr.crop_frame(recon, width, height)


def encode_frame(model: CodecModel, frame: fr.Yuv420Frame, quality: int = 0) -> EncodeResult:
    padded = fr.pad_frame(frame, pad_multiple(model.codec))
    yf, uf, vf = fr.frame_to_float(padded)
    inputs = pack_inputs(model.codec, yf[None], uf[None], vf[None])

    sections = []
    latents = []
    model_bits = 0.0
    for part, inp in zip(model.parts, inputs):
        hyper_bytes, latent_bytes, y_int, bits = _encode_part(part, inp)
        sections.append((hyper_bytes, latent_bytes))
        latents.append(y_int)
        model_bits += bits

    header = BITSTREAM_MAGIC + struct.pack(
        "<HBBIIIIB", BITSTREAM_VERSION, nw.FORMAT_ARCH_IDS[model.codec],
        quality & 0xFF, frame.width, frame.height, padded.width, padded.height,
        len(sections))
    body = bytearray()
    payload_bits = 0
    for hyper_bytes, latent_bytes in sections:
        body += struct.pack("<I", len(hyper_bytes)) + hyper_bytes
        body += struct.pack("<I", len(latent_bytes)) + latent_bytes
        payload_bits += 8 * (len(hyper_bytes) + len(latent_bytes))

    recon = _reconstruct(model, latents, padded.width, padded.height,
                         frame.width, frame.height)
    return EncodeResult(bytes(header) + bytes(body), recon, payload_bits, model_bits)


def parse_header(data: bytes):
    if len(data) < 25 or data[:4] != BITSTREAM_MAGIC:
        raise BitstreamError("not a codec bitstream")
    version, arch_id, quality, w, h, pw, ph, nsec = struct.unpack_from("<HBBIIIIB", data, 4)
    if version != BITSTREAM_VERSION:
        raise BitstreamError(f"unsupported bitstream version {version}")
    if arch_id not in nw.FORMAT_ARCH_NAMES or nw.FORMAT_ARCH_NAMES[arch_id] not in CODECS:
        raise BitstreamError(f"unknown codec id {arch_id}")
    return {"codec": nw.FORMAT_ARCH_NAMES[arch_id], "quality": quality,
            "width": w, "height": h, "padded_width": pw, "padded_height": ph,
            "sections": nsec, "body_offset": 25}


def decode_frame(model: CodecModel, data: bytes) -> fr.Yuv420Frame:
    head = parse_header(data)
    if head["codec"] != model.codec:
        raise BitstreamError(f"bitstream is {head['codec']!r} but the checkpoint "
                             f"holds {model.codec!r}")
    if head["sections"] != len(model.parts):
        raise BitstreamError(f"expected {len(model.parts)} sections, "
                             f"header says {head['sections']}")
    pw, ph = head["padded_width"], head["padded_height"]
    mult = pad_multiple(model.codec)
    if pw % mult or ph % mult or pw < head["width"] or ph < head["height"]:
        raise BitstreamError(f"inconsistent padded dims {pw}x{ph}")

    pos = head["body_offset"]
    latents = []
    for part in model.parts:
        chunks = []
        for _ in range(2):
            if pos + 4 > len(data):
                raise BitstreamError("truncated section header")
            (ln,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + ln > len(data):
                raise BitstreamError("truncated section payload")
            chunks.append(data[pos:pos + ln])
            pos += ln
        latents.append(_decode_part(part, chunks[0], chunks[1],
                                    _part_latent_hw(part, pw, ph)))
    if pos != len(data):
        raise BitstreamError(f"{len(data) - pos} trailing bytes after sections")
    return _reconstruct(model, latents, pw, ph, head["width"], head["height"])
