"""Tone mapping, image metrics, and the PFM/PNG/checkpoint file formats."""

from __future__ import annotations

import json
import os
import struct

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
CHECKPOINT_MAGIC = b"NERV"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Malformed image or checkpoint file."""


def tone_map(x):
    """x / (1 + x) per channel."""
    x = np.asarray(x, float)
    if np.any(x < 0):
        raise ValueError("tone_map expects nonnegative radiance")
    return x / (1.0 + x)


def _check_pair(a, b):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak=1.0, cap=PSNR_CAP):
    """PSNR in dB of two images already in display range (tone-mapped)."""
    a, b = _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return cap
    return float(min(cap, -10.0 * np.log10(mse / peak**2)))


def _blur(x):
    # 11-tap Gaussian, sigma 1.5, applied per channel; 'valid' region only
    out = gaussian_filter(x, sigma=(1.5, 1.5, 0), truncate=5.0 / 1.5, mode="constant")
    return out[5:-5, 5:-5]


def _ssim_terms(a, b, peak):
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a, mu_b = _blur(a), _blur(b)
    saa = _blur(a * a) - mu_a**2
    sbb = _blur(b * b) - mu_b**2
    sab = _blur(a * b) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * sab + c2) / (saa + sbb + c2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _as_hwc(x):
    x = np.asarray(x, float)
    return x[..., None] if x.ndim == 2 else x


def ssim(a, b, peak=1.0):
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5)."""
    a, b = _check_pair(_as_hwc(a), _as_hwc(b))
    if min(a.shape[:2]) < 11:
        raise ValueError("image smaller than the 11-pixel SSIM window")
    return _ssim_terms(a, b, peak)[0]


def ms_ssim_scales(shape, max_scales=5):
    """Number of scales usable for an image: the coarsest must be at least 16 pixels."""
    m = min(shape[:2])
    k = 0
    while k < max_scales and m >= 16:
        k += 1
        m //= 2
    if k == 0 and min(shape[:2]) >= 11:
        k = 1
    return k


def _downsample(x):
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim(a, b, peak=1.0, return_scales=False):
    """Multi-scale SSIM with the standard five scale weights.

    Smaller images use fewer scales (weights renormalized); the count used is
    returned as the second value when ``return_scales`` is set.
    """
    a, b = _check_pair(_as_hwc(a), _as_hwc(b))
    k = ms_ssim_scales(a.shape)
    if k == 0:
        raise ValueError(f"image {a.shape[:2]} too small for MS-SSIM")
    wts = MS_SSIM_WEIGHTS[:k] / MS_SSIM_WEIGHTS[:k].sum()
    vals = []
    for i in range(k):
        s, cs = _ssim_terms(a, b, peak)
        vals.append(s if i == k - 1 else cs)
        if i < k - 1:
            a, b = _downsample(a), _downsample(b)
    vals = np.maximum(np.array(vals), 0.0)
    out = float(np.prod(vals**wts))
    return (out, k) if return_scales else out


# ---------------------------------------------------------------- images


def write_pfm(path, img):
    """Little-endian RGB PFM (scale -1.0), rows stored bottom-to-top."""
    img = np.asarray(img, dtype="<f4")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("write_pfm expects (H, W, 3)")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        data = f.read()
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PFM header at byte {pos}")
        tokens.append((data[start:pos], start))
    pos += 1  # single whitespace after the scale
    magic, (w_tok, w_at), (h_tok, _), (s_tok, s_at) = tokens[0][0], tokens[1], tokens[2], tokens[3]
    if magic not in (b"PF", b"Pf"):
        raise FormatError(f"{path}: bad PFM magic {magic!r} at byte 0")
    try:
        w, h = int(w_tok), int(h_tok)
    except ValueError:
        raise FormatError(f"{path}: bad PFM dimensions at byte {w_at}") from None
    try:
        scale = float(s_tok)
    except ValueError:
        raise FormatError(f"{path}: bad PFM scale at byte {s_at}") from None
    ch = 3 if magic == b"PF" else 1
    need = w * h * ch * 4
    if len(data) - pos < need:
        raise FormatError(f"{path}: PFM data truncated at byte {len(data)}, expected {pos + need}")
    dt = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dt, count=w * h * ch, offset=pos).reshape(h, w, ch)[::-1]
    arr = arr.astype(np.float32)
    return arr if ch == 3 else arr[..., 0]


def srgb_encode(x):
    x = np.clip(np.asarray(x, float), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)


def to_preview(hdr):
    """Tone-mapped, sRGB-encoded 8-bit image."""
    return np.round(srgb_encode(tone_map(hdr)) * 255.0).astype(np.uint8)


def write_png(path, hdr):
    Image.fromarray(to_preview(hdr)).save(path)


def write_png_ldr(path, img01):
    """Write an image already in [0, 1] without tone mapping."""
    Image.fromarray(np.round(np.clip(img01, 0, 1) * 255.0).astype(np.uint8)).save(path)


def read_png(path):
    return np.asarray(Image.open(path))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, arrays: dict, meta: dict):
    """Write a checkpoint: magic, u32 version, u32 header length, JSON header,
    then each array as contiguous little-endian float32 in header order."""
    entries = []
    blobs = []
    for name, arr in arrays.items():
        a = np.array(arr, dtype="<f4", order="C")
        entries.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return (arrays dict of float32, meta dict)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic at byte 0)")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated checkpoint header at byte {len(data)}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} at byte 4")
    if len(data) < 12 + hlen:
        raise FormatError(f"{path}: truncated JSON header, file ends at byte {len(data)}")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt JSON header at byte 12: {e}") from None
    pos = 12 + hlen
    arrays = {}
    for ent in header["arrays"]:
        shape = tuple(ent["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + nbytes > len(data):
            raise FormatError(
                f"{path}: array {ent['name']!r} truncated: needs bytes {pos}..{pos + nbytes}, file ends at {len(data)}"
            )
        arrays[ent["name"]] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes after last array at byte {pos}")
    return arrays, header["meta"]
