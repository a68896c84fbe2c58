"""Seedable image augmentations with a canonical string form.

Grammar of the string form::

    spec    := element ("+" element)*
    element := name (":" value)*  |  "yoco[" ("h"|"v") "]:" element  |  "(" spec ")"

e.g. ``rcs:0.5+vflip``, ``gblur:3:1``, ``yoco[h]:cutout``, ``yoco[v]:(rcs:0.5+vflip)``.
Every stochastic transform draws from the ``numpy.random.Generator`` it is given.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .errors import ValidationError

# name -> ordered (param, default); parameters listed in SHOWN always appear in the canonical form
PARAMS = {
    "none": (),
    "hflip": (),
    "vflip": (),
    "grsc": (),
    "gnoise": (("variance", 0.5),),
    "rcs": (("fraction", 0.5),),
    "rot": (("degrees", 25.0),),
    "gblur": (("kernel", 3), ("sigma", 1.0)),
    "cjitter": (("strength_min", 0.4), ("strength_max", 0.8), ("hue_min", 0.1), ("hue_max", 0.2)),
    "cutout": (("size", 0.5),),
}
SHOWN = {"gnoise", "rcs", "rot", "gblur"}
STOCHASTIC = {"gnoise", "rcs", "rot", "cjitter", "cutout", "gblur"}
NAMES = tuple(PARAMS) + ("compose", "yoco")
SWEEP_REPEATS = 6


@dataclass(frozen=True)
class AugmentationSpec:
    name: str
    params: tuple = ()
    children: tuple = field(default=())

    @property
    def p(self) -> dict:
        return dict(self.params)

    def __str__(self) -> str:
        return to_string(self)


def _check_range(name: str, p: dict):
    def bad(msg):
        raise ValidationError(f"{name}: {msg}")

    if name == "gnoise" and not (0 <= p["variance"] <= 4):
        bad("variance must be in [0, 4]")
    if name == "rcs" and not (0 < p["fraction"] <= 1):
        bad("fraction must be in (0, 1]")
    if name == "rot" and not (0 <= p["degrees"] <= 180):
        bad("degrees must be in [0, 180]")
    if name == "gblur":
        if p["kernel"] < 1 or p["kernel"] % 2 == 0:
            bad("kernel must be a positive odd integer")
        if p["sigma"] <= 0:
            bad("sigma must be positive")
    if name == "cjitter":
        if not (0 <= p["strength_min"] <= p["strength_max"] <= 1):
            bad("need 0 <= strength_min <= strength_max <= 1")
        if not (0 <= p["hue_min"] <= p["hue_max"] <= 0.5):
            bad("need 0 <= hue_min <= hue_max <= 0.5")
    if name == "cutout" and not (0 < p["size"] <= 1):
        bad("size must be in (0, 1]")


def make(name: str, *values, **kw) -> AugmentationSpec:
    """Build a leaf spec, e.g. ``make("rcs", 0.5)`` or ``make("gblur", kernel=5, sigma=2)``."""
    if name not in PARAMS:
        raise ValidationError(f"unknown augmentation {name!r}")
    schema = PARAMS[name]
    if len(values) > len(schema):
        raise ValidationError(f"{name} takes at most {len(schema)} parameters")
    p = {k: d for k, d in schema}
    for (k, _), v in zip(schema, values):
        p[k] = v
    for k, v in kw.items():
        if k not in p:
            raise ValidationError(f"{name} has no parameter {k!r}")
        p[k] = v
    for k, d in schema:
        if isinstance(d, int) and float(p[k]) != int(p[k]):
            raise ValidationError(f"{name}.{k} must be an integer")
    p = {k: (int(p[k]) if isinstance(d, int) else float(p[k])) for k, d in schema}
    _check_range(name, p)
    return AugmentationSpec(name, tuple(p.items()))


def compose(specs) -> AugmentationSpec:
    """Left-to-right composition; nested compositions are flattened."""
    specs = list(specs)
    if not specs:
        raise ValidationError("cannot compose an empty list of augmentations")
    flat = []
    for s in specs:
        flat.extend(s.children if s.name == "compose" else (s,))
    if len(flat) == 1:
        return flat[0]
    return AugmentationSpec("compose", (), tuple(flat))


def yoco_wrap(inner: AugmentationSpec, cut_axis: str) -> AugmentationSpec:
    """Cut into two halves ("h": top/bottom, "v": left/right), augment each half independently."""
    if cut_axis not in ("h", "v"):
        raise ValidationError(f"cut_axis must be 'h' or 'v', got {cut_axis!r}")
    return AugmentationSpec("yoco", (("axis", cut_axis),), (inner,))


def is_stochastic(spec: AugmentationSpec) -> bool:
    return spec.name in STOCHASTIC or any(is_stochastic(c) for c in spec.children)


# ---------------------------------------------------------------------------
# string form


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else format(v, ".12g")


def to_string(spec: AugmentationSpec) -> str:
    if spec.name == "compose":
        return "+".join(_wrap(c) for c in spec.children)
    if spec.name == "yoco":
        return f"yoco[{spec.p['axis']}]:{_wrap(spec.children[0])}"
    values = [v for _, v in spec.params]
    if spec.name not in SHOWN:
        defaults = [d for _, d in PARAMS[spec.name]]
        while values and values[-1] == defaults[len(values) - 1]:
            values.pop()
    return ":".join([spec.name] + [_fmt(v) for v in values])


def _wrap(spec):
    s = to_string(spec)
    return f"({s})" if spec.name == "compose" else s


def _split_top(text: str, sep: str = "+"):
    parts, depth, cur = [], 0, ""
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise ValidationError(f"unbalanced parentheses in {text!r}")
        if ch == sep and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    if depth:
        raise ValidationError(f"unbalanced parentheses in {text!r}")
    parts.append(cur)
    return parts


def parse(text: str) -> AugmentationSpec:
    text = text.strip()
    if not text:
        raise ValidationError("empty augmentation string")
    parts = _split_top(text)
    if len(parts) > 1:
        return compose([parse(p) for p in parts])
    if text.startswith("(") and text.endswith(")"):
        return parse(text[1:-1])
    if text.startswith("yoco"):
        if len(text) < 8 or text[4] != "[" or text[6:8] != "]:":
            raise ValidationError(f"expected yoco[h]:<spec> or yoco[v]:<spec>, got {text!r}")
        return yoco_wrap(parse(text[8:]), text[5])
    name, *values = text.split(":")
    if name not in PARAMS:
        raise ValidationError(f"unknown augmentation {name!r}")
    try:
        nums = [float(v) for v in values]
    except ValueError:
        raise ValidationError(f"non-numeric parameter in {text!r}") from None
    return make(name, *nums)


# ---------------------------------------------------------------------------
# pixel operations


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers and edge clamping."""
    h, w = img.shape[:2]

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(np.float32)

    y0, y1, wy = coords(out_h, h)
    x0, x1, wx = coords(out_w, w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(np.float32)


def grayscale(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    # 0.299 r + 0.587 g + 0.114 b, arranged so gray input maps to itself exactly
    luma = r + np.float32(0.587) * (g - r) + np.float32(0.114) * (b - r)
    return np.repeat(luma[..., None], img.shape[-1], axis=-1)


def random_crop_resize(img, fraction, rng):
    h, w = img.shape[:2]
    ch = max(1, int(math.floor(h * math.sqrt(fraction))))
    cw = max(1, int(math.floor(w * math.sqrt(fraction))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return resize_bilinear(img[top:top + ch, left:left + cw], h, w)


def gaussian_blur(img, kernel, sigma):
    half = kernel // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    out = ndimage.correlate1d(img, k, axis=0, mode="mirror")
    return ndimage.correlate1d(out, k, axis=1, mode="mirror")


def color_jitter(img, p, rng):
    def factor(strength):
        return rng.uniform(max(0.0, 1 - strength), 1 + strength)

    bright = factor(rng.uniform(p["strength_min"], p["strength_max"]))
    contrast = factor(rng.uniform(p["strength_min"], p["strength_max"]))
    sat = factor(rng.uniform(p["strength_min"], p["strength_max"]))
    hue_range = rng.uniform(p["hue_min"], p["hue_max"])
    hue = rng.uniform(-hue_range, hue_range)
    out = np.clip(img * bright, 0, 1)
    mean = grayscale(out)[..., 0].mean()
    out = np.clip((out - mean) * contrast + mean, 0, 1)
    gray = grayscale(out)
    out = np.clip((out - gray) * sat + gray, 0, 1)
    if img.shape[-1] == 3:
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        out = hsv_to_rgb(hsv)
    return out


def cutout(img, size, rng, fill=None):
    h, w = img.shape[:2]
    side = max(1, int(round(size * min(h, w))))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    if fill is None:
        fill = img.reshape(-1, img.shape[-1]).mean(axis=0)
    out = img.copy()
    out[top:top + side, left:left + side] = fill
    return out


def rotate(img, degrees, rng):
    angle = rng.uniform(-degrees, degrees)
    return ndimage.rotate(img, angle, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)


def _apply(spec: AugmentationSpec, img: np.ndarray, rng, fill) -> np.ndarray:
    name, p = spec.name, spec.p
    if name == "none":
        return img
    if name == "hflip":
        return img[:, ::-1]
    if name == "vflip":
        return img[::-1]
    if name == "grsc":
        return grayscale(img)
    if name == "gnoise":
        return img + rng.normal(0.0, math.sqrt(p["variance"]), size=img.shape).astype(np.float32)
    if name == "rcs":
        return random_crop_resize(img, p["fraction"], rng)
    if name == "rot":
        return rotate(img, p["degrees"], rng)
    if name == "gblur":
        return gaussian_blur(img, p["kernel"], p["sigma"])
    if name == "cjitter":
        return color_jitter(img, p, rng)
    if name == "cutout":
        return cutout(img, p["size"], rng, fill)
    if name == "compose":
        for child in spec.children:
            img = np.clip(_apply(child, img, rng, fill), 0.0, 1.0)
        return img
    if name == "yoco":
        axis = 0 if p["axis"] == "h" else 1
        cut = img.shape[axis] // 2
        first, second = np.split(img, [cut], axis=axis)
        sub = rng.spawn(2)
        halves = [np.clip(_apply(spec.children[0], part, r, fill), 0.0, 1.0) if part.shape[axis] else part
                  for part, r in zip((first, second), sub)]
        return np.concatenate(halves, axis=axis)
    raise ValidationError(f"unknown augmentation {name!r}")


def apply(spec: AugmentationSpec, image: np.ndarray, rng: Optional[np.random.Generator] = None,
          fill=None) -> np.ndarray:
    """Augment one (H, W, C) image in [0, 1]. Output has the same shape, clipped to [0, 1].

    ``fill`` sets the CutOut value (defaults to the image's per-channel mean).
    """
    if rng is None:
        if is_stochastic(spec):
            raise ValidationError(f"{to_string(spec)} is stochastic and needs an rng")
        rng = np.random.default_rng(0)
    img = np.asarray(image, dtype=np.float32)
    out = _apply(spec, img, rng, fill)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)


def apply_batch(spec: AugmentationSpec, images: np.ndarray, seed: int, fill="dataset") -> np.ndarray:
    """Augment every image with its own substream of ``seed``.

    ``fill="dataset"`` fills CutOut holes with the batch's per-channel mean.
    """
    images = np.asarray(images, dtype=np.float32)
    if fill == "dataset":
        fill = images.reshape(-1, images.shape[-1]).mean(axis=0) if len(images) else None
    if not is_stochastic(spec):
        return np.stack([apply(spec, im, None, fill) for im in images]) if len(images) else images.copy()
    streams = np.random.SeedSequence(seed).spawn(len(images))
    out = [apply(spec, im, np.random.default_rng(s), fill) for im, s in zip(images, streams)]
    return np.stack(out) if out else images.copy()


# ---------------------------------------------------------------------------
# sweep menu


def sweep_zoo() -> list:
    """The augmentation menu for the ASR/SA sweep, No-Aug control first."""
    entries = ["none"]
    entries += [f"gnoise:{v}" for v in (0.2, 0.5, 0.7, 1.0)]
    entries += ["rcs:0.25", "rcs:0.5", "rcs:0.75", "hflip", "vflip", "rot:25", "grsc",
                "gblur:3:1", "gblur:5:2", "cjitter", "cutout",
                "rcs:0.5+hflip", "rcs:0.5+vflip", "hflip+vflip", "grsc+vflip"]
    for inner in ("rcs:0.5", "cutout", "vflip", "rcs:0.5+vflip"):
        inner_s = f"({inner})" if "+" in inner else inner
        entries += [f"yoco[h]:{inner_s}", f"yoco[v]:{inner_s}"]
    return [parse(e) for e in entries]


def sweep_group(spec: AugmentationSpec) -> str:
    """Box label used when aggregating sweep rows: Gaussian-noise variances share one
    box, and horizontal/vertical YOCO cuts share one box."""
    if spec.name == "gnoise":
        return "GNoise"
    if spec.name == "yoco":
        return f"YOCO({to_string(spec.children[0])})"
    if spec.name == "none":
        return "No Aug"
    return to_string(spec)
