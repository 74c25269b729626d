"""Channel-activation maps written as 8-bit binary PGM files with JSON sidecars."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .backbone import image_features, unflatten
from .cci import cci_forward
from .errors import ConfigError
from .model import ModelConfig
from .sci import complementary_topk, sci_forward


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes uniform mid-gray (128)."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, values: np.ndarray) -> Path:
    pixels = normalize_map(values)
    h, w = pixels.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def single_image_maps(image: np.ndarray, params, model_config: ModelConfig, channel: Optional[int], out_dir,
                      k: int = 3) -> dict:
    """Referred channel, its top-k complementary channels (before SCI) and the mixed channel after SCI.

    ``channel=None`` refers to the channel with the largest mean activation.
    """
    fm = image_features(image, params, model_config.backbone)
    c = fm.channels
    if channel is None:
        channel = int(np.argmax(fm.flattened.data.mean(axis=1)))
    if not 0 <= channel < c:
        raise ConfigError(f"channel {channel} out of range for {c} channels", "channel")
    sci = sci_forward(fm, params, model_config.sci_variant)
    chosen = complementary_topk(sci.weights, channel, k)
    x = fm.spatial.data
    y = unflatten(sci.y, fm.height, fm.width).data
    out = Path(out_dir)
    maps: Dict[str, List] = {}
    entries = [("referred", channel, x[..., channel])]
    entries += [(f"complementary{r + 1}", j, x[..., j]) for r, j in enumerate(chosen)]
    entries.append(("post_sci", channel, y[..., channel]))
    files = []
    for role, ch, values in entries:
        name = f"{role}_c{ch}.pgm"
        write_pgm(out / name, values)
        maps[name] = values.tolist()
        files.append({"file": name, "role": role, "channel": ch})
    meta = {
        "mode": "single",
        "channel": channel,
        "complementary": chosen,
        "weights_row": sci.weights.w.data[channel].tolist(),
        "sci_variant": model_config.sci_variant,
        "files": files,
        "maps": maps,
    }
    (out / "visualize.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return meta


def pair_maps(image_a: np.ndarray, image_b: np.ndarray, params, model_config: ModelConfig, out_dir) -> dict:
    """Channel-averaged maps of both images after cross-image interaction."""
    fa = image_features(image_a, params, model_config.backbone)
    fb = image_features(image_b, params, model_config.backbone)
    sa = sci_forward(fa, params, model_config.sci_variant)
    sb = sci_forward(fb, params, model_config.sci_variant)
    out_cci = cci_forward(fa, fb, sa, sb, params)
    out = Path(out_dir)
    maps, files = {}, []
    for role, z in (("cci_mean_a", out_cci.z_a_prime), ("cci_mean_b", out_cci.z_b_prime)):
        values = z.data.mean(axis=-1)
        name = f"{role}.pgm"
        write_pgm(out / name, values)
        maps[name] = values.tolist()
        files.append({"file": name, "role": role})
    meta = {
        "mode": "pair",
        "eta": out_cci.gates.eta.item(),
        "gamma": out_cci.gates.gamma.item(),
        "files": files,
        "maps": maps,
    }
    (out / "visualize.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return meta
