"""Gradient-weighted activation heatmaps over a trained model.

For a chosen convolutional activation A with channels k, the channel weights
are the spatial means of d(prediction)/dA_k; the raw map is
relu(sum_k alpha_k * A_k), bilinearly upsampled to the input size and
normalized to peak 1 (an all-zero map stays all-zero). Negative channel
weights are kept; only the combined map is rectified.
"""

from dataclasses import dataclass

import numpy as np

from biqa import autodiff as ad
from biqa import data as dat
from biqa.errors import NoSpatialLayer, UnknownLayer


@dataclass
class Heatmap:
    values: np.ndarray  # (H,W) floats in [0,1]; max is 1 unless all-zero
    layer: str


def default_target_layer(model):
    """Last convolutional activation of the first enabled toy stream."""
    names = model.conv_layer_names()
    if not names:
        raise NoSpatialLayer("model has no convolutional stream to attribute over")
    stream = names[0].split(".")[0]
    return [n for n in names if n.startswith(stream)][-1]


def gradcam(model, image, layer=None, sign=1.0):
    """Heatmap of the positions most influencing the model's prediction.

    `image` is a single (H,W,3) array. `sign=-1` attributes the negated
    output instead, i.e. the evidence that lowers the predicted quality.
    """
    if layer is None:
        layer = default_target_layer(model)
    elif layer not in model.conv_layer_names():
        if not model.conv_layer_names():
            raise NoSpatialLayer("model has no convolutional stream to attribute over")
        raise UnknownLayer(f"unknown layer {layer!r}; available: {model.conv_layer_names()}")

    image = np.asarray(image)
    batch = image[None, ...].astype(np.float32, copy=False)
    capture = {}
    with ad.Tape() as tape:
        preds = model.forward(batch, "eval", capture=capture)
        tape.backward(ad.tsum(preds))
    act = capture[layer]
    grads = act.grad if act.grad is not None else np.zeros_like(act.data)

    alpha = sign * grads.mean(axis=(1, 2), keepdims=True)   # (1,1,1,C)
    raw = np.maximum(0.0, (alpha * act.data).sum(axis=3))[0]  # (h,w)
    up = dat.resize(raw.astype(np.float64), image.shape[0], image.shape[1])
    up = np.maximum(0.0, up)  # interpolation cannot introduce negatives, but be safe
    peak = up.max()
    if peak > 0:
        up = up / peak
    return Heatmap(values=up, layer=layer)


def export_heatmap(heatmap, path, image=None, overlay=False):
    """Write the map as grayscale PGM, or as a PPM overlay where the map is
    blended into the image's red channel at 50%."""
    if overlay:
        if image is None:
            raise ValueError("overlay export needs the source image")
        image = np.asarray(image)
        if image.shape[:2] != heatmap.values.shape:
            raise ValueError(
                f"heatmap {heatmap.values.shape} does not cover image {image.shape[:2]}")
        blend = 0.5 * image.copy()
        blend[:, :, 0] += 0.5 * heatmap.values
        dat.write_ppm(path, blend)
    else:
        dat.write_pgm(path, heatmap.values)


def quadrant_hit_fraction(heatmap, region, top_fraction=0.1):
    """Fraction of the map's top-decile pixels that fall inside `region`
    (one of tl/tr/bl/br). Used to score localization against sidecar labels."""
    h, w = heatmap.values.shape
    sl = dat._region_slice(region, min(h, w))
    mask = np.zeros((h, w), dtype=bool)
    mask[sl] = True
    flat = heatmap.values.reshape(-1)
    k = max(1, int(round(top_fraction * flat.size)))
    top_idx = np.argsort(flat, kind="stable")[-k:]
    return float(mask.reshape(-1)[top_idx].mean())
