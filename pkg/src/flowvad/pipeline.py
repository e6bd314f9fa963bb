"""Per-video scoring: sliding windows through the frozen models to
per-frame evidence series.

Windows of clip_len frames step through the video at score_stride; every
frame must land in at least one window (guaranteed when score_stride <=
clip_len). Each window yields a per-frame reconstruction error (patch max),
a per-slice static NLL (held across its tau span), and a per-frame dynamic
NLL. Frames covered by several windows take the mean. The normalized
likelihood term and the fused score are computed within the video.
"""

import numpy as np

from .errors import ConfigError
from .features import append_intensity, pool_features
from .scoring import (
    aggregate_windows,
    expand_static,
    fuse,
    nll_score,
    patch_max_error,
)
from .tensor import Tensor

__all__ = ["score_video", "window_starts", "collect_flow_samples"]

RECON_BATCH = 4  # windows reconstructed per forward pass
FLOW_BATCH = 64  # feature slices per density-model pass


def window_starts(total, clip_len, stride):
    """Window origins covering every frame; the last window is clamped."""
    if total < clip_len:
        raise ConfigError(f"video has {total} frames, need at least {clip_len}")
    if stride > clip_len:
        raise ConfigError(
            f"score stride {stride} above clip length {clip_len} leaves gaps"
        )
    starts = list(range(0, total - clip_len + 1, stride))
    if starts[-1] != total - clip_len:
        starts.append(total - clip_len)
    return starts


def collect_flow_samples(model, video, config, need_static=True, need_dynamic=True):
    """Pool per-slice density-model samples from every training window.

    Windows step by clip_stride. Returns (static (S, 3, h, w) or None,
    dynamic (D, 2, h, w) or None).
    """
    total = video.shape[2]
    starts = list(range(0, total - config.clip_len + 1, config.clip_stride))
    if not starts:
        raise ConfigError(f"video has {total} frames, need at least {config.clip_len}")
    statics = []
    dynamics = []
    for lo in range(0, len(starts), RECON_BATCH):
        group = starts[lo : lo + RECON_BATCH]
        chunk = np.concatenate(
            [video[:, :, s : s + config.clip_len] for s in group], axis=0
        )
        xs, xd = model.encode(Tensor(chunk))
        for k in range(len(group)):
            if need_static:
                pooled = pool_features(xs.data[k : k + 1])
                statics.append(append_intensity(pooled, chunk[k : k + 1], config.tau))
            if need_dynamic and xd is not None:
                dynamics.append(pool_features(xd.data[k : k + 1]))
    static = np.concatenate(statics, axis=0) if statics else None
    dynamic = np.concatenate(dynamics, axis=0) if dynamics else None
    return static, dynamic


def _batched_nll(stack, samples, batch):
    out = np.empty(samples.shape[0])
    for lo in range(0, samples.shape[0], batch):
        out[lo : lo + batch] = stack.nll_of(samples[lo : lo + batch])
    return out


def score_video(model, video, config, static_flow=None, dynamic_flow=None):
    """Score one video array (1, C, T, H, W); returns per-frame series.

    Returns a dict of length-T arrays: recon, nll_static, nll_dynamic,
    nll_norm, fused. Flow stacks are optional; a missing stack contributes
    zeros (recon-only ablations).
    """
    total = video.shape[2]
    tau = config.tau
    starts = window_starts(total, config.clip_len, config.score_stride)
    windows = np.concatenate(
        [video[:, :, s : s + config.clip_len] for s in starts], axis=0
    )
    n = windows.shape[0]

    recon_rows = []
    static_samples = []
    dynamic_samples = []
    need_latents = static_flow is not None or dynamic_flow is not None
    for lo in range(0, n, RECON_BATCH):
        chunk = windows[lo : lo + RECON_BATCH]
        x = Tensor(chunk)
        xs, xd = model.encode(x)
        out = model.decode(xs, xd).data
        for k in range(chunk.shape[0]):
            recon_rows.append(
                patch_max_error(
                    chunk[k : k + 1],
                    out[k : k + 1],
                    patch=config.patch_size,
                    stride=config.patch_stride,
                )
            )
        if need_latents:
            for k in range(chunk.shape[0]):
                if static_flow is not None:
                    pooled = pool_features(xs.data[k : k + 1])
                    static_samples.append(
                        append_intensity(pooled, chunk[k : k + 1], tau)
                    )
                if dynamic_flow is not None and xd is not None:
                    dynamic_samples.append(pool_features(xd.data[k : k + 1]))

    recon = aggregate_windows(recon_rows, starts, total)

    if static_flow is not None:
        flat = np.concatenate(static_samples, axis=0)
        nll = _batched_nll(static_flow, flat, FLOW_BATCH)
        per_clip = config.clip_len // tau
        rows = [
            expand_static(nll[i * per_clip : (i + 1) * per_clip], config.clip_len, tau)
            for i in range(len(starts))
        ]
        nll_static = aggregate_windows(rows, starts, total)
    else:
        nll_static = np.zeros(total)

    if dynamic_flow is not None:
        flat = np.concatenate(dynamic_samples, axis=0)
        nll = _batched_nll(dynamic_flow, flat, FLOW_BATCH)
        rows = [
            nll[i * config.clip_len : (i + 1) * config.clip_len]
            for i in range(len(starts))
        ]
        nll_dynamic = aggregate_windows(rows, starts, total)
    else:
        nll_dynamic = np.zeros(total)

    if static_flow is None and dynamic_flow is None:
        nll_norm = np.zeros(total)
    else:
        nll_norm = nll_score(nll_static, nll_dynamic)
    fused = fuse(recon, nll_norm, config.lambda_l)
    return {
        "recon": recon,
        "nll_static": nll_static,
        "nll_dynamic": nll_dynamic,
        "nll_norm": nll_norm,
        "fused": fused,
    }
