"""Harmonization of heterogeneous recordings into canonical 600x90 clips.

Pipeline per recording: complex -> amplitude, split into per-link
(tx antenna x receiver) instances keeping the first three antennas of
each receiver, cut 2 s windows at 1 s stride, QC each window at native
packet resolution, resample time to 600 samples, segment the bandwidth
into 20 MHz channels resampled to 30 bins each, flatten antennas into
the channel axis (antenna-major) and z-score every timestamp row.

All arithmetic runs in float64 and only the final clip is cast to
float32, so per-timestamp statistics are exact and any global amplitude
scaling (receiver AGC) cancels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import qc as Q


class HarmonizeError(ValueError):
    """Recording cannot be harmonized under the given config."""


@dataclass
class HarmonizeConfig:
    window_seconds: float = 2.0
    stride_seconds: float = 1.0
    target_time_len: int = 600
    target_bins_per_channel: int = 30
    channel_bandwidth: float = 20e6
    antennas_used_per_receiver: int = 3
    eps_std: float = 1e-8

    def validate(self):
        if not self.window_seconds >= self.stride_seconds > 0:
            raise HarmonizeError("need window_seconds >= stride_seconds > 0")
        if self.target_time_len < 2 or self.target_bins_per_channel < 2:
            raise HarmonizeError("target lengths must be >= 2")
        return self


@dataclass
class Link:
    """Amplitude tensor (n_t, 3, n_f) for one tx antenna / receiver pair."""

    data: np.ndarray
    tx_index: int
    recv_index: int


def amplitude(recording: D.ChannelRecording) -> np.ndarray:
    """Entry-wise modulus; null sentinels (NaN) propagate."""
    return np.abs(recording.data).astype(np.float64)


def extract_links(recording: D.ChannelRecording, config: HarmonizeConfig) -> list:
    """One instance per (tx antenna, receiver), first 3 antennas each.

    Receiver u contributes chain rows u*n_apr .. u*n_apr+2; extra
    antennas (4-antenna APs) are dropped.
    """
    k = config.antennas_used_per_receiver
    if recording.n_apr < k:
        raise HarmonizeError(f"recording {recording.source_id!r}: n_apr={recording.n_apr} < {k} antennas required")
    amp = amplitude(recording)
    links = []
    for tx in range(recording.n_tx):
        for u in range(recording.n_recv):
            rows = u * recording.n_apr + np.arange(k)
            links.append(Link(data=amp[:, rows, tx, :], tx_index=tx, recv_index=u))
    return links


def window_slices(n_t: int, sampling_rate: float, config: HarmonizeConfig) -> list:
    """Start offsets (in packets) of full 2 s windows at 1 s stride."""
    duration = n_t / sampling_rate
    if duration < config.window_seconds:
        return []
    win_len = int(round(config.window_seconds * sampling_rate))
    stride = int(round(config.stride_seconds * sampling_rate))
    n_win = int(math.floor((duration - config.window_seconds) / config.stride_seconds + 1e-9)) + 1
    slices = []
    for w in range(n_win):
        start = w * stride
        if start + win_len <= n_t:  # trailing partial windows are dropped
            slices.append((start, win_len))
    return slices


def resample_linear(arr: np.ndarray, axis: int, target: int) -> np.ndarray:
    """Linear resampling with inclusive endpoints: [0, L-1] -> target points.

    Identity when lengths already match; exact on affine signals.
    """
    length = arr.shape[axis]
    if length == target:
        return arr.copy()
    if length == 1:
        return np.repeat(arr, target, axis=axis)
    pos = np.linspace(0.0, length - 1.0, target)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, length - 1)
    frac = pos - lo
    shape = [1] * arr.ndim
    shape[axis] = target
    frac = frac.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1.0 - frac) + np.take(arr, hi, axis=axis) * frac


def window_and_resample_time(link_data: np.ndarray, sampling_rate: float, config: HarmonizeConfig) -> list:
    """Cut sliding windows and interpolate each to the target time length."""
    return [
        resample_linear(link_data[start : start + n], 0, config.target_time_len)
        for start, n in window_slices(link_data.shape[0], sampling_rate, config)
    ]


def channel_blocks(n_f: int, bandwidth: float, config: HarmonizeConfig) -> list:
    """Contiguous subcarrier blocks, one per 20 MHz channel.

    Remainder subcarriers under non-divisible segmentation go to the
    leading blocks.
    """
    if bandwidth < config.channel_bandwidth:
        raise HarmonizeError(f"bandwidth {bandwidth} Hz below one channel ({config.channel_bandwidth} Hz)")
    n_ch = int(round(bandwidth / config.channel_bandwidth))
    base, rem = divmod(n_f, n_ch)
    if base == 0:
        raise HarmonizeError(f"{n_f} subcarriers cannot fill {n_ch} channels")
    blocks, start = [], 0
    for c in range(n_ch):
        size = base + (1 if c < rem else 0)
        blocks.append((start, start + size))
        start += size
    return blocks


def segment_and_resample_freq(window: np.ndarray, bandwidth: float, config: HarmonizeConfig) -> list:
    """Split the subcarrier axis into 20 MHz channels, 30 bins each."""
    return [
        resample_linear(window[:, :, a:b], 2, config.target_bins_per_channel)
        for a, b in channel_blocks(window.shape[2], bandwidth, config)
    ]


def flatten_and_normalize(
    window: np.ndarray,
    config: HarmonizeConfig,
    labels: dict | None = None,
    provenance: D.Provenance | None = None,
) -> D.CsiClip:
    """Antenna-major flatten to (600, 90) plus per-timestamp z-score.

    Population standard deviation; rows whose std falls below
    ``eps_std`` become all zeros.
    """
    t_len, n_ant, n_bins = window.shape
    if np.isnan(window).any():
        raise HarmonizeError("null sentinels must be cleaned before normalization")
    flat = window.reshape(t_len, n_ant * n_bins).astype(np.float64)
    mu = flat.mean(axis=1, keepdims=True)
    sd = flat.std(axis=1, keepdims=True)
    degenerate = sd <= config.eps_std
    z = np.where(degenerate, 0.0, (flat - mu) / np.where(degenerate, 1.0, sd))
    clip = D.CsiClip(
        data=z.astype(np.float32),
        labels=dict(labels or {}),
        provenance=provenance or D.Provenance("anon", 0, 0, 0, 0),
    )
    return clip.validate()


def harmonize_recording(
    recording: D.ChannelRecording,
    config: HarmonizeConfig | None = None,
    qc_config: Q.QcConfig | None = None,
) -> tuple:
    """Recording -> (clips, QcReport); QC runs per window before resampling."""
    config = (config or HarmonizeConfig()).validate()
    qcfg = (qc_config or Q.QcConfig()).validate()
    recording.validate()
    report = Q.QcReport(source_id=recording.source_id)
    clips = []
    links = extract_links(recording, config)
    slices = window_slices(recording.n_t, recording.sampling_rate, config)
    for link in links:
        for w_idx, (start, n) in enumerate(slices):
            native = link.data[start : start + n]
            cleaned, window_qc = Q.clean_window(native, qcfg)
            report.add_window(window_qc)
            if cleaned is None:
                continue
            resampled = resample_linear(cleaned, 0, config.target_time_len)
            for ch_idx, channel in enumerate(segment_and_resample_freq(resampled, recording.bandwidth, config)):
                prov = D.Provenance(
                    source_id=recording.source_id,
                    tx_index=link.tx_index,
                    recv_index=link.recv_index,
                    channel_index=ch_idx,
                    window_index=w_idx,
                )
                clips.append(flatten_and_normalize(channel, config, recording.labels, prov))
    return clips, report.finalize()
