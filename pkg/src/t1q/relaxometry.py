"""Inversion-recovery signal model, (PD, T1) fitting and multi-TI synthesis.

Signal model for a voxel with proton density ``pd`` and longitudinal
relaxation ``t1`` (all times in ms)::

    I = pd * (1 - 2 exp(-ti / t1) + exp(-tr / t1))

Two acquisitions that differ only in TI (MPRAGE at ``ti1``, FGATIR at
``ti2``) determine both parameters: T1 is the root of the cross-multiplied
residual ``h(T1) = i2 f(ti1, T1) - i1 f(ti2, T1)`` and PD follows by
division. The root search scans the T1 bracket on a 1 ms grid, then bisects
the single sign change; zero or several sign changes are reported through the
per-voxel status instead of raising.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from . import kernels
from .volume import Volume3D

DEFAULT_BRACKET = (50.0, 10000.0)
GRID_STEP = 1.0


class FitStatus(IntEnum):
    OK = 0
    OUT_OF_BRACKET = 1
    DEGENERATE = 2
    AMBIGUOUS = 3


@dataclass(frozen=True)
class AcqParams:
    ti1: float = 1400.0  # MPRAGE
    ti2: float = 400.0  # FGATIR
    tr: float = 4000.0

    def __post_init__(self):
        if not 0 < self.ti2 < self.ti1 < self.tr:
            raise ValueError(f"need 0 < ti2 < ti1 < tr, got ti1={self.ti1}, ti2={self.ti2}, tr={self.tr}")


def ir_factor(ti, t1, tr):
    t1 = np.asarray(t1, dtype=np.float64)
    if np.any(t1 <= 0):
        raise ValueError("t1 must be positive")
    return 1.0 - 2.0 * np.exp(-ti / t1) + np.exp(-tr / t1)


def ir_signal(pd, t1, ti, tr):
    """Signed inversion-recovery intensity; works on scalars or arrays."""
    if np.any(np.asarray(ti) <= 0) or np.any(np.asarray(ti) >= tr):
        raise ValueError(f"ti must lie in (0, tr={tr})")
    out = np.asarray(pd, dtype=np.float64) * ir_factor(ti, t1, tr)
    return float(out) if out.ndim == 0 else out


def null_ti(t1, tr):
    """Inversion time at which tissue with ``t1`` gives zero signal."""
    if t1 <= 0 or tr <= 0:
        raise ValueError("t1 and tr must be positive")

    def f(ti):
        return 1.0 - 2.0 * math.exp(-ti / t1) + math.exp(-tr / t1)

    lo, hi = 0.0, float(tr)
    if f(lo) * f(hi) > 0:
        raise ValueError(f"no sign change of the signal in (0, {tr})")
    root = brentq(f, lo, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=500)
    if abs(f(root)) >= 1e-9:
        raise ArithmeticError(f"null-point residual {f(root):.3g} above tolerance")
    return root


@lru_cache(maxsize=32)
def _scan_grid(t1_min, t1_max, ti1, ti2, tr):
    if not 0 < t1_min < t1_max:
        raise ValueError(f"invalid T1 bracket [{t1_min}, {t1_max}]")
    n = int(math.floor((t1_max - t1_min) / GRID_STEP + 1e-9)) + 1
    grid = t1_min + GRID_STEP * np.arange(n)
    if grid[-1] < t1_max:
        grid = np.append(grid, t1_max)
    f1 = 1.0 - 2.0 * np.exp(-ti1 / grid) + np.exp(-tr / grid)
    f2 = 1.0 - 2.0 * np.exp(-ti2 / grid) + np.exp(-tr / grid)
    for a in (grid, f1, f2):
        a.setflags(write=False)
    return grid, f1, f2


def _fit_arrays(i1, i2, acq, bracket, fit=None):
    grid, f1, f2 = _scan_grid(float(bracket[0]), float(bracket[1]), acq.ti1, acq.ti2, acq.tr)
    fit = fit or kernels.fit_batch
    return fit(np.ascontiguousarray(i1, dtype=np.float64), np.ascontiguousarray(i2, dtype=np.float64),
               grid, f1, f2, acq.ti1, acq.ti2, acq.tr)


def _residual(pd, t1, i1, i2, acq):
    ok = t1 > 0
    safe = np.where(ok, t1, 1.0)
    h = i2 * ir_factor(acq.ti1, safe, acq.tr) - i1 * ir_factor(acq.ti2, safe, acq.tr)
    return np.where(ok, np.abs(h), np.inf)


def _fit_magnitude(i1, i2, acq, bracket, fit=None):
    """Restore the FGATIR polarity lost in magnitude images.

    Both signs of ``i2`` are fitted. Exactly one in-bracket solution is kept;
    zero or two solutions leave the voxel AMBIGUOUS.
    """
    i1 = np.abs(i1)
    pos = _fit_arrays(i1, np.abs(i2), acq, bracket, fit)
    neg = _fit_arrays(i1, -np.abs(i2), acq, bracket, fit)
    ok_pos = pos[2] == FitStatus.OK
    ok_neg = neg[2] == FitStatus.OK
    pd = np.where(ok_pos & ~ok_neg, pos[0], np.where(ok_neg & ~ok_pos, neg[0], 0.0))
    t1 = np.where(ok_pos & ~ok_neg, pos[1], np.where(ok_neg & ~ok_pos, neg[1], 0.0))
    status = np.where(ok_pos ^ ok_neg, FitStatus.OK, FitStatus.AMBIGUOUS).astype(np.int8)
    degenerate = (pos[2] == FitStatus.DEGENERATE) & (neg[2] == FitStatus.DEGENERATE)
    status[degenerate] = FitStatus.DEGENERATE
    return pd, t1, status


def fit_pd_t1(i1, i2, acq=AcqParams(), bracket=DEFAULT_BRACKET, magnitude=False):
    """Fit one voxel; returns ``(pd, t1, FitStatus)``. Never raises on bad data."""
    a, b = np.array([float(i1)]), np.array([float(i2)])
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        return 0.0, 0.0, FitStatus.DEGENERATE
    pd, t1, st = (_fit_magnitude if magnitude else _fit_arrays)(a, b, acq, bracket)
    return float(pd[0]), float(t1[0]), FitStatus(int(st[0]))


@dataclass(frozen=True, eq=False)
class QuantMaps:
    pd: Volume3D
    t1: Volume3D
    status: np.ndarray

    def __post_init__(self):
        st = np.array(self.status, dtype=np.uint8)
        if not (self.pd.dims == self.t1.dims == st.shape):
            raise ValueError(f"map dims disagree: pd {self.pd.dims}, t1 {self.t1.dims}, status {st.shape}")
        st.setflags(write=False)
        object.__setattr__(self, "status", st)

    @property
    def dims(self):
        return self.pd.dims

    @property
    def ok(self):
        return self.status == FitStatus.OK


def fit_maps(mprage, fgatir, acq=AcqParams(), bracket=DEFAULT_BRACKET, mask=None,
             magnitude=False, threads=1, fit=None):
    """Voxel-wise (PD, T1) maps; voxels outside ``mask`` are DEGENERATE.

    ``threads > 1`` splits the voxels into contiguous chunks; the output is
    identical to the serial result because every voxel is fitted independently.
    """
    if mprage.dims != fgatir.dims:
        raise ValueError(f"dim mismatch: mprage {mprage.dims} vs fgatir {fgatir.dims}")
    dims = mprage.dims
    i1 = np.asarray(mprage.data, dtype=np.float64).ravel(order="F")
    i2 = np.asarray(fgatir.data, dtype=np.float64).ravel(order="F")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != dims:
            raise ValueError(f"mask dims {mask.shape} differ from image dims {dims}")
        sel = np.flatnonzero(mask.ravel(order="F"))
    else:
        sel = np.arange(i1.size)

    def run(idx):
        if magnitude:
            return _fit_magnitude(i1[idx], i2[idx], acq, bracket, fit)
        return _fit_arrays(i1[idx], i2[idx], acq, bracket, fit)

    threads = max(1, int(threads))
    if threads == 1 or sel.size < 2 * threads:
        parts = [run(sel)]
    else:
        chunks = np.array_split(sel, threads * 4)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))

    pd = np.zeros(i1.size)
    t1 = np.zeros(i1.size)
    status = np.full(i1.size, FitStatus.DEGENERATE, dtype=np.uint8)
    pd[sel] = np.concatenate([p[0] for p in parts])
    t1[sel] = np.concatenate([p[1] for p in parts])
    status[sel] = np.concatenate([p[2] for p in parts])
    shape = lambda a: a.reshape(dims, order="F")  # noqa: E731
    return QuantMaps(mprage.with_data(shape(pd)), mprage.with_data(shape(t1)), shape(status))


def synthesize_ti(maps, ti, tr=4000.0):
    """Weighted image at inversion time ``ti``; non-OK voxels are 0."""
    if not 0 < ti < tr:
        raise ValueError(f"ti={ti} must lie in (0, tr={tr})")
    ok = maps.ok
    t1 = np.where(ok, maps.t1.data, 1.0)
    img = np.where(ok, maps.pd.data * ir_factor(ti, t1, tr), 0.0)
    return maps.pd.with_data(img)


# channel kinds
ACQUIRED = "ACQUIRED"
SYNTHESIZED = "SYNTHESIZED"
MAP = "MAP"


@dataclass(frozen=True)
class ChannelMeta:
    kind: str
    name: str
    ti: float = None


@dataclass(frozen=True, eq=False)
class ChannelStack:
    channels: tuple
    meta: tuple

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "meta", tuple(self.meta))
        if len(self.channels) != len(self.meta):
            raise ValueError(f"{len(self.channels)} channels but {len(self.meta)} metadata entries")
        if not self.channels:
            raise ValueError("empty channel stack")
        dims = {c.dims for c in self.channels}
        if len(dims) != 1:
            raise ValueError(f"channels disagree in dims: {sorted(dims)}")

    def __len__(self):
        return len(self.channels)

    @property
    def dims(self):
        return self.channels[0].dims

    @property
    def names(self):
        return [m.name for m in self.meta]

    def array(self):
        """Channels as one ``(C, H, W, L)`` float64 array."""
        return np.stack([np.asarray(c.data, dtype=np.float64) for c in self.channels])


def ti_name(ti):
    return f"TI{ti:g}"


def synthesize_series(maps, ti_start=400.0, ti_end=1400.0, step=20.0, tr=4000.0):
    if step <= 0 or ti_start > ti_end:
        raise ValueError(f"degenerate TI range start={ti_start}, end={ti_end}, step={step}")
    n = int(math.floor((ti_end - ti_start) / step + 1e-9)) + 1
    tis = [ti_start + k * step for k in range(n)]
    channels = [synthesize_ti(maps, ti, tr) for ti in tis]
    return ChannelStack(channels, [ChannelMeta(SYNTHESIZED, ti_name(ti), ti) for ti in tis])


@dataclass(frozen=True)
class InputConfig:
    """Which channels go into a network input, in stacking order.

    Synthesized TIs come first (in the listed order), then quantitative maps,
    then acquired images.
    """

    name: str
    tis: tuple = ()
    maps: tuple = ()  # subset of ("PD", "T1")
    acquired: tuple = ()  # subset of ("MPRAGE", "FGATIR")

    @property
    def n_channels(self):
        return len(self.tis) + len(self.maps) + len(self.acquired)


SERIES_TIS = tuple(400.0 + 20.0 * k for k in range(51))

PRESETS = {
    "stage1": InputConfig("stage1", tis=SERIES_TIS, acquired=("MPRAGE", "FGATIR")),
    "config1": InputConfig("config1", acquired=("MPRAGE",)),
    "config2": InputConfig("config2", acquired=("FGATIR",)),
    "config3": InputConfig("config3", acquired=("MPRAGE", "FGATIR")),
    "config4": InputConfig("config4", maps=("PD", "T1")),
    "config5": InputConfig("config5", maps=("T1",)),
    "config6": InputConfig("config6", tis=SERIES_TIS),
    "config7": InputConfig("config7", tis=(740.0,)),
    "config8": InputConfig("config8", tis=(740.0, 760.0)),
    "config9": InputConfig("config9", tis=(720.0, 740.0, 760.0, 780.0)),
}
PRESET_ALIASES = {
    "mprage": "config1", "fgatir": "config2", "mprage+fgatir": "config3", "pd+t1": "config4",
    "t1map": "config5", "ti51": "config6", "ti-top1": "config7", "ti-top2": "config8", "ti-top4": "config9",
}

# T1 map channel is fed in seconds so it sits on the same order of magnitude as the images
T1_CHANNEL_SCALE = 1e-3


def preset(name):
    key = PRESET_ALIASES.get(name.lower(), name.lower())
    if key not in PRESETS:
        raise KeyError(f"unknown input configuration {name!r}; choose from {sorted(PRESETS) + sorted(PRESET_ALIASES)}")
    return PRESETS[key]


def build_input_stack(maps, mprage, fgatir, config, tr=4000.0):
    """Assemble the network input channels named by ``config``."""
    if isinstance(config, str):
        config = preset(config)
    channels, meta = [], []
    for ti in config.tis:
        if maps is None:
            raise ValueError(f"TI {ti} requested but no quantitative maps were given")
        channels.append(synthesize_ti(maps, ti, tr))
        meta.append(ChannelMeta(SYNTHESIZED, ti_name(ti), float(ti)))
    for m in config.maps:
        if maps is None:
            raise ValueError(f"{m} map requested but no quantitative maps were given")
        if m == "PD":
            channels.append(maps.pd.with_data(np.where(maps.ok, maps.pd.data, 0.0)))
        elif m == "T1":
            channels.append(maps.t1.with_data(np.where(maps.ok, maps.t1.data, 0.0) * T1_CHANNEL_SCALE))
        else:
            raise ValueError(f"unknown map channel {m!r}")
        meta.append(ChannelMeta(MAP, m))
    sources = {"MPRAGE": (mprage, 1400.0), "FGATIR": (fgatir, 400.0)}
    for a in config.acquired:
        if a not in sources:
            raise ValueError(f"unknown acquired channel {a!r}")
        vol, ti = sources[a]
        if vol is None:
            raise ValueError(f"{a} requested but not provided")
        channels.append(vol)
        meta.append(ChannelMeta(ACQUIRED, a, ti))
    return ChannelStack(channels, meta)


def wm_mean_normalize(vol, wm_mask, reference=None):
    """Divide by the white-matter mean.

    With ``reference`` the mean is taken from that volume instead, which gives a
    common scale factor for an MPRAGE/FGATIR pair.
    """
    mask = np.asarray(wm_mask, dtype=bool)
    if mask.shape != vol.dims:
        raise ValueError(f"mask dims {mask.shape} differ from volume dims {vol.dims}")
    if not mask.any():
        raise ValueError("white-matter mask is empty")
    src = reference if reference is not None else vol
    mean = float(np.mean(np.asarray(src.data, dtype=np.float64)[mask]))
    if mean == 0 or not np.isfinite(mean):
        raise ValueError(f"white-matter mean is {mean}; cannot normalize")
    return vol.with_data(np.asarray(vol.data, dtype=np.float64) / mean)
