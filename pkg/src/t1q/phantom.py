"""Synthetic thalamus phantom: known (PD, T1) truth, signed MPRAGE/FGATIR, sparse labels.

Regions are spheres painted in list order, so a later region overwrites an
earlier one where they overlap. Sparse labels are produced by eroding every
class (background included) with a ball of ``erosion_radius`` voxels: a voxel
keeps its label only when its whole neighbourhood carries the same truth label.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import rng as rng_mod
from .relaxometry import DEFAULT_BRACKET, AcqParams, FitStatus, QuantMaps, ir_signal
from .volume import NUCLEI, UNLABELED, SparseLabelVolume, Volume3D

# relative nucleus sizes (percent of thalamus), in NUCLEI order
NUCLEUS_FRACTIONS = (3.9, 3.1, 1.5, 5.5, 13.3, 1.3, 27.6, 8.1, 3.4, 16.2, 6.3, 1.8, 7.4)


@dataclass
class Region:
    center: tuple
    radius: float
    label: int
    pd: float
    t1: float

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)


@dataclass
class PhantomSpec:
    dims: tuple = (32, 32, 32)
    background: tuple = (0.7, 800.0)  # (PD, T1) of white-matter-like background
    regions: list = field(default_factory=list)
    noise_sigma: float = 0.0
    erosion_radius: int = 1
    jitter: float = 0.0  # per-subject random shift of region centres, voxels
    acq: AcqParams = AcqParams()

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.background = tuple(float(b) for b in self.background)
        self.regions = [r if isinstance(r, Region) else Region(**r) for r in self.regions]
        if isinstance(self.acq, dict):
            self.acq = AcqParams(**self.acq)
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.erosion_radius < 0:
            raise ValueError("erosion_radius must be >= 0")
        lo, hi = DEFAULT_BRACKET
        for r in self.regions:
            if not 1 <= r.label <= len(NUCLEI):
                raise ValueError(f"region label {r.label} outside [1, {len(NUCLEI)}]")
            if not lo <= r.t1 <= hi:
                raise ValueError(f"region T1 {r.t1} outside the fit bracket {DEFAULT_BRACKET}")
        if not lo <= self.background[1] <= hi:
            raise ValueError(f"background T1 {self.background[1]} outside the fit bracket")

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def default_spec(dims=(32, 32, 32), n_nuclei=13, fill=0.3, noise_sigma=0.0, erosion_radius=1,
                 jitter=0.0, seed=0):
    """Nuclei as spheres whose volumes follow the thalamic size fractions.

    The spheres jointly cover about ``fill`` of the box and are placed greedily,
    largest first, at the sampled centre with the least overlap. T1 values are
    spread over 900-1500 ms in a seeded order.
    """
    dims = tuple(int(d) for d in dims)
    frac = np.array(NUCLEUS_FRACTIONS[:n_nuclei])
    frac = frac / frac.sum()
    radii = np.cbrt(3 * fill * np.prod(dims) * frac / (4 * np.pi))
    gen = rng_mod.stream(seed, "phantom-layout")
    t1s = np.linspace(900.0, 1500.0, n_nuclei)[gen.permutation(n_nuclei)]
    pds = np.round(gen.uniform(0.75, 0.95, n_nuclei), 4)

    centers = {}
    for idx in np.argsort(-radii, kind="stable"):
        r = radii[idx]
        best, best_cost = None, np.inf
        for _ in range(200):
            c = np.array([gen.uniform(r, d - 1 - r) if d - 1 > 2 * r else (d - 1) / 2 for d in dims])
            cost = sum(max(0.0, r + radii[j] - np.linalg.norm(c - p)) for j, p in centers.items())
            if cost < best_cost:
                best, best_cost = c, cost
            if cost == 0:
                break
        centers[idx] = best

    regions = [
        Region(tuple(round(float(x), 3) for x in centers[i]), round(float(radii[i]), 3), i + 1,
               float(pds[i]), float(t1s[i]))
        for i in range(n_nuclei)
    ]
    return PhantomSpec(dims=dims, regions=regions, noise_sigma=noise_sigma,
                       erosion_radius=erosion_radius, jitter=jitter)


@dataclass(frozen=True, eq=False)
class Phantom:
    mprage: Volume3D
    fgatir: Volume3D
    truth: QuantMaps
    labels: SparseLabelVolume  # sparse (eroded)
    dense_labels: np.ndarray
    wm_mask: np.ndarray


def _ball(radius):
    r = int(radius)
    g = np.mgrid[-r:r + 1, -r:r + 1, -r:r + 1]
    return (g ** 2).sum(axis=0) <= r * r


def erode_labels(dense, radius):
    """Keep a label only where its ball neighbourhood is uniform; UNLABELED elsewhere."""
    out = np.full(dense.shape, UNLABELED, dtype=np.uint8)
    if radius == 0:
        out[...] = dense
        return out
    ball = _ball(radius)
    for lab in np.unique(dense):
        core = ndimage.binary_erosion(dense == lab, structure=ball, border_value=1)
        out[core] = lab
    return out


def paint(spec, seed):
    """Dense truth label map and (PD, T1) arrays for one subject."""
    gen = rng_mod.stream(seed, "phantom-jitter")
    grid = np.indices(spec.dims).astype(np.float64)
    labels = np.zeros(spec.dims, dtype=np.uint8)
    pd = np.full(spec.dims, spec.background[0])
    t1 = np.full(spec.dims, spec.background[1])
    for reg in spec.regions:
        shift = gen.uniform(-spec.jitter, spec.jitter, 3) if spec.jitter > 0 else np.zeros(3)
        c = np.asarray(reg.center, dtype=np.float64) + shift
        inside = ((grid - c[:, None, None, None]) ** 2).sum(axis=0) <= reg.radius ** 2
        labels[inside] = reg.label
        pd[inside] = reg.pd
        t1[inside] = reg.t1
    return labels, pd, t1


def make_phantom(spec, seed=0):
    dense, pd, t1 = paint(spec, seed)
    acq = spec.acq
    mprage = ir_signal(pd, t1, acq.ti1, acq.tr)
    fgatir = ir_signal(pd, t1, acq.ti2, acq.tr)
    if spec.noise_sigma > 0:
        mprage = mprage + rng_mod.stream(seed, "phantom-noise", 0).normal(0.0, spec.noise_sigma, spec.dims)
        fgatir = fgatir + rng_mod.stream(seed, "phantom-noise", 1).normal(0.0, spec.noise_sigma, spec.dims)
    truth = QuantMaps(Volume3D(pd), Volume3D(t1), np.full(spec.dims, FitStatus.OK, dtype=np.uint8))
    sparse = SparseLabelVolume(erode_labels(dense, spec.erosion_radius))
    return Phantom(Volume3D(mprage), Volume3D(fgatir), truth, sparse, dense, dense == 0)
