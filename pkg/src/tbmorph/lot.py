"""Forward and inverse transform between images and transport space.

A subject volume is represented, relative to a template density, by the
weighted displacement field (f - id) * sqrt(template), where f is the
transport map computed by the solver. The representation is linear: cohort
statistics run on these embeddings, and any point in the space maps back to
an image by pushing the template mass along the reconstructed map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import solver as sol
from .calculus import VectorField, identity_map, jacobian, _det_cof
from .errors import (
    BadMagic,
    EmptyCohort,
    GridMismatch,
    NonDiffeomorphicMap,
    TruncatedFile,
    UnsupportedEncoding,
)
from .volume import (
    DEFAULT_TARGET_MASS,
    MAGIC,
    DensityVolume,
    GridSpec,
    normalize_density,
    _read_f64,
)


@dataclass(frozen=True)
class Template:
    """Reference density against which subjects are analyzed."""

    density: DensityVolume
    provenance: tuple = ()


@dataclass(eq=False)
class LotEmbedding:
    """Transport-space coordinates of one subject: (f - id) * sqrt(template)."""

    grid: GridSpec
    payload: np.ndarray = field(repr=False)  # (ndim, *dims)

    def __post_init__(self):
        p = np.asarray(self.payload, dtype=np.float64)
        if p.shape != (self.grid.ndim,) + self.grid.dims:
            raise ValueError("payload shape does not match grid")
        self.payload = p

    def norm_squared(self) -> float:
        """Discrete squared L2 norm; equals the transport cost of the map."""
        return float(np.sum(self.payload ** 2)) * self.grid.voxel_volume

    def as_vector(self) -> np.ndarray:
        return self.payload.ravel()

    @classmethod
    def from_vector(cls, grid: GridSpec, vec: np.ndarray) -> "LotEmbedding":
        return cls(grid, np.asarray(vec, dtype=np.float64).reshape(
            (grid.ndim,) + grid.dims))

    def __add__(self, other: "LotEmbedding") -> "LotEmbedding":
        if other.grid != self.grid:
            raise GridMismatch("embeddings live on different grids")
        return LotEmbedding(self.grid, self.payload + other.payload)

    def __sub__(self, other: "LotEmbedding") -> "LotEmbedding":
        if other.grid != self.grid:
            raise GridMismatch("embeddings live on different grids")
        return LotEmbedding(self.grid, self.payload - other.payload)

    def __mul__(self, scalar: float) -> "LotEmbedding":
        return LotEmbedding(self.grid, self.payload * float(scalar))

    __rmul__ = __mul__


def build_template(subjects, target_mass: float = DEFAULT_TARGET_MASS,
                   provenance=()) -> Template:
    """Voxelwise mean of the subjects, renormalized to the target mass."""
    subjects = list(subjects)
    if not subjects:
        raise EmptyCohort("need at least one subject to build a template")
    grid = subjects[0].grid
    for s in subjects[1:]:
        if s.grid != grid:
            raise GridMismatch("template subjects live on different grids")
    mean = np.mean([s.values for s in subjects], axis=0)
    density = normalize_density(DensityVolume(grid, mean), target_mass, 0.0)
    return Template(density, tuple(provenance))


def embedding_from_map(template: Template, f: VectorField) -> LotEmbedding:
    """Weighted displacement representation of a transport map."""
    i0 = template.density
    if f.grid != i0.grid:
        raise GridMismatch("map grid does not match the template")
    disp = f.components - identity_map(f.grid).components
    return LotEmbedding(f.grid, disp * np.sqrt(i0.values))


def analyze(template: Template, subject: DensityVolume,
            cfg: sol.SolverConfig | None = None) -> LotEmbedding:
    """Forward transform: solve template -> subject and embed the map."""
    result = sol.solve(template.density, subject, cfg)
    return embedding_from_map(template, result.map)


def map_from_embedding(template: Template, embedding: LotEmbedding,
                       floor_level: float | None = None) -> VectorField:
    """Invert the embedding weighting back to a map: id + payload / sqrt(I0).

    By default this is the exact inverse of `embedding_from_map` wherever the
    template is positive (displacement is zeroed only on zero-density voxels,
    where the weight itself vanishes). Passing `floor_level` additionally
    zeroes the displacement on voxels at or below that density; this
    suppresses motion in floored background regions, at the price of a
    reconstruction discontinuity at the mask edge.
    """
    i0 = template.density
    if embedding.grid != i0.grid:
        raise GridMismatch("embedding grid does not match the template")
    with np.errstate(divide="ignore", invalid="ignore"):
        disp = embedding.payload / np.sqrt(i0.values)
    cutoff = 0.0 if floor_level is None else max(0.0, float(floor_level))
    disp = np.where(i0.values <= cutoff, 0.0, disp)
    return VectorField(i0.grid, identity_map(i0.grid).components + disp)


def _splat_mass(f: VectorField, density: DensityVolume) -> np.ndarray:
    """Conservative pushforward: deposit each voxel's mass at its mapped
    position with multilinear weights. Positions outside the domain deposit
    on the boundary, so total mass is conserved exactly."""
    grid = f.grid
    n = grid.ndim
    acc = np.zeros(grid.voxel_count)
    strides = np.empty(n, dtype=np.intp)
    strides[-1] = 1
    for a in range(n - 2, -1, -1):
        strides[a] = strides[a + 1] * grid.dims[a + 1]
    base, frac = [], []
    for a in range(n):
        u = np.clip(f.components[a] / grid.spacing[a] - 0.5,
                    0.0, grid.dims[a] - 1.0).ravel()
        b = np.minimum(np.floor(u).astype(np.intp), grid.dims[a] - 2)
        base.append(b)
        frac.append(u - b)
    mass = (density.values * grid.voxel_volume).ravel()
    for combo in product((0, 1), repeat=n):
        w = mass
        lin = np.zeros(mass.size, dtype=np.intp)
        for a, c in enumerate(combo):
            w = w * (frac[a] if c else 1.0 - frac[a])
            lin = lin + (base[a] + c) * strides[a]
        acc += np.bincount(lin, weights=w, minlength=grid.voxel_count)
    return acc.reshape(grid.dims) / grid.voxel_volume


def synthesize(template: Template, embedding: LotEmbedding,
               floor_level: float | None = None) -> DensityVolume:
    """Inverse transform: generate the image a point in transport space
    represents, by pushing the template density along the reconstructed map.

    Raises NonDiffeomorphicMap when the reconstructed map folds (non-positive
    Jacobian determinant), which signals a point too far from the data
    manifold to invert. Output is renormalized to the template's mass.
    """
    f = map_from_embedding(template, embedding, floor_level)
    det, _ = _det_cof(jacobian(f).entries)
    if det.min() <= 0:
        raise NonDiffeomorphicMap(
            f"reconstructed map folds: min det = {det.min():.3e}")
    out = _splat_mass(f, template.density)
    total = out.sum() * template.density.grid.voxel_volume
    out *= template.density.mass / total
    return DensityVolume(template.density.grid, out)


def sample_direction(template: Template, mean_embedding: LotEmbedding,
                     direction: LotEmbedding, nus) -> list:
    """Images along a line in transport space: synthesize(mean + nu * dir)."""
    out = []
    for nu in nus:
        out.append(synthesize(template, mean_embedding + float(nu) * direction))
    return out


def write_embedding(e: LotEmbedding, path) -> None:
    """Vector-payload variant of the native container: the axis-count field
    is negated to flag one payload block per component."""
    header = [-float(e.grid.ndim)]
    header += [float(d) for d in e.grid.dims]
    header += list(e.grid.spacing)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.asarray(header, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(e.payload, dtype="<f8").tobytes())


def read_embedding(path) -> LotEmbedding:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise BadMagic(f"expected {MAGIC!r}, found {magic!r}")
        ndim_f = float(_read_f64(fh, 1, "axis count")[0])
        if ndim_f >= 0:
            raise UnsupportedEncoding(
                "scalar container; use the volume reader")
        ndim = int(-ndim_f)
        if ndim not in (2, 3):
            raise UnsupportedEncoding(f"axis count must be 2 or 3, got {ndim}")
        dims_f = _read_f64(fh, ndim, "dims")
        if np.any(dims_f != np.floor(dims_f)) or np.any(dims_f < 4):
            raise UnsupportedEncoding(f"bad dims {dims_f.tolist()}")
        dims = tuple(int(d) for d in dims_f)
        spacing = tuple(float(s) for s in _read_f64(fh, ndim, "spacing"))
        grid = GridSpec(dims, spacing)
        count = ndim * grid.voxel_count
        payload = _read_f64(fh, count, "payload").reshape((ndim,) + dims)
        if fh.read(1):
            raise UnsupportedEncoding("trailing bytes after payload")
    return LotEmbedding(grid, payload)
