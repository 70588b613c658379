"""Dense and COO sparse 2D pseudoimages.

A pseudoimage is an H x W grid of C-channel feature vectors produced by
scattering pillar features into bird's-eye-view cells. The dense form stores
every cell; the sparse form stores only occupied sites as a coordinate list
plus a matching value matrix.

Classes:
    DensePseudoimage      H x W x C float32 grid.
    SparsePseudoimage     COO site list (row, col) with per-site features.
    DensityReport         site/value occupancy fractions of a sparse image.

The sparse form deliberately keeps stored-zero sites: a site whose feature
vector becomes all-zero (for example after ReLU) stays in the active set.
Only ``from_dense`` decides membership by value; no other operation prunes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DensePseudoimage",
    "SparsePseudoimage",
    "DensityReport",
    "from_dense",
    "to_dense",
    "canonicalize",
    "density",
]


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.setflags(write=False)
    return out


def _check_grid(height: int, width: int, channels: int) -> None:
    if not (isinstance(height, int) and isinstance(width, int) and isinstance(channels, int)):
        raise ValueError("height, width, channels must be ints")
    if height < 1 or width < 1 or channels < 1:
        raise ValueError(f"grid dims must be positive, got {height}x{width}x{channels}")


@dataclass(frozen=True)
class DensePseudoimage:
    """Dense H x W x C float32 feature grid, row-major."""

    height: int
    width: int
    channels: int
    values: np.ndarray

    def __post_init__(self) -> None:
        _check_grid(self.height, self.width, self.channels)
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.shape != (self.height, self.width, self.channels):
            raise ValueError(
                f"values shape {vals.shape} != ({self.height}, {self.width}, {self.channels})"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("values must be finite")
        object.__setattr__(self, "values", _readonly(vals))


@dataclass(frozen=True)
class SparsePseudoimage:
    """COO sparse pseudoimage: distinct (row, col) sites and per-site features.

    Coordinates must be distinct and in bounds. Library operations always
    produce canonical (row-major sorted) coordinates; ``canonicalize`` sorts
    an instance built from unordered input.
    """

    height: int
    width: int
    channels: int
    coordinates: np.ndarray
    site_values: np.ndarray

    def __post_init__(self) -> None:
        _check_grid(self.height, self.width, self.channels)
        coords = np.asarray(self.coordinates, dtype=np.int64)
        vals = np.asarray(self.site_values, dtype=np.float32)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coordinates must be (n, 2), got {coords.shape}")
        n = coords.shape[0]
        if vals.shape != (n, self.channels):
            raise ValueError(f"site_values shape {vals.shape} != ({n}, {self.channels})")
        if n:
            if coords.min() < 0:
                raise ValueError("negative coordinate")
            if coords[:, 0].max() >= self.height or coords[:, 1].max() >= self.width:
                raise ValueError("coordinate out of bounds")
        if not np.all(np.isfinite(vals)):
            raise ValueError("site_values must be finite")
        enc = coords[:, 0] * self.width + coords[:, 1]
        if n and np.unique(enc).size != n:
            raise ValueError("duplicate coordinates")
        object.__setattr__(self, "coordinates", _readonly(coords))
        object.__setattr__(self, "site_values", _readonly(vals))
        object.__setattr__(self, "_canonical", bool(n < 2 or np.all(enc[:-1] < enc[1:])))

    @property
    def num_sites(self) -> int:
        return self.coordinates.shape[0]

    @property
    def is_canonical(self) -> bool:
        """True when coordinates are row-major sorted."""
        return self._canonical  # type: ignore[attr-defined]


@dataclass(frozen=True)
class DensityReport:
    """Occupancy fractions: sites stored vs. sites with a non-zero vector."""

    site_density: float
    value_density: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.value_density <= self.site_density <= 1.0):
            raise ValueError(
                f"need 0 <= value_density <= site_density <= 1, got "
                f"{self.value_density}, {self.site_density}"
            )


def from_dense(image: DensePseudoimage) -> SparsePseudoimage:
    """Extract sites whose feature vector is not identically zero.

    Round-trips bit-exactly through ``to_dense``. This is the only operation
    that decides site membership by value.
    """
    mask = np.any(image.values != 0.0, axis=2)
    coords = np.argwhere(mask)  # row-major order by construction
    return SparsePseudoimage(
        image.height, image.width, image.channels, coords, image.values[mask]
    )


def to_dense(image: SparsePseudoimage) -> DensePseudoimage:
    """Scatter sites onto a zero grid."""
    out = np.zeros((image.height, image.width, image.channels), dtype=np.float32)
    out[image.coordinates[:, 0], image.coordinates[:, 1]] = image.site_values
    return DensePseudoimage(image.height, image.width, image.channels, out)


def canonicalize(image: SparsePseudoimage) -> SparsePseudoimage:
    """Return the row-major-sorted form; identity when already canonical."""
    if image.is_canonical:
        return image
    enc = image.coordinates[:, 0] * image.width + image.coordinates[:, 1]
    order = np.argsort(enc, kind="stable")
    return SparsePseudoimage(
        image.height,
        image.width,
        image.channels,
        image.coordinates[order],
        image.site_values[order],
    )


def density(image: SparsePseudoimage) -> DensityReport:
    """Site and value occupancy of the grid.

    site_density counts stored sites; value_density counts stored sites whose
    feature vector has at least one non-zero component.
    """
    cells = image.height * image.width
    nonzero = int(np.count_nonzero(np.any(image.site_values != 0.0, axis=1)))
    return DensityReport(
        site_density=image.num_sites / cells,
        value_density=nonzero / cells,
    )
