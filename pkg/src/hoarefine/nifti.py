"""Minimal NIfTI-1 volume I/O and geometry helpers.

Implements the subset of the NIfTI-1 format needed for label maps and
scalar images: the fixed 348-byte header, single-file ``.nii`` /
``.nii.gz`` storage, and the standard affine precedence rules.

Header fields consumed (byte offsets into the 348-byte header)::

    offset  size  field        use
    ------  ----  -----------  --------------------------------------
       0     4    sizeof_hdr   must equal 348; decides byte order
      40    16    dim[8]       number of dims + extents
      70     2    datatype     element type code
      72     2    bitpix       bits per voxel (cross-checked)
      76    32    pixdim[8]    qfac + voxel spacings
     108     4    vox_offset   start of the data block
     112     4    scl_slope    value scaling (slope)
     116     4    scl_inter    value scaling (intercept)
     252     2    qform_code   quaternion transform validity
     254     2    sform_code   affine transform validity
     256    12    quatern_b/c/d
     268    12    qoffset_x/y/z
     280    48    srow_x/y/z   affine rows when sform_code > 0
     328    16    intent_name  free text; carries the taxonomy tag
     344     4    magic        "n+1\\0" single-file form

Supported element types: uint8 (2), int16 (4), int32 (8), float32 (16),
uint16 (512).  Anything else raises :class:`NiftiFormatError`.

The affine maps voxel indices (i, j, k) to world millimetres, chosen by
precedence sform > qform > pixdim-only.  World coordinates follow the
RAS convention: +x toward the subject's left-to-right, +y toward
anterior, +z toward superior.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HDR_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

# NIfTI datatype code -> numpy dtype (byte order applied separately)
DTYPE_FOR_CODE = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    512: np.dtype(np.uint16),
}
CODE_FOR_DTYPE = {dt: code for code, dt in DTYPE_FOR_CODE.items()}

# intent_name values used to tag label taxonomies on disk
TAXONOMY_TAGS = {"fine26": b"hoa-fine26", "fused12": b"hoa-fused12"}
TAXONOMY_FOR_TAG = {v: k for k, v in TAXONOMY_TAGS.items()}


class NiftiError(Exception):
    """Base class for NIfTI I/O failures."""


class NiftiFormatError(NiftiError):
    """The byte stream is not a NIfTI-1 file this reader supports."""


class OrientationError(NiftiError):
    """The affine cannot be reduced to a per-axis permutation/flip."""


def _is_gzipped(path: Path) -> bool:
    with open(path, "rb") as f:
        return f.read(2) == b"\x1f\x8b"


def _read_bytes(path: Path) -> bytes:
    if _is_gzipped(path):
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _quaternion_to_rotation(b: float, c: float, d: float) -> np.ndarray:
    # a is recovered from the unit-quaternion constraint; tiny negative
    # residue from float rounding is clamped to zero.
    a_sq = 1.0 - (b * b + c * c + d * d)
    a = float(np.sqrt(max(a_sq, 0.0)))
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )


@dataclass(frozen=True)
class Volume:
    """A 3D image with its voxel-to-world affine.

    ``data`` is locked read-only so refinement passes cannot mutate a
    shared input in place; operations return new volumes.  ``taxonomy``
    is None for non-label images, otherwise "fine26" or "fused12".
    """

    data: np.ndarray
    affine: np.ndarray
    taxonomy: str | None = None
    scl_slope: float = 1.0
    scl_inter: float = 0.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"Volume data must be 3D, got shape {data.shape}")
        affine = np.asarray(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {affine.shape}")
        if abs(np.linalg.det(affine[:3, :3])) <= 1e-12:
            raise ValueError("affine linear part is singular")
        data = data.copy()
        data.setflags(write=False)
        affine = affine.copy()
        affine.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)
        if self.taxonomy not in (None, "fine26", "fused12"):
            raise ValueError(f"unknown taxonomy {self.taxonomy!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def spacing(self) -> tuple[float, float, float]:
        """Voxel edge lengths in mm (column norms of the linear part)."""
        lin = self.affine[:3, :3]
        return tuple(float(np.linalg.norm(lin[:, i])) for i in range(3))

    @property
    def is_label(self) -> bool:
        return np.issubdtype(self.data.dtype, np.integer)

    def voxel_to_world(self, ijk) -> np.ndarray:
        """Map voxel indices to world mm.  Accepts shape (3,) or (N, 3)."""
        ijk = np.asarray(ijk, dtype=np.float64)
        single = ijk.ndim == 1
        pts = np.atleast_2d(ijk)
        out = pts @ self.affine[:3, :3].T + self.affine[:3, 3]
        return out[0] if single else out

    def world_to_voxel(self, xyz) -> np.ndarray:
        """Map world mm to (fractional) voxel indices."""
        xyz = np.asarray(xyz, dtype=np.float64)
        single = xyz.ndim == 1
        pts = np.atleast_2d(xyz)
        inv = np.linalg.inv(self.affine)
        out = pts @ inv[:3, :3].T + inv[:3, 3]
        return out[0] if single else out

    def with_data(self, data: np.ndarray, taxonomy: str | None = "keep") -> "Volume":
        tax = self.taxonomy if taxonomy == "keep" else taxonomy
        return Volume(data, self.affine, taxonomy=tax,
                      scl_slope=self.scl_slope, scl_inter=self.scl_inter)


def voxel_to_world(vol: Volume, ijk) -> np.ndarray:
    return vol.voxel_to_world(ijk)


def world_to_voxel(vol: Volume, xyz) -> np.ndarray:
    return vol.world_to_voxel(xyz)


def read_volume(path: str | Path) -> Volume:
    """Read a ``.nii`` or ``.nii.gz`` file into a :class:`Volume`.

    Raises NiftiFormatError for truncated files, bad magic, unsupported
    datatypes, or volumes that are not 3D after squeezing trailing
    singleton dimensions.
    """
    path = Path(path)
    try:
        raw = _read_bytes(path)
    except OSError as exc:
        raise NiftiError(f"cannot read {path}: {exc}") from exc
    if len(raw) < HDR_SIZE:
        raise NiftiFormatError(f"{path}: file shorter than a NIfTI-1 header")

    sizeof_hdr_le = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr_le == HDR_SIZE:
        bo = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HDR_SIZE:
        bo = ">"
    else:
        raise NiftiFormatError(f"{path}: sizeof_hdr is not 348 in either byte order")

    magic = raw[344:348]
    if magic == MAGIC_PAIR:
        raise NiftiFormatError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")
    if magic != MAGIC_SINGLE:
        raise NiftiFormatError(f"{path}: bad magic {magic!r}")

    dim = struct.unpack_from(bo + "8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiFormatError(f"{path}: dim[0]={ndim} out of range")
    shape = [max(1, dim[i + 1]) for i in range(ndim)]
    # squeeze trailing singleton dims (4D with one timepoint etc.)
    while len(shape) > 3 and shape[-1] == 1:
        shape.pop()
    if len(shape) != 3:
        raise NiftiFormatError(f"{path}: expected a 3D volume, got shape {tuple(shape)}")

    datatype = struct.unpack_from(bo + "h", raw, 70)[0]
    bitpix = struct.unpack_from(bo + "h", raw, 72)[0]
    if datatype not in DTYPE_FOR_CODE:
        raise NiftiFormatError(f"{path}: unsupported datatype code {datatype}")
    dtype = DTYPE_FOR_CODE[datatype].newbyteorder(bo)
    if bitpix != dtype.itemsize * 8:
        raise NiftiFormatError(
            f"{path}: bitpix {bitpix} does not match datatype {datatype}")

    pixdim = struct.unpack_from(bo + "8f", raw, 76)
    vox_offset = struct.unpack_from(bo + "f", raw, 108)[0]
    scl_slope = struct.unpack_from(bo + "f", raw, 112)[0]
    scl_inter = struct.unpack_from(bo + "f", raw, 116)[0]
    qform_code = struct.unpack_from(bo + "h", raw, 252)[0]
    sform_code = struct.unpack_from(bo + "h", raw, 254)[0]

    n_vox = int(np.prod(shape))
    offset = int(vox_offset) if vox_offset >= HDR_SIZE else HDR_SIZE
    need = offset + n_vox * dtype.itemsize
    if len(raw) < need:
        raise NiftiFormatError(
            f"{path}: data block truncated ({len(raw)} bytes, need {need})")
    data = np.frombuffer(raw, dtype=dtype, count=n_vox, offset=offset)
    data = data.reshape(shape, order="F")

    if sform_code > 0:
        rows = struct.unpack_from(bo + "12f", raw, 280)
        affine = np.eye(4)
        affine[0, :] = rows[0:4]
        affine[1, :] = rows[4:8]
        affine[2, :] = rows[8:12]
    elif qform_code > 0:
        b, c, d = struct.unpack_from(bo + "3f", raw, 256)
        qx, qy, qz = struct.unpack_from(bo + "3f", raw, 268)
        rot = _quaternion_to_rotation(b, c, d)
        qfac = -1.0 if pixdim[0] == -1.0 else 1.0
        sp = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
        affine = np.eye(4)
        affine[:3, :3] = rot * sp
        affine[:3, 3] = (qx, qy, qz)
    else:
        affine = np.diag([pixdim[1] or 1.0, pixdim[2] or 1.0, pixdim[3] or 1.0, 1.0])

    intent_name = raw[328:344].rstrip(b"\x00")
    taxonomy = TAXONOMY_FOR_TAG.get(intent_name)

    slope = float(scl_slope) if scl_slope != 0.0 and np.isfinite(scl_slope) else 1.0
    inter = float(scl_inter) if np.isfinite(scl_inter) else 0.0
    # integer label maps keep raw values; scaling applies to float images
    if (slope, inter) != (1.0, 0.0) and np.issubdtype(dtype, np.floating):
        data = (data.astype(np.float32) * slope + inter)
        slope, inter = 1.0, 0.0

    # native byte order in memory regardless of file order
    data = np.ascontiguousarray(data.astype(dtype.newbyteorder("="), copy=False))
    return Volume(data, affine, taxonomy=taxonomy, scl_slope=slope, scl_inter=inter)


def write_volume(vol: Volume, path: str | Path) -> None:
    """Write a volume as single-file NIfTI-1, gzipped when the name ends .gz.

    Volumes whose dtype is one of the supported on-disk types are stored
    verbatim.  Other integer data falls back to int16, or uint8 when all
    labels fit below 256; other float data falls back to float32.
    """
    path = Path(path)
    data = np.asarray(vol.data)
    if data.dtype in CODE_FOR_DTYPE:
        out_dtype = data.dtype
    elif np.issubdtype(data.dtype, np.integer):
        mx = int(data.max()) if data.size else 0
        mn = int(data.min()) if data.size else 0
        if 0 <= mn and mx < 256:
            out_dtype = np.dtype(np.uint8)
        else:
            out_dtype = np.dtype(np.int16)
            if mx > np.iinfo(np.int16).max or mn < np.iinfo(np.int16).min:
                raise NiftiError(f"label values [{mn}, {mx}] overflow int16 storage")
    else:
        out_dtype = np.dtype(np.float32)
    payload = data.astype(out_dtype, copy=False)

    hdr = bytearray(HDR_SIZE)
    struct.pack_into("<i", hdr, 0, HDR_SIZE)
    struct.pack_into("<B", hdr, 38, ord("r"))  # legacy "regular" flag
    dims = payload.shape
    struct.pack_into("<8h", hdr, 40, 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, CODE_FOR_DTYPE[np.dtype(out_dtype)])
    struct.pack_into("<h", hdr, 72, out_dtype.itemsize * 8)
    sp = vol.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, sp[0], sp[1], sp[2], 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(HDR_SIZE + 4))  # 4-byte extender pad
    struct.pack_into("<f", hdr, 112, float(vol.scl_slope))
    struct.pack_into("<f", hdr, 116, float(vol.scl_inter))
    struct.pack_into("<h", hdr, 252, 0)  # qform_code: sform is authoritative
    struct.pack_into("<h", hdr, 254, 2)  # sform_code: aligned to some template
    aff = vol.affine
    struct.pack_into("<12f", hdr, 280,
                     aff[0, 0], aff[0, 1], aff[0, 2], aff[0, 3],
                     aff[1, 0], aff[1, 1], aff[1, 2], aff[1, 3],
                     aff[2, 0], aff[2, 1], aff[2, 2], aff[2, 3])
    if vol.taxonomy is not None:
        tag = TAXONOMY_TAGS[vol.taxonomy]
        hdr[328:328 + len(tag)] = tag
    hdr[344:348] = MAGIC_SINGLE

    blob = bytes(hdr) + b"\x00\x00\x00\x00" + payload.tobytes(order="F")

    if path.suffix == ".gz":
        # mtime pinned and name field blanked so identical volumes
        # produce identical bytes regardless of output path or run time
        with open(path, "wb") as f:
            with gzip.GzipFile(fileobj=f, mode="wb", mtime=0, filename="") as gz:
                gz.write(blob)
    else:
        path.write_bytes(blob)


# ---------------------------------------------------------------------------
# canonical RAS frame

@dataclass(frozen=True)
class AxisMap:
    """Axis permutation + flips taking stored voxel axes to canonical RAS.

    ``perm[c]`` is the stored-data axis that plays canonical role c
    (0 = x/left-right, 1 = y/posterior-anterior, 2 = z/inferior-superior)
    and ``flips[c]`` says that axis runs opposite to the canonical
    direction and must be reversed.
    """

    perm: tuple[int, int, int]
    flips: tuple[bool, bool, bool]

    def apply(self, data: np.ndarray) -> np.ndarray:
        out = np.transpose(data, self.perm)
        sl = tuple(slice(None, None, -1) if f else slice(None) for f in self.flips)
        return out[sl]

    def invert(self, data: np.ndarray) -> np.ndarray:
        sl = tuple(slice(None, None, -1) if f else slice(None) for f in self.flips)
        out = data[sl]
        inv = [0, 0, 0]
        for canon, stored in enumerate(self.perm):
            inv[stored] = canon
        return np.transpose(out, inv)

    @property
    def is_identity(self) -> bool:
        return self.perm == (0, 1, 2) and self.flips == (False, False, False)


def orientation_map(affine: np.ndarray) -> AxisMap:
    """Extract the nearest-axis orientation of an affine.

    Each data axis is assigned the world axis where its affine column
    has the largest magnitude.  Raises OrientationError when two data
    axes claim the same world axis (oblique beyond recognition) or a
    column is all zero.
    """
    lin = np.asarray(affine, dtype=np.float64)[:3, :3]
    claimed: dict[int, int] = {}
    signs = {}
    for axis in range(3):
        col = lin[:, axis]
        if not np.any(col):
            raise OrientationError(f"affine column {axis} is zero")
        world = int(np.argmax(np.abs(col)))
        if world in claimed:
            raise OrientationError(
                f"data axes {claimed[world]} and {axis} both dominate world axis {world}")
        claimed[world] = axis
        signs[world] = col[world] > 0
    perm = tuple(claimed[w] for w in range(3))
    flips = tuple(not signs[w] for w in range(3))
    return AxisMap(perm, flips)


def reorient_to_canonical(vol: Volume) -> tuple[Volume, AxisMap]:
    """Permute/flip a volume so axis 0=+x(R), 1=+y(A), 2=+z(S).

    Returns the reoriented volume together with the map used, which
    callers apply inversely to restore the original layout.  The affine
    is rebuilt so world coordinates of each voxel are unchanged.
    """
    amap = orientation_map(vol.affine)
    if amap.is_identity:
        return vol, amap
    data = amap.apply(vol.data)

    # Column c of the new linear part is the old column perm[c], negated
    # when flipped; the flip also shifts the origin to the far end.
    lin = vol.affine[:3, :3]
    trans = vol.affine[:3, 3].copy()
    new_lin = np.zeros((3, 3))
    for canon in range(3):
        stored = amap.perm[canon]
        col = lin[:, stored].copy()
        if amap.flips[canon]:
            n = vol.data.shape[stored]
            trans = trans + col * (n - 1)
            col = -col
        new_lin[:, canon] = col
    affine = np.eye(4)
    affine[:3, :3] = new_lin
    affine[:3, 3] = trans
    out = Volume(data, affine, taxonomy=vol.taxonomy,
                 scl_slope=vol.scl_slope, scl_inter=vol.scl_inter)
    return out, amap


def round_half_away(x) -> np.ndarray:
    """Round to nearest integer with halves away from zero.

    numpy's round() goes to even; plane-to-slice snapping needs the
    away-from-zero convention so 0.5 -> 1 and -0.5 -> -1.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.trunc(x + np.copysign(0.5, x)).astype(np.int64)


def zscore_normalize(vol: Volume, mask: Volume | np.ndarray | None = None) -> Volume:
    """Zero-mean unit-variance intensity scaling (population std).

    With a mask (nonzero = in-mask) the statistics come from masked
    voxels only and voxels outside it are set to 0.  Constant input has
    no scale to normalize by and raises ValueError.  Output data stays
    float64 so repeated normalization is a fixed point to 1e-9.
    """
    data = np.asarray(vol.data, dtype=np.float64)
    if mask is not None:
        marr = mask.data if isinstance(mask, Volume) else np.asarray(mask)
        if marr.shape != data.shape:
            raise ValueError(f"mask shape {marr.shape} != volume shape {data.shape}")
        m = marr != 0
        sel = data[m]
    else:
        m = None
        sel = data.ravel()
    if sel.size < 2:
        raise ValueError("need at least 2 voxels to normalize")
    mu = float(sel.mean())
    sd = float(sel.std())
    if sd == 0.0:
        raise ValueError("constant intensities cannot be z-scored")
    out = (data - mu) / sd
    if m is not None:
        out[~m] = 0.0
    return Volume(out, vol.affine, taxonomy=None)
