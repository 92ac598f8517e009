"""Minimal NIfTI-1 volume IO and case manifests.

Implements the small subset of NIfTI-1 this package needs: single-file
``.nii`` / ``.nii.gz`` volumes with a 348-byte header, float32 / int16 /
uint8 payloads, voxel spacing in ``pixdim`` and a diagonal sform affine.
Arrays are stored in Fortran voxel order as the format prescribes; the
in-memory convention everywhere else in the package is a C-ordered
``(d, h, w)`` array, so axes are reversed on the way in and out.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

_HDR_SIZE = 348
_MAGIC = b"n+1\x00"

# NIfTI datatype codes for the payloads we support.
_DTYPES = {
    np.dtype(np.uint8): 2,
    np.dtype(np.int16): 4,
    np.dtype(np.float32): 16,
}
_CODES = {v: k for k, v in _DTYPES.items()}


def save_volume(path, voxels: np.ndarray, spacing) -> None:
    """Write a 3-D array with voxel spacing (mm) as a NIfTI-1 file.

    Gzip compression is chosen by the ``.gz`` suffix.
    """
    path = Path(path)
    voxels = np.asarray(voxels)
    if voxels.ndim != 3:
        raise ValueError(f"expected a 3-D volume, got shape {voxels.shape}")
    if voxels.dtype not in _DTYPES:
        if np.issubdtype(voxels.dtype, np.floating):
            voxels = voxels.astype(np.float32)
        elif np.issubdtype(voxels.dtype, np.integer):
            voxels = voxels.astype(np.int16)
        else:
            raise ValueError(f"unsupported dtype {voxels.dtype}")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be 3 positive components, got {spacing}")

    # File x varies fastest; the C-ordered (d, h, w) buffer is already a
    # Fortran-ordered (w, h, d) grid, so bytes go out untouched.
    data = np.ascontiguousarray(voxels)
    fdim = data.shape[::-1]          # (nx, ny, nz) in file terms
    fsp = spacing[::-1]

    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *fdim, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _DTYPES[data.dtype])          # datatype
    struct.pack_into("<h", hdr, 72, data.dtype.itemsize * 8)      # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, *fsp, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)                       # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)                         # scl_slope
    struct.pack_into("<h", hdr, 252, 1)                           # sform_code
    # Diagonal affine: world = spacing * index.
    struct.pack_into("<4f", hdr, 280, fsp[0], 0, 0, 0)
    struct.pack_into("<4f", hdr, 296, 0, fsp[1], 0, 0)
    struct.pack_into("<4f", hdr, 312, 0, 0, fsp[2], 0)
    hdr[344:348] = _MAGIC

    payload = bytes(hdr) + b"\x00" * 4 + data.tobytes()
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def load_volume(path):
    """Read a NIfTI-1 file; returns ``(voxels (d,h,w), spacing (3,))``."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HDR_SIZE or raw[344:348] != _MAGIC:
        raise ValueError(f"{path} is not a single-file NIfTI-1 volume")

    ndim = struct.unpack_from("<h", raw, 40)[0]
    if ndim < 3:
        raise ValueError(f"{path}: expected a 3-D volume, header says ndim={ndim}")
    fdim = struct.unpack_from("<3h", raw, 42)
    code = struct.unpack_from("<h", raw, 70)[0]
    if code not in _CODES:
        raise ValueError(f"{path}: unsupported NIfTI datatype code {code}")
    dtype = _CODES[code]
    fsp = struct.unpack_from("<3f", raw, 80)
    offset = int(struct.unpack_from("<f", raw, 108)[0])

    count = int(np.prod(fdim))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    voxels = data.reshape(fdim[::-1]).copy()   # back to (d, h, w)
    spacing = tuple(float(s) for s in fsp[::-1])
    return voxels, spacing


def save_manifest(path, entries, extra=None) -> None:
    """Write a case manifest: per-subject phase file paths plus mask path.

    ``entries`` is a list of dicts with keys ``subject_id``, ``phases``
    (phase name -> relative path) and ``mask``.
    """
    doc = {"cases": list(entries)}
    if extra:
        doc.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2))


def load_manifest(path):
    """Load a manifest; returns the list of case entries with paths resolved."""
    path = Path(path)
    doc = json.loads(path.read_text())
    base = path.parent
    cases = []
    for entry in doc["cases"]:
        cases.append(
            {
                "subject_id": entry["subject_id"],
                "phases": {k: str(base / v) for k, v in entry["phases"].items()},
                "mask": str(base / entry["mask"]),
            }
        )
    return cases
