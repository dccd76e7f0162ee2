"""Binary PLY interchange in the common splat-viewer vertex layout.

Seventeen float32 properties per vertex, little-endian:
x, y, z, nx, ny, nz (zero normals), f_dc_0..2 (color as the degree-0
spherical-harmonic coefficient), opacity (logit), scale_0..2 (natural
log), rot_0..3 (quaternion). Import inverts every mapping.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .exceptions import PlyParseError
from .gsscene import DEFAULT_SCALE_MAX, GaussianScene

SH_C0 = 0.28209479177387814

PROPERTIES = (
    "x", "y", "z",
    "nx", "ny", "nz",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)


def _logit(x: np.ndarray) -> np.ndarray:
    x = np.clip(x.astype(np.float64), 1e-7, 1 - 1e-7)
    return np.log(x / (1 - x))


def export_ply(scene: GaussianScene, path) -> None:
    """Write the scene; colors/opacity/scales are stored pre-activation."""
    n = scene.count
    rec = np.zeros((n, len(PROPERTIES)), dtype="<f4")
    rec[:, 0:3] = scene.positions.data
    rec[:, 6:9] = (scene.colors.data.astype(np.float64) - 0.5) / SH_C0
    rec[:, 9] = _logit(scene.opacities.data)
    rec[:, 10:13] = np.log(scene.scales.data.astype(np.float64))
    rec[:, 13:17] = scene.rotations.data
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in PROPERTIES]
    header.append("end_header")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def _read_header(f: io.BufferedReader) -> int:
    def line():
        raw = f.readline()
        if not raw:
            raise PlyParseError("unexpected end of file inside header")
        return raw.decode("ascii", errors="replace").strip()

    if line() != "ply":
        raise PlyParseError("missing 'ply' magic line")
    if line() != "format binary_little_endian 1.0":
        raise PlyParseError("format line must be 'format binary_little_endian 1.0'")
    l = line()
    while l.startswith("comment"):
        l = line()
    if not l.startswith("element vertex "):
        raise PlyParseError(f"expected 'element vertex <n>', got {l!r}")
    try:
        count = int(l.split()[-1])
    except ValueError as e:
        raise PlyParseError(f"bad vertex count in {l!r}") from e
    for expected in PROPERTIES:
        l = line()
        if l != f"property float {expected}":
            raise PlyParseError(
                f"expected 'property float {expected}', got {l!r}"
            )
    l = line()
    if l != "end_header":
        raise PlyParseError(f"expected 'end_header', got {l!r}")
    return count


def import_ply(path) -> GaussianScene:
    """Read a scene back, inverting the stored mappings.

    Raises PlyParseError naming the first offending header line or a
    truncated payload.
    """
    path = Path(path)
    with open(path, "rb") as f:
        count = _read_header(f)
        payload = f.read()
    need = count * len(PROPERTIES) * 4
    if len(payload) < need:
        raise PlyParseError(
            f"truncated payload: expected {need} bytes for {count} vertices, "
            f"got {len(payload)}"
        )
    rec = np.frombuffer(payload, dtype="<f4", count=count * len(PROPERTIES))
    rec = rec.reshape(count, len(PROPERTIES)).astype(np.float64)
    colors = np.clip(rec[:, 6:9] * SH_C0 + 0.5, 0.0, 1.0)
    opac = 1.0 / (1.0 + np.exp(-rec[:, 9]))
    scales = np.exp(rec[:, 10:13])
    quats = rec[:, 13:17]
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    if norms.min() < 1e-8:
        raise PlyParseError("degenerate zero quaternion in rot_0..3")
    quats = quats / norms
    scale_max = max(DEFAULT_SCALE_MAX, float(scales.max()))
    return GaussianScene(
        positions=dm.tensor(rec[:, 0:3]),
        colors=dm.tensor(colors),
        opacities=dm.tensor(opac),
        rotations=dm.tensor(quats),
        scales=dm.tensor(scales),
        scale_max=scale_max,
    )
