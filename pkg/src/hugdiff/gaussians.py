"""Gaussian attribute sets: data model, activations, covariance, SH colour and file IO."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, InvalidAttribute, NormalizationError, ShapeError

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

MAX_SH_DEGREE = 3
SCALE_MIN = 1e-6
DEFAULT_SCALE_MAX = 0.1
UNIT_TOL = 1e-6

FILE_MAGIC = b"HGDA"
FILE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def sh_dim(degree: int) -> int:
    return 3 * (degree + 1) ** 2


def sh_degree_from_dim(d: int) -> int:
    for deg in range(MAX_SH_DEGREE + 1):
        if sh_dim(deg) == d:
            return deg
    raise ShapeError(f"{d} is not a valid SH coefficient count")


def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float32)


@dataclass(frozen=True, eq=False)
class GaussianAttributeSet:
    """N activated primitives. SH coefficients are stored coefficient-major: column 3*k + c."""

    positions: torch.Tensor
    opacities: torch.Tensor
    scales: torch.Tensor
    rotations: torch.Tensor
    sh_coeffs: torch.Tensor
    sh_degree: int = 1

    def __post_init__(self):
        check_set(self)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def dtype(self):
        return self.positions.dtype

    def to(self, dtype) -> "GaussianAttributeSet":
        return GaussianAttributeSet(*(getattr(self, f.name).to(dtype) for f in fields(self)[:5]),
                                    sh_degree=self.sh_degree)

    def detach(self) -> "GaussianAttributeSet":
        return GaussianAttributeSet(*(getattr(self, f.name).detach() for f in fields(self)[:5]),
                                    sh_degree=self.sh_degree)

    def replace(self, **changes) -> "GaussianAttributeSet":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return GaussianAttributeSet(**kw)

    def subset(self, index) -> "GaussianAttributeSet":
        """Rows selected (or permuted) by an index tensor or boolean mask."""
        return GaussianAttributeSet(*(getattr(self, f.name)[index] for f in fields(self)[:5]),
                                    sh_degree=self.sh_degree)

    def numpy(self) -> dict:
        return {f.name: getattr(self, f.name).detach().cpu().numpy() for f in fields(self)[:5]}

    @classmethod
    def from_arrays(cls, positions, opacities, scales, rotations, sh_coeffs, sh_degree=None,
                    dtype=torch.float32):
        sh = _as_tensor(sh_coeffs, dtype)
        if sh_degree is None:
            sh_degree = sh_degree_from_dim(sh.shape[1])
        return cls(_as_tensor(positions, dtype), _as_tensor(opacities, dtype),
                   _as_tensor(scales, dtype), _as_tensor(rotations, dtype), sh, int(sh_degree))


@dataclass(frozen=True, eq=False)
class RawAttributeSet:
    """Pre-activation network outputs: logits, log-scales and unnormalised quaternions."""

    positions: torch.Tensor
    opacities_raw: torch.Tensor
    scales_raw: torch.Tensor
    rotations_raw: torch.Tensor
    sh_coeffs: torch.Tensor
    sh_degree: int = 1


def check_set(s: GaussianAttributeSet) -> None:
    """Raise if `s` violates any attribute-set invariant."""
    n = s.positions.shape[0]
    expected = {"positions": (n, 3), "opacities": (n,), "scales": (n, 3), "rotations": (n, 4),
                "sh_coeffs": (n, sh_dim(s.sh_degree))}
    if not 0 <= s.sh_degree <= MAX_SH_DEGREE:
        raise ShapeError(f"sh_degree {s.sh_degree} outside [0, {MAX_SH_DEGREE}]")
    for name, shape in expected.items():
        got = tuple(getattr(s, name).shape)
        if got != shape:
            raise ShapeError(f"{name} has shape {got}, expected {shape}")
    with torch.no_grad():
        for name in expected:
            bad = ~torch.isfinite(getattr(s, name))
            if bad.any():
                raise InvalidAttribute(f"non-finite {name}", int(bad.reshape(n, -1).any(1).nonzero()[0]))
        op = s.opacities
        bad = (op < 0) | (op > 1)
        if bad.any():
            raise InvalidAttribute("opacity outside [0, 1]", int(bad.nonzero()[0]))
        bad = (s.scales <= 0).any(1)
        if bad.any():
            raise InvalidAttribute("non-positive scale", int(bad.nonzero()[0]))
        norms = s.rotations.double().norm(dim=1)
        bad = (norms - 1).abs() > _unit_tol(s.rotations.dtype)
        if bad.any():
            raise InvalidAttribute("rotation quaternion not unit norm", int(bad.nonzero()[0]))


def _unit_tol(dtype):
    # float32 normalisation carries ~1e-7 relative error per component
    return UNIT_TOL if dtype == torch.float64 else 4 * UNIT_TOL


class _ClampPassGrad(torch.autograd.Function):
    """Clamp in the forward pass, identity gradient in the backward pass."""

    @staticmethod
    def forward(ctx, x, lo, hi):
        return x.clamp(lo, hi)

    @staticmethod
    def backward(ctx, grad):
        return grad, None, None


def activate(raw: RawAttributeSet, scale_max: float = DEFAULT_SCALE_MAX,
             straight_through: bool = False) -> GaussianAttributeSet:
    """Map raw outputs to valid attributes.

    straight_through keeps the clamped scale values but passes the gradient of
    the unclamped exponential, so scales that hit a bound can still be pulled back.
    """
    n = raw.positions.shape[0]
    for name in ("positions", "opacities_raw", "scales_raw", "rotations_raw", "sh_coeffs"):
        t = getattr(raw, name)
        if t.shape[0] != n:
            raise ShapeError(f"{name} has {t.shape[0]} rows, expected {n}")
        bad = ~torch.isfinite(t.detach())
        if bad.any():
            raise InvalidAttribute(f"non-finite {name}", int(bad.reshape(n, -1).any(1).nonzero()[0]))
    opacity = torch.sigmoid(raw.opacities_raw.reshape(n))
    scale = torch.exp(raw.scales_raw)
    scale = _ClampPassGrad.apply(scale, SCALE_MIN, scale_max) if straight_through \
        else scale.clamp(SCALE_MIN, scale_max)
    q = raw.rotations_raw
    norm = q.norm(dim=1, keepdim=True)
    identity = torch.zeros_like(q)
    identity[:, 0] = 1
    zero = norm <= 1e-12
    rot = torch.where(zero, identity, q / torch.where(zero, torch.ones_like(norm), norm))
    return GaussianAttributeSet(raw.positions, opacity, scale, rot, raw.sh_coeffs, raw.sh_degree)


def inverse_activate(s: GaussianAttributeSet) -> RawAttributeSet:
    op = s.opacities.clamp(1e-6, 1 - 1e-6)
    return RawAttributeSet(s.positions, torch.log(op / (1 - op)), torch.log(s.scales),
                           s.rotations, s.sh_coeffs, s.sh_degree)


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """(..., 4) unit quaternions (w, x, y, z) to (..., 3, 3) rotation matrices."""
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, -1).reshape(q.shape[:-1] + (3, 3))


def covariances(scales: torch.Tensor, rotations: torch.Tensor) -> torch.Tensor:
    """Batched R diag(s)^2 R^T for (N, 3) scales and (N, 4) quaternions."""
    R = quaternion_to_matrix(rotations)
    M = R * scales.unsqueeze(-2)
    return M @ M.transpose(-1, -2)


def covariance_from_scale_rotation(scale, rotation) -> torch.Tensor:
    scale = _as_tensor(scale, torch.float64)
    rotation = _as_tensor(rotation, torch.float64)
    if scale.shape != (3,) or rotation.shape != (4,):
        raise ShapeError("expected a 3-vector scale and a 4-vector quaternion")
    if abs(float(rotation.norm()) - 1) > UNIT_TOL:
        raise NormalizationError(f"quaternion norm {float(rotation.norm()):.9f} is not 1")
    if (scale <= 0).any():
        raise InvalidAttribute("scale components must be positive")
    cov = covariances(scale[None], rotation[None])[0]
    return 0.5 * (cov + cov.T)


def sh_basis(dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """Real SH basis (..., (degree+1)^2) at unit directions (..., 3)."""
    x, y, z = dirs.unbind(-1)
    out = [torch.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        out += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4 * zz - xx - yy), SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3 * yy)]
    return torch.stack(out, -1)


def eval_sh(sh: torch.Tensor, dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """Raw SH contraction (no offset, no clamp). sh: (..., d), dirs: (..., 3) -> (..., 3)."""
    if sh.shape[-1] != sh_dim(degree):
        raise ShapeError(f"SH vector has {sh.shape[-1]} entries, degree {degree} needs {sh_dim(degree)}")
    coeffs = sh.reshape(sh.shape[:-1] + ((degree + 1) ** 2, 3))
    return (sh_basis(dirs, degree).unsqueeze(-1) * coeffs).sum(-2)


def sh_to_color(sh, view_dir, degree: int) -> torch.Tensor:
    sh = _as_tensor(sh)
    view_dir = _as_tensor(view_dir, sh.dtype)
    return (eval_sh(sh, view_dir, degree) + 0.5).clamp(0.0, 1.0)


def rgb_to_sh_dc(rgb):
    return (rgb - 0.5) / SH_C0


def save_set(s: GaussianAttributeSet, path) -> None:
    arrays = s.numpy()
    parts = [_HEADER.pack(FILE_MAGIC, FILE_VERSION, len(s), s.sh_degree)]
    for name in ("positions", "opacities", "scales", "rotations", "sh_coeffs"):
        parts.append(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def payload_size(n: int, sh_degree: int) -> int:
    return n * (3 + 1 + 3 + 4 + sh_dim(sh_degree)) * 4


def load_set(path) -> GaussianAttributeSet:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", len(data))
    magic, version, n, degree = _HEADER.unpack_from(data, 0)
    if magic != FILE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FILE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if degree > MAX_SH_DEGREE:
        raise FormatError(f"sh_degree {degree} out of range", 12)
    expected = _HEADER.size + payload_size(n, degree)
    if len(data) < expected:
        raise FormatError(f"truncated payload: need {expected} bytes, have {len(data)}", len(data))
    if len(data) > expected:
        raise FormatError("trailing bytes after payload", expected)
    offset = _HEADER.size
    arrays = []
    for width in (3, 1, 3, 4, sh_dim(degree)):
        count = n * width
        a = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float32)
        arrays.append(a.reshape(n, width) if width > 1 else a)
        offset += count * 4
    try:
        return GaussianAttributeSet.from_arrays(*arrays, sh_degree=degree)
    except (ShapeError, InvalidAttribute) as exc:
        raise FormatError(f"payload violates attribute invariants: {exc}", _HEADER.size) from exc


def export_ply(s: GaussianAttributeSet, path) -> None:
    """Write a 3DGS-viewer compatible PLY (pre-activation opacity/scale, channel-major SH rest)."""
    a = s.numpy()
    n = len(s)
    k = (s.sh_degree + 1) ** 2
    sh = a["sh_coeffs"].reshape(n, k, 3)
    dc = sh[:, 0, :]
    rest = sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    op = np.clip(a["opacities"], 1e-6, 1 - 1e-6)
    cols = [a["positions"], np.zeros((n, 3), np.float32), dc, rest,
            np.log(op / (1 - op))[:, None], np.log(a["scales"]), a["rotations"]]
    names = (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
             + [f"f_rest_{i}" for i in range(rest.shape[1])]
             + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"])
    body = np.concatenate(cols, axis=1).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + body.tobytes())


def random_set(n: int, sh_degree: int = 1, seed: int = 0, dtype=torch.float64,
               extent: float = 1.0, scale_range=(0.01, 0.1)) -> GaussianAttributeSet:
    """A valid random set, mainly for tests and fuzzing."""
    g = torch.Generator().manual_seed(seed)
    pos = (torch.rand(n, 3, generator=g, dtype=dtype) - 0.5) * 2 * extent
    op = torch.rand(n, generator=g, dtype=dtype)
    lo, hi = scale_range
    sc = torch.exp(torch.rand(n, 3, generator=g, dtype=dtype) * (math.log(hi) - math.log(lo)) + math.log(lo))
    q = torch.randn(n, 4, generator=g, dtype=dtype)
    q = q / q.norm(dim=1, keepdim=True)
    sh = torch.randn(n, sh_dim(sh_degree), generator=g, dtype=dtype) * 0.3
    return GaussianAttributeSet(pos, op, sc, q, sh, sh_degree)
