"""Canonical Gaussian cloud: 6D rotations, covariances, SH color, PLY I/O."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, ParameterError, RotationDegeneracyError
from .nn import DEFAULT_DTYPE

ROT_EPS = 1e-8
IDENTITY_6D = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def rot6d_to_matrix(r6: torch.Tensor, eps: float = ROT_EPS) -> torch.Tensor:
    """Map ``(..., 6)`` rows ``(a1, a2)`` to ``(..., 3, 3)`` rotation matrices.

    Columns are ``b1 = N(a1)``, ``b2 = N(a2 - (b1.a2) b1)``, ``b3 = b1 x b2``.
    Raises :class:`RotationDegeneracyError` when ``a1`` is near zero or ``a2``
    is (near) parallel to it.
    """
    r6 = torch.as_tensor(r6)
    a1, a2 = r6[..., :3], r6[..., 3:6]
    n1 = torch.linalg.vector_norm(a1, dim=-1)
    bad = n1 <= eps
    b1 = a1 / n1.unsqueeze(-1)
    u2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    n2 = torch.linalg.vector_norm(u2, dim=-1)
    bad = bad | (n2 <= eps) | ~torch.isfinite(n2)
    if bool(bad.any()):
        idx = torch.nonzero(bad.reshape(-1))[0].item()
        raise RotationDegeneracyError(f"degenerate 6D rotation at index {idx}", index=idx)
    b2 = u2 / n2.unsqueeze(-1)
    b3 = torch.linalg.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


f_v2m = rot6d_to_matrix


def matrix_to_rot6d(R: torch.Tensor) -> torch.Tensor:
    """First two columns of ``R``, flattened as ``(a1, a2)``."""
    return torch.cat([R[..., :, 0], R[..., :, 1]], dim=-1)


def build_covariance(r6: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
    """``R S S^T R^T`` for 6D rotations ``r6`` and positive per-axis ``scales``."""
    return covariance_from_matrix(rot6d_to_matrix(r6), scales)


def covariance_from_matrix(R: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
    if bool((scales <= 0).any()):
        raise ParameterError("scales must be strictly positive")
    M = R * scales.unsqueeze(-2)
    cov = M @ M.transpose(-1, -2)
    return 0.5 * (cov + cov.transpose(-1, -2))


def sh_basis(dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """Real SH basis values ``(..., (degree+1)^2)`` at unit directions."""
    if not 0 <= degree <= 3:
        raise ParameterError(f"SH degree must be in 0..3, got {degree}")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [torch.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    return torch.stack(out, dim=-1)


def sh_degree_of(sh: torch.Tensor) -> int:
    k = sh.shape[-1]
    degree = int(round(math.sqrt(k))) - 1
    if (degree + 1) ** 2 != k:
        raise ParameterError(f"{k} is not a valid SH coefficient count")
    return degree


def eval_sh_color(sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """RGB from ``sh`` of shape ``(N, 3, K)`` at unit view directions ``(N, 3)``."""
    basis = sh_basis(dirs, sh_degree_of(sh))
    rgb = (sh * basis.unsqueeze(-2)).sum(-1)
    return torch.clamp(rgb + 0.5, 0.0, 1.0)


def rgb_to_sh0(rgb):
    return (rgb - 0.5) / SH_C0


_FIELDS = ("positions", "rot6d", "log_scales", "opacity_logits", "sh")


class GaussianCloud:
    """Learnable canonical Gaussians.

    Raw storage is unconstrained: scales live in log space and opacities as
    logits.  ``scales`` / ``opacities`` give the activated values.
    """

    def __init__(self, positions, rot6d, log_scales, opacity_logits, sh, requires_grad=True):
        n = positions.shape[0]
        checks = {
            "positions": (positions, (n, 3)),
            "rot6d": (rot6d, (n, 6)),
            "log_scales": (log_scales, (n, 3)),
            "opacity_logits": (opacity_logits, (n,)),
        }
        for name, (value, shape) in checks.items():
            if tuple(value.shape) != shape:
                raise ParameterError(f"{name} has shape {tuple(value.shape)}, expected {shape}")
        if sh.ndim != 3 or sh.shape[0] != n or sh.shape[1] != 3:
            raise ParameterError(f"sh has shape {tuple(sh.shape)}, expected ({n}, 3, K)")
        sh_degree_of(sh)
        if n:
            with torch.no_grad():
                rot6d_to_matrix(rot6d)
        self.positions = positions
        self.rot6d = rot6d
        self.log_scales = log_scales
        self.opacity_logits = opacity_logits
        self.sh = sh
        if requires_grad:
            for name in _FIELDS:
                getattr(self, name).requires_grad_(True)

    @classmethod
    def from_points(
        cls,
        points,
        sh_degree: int = 1,
        colors=None,
        init_scale=None,
        init_opacity: float = 0.1,
        dtype: torch.dtype = DEFAULT_DTYPE,
    ) -> "GaussianCloud":
        """Isotropic, identity-rotated Gaussians seeded at ``points``.

        Without ``init_scale`` each scale is the RMS distance to the three
        nearest neighbours.
        """
        pts = torch.as_tensor(np.asarray(points), dtype=dtype).reshape(-1, 3)
        n = pts.shape[0]
        if init_scale is None:
            scale = nearest_neighbor_scale(pts)
        else:
            scale = torch.full((n,), float(init_scale), dtype=dtype)
        log_scales = torch.log(scale).unsqueeze(1).repeat(1, 3)
        rot = torch.tensor(IDENTITY_6D, dtype=dtype).repeat(n, 1)
        logit = math.log(init_opacity / (1.0 - init_opacity))
        opacity = torch.full((n,), logit, dtype=dtype)
        sh = torch.zeros((n, 3, (sh_degree + 1) ** 2), dtype=dtype)
        if colors is not None:
            sh[:, :, 0] = rgb_to_sh0(torch.as_tensor(np.asarray(colors), dtype=dtype))
        return cls(pts.clone(), rot, log_scales, opacity, sh)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def dtype(self) -> torch.dtype:
        return self.positions.dtype

    @property
    def sh_degree(self) -> int:
        return sh_degree_of(self.sh)

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def rotations(self) -> torch.Tensor:
        return rot6d_to_matrix(self.rot6d)

    def parameters(self) -> dict[str, torch.Tensor]:
        return {f"cloud.{name}": getattr(self, name) for name in _FIELDS}

    def replace(self, **fields) -> "GaussianCloud":
        """New leaf cloud with some fields swapped; others are detached copies."""
        values = {}
        for name in _FIELDS:
            value = fields.get(name, getattr(self, name))
            values[name] = value.detach().clone()
        return GaussianCloud(**values)

    def select(self, mask) -> "GaussianCloud":
        return GaussianCloud(**{n: getattr(self, n).detach()[mask].clone() for n in _FIELDS})

    def append(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(
            **{
                n: torch.cat([getattr(self, n).detach(), getattr(other, n).detach()]).clone()
                for n in _FIELDS
            }
        )

    def to(self, dtype: torch.dtype) -> "GaussianCloud":
        return GaussianCloud(**{n: getattr(self, n).detach().to(dtype).clone() for n in _FIELDS})

    def state(self) -> dict[str, torch.Tensor]:
        return {n: getattr(self, n).detach() for n in _FIELDS}


def nearest_neighbor_scale(points: torch.Tensor, k: int = 3, floor: float = 1e-7) -> torch.Tensor:
    n = points.shape[0]
    if n < 2:
        return torch.ones(n, dtype=points.dtype)
    k = min(k, n - 1)
    out = torch.empty(n, dtype=points.dtype)
    for start in range(0, n, 2048):
        block = points[start : start + 2048]
        d2 = torch.cdist(block, points).square()
        d2[torch.arange(block.shape[0]), torch.arange(start, start + block.shape[0])] = math.inf
        nearest = d2.topk(k, dim=1, largest=False).values
        out[start : start + block.shape[0]] = nearest.mean(1).clamp_min(floor**2).sqrt()
    return out


# -- PLY -----------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _cloud_property_names(sh_coeffs: int) -> list[str]:
    names = ["x", "y", "z", "a1x", "a1y", "a1z", "a2x", "a2y", "a2z"]
    names += ["log_sx", "log_sy", "log_sz", "opacity_logit"]
    names += [f"f_{i}" for i in range(3 * sh_coeffs)]
    return names


def write_ply(path, cloud: GaussianCloud) -> None:
    state = cloud.state()
    n = len(cloud)
    k = state["sh"].shape[-1]
    cols = [
        state["positions"],
        state["rot6d"],
        state["log_scales"],
        state["opacity_logits"].reshape(n, 1),
        state["sh"].reshape(n, 3 * k),
    ]
    table = torch.cat(cols, dim=1).cpu().numpy().astype("<f4")
    names = _cloud_property_names(k)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(table.tobytes())


def read_ply_vertices(path) -> dict[str, np.ndarray]:
    """Vertex properties of a binary little-endian (or ascii) PLY, by name."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                raise DataError(f"{path}: list properties are not supported")
            if parts[1] not in _PLY_TYPES:
                raise DataError(f"{path}: unknown PLY type {parts[1]}")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if not elements or elements[0][0] != "vertex":
        raise DataError(f"{path}: first element must be 'vertex'")
    _, count, props = elements[0]
    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        if len(raw) - body_start < dtype.itemsize * count:
            raise DataError(f"{path}: truncated vertex data")
        table = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)
        return {name: table[name].astype(np.float64) for name, _ in props}
    if fmt == "ascii":
        rows = raw[body_start:].decode("ascii").split("\n")[:count]
        arr = np.array([[float(v) for v in r.split()[: len(props)]] for r in rows])
        return {name: arr[:, i] for i, (name, _) in enumerate(props)}
    raise DataError(f"{path}: unsupported PLY format {fmt}")


def read_ply(path, sh_degree: int = 1, dtype: torch.dtype = DEFAULT_DTYPE) -> GaussianCloud:
    """Load a full Gaussian PLY, or seed a cloud from an xyz-only PLY."""
    props = read_ply_vertices(path)
    for axis in "xyz":
        if axis not in props:
            raise DataError(f"{path}: vertex element lacks '{axis}'")
    xyz = np.stack([props["x"], props["y"], props["z"]], axis=1)
    if "a1x" not in props:
        colors = None
        if all(c in props for c in ("red", "green", "blue")):
            colors = np.stack([props["red"], props["green"], props["blue"]], axis=1)
            if colors.max() > 1.0:
                colors = colors / 255.0
        return GaussianCloud.from_points(xyz, sh_degree=sh_degree, colors=colors, dtype=dtype)
    n_f = sum(1 for name in props if name.startswith("f_"))
    k = n_f // 3
    names = _cloud_property_names(k)
    missing = [name for name in names if name not in props]
    if missing or k == 0:
        raise DataError(f"{path}: missing Gaussian properties {missing[:4]}")

    def cols(keys):
        return torch.as_tensor(np.stack([props[c] for c in keys], axis=1), dtype=dtype)

    return GaussianCloud(
        positions=cols(["x", "y", "z"]),
        rot6d=cols(names[3:9]),
        log_scales=cols(names[9:12]),
        opacity_logits=cols(["opacity_logit"]).reshape(-1),
        sh=cols(names[13:]).reshape(-1, 3, k),
    )

