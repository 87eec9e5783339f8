import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gsdeform.errors import DataError, ParameterError, RotationDegeneracyError
from gsdeform.gaussians import (
    SH_C0,
    SH_C1,
    GaussianCloud,
    build_covariance,
    eval_sh_color,
    matrix_to_rot6d,
    read_ply,
    read_ply_vertices,
    rgb_to_sh0,
    rot6d_to_matrix,
    sh_basis,
    write_ply,
)

# tiny magnitudes would underflow when squared, which no rescaling can survive
finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False).filter(lambda x: x == 0 or abs(x) > 1e-6)
vec6 = st.lists(finite, min_size=6, max_size=6)


def _non_degenerate(v):
    a1, a2 = np.asarray(v[:3]), np.asarray(v[3:])
    n1 = np.linalg.norm(a1)
    if n1 < 1e-3:
        return False
    return np.linalg.norm(a2 - (a1 @ a2) / n1**2 * a1) > 1e-3


def Rz(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return torch.tensor([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def test_identity_input():
    assert torch.equal(rot6d_to_matrix(torch.tensor([1.0, 0, 0, 0, 1, 0])), torch.eye(3))


def test_normalization_removes_scale():
    assert torch.equal(rot6d_to_matrix(torch.tensor([2.0, 0, 0, 0, 3, 0])), torch.eye(3))


def test_swapped_axes_columns():
    R = rot6d_to_matrix(torch.tensor([0.0, 1, 0, 1, 0, 0]))
    assert R[:, 0].tolist() == [0, 1, 0]
    assert R[:, 1].tolist() == [1, 0, 0]
    assert R[:, 2].tolist() == [0, 0, -1]


@pytest.mark.parametrize(
    "r6, index",
    [
        ([[1.0, 0, 0, 0, 1, 0], [0.0, 0, 0, 0, 1, 0]], 1),
        ([[1.0, 0, 0, 2, 0, 0]], 0),
        ([[1e-9, 0, 0, 0, 1, 0]], 0),
    ],
)
def test_degenerate_inputs_raise_with_index(r6, index):
    with pytest.raises(RotationDegeneracyError) as info:
        rot6d_to_matrix(torch.tensor(r6))
    assert info.value.index == index


@settings(max_examples=200, deadline=None)
@given(vec6)
def test_rotation_is_proper_orthonormal(v):
    if not _non_degenerate(v):
        return
    R = rot6d_to_matrix(torch.tensor(v))
    assert torch.allclose(R.T @ R, torch.eye(3), atol=1e-10, rtol=0)
    assert abs(torch.linalg.det(R).item() - 1.0) < 1e-10


@settings(max_examples=100, deadline=None)
@given(vec6, st.integers(-20, 20), st.integers(-20, 20))
def test_power_of_two_scaling_is_exact(v, ea, eb):
    if not _non_degenerate(v):
        return
    r = torch.tensor(v)
    scaled = torch.cat([r[:3] * 2.0**ea, r[3:] * 2.0**eb])
    assert torch.equal(rot6d_to_matrix(scaled), rot6d_to_matrix(r))


@settings(max_examples=100, deadline=None)
@given(vec6, st.floats(0.01, 100), st.floats(0.01, 100))
def test_positive_scaling_invariance(v, a, b):
    if not _non_degenerate(v):
        return
    r = torch.tensor(v)
    scaled = torch.cat([r[:3] * a, r[3:] * b])
    torch.testing.assert_close(rot6d_to_matrix(scaled), rot6d_to_matrix(r), rtol=0, atol=1e-12)


def test_continuity(rng):
    r = torch.as_tensor(rng.normal(size=(500, 6)))
    delta = torch.as_tensor(rng.normal(size=(500, 6)))
    delta = 1e-6 * delta / delta.norm(dim=1, keepdim=True)
    diff = (rot6d_to_matrix(r + delta) - rot6d_to_matrix(r)).flatten(1).norm(dim=1)
    assert (diff <= 100 * 1e-6).all()


def test_matrix_round_trip(rng):
    R = rot6d_to_matrix(torch.as_tensor(rng.normal(size=(50, 6))))
    torch.testing.assert_close(rot6d_to_matrix(matrix_to_rot6d(R)), R, rtol=0, atol=1e-14)


def test_covariance_identity_rotation():
    cov = build_covariance(torch.tensor([1.0, 0, 0, 0, 1, 0]), torch.tensor([1.0, 2.0, 3.0]))
    assert torch.equal(cov, torch.diag(torch.tensor([1.0, 4.0, 9.0])))


def test_covariance_rotated_ninety_degrees():
    r6 = matrix_to_rot6d(Rz(90))
    cov = build_covariance(r6, torch.tensor([1.0, 2.0, 1.0]))
    torch.testing.assert_close(cov, torch.diag(torch.tensor([4.0, 1.0, 1.0])), rtol=0, atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(vec6, st.lists(st.floats(1e-3, 10), min_size=3, max_size=3))
def test_covariance_symmetric_psd(v, s):
    if not _non_degenerate(v):
        return
    cov = build_covariance(torch.tensor(v), torch.tensor(s))
    assert torch.equal(cov, cov.T)
    assert torch.linalg.eigvalsh(cov).min() >= -1e-12


def test_covariance_rejects_non_positive_scale():
    with pytest.raises(ParameterError):
        build_covariance(torch.tensor([1.0, 0, 0, 0, 1, 0]), torch.tensor([1.0, 0.0, 1.0]))


def test_sh_degree_zero_is_isotropic():
    sh = torch.tensor([[[0.3], [-0.2], [5.0]]])
    for d in ([1.0, 0, 0], [0, 0, -1.0]):
        rgb = eval_sh_color(sh, torch.tensor([d]))
        torch.testing.assert_close(rgb[0], torch.tensor([0.3 * SH_C0 + 0.5, -0.2 * SH_C0 + 0.5, 1.0]))


def test_sh_zero_coefficients_are_grey():
    rgb = eval_sh_color(torch.zeros(4, 3, 16), torch.nn.functional.normalize(torch.randn(4, 3), dim=1))
    assert torch.equal(rgb, torch.full((4, 3), 0.5))


def test_sh_degree_one_flips_sign():
    sh = torch.zeros(1, 3, 4)
    sh[0, 0, 3] = 0.4  # red follows -x
    d = torch.tensor([[1.0, 0.0, 0.0]])
    plus, minus = eval_sh_color(sh, d), eval_sh_color(sh, -d)
    assert plus[0, 0].item() == pytest.approx(0.5 - 0.4 * SH_C1)
    assert minus[0, 0].item() == pytest.approx(0.5 + 0.4 * SH_C1)


def test_sh_basis_values_tabulated():
    d = torch.tensor([[0.0, 0.0, 1.0]])
    b = sh_basis(d, 2)[0]
    expected = [SH_C0, 0.0, SH_C1, 0.0, 0.0, 0.0, 0.31539156525252005 * 2, 0.0, 0.0]
    torch.testing.assert_close(b, torch.tensor(expected), rtol=0, atol=1e-15)


def test_sh_basis_orthonormal_by_quadrature():
    # Fibonacci sphere quadrature of the degree-3 Gram matrix
    n = 20000
    i = torch.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = math.pi * (1 + 5**0.5) * i
    r = torch.sqrt(1 - z * z)
    dirs = torch.stack([r * torch.cos(phi), r * torch.sin(phi), z], dim=1)
    B = sh_basis(dirs, 3)
    gram = 4 * math.pi * B.T @ B / n
    torch.testing.assert_close(gram, torch.eye(16), rtol=0, atol=2e-3)


def test_sh_color_clamped():
    sh = torch.zeros(1, 3, 1)
    sh[0, 0, 0] = 100.0
    sh[0, 1, 0] = -100.0
    rgb = eval_sh_color(sh, torch.tensor([[0.0, 0.0, 1.0]]))
    assert rgb[0].tolist() == [1.0, 0.0, 0.5]


def test_rgb_to_sh0_round_trip():
    rgb = torch.tensor([[0.2, 0.7, 0.9]])
    sh = rgb_to_sh0(rgb).unsqueeze(-1)
    torch.testing.assert_close(eval_sh_color(sh, torch.tensor([[0.0, 1.0, 0.0]])), rgb)


def _cloud(n=5, degree=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    return GaussianCloud(
        torch.randn(n, 3, generator=g),
        torch.tensor([1.0, 0, 0, 0, 1, 0]).repeat(n, 1) + 0.1 * torch.randn(n, 6, generator=g),
        torch.randn(n, 3, generator=g) - 2,
        torch.randn(n, generator=g),
        torch.randn(n, 3, (degree + 1) ** 2, generator=g),
    )


def test_cloud_activations():
    c = _cloud()
    assert (c.scales > 0).all()
    assert ((c.opacities > 0) & (c.opacities < 1)).all()
    assert set(c.parameters()) == {f"cloud.{k}" for k in ("positions", "rot6d", "log_scales", "opacity_logits", "sh")}
    assert all(p.requires_grad for p in c.parameters().values())


def test_cloud_rejects_degenerate_rotation():
    c = _cloud(3)
    bad = c.rot6d.detach().clone()
    bad[2] = 0.0
    with pytest.raises(RotationDegeneracyError):
        c.replace(rot6d=bad)


def test_cloud_rejects_bad_shapes():
    c = _cloud(3)
    with pytest.raises(ParameterError):
        c.replace(positions=torch.zeros(3, 2))
    with pytest.raises(ParameterError):
        GaussianCloud(torch.zeros(2, 3), torch.zeros(2, 6), torch.zeros(2, 3), torch.zeros(2), torch.zeros(2, 3, 3))


def test_from_points_nearest_neighbour_scale():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 3]])
    c = GaussianCloud.from_points(pts, sh_degree=0, colors=np.full((4, 3), 0.25), init_opacity=0.2)
    # point 0: neighbours at 1, 2, 3 -> sqrt((1 + 4 + 9) / 3)
    assert c.scales[0, 0].item() == pytest.approx(math.sqrt(14 / 3))
    assert torch.allclose(c.opacities, torch.full((4,), 0.2))
    torch.testing.assert_close(eval_sh_color(c.sh, torch.tensor([[0.0, 0, 1]]).repeat(4, 1)), torch.full((4, 3), 0.25))


def test_select_and_append():
    c = _cloud(6)
    s = c.select(torch.tensor([0, 2]))
    both = s.append(c.select(torch.tensor([5])))
    assert len(both) == 3
    assert torch.equal(both.positions[2], c.positions.detach()[5])


def test_ply_round_trip(tmp_path):
    c = _cloud(7, degree=2)
    path = tmp_path / "c.ply"
    write_ply(path, c)
    back = read_ply(path)
    for name in ("positions", "rot6d", "log_scales", "opacity_logits", "sh"):
        np.testing.assert_allclose(getattr(back, name).detach().numpy(), getattr(c, name).detach().numpy(), rtol=1e-6, atol=1e-6)
    header = path.read_bytes().split(b"end_header")[0].decode()
    assert "binary_little_endian" in header
    assert "property float a2z" in header and "property float f_26" in header


def test_ply_xyz_only_seed(tmp_path):
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype="<f4")
    path = tmp_path / "p.ply"
    header = "ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
    path.write_bytes(header.encode() + pts.tobytes())
    c = read_ply(path, sh_degree=1)
    assert len(c) == 3 and c.sh.shape == (3, 3, 4)
    np.testing.assert_array_equal(c.positions.detach().numpy(), pts)


def test_ply_ascii_with_colors(tmp_path):
    path = tmp_path / "a.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n0 0 0 255 0 0\n1 1 1 0 0 255\n"
    )
    props = read_ply_vertices(path)
    assert props["red"].tolist() == [255, 0]
    c = read_ply(path, sh_degree=0)
    rgb = eval_sh_color(c.sh, torch.tensor([[0.0, 0, 1]]).repeat(2, 1))
    torch.testing.assert_close(rgb, torch.tensor([[1.0, 0, 0], [0, 0, 1.0]]))


def test_ply_errors(tmp_path):
    bad = tmp_path / "bad.ply"
    bad.write_bytes(b"not a ply")
    with pytest.raises(DataError):
        read_ply(bad)
    lst = tmp_path / "list.ply"
    lst.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty list uchar int idx\nend_header\n1 0\n")
    with pytest.raises(DataError, match="list"):
        read_ply_vertices(lst)
    short = tmp_path / "short.ply"
    short.write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nend_header\n" + bytes(12))
    with pytest.raises(DataError, match="truncated"):
        read_ply(short)
