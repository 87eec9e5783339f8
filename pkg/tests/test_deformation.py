import math

import pytest
import torch

from gsdeform.deformation import (
    MIN_SCALE,
    DeformationDecoder,
    DeformationModel,
    DeformationOutput,
    DeformedGaussians,
    apply_deformation,
    decode_deformation,
    positional_encode,
)
from gsdeform.errors import RangeError, RotationDegeneracyError
from gsdeform.gaussians import GaussianCloud, matrix_to_rot6d, rot6d_to_matrix


def test_encoding_at_zero():
    assert positional_encode(torch.tensor([0.0]), 2).tolist() == [0.0, 1.0, 0.0, 1.0]


def test_encoding_half():
    out = positional_encode(0.5, 1)
    torch.testing.assert_close(out, torch.tensor([1.0, 0.0]), rtol=0, atol=1e-15)


def test_encoding_quarter():
    out = positional_encode(torch.tensor([0.25]), 2)
    r = math.sqrt(0.5)
    torch.testing.assert_close(out, torch.tensor([r, r, 1.0, 0.0]), rtol=0, atol=1e-15)


def test_encoding_width_per_coordinate():
    out = positional_encode(torch.rand(7, 3), 10)
    assert out.shape == (7, 60)


def _cloud(n=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return GaussianCloud(
        torch.randn(n, 3, generator=g),
        torch.tensor([1.0, 0, 0, 0, 1, 0]).repeat(n, 1) + 0.2 * torch.randn(n, 6, generator=g),
        torch.randn(n, 3, generator=g) * 0.3 - 2,
        torch.randn(n, generator=g),
        torch.randn(n, 3, 4, generator=g),
    )


def test_zero_decoder_is_identity_for_any_t():
    dec = DeformationDecoder(64, generator=torch.Generator().manual_seed(0))
    feats, pos = torch.randn(5, 64), torch.randn(5, 3)
    for t in (0.0, 0.3, 1.0):
        d = dec(feats, pos, t)
        for part in (d.dx, d.dr6, d.ds):
            assert torch.count_nonzero(part) == 0


def test_decoder_input_width():
    dec = DeformationDecoder(64)
    assert dec.mlp.in_features == 64 + 60 + 12 == 136
    assert dec.mlp.widths == [136, 256, 256, 256, 256, 256, 12]
    assert dec.mlp.skip == 3


def test_decoder_rejects_time_outside_unit_interval():
    dec = DeformationDecoder(8)
    with pytest.raises(RangeError):
        dec(torch.zeros(1, 8), torch.zeros(1, 3), 1.5)
    with pytest.raises(RangeError):
        dec(torch.zeros(1, 8), torch.zeros(1, 3), -0.01)


def test_decoder_same_inputs_same_rows():
    dec = DeformationDecoder(8, generator=torch.Generator().manual_seed(1))
    torch.nn.init.normal_(dec.mlp.layers[-1].weight)
    feats = torch.randn(1, 8).repeat(2, 1)
    pos = torch.randn(1, 3).repeat(2, 1)
    d = dec(feats, pos, 0.4)
    assert torch.equal(d.dx[0], d.dx[1]) and torch.equal(d.ds[0], d.ds[1])


def test_decoder_matches_hand_composition():
    gen = torch.Generator().manual_seed(2)
    dec = DeformationDecoder(8, width=16, generator=gen)
    with torch.no_grad():
        dec.mlp.layers[-1].weight.normal_(generator=gen)
    feats, pos = torch.randn(1, 8, generator=gen), torch.randn(1, 3, generator=gen)

    def oracle(t):
        px = torch.cat([torch.stack([torch.sin(2**k * math.pi * pos[0, j]), torch.cos(2**k * math.pi * pos[0, j])])
                        for j in range(3) for k in range(10)])
        pt = torch.cat([torch.stack([torch.sin(torch.tensor(2**k * math.pi * t)), torch.cos(torch.tensor(2**k * math.pi * t))])
                        for k in range(6)])
        x = torch.cat([feats[0], px, pt])
        h = x
        for i, layer in enumerate(dec.mlp.layers):
            if i == 3:
                h = torch.cat([h, x])
            h = layer.weight @ h + layer.bias
            if i < len(dec.mlp.layers) - 1:
                h = torch.relu(h)
        return h

    outs = []
    for t in (0.2, 0.7):
        d = decode_deformation(dec, feats, pos, t)
        got = torch.cat([d.dx[0], d.dr6[0], d.ds[0]])
        torch.testing.assert_close(got, oracle(t), rtol=0, atol=1e-12)
        outs.append(got)
    assert not torch.equal(outs[0], outs[1])


def test_apply_zero_deformation_is_exact():
    c = _cloud()
    g = apply_deformation(c, DeformationOutput.zeros(len(c)))
    assert torch.equal(g.positions, c.positions)
    assert torch.equal(g.scales, c.scales)
    assert torch.equal(g.rotations, rot6d_to_matrix(c.rot6d))


def test_apply_translation():
    c = GaussianCloud.from_points([[1.0, 1.0, 1.0]], init_scale=0.1)
    d = DeformationOutput.zeros(1)
    d.dx = torch.tensor([[0.5, 0.0, 0.0]])
    assert apply_deformation(c, d).positions.tolist() == [[1.5, 1.0, 1.0]]


def test_apply_quarter_turn_about_z():
    c = GaussianCloud.from_points([[0.0, 0.0, 0.0]], init_scale=0.1)
    Rz = torch.tensor([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    d = DeformationOutput.zeros(1)
    d.dr6 = matrix_to_rot6d(Rz).unsqueeze(0) - torch.tensor([1.0, 0, 0, 0, 1, 0])
    torch.testing.assert_close(apply_deformation(c, d).rotations[0], Rz, rtol=0, atol=1e-10)


def test_apply_scale_offset_is_linear_and_clamped():
    c = GaussianCloud.from_points([[0.0, 0, 0], [1.0, 0, 0]], init_scale=0.1)
    d = DeformationOutput.zeros(2)
    d.ds = torch.tensor([[0.05, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    s = apply_deformation(c, d).scales
    assert s[0, 0].item() == pytest.approx(0.15)
    assert s[1, 0].item() == MIN_SCALE


def test_apply_degenerate_residual_names_gaussian():
    c = _cloud(3)
    d = DeformationOutput.zeros(3)
    d.dr6 = d.dr6.clone()
    d.dr6[2] = torch.tensor([-1.0, 0, 0, 0, 0, 0])
    with pytest.raises(RotationDegeneracyError, match="Gaussian 2") as info:
        apply_deformation(c, d)
    assert info.value.index == 2


def test_deformed_rotations_stay_proper(rng):
    c = _cloud(50)
    d = DeformationOutput.zeros(50)
    d.dr6 = torch.as_tensor(rng.normal(scale=0.3, size=(50, 6)))
    R = apply_deformation(c, d).rotations
    eye = torch.eye(3).expand(50, 3, 3)
    torch.testing.assert_close(R.transpose(1, 2) @ R, eye, rtol=0, atol=1e-10)
    torch.testing.assert_close(torch.linalg.det(R), torch.ones(50), rtol=0, atol=1e-10)


def test_color_and_opacity_pass_through():
    c = _cloud(6)
    model = DeformationModel(0.5, generator=torch.Generator().manual_seed(0))
    torch.nn.init.normal_(model.decoder.mlp.layers[-1].weight, std=0.01)
    for t in (0.0, 0.5, 1.0):
        g, _ = model(c, t)
        assert torch.equal(g.opacities, c.opacities)
        assert g.sh is c.sh


def test_model_identity_at_init():
    c = _cloud(6)
    model = DeformationModel(0.5, generator=torch.Generator().manual_seed(0))
    canon = DeformedGaussians.canonical(c)
    for t in (0.0, 0.3, 1.0):
        g, d = model(c, t)
        assert torch.equal(g.positions, canon.positions)
        assert torch.equal(g.scales, canon.scales)
        assert torch.equal(g.rotations, canon.rotations)
