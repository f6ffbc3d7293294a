import pytest
import torch
from hypothesis import given, settings, strategies as st

from enflows.egnn import EGCL, EGNN, GNFLayer
from enflows.geometry import random_orthogonal
from enflows.numerics import DTYPE, make_generator


def rand(gen, *shape, scale=1.0):
    return scale * torch.randn(*shape, generator=gen, dtype=DTYPE)


def loop_egcl(layer, x, h):
    """Per-edge reference evaluation of one layer on a single graph."""
    M = x.shape[0]
    x_new, msgs = x.clone(), []
    for i in range(M):
        agg = torch.zeros(layer.hidden, dtype=DTYPE)
        for j in range(M):
            if i == j:
                continue
            d = x[i] - x[j]
            m = layer.phi_e(torch.cat([h[i], h[j], (d @ d).reshape(1)]))
            x_new[i] = x_new[i] + d / (d.norm() + layer.C) * layer.phi_x(m)
            e = layer.phi_inf(m) if layer.phi_inf is not None else 1.0
            agg = agg + e * m
        msgs.append(agg)
    h_new = h + layer.phi_h(torch.cat([h, torch.stack(msgs)], dim=-1))
    return x_new, h_new


@pytest.mark.parametrize("edge_mode", ["inferred", "fully_connected"])
def test_layer_matches_per_edge_reference(edge_mode, gen):
    layer = EGCL(3, 16, gen, edge_mode=edge_mode, zero_coord_init=False)
    x, h = rand(gen, 5, 3), rand(gen, 5, 3)
    xr, hr = loop_egcl(layer, x, h)
    xv, hv = layer(x.unsqueeze(0), h.unsqueeze(0))
    assert torch.allclose(xv[0], xr, atol=1e-13) and torch.allclose(hv[0], hr, atol=1e-13)


def test_zero_coordinate_head_leaves_positions(gen):
    layer = EGCL(2, 8, gen)  # zero-initialised final phi_x layer
    x = rand(gen, 4, 6, 3)
    x_new, _ = layer(x, rand(gen, 4, 6, 2))
    assert torch.equal(x_new, x)


def test_two_nodes_move_equal_and_opposite(gen):
    layer = EGCL(2, 8, gen, zero_coord_init=False)
    x = rand(gen, 1, 2, 3)
    h = rand(gen, 1, 1, 2).expand(1, 2, 2)
    dx = layer(x, h)[0] - x
    assert torch.allclose(dx[0, 0], -dx[0, 1], atol=1e-14)
    assert dx.abs().max() > 0


def group_act(x, R, t, perm):
    return (x @ R.T + t)[..., perm, :]


@pytest.mark.parametrize("reflect", [False, True])
def test_layer_and_stack_equivariance(reflect, gen):
    net = EGNN.build(4, 16, 3, gen, zero_coord_init=False)
    x, h = rand(gen, 5, 3, scale=2), rand(gen, 5, 4)
    R = random_orthogonal(3, gen, reflect=reflect)
    t = rand(gen, 3)
    perm = torch.randperm(5, generator=gen)
    xo, ho = net(x, h)
    xg, hg = net(group_act(x, R, t, perm), h[perm])
    assert (xg - group_act(xo, R, t, perm)).abs().max() <= 1e-9
    assert (hg - ho[perm]).abs().max() <= 1e-9


def test_empty_stack_is_identity(gen):
    x, h = rand(gen, 3, 4, 2), rand(gen, 3, 4, 5)
    xo, ho = EGNN([])(x, h)
    assert torch.equal(xo, x) and torch.equal(ho, h)


def test_displacement_bounded_by_node_count(gen):
    layer = EGCL(2, 16, gen, zero_coord_init=False)
    with torch.no_grad():
        layer.phi_x.layers[-1].weight.mul_(50)  # push tanh into saturation
    x = rand(gen, 8, 6, 2, scale=10)
    dx = layer(x, rand(gen, 8, 6, 2))[0] - x
    assert dx.norm(dim=-1).max() < 6 - 1


def test_coincident_nodes_stay_finite(gen):
    layer = EGCL(2, 8, gen, zero_coord_init=False)
    x = torch.zeros(1, 3, 2, dtype=DTYPE, requires_grad=True)
    xo, ho = layer(x, rand(gen, 1, 3, 2))
    assert torch.equal(xo.detach(), torch.zeros(1, 3, 2, dtype=DTYPE))
    (g,) = torch.autograd.grad(xo.sum() + ho.sum(), x)
    assert torch.isfinite(g).all()


def test_single_node_graph(gen):
    layer = EGCL(3, 8, gen, zero_coord_init=False)
    x, h = rand(gen, 1, 1, 2), rand(gen, 1, 1, 3)
    xo, ho = layer(x, h)
    assert torch.equal(xo, x)
    ref = h + layer.phi_h(torch.cat([h, torch.zeros(1, 1, 8, dtype=DTYPE)], dim=-1))
    assert torch.allclose(ho, ref, atol=1e-15)


def test_non_finite_input_names_node(gen):
    layer = EGCL(2, 8, gen)
    x = rand(gen, 4, 2)
    x[2, 1] = float("nan")
    with pytest.raises(ValueError, match="node 2"):
        layer(x, rand(gen, 4, 2))


def test_invalid_construction(gen):
    with pytest.raises(ValueError):
        EGCL(2, 8, gen, C=0.0)
    with pytest.raises(ValueError):
        EGCL(2, 8, gen, edge_mode="sparse")


def test_gnf_zero_messages(gen):
    layer = GNFLayer(4, 8, gen)
    with torch.no_grad():
        layer.phi_e.layers[-1].weight.zero_()
        layer.phi_e.layers[-1].bias.fill_(-1e4)  # silu(-1e4) == 0 to double precision
    h = rand(gen, 2, 5, 4)
    ref = h + layer.phi_h(torch.cat([h, torch.zeros(2, 5, 8, dtype=DTYPE)], dim=-1))
    assert torch.allclose(layer(h), ref, atol=1e-12)


def test_gnf_saturated_attention_matches_plain(gen):
    att = GNFLayer(4, 8, make_generator(5), attention=True)
    plain = GNFLayer(4, 8, make_generator(5), attention=False)
    with torch.no_grad():
        att.phi_inf.layers[0].weight.zero_()
        att.phi_inf.layers[0].bias.fill_(100.0)
    h = rand(gen, 3, 6, 4)
    assert torch.allclose(att(h), plain(h), atol=1e-12)


def test_gnf_is_not_rotation_equivariant(gen):
    layer = GNFLayer(2, 16, gen)
    x = rand(gen, 5, 2, scale=2)
    R = random_orthogonal(2, gen)
    deviation = (layer(x @ R.T) - layer(x) @ R.T).abs().max()
    assert deviation > 1e-3


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), M=st.integers(1, 7), n=st.integers(1, 4),
       reflect=st.booleans())
def test_equivariance_property(seed, M, n, reflect):
    gen = make_generator(seed)
    layer = EGCL(3, 8, gen, zero_coord_init=False)
    x, h = rand(gen, M, n, scale=3), rand(gen, M, 3)
    R = random_orthogonal(n, gen, reflect=reflect and n > 1)
    t = rand(gen, n)
    perm = torch.randperm(M, generator=gen)
    xo, ho = layer(x, h)
    xg, hg = layer(group_act(x, R, t, perm), h[perm])
    assert (xg - group_act(xo, R, t, perm)).abs().max() <= 1e-9
    assert (hg - ho[perm]).abs().max() <= 1e-9


def test_final_layer_update_flags(gen):
    x, h = rand(gen, 2, 4, 3), rand(gen, 2, 4, 5)
    keep_x = EGCL(5, 8, gen, update_coords=False, zero_coord_init=False)
    xo, ho = keep_x(x, h)
    assert keep_x.phi_x is None and torch.equal(xo, x) and not torch.equal(ho, h)
    keep_h = EGCL(5, 8, gen, update_features=False, zero_coord_init=False)
    xo, ho = keep_h(x, h)
    assert keep_h.phi_h is None and keep_h.phi_inf is None
    assert torch.equal(ho, h) and not torch.equal(xo, x)
    stack = EGNN.build(5, 8, 3, gen, last_coords=False)
    assert [layer.phi_x is None for layer in stack.layers] == [False, False, True]
