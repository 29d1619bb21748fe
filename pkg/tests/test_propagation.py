import numpy as np
import pytest
import torch

from medvsr.blocks import window_partition
from medvsr.errors import ContractError
from medvsr.propagation import CSSB, CSSPStep, compose_flows, cssp_step, warp
from medvsr.ssm import headed_scan

from oracles import fd_gradcheck, module_gradcheck, two_hop

pytestmark = pytest.mark.usefixtures("float64")


def smooth_flow(H, W, seed, amp=1.5):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:H, 0:W]
    out = np.zeros((H, W, 2))
    for c in range(2):
        a, b, p = rng.uniform(0.1, 0.4, 3)
        out[..., c] = amp * np.sin(a * xs + b * ys + p * 6)
    return torch.as_tensor(out)


# -- flows ---------------------------------------------------------------------

def test_zero_flow_warp_identity():
    f = torch.randn(2, 3, 7, 9)
    assert torch.equal(warp(f, torch.zeros(2, 7, 9, 2)), f)


def test_integer_flow_is_translation():
    f = torch.randn(1, 2, 6, 8)
    o = torch.zeros(1, 6, 8, 2)
    o[..., 0], o[..., 1] = 2, -1
    out = warp(f, o)
    expect = torch.zeros_like(f)
    expect[:, :, 1:, :6] = f[:, :, :5, 2:]
    assert torch.equal(out, expect)


def test_warp_gradient_wrt_flow():
    f = torch.randn(1, 2, 10, 10, requires_grad=True)
    o = (torch.rand(1, 10, 10, 2) * 0.6 + 0.2).requires_grad_()
    fd_gradcheck(warp, [f, o])


def test_warp_shape_contract():
    with pytest.raises(ContractError):
        warp(torch.randn(1, 2, 5, 5), torch.zeros(1, 4, 5, 2))


@pytest.mark.parametrize("mode", ["sum", "warp_compose"])
def test_compose_zero_first_flow(mode):
    o_b = smooth_flow(9, 9, 1)[None]
    assert torch.equal(compose_flows(torch.zeros_like(o_b), o_b, mode), o_b)


def test_constant_flows_modes_agree_in_bounds():
    o_a = torch.zeros(1, 12, 12, 2)
    o_a[..., 0], o_a[..., 1] = 1.25, -0.5
    o_b = torch.zeros(1, 12, 12, 2)
    o_b[..., 0], o_b[..., 1] = -2.0, 0.75
    s = compose_flows(o_a, o_b, "sum")
    w = compose_flows(o_a, o_b, "warp_compose")
    # where the first hop lands inside the frame the two agree exactly
    assert torch.equal(s[:, 1:-2, 2:-1], w[:, 1:-2, 2:-1])


def test_warp_compose_two_hop_oracle():
    o_a, o_b = smooth_flow(16, 16, 2), smooth_flow(16, 16, 3)
    out = compose_flows(o_a[None], o_b[None], "warp_compose")[0].numpy()
    for py in range(2, 14):
        for px in range(2, 14):
            np.testing.assert_allclose(out[py, px], two_hop(o_a.numpy(), o_b.numpy(), px, py),
                                       atol=1e-5)


def test_compose_mode_rejected():
    with pytest.raises(ContractError):
        compose_flows(torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 2, 2), "average")


# -- CSSB ----------------------------------------------------------------------

def grids(C=8, H=4, W=4, l=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    far = torch.randn(1, C, H, W, generator=g, dtype=torch.float64)
    near = torch.randn(1, C, H, W, generator=g, dtype=torch.float64)
    return window_partition(far, l), window_partition(near, l)


def test_zero_far_gives_constant_control():
    torch.manual_seed(0)
    blk = CSSB(8, 4, 2)
    vf, vn = grids()
    C = blk.control(vf.with_tokens(torch.zeros_like(vf.tokens)))
    # LN(0) = 0, far projection 0, conv gives its bias, then LPE of that constant
    flat = C.reshape(-1, 4)
    inner = C[0, 0].reshape(4, 4, 4)[1:-1, 1:-1].reshape(-1, 4)
    assert torch.allclose(inner, inner[:1].expand_as(inner), rtol=0, atol=1e-15)
    assert torch.isfinite(flat).all()


def test_shared_projection_self_case_is_self_scan():
    torch.manual_seed(1)
    blk = CSSB(8, 4, 2, lpe=False, separate=False)
    _, vn = grids(seed=2)
    out = blk(vn, vn).tokens
    t = vn.tokens
    x, Bbar, delta, _ = blk.near(t)
    y = headed_scan(x, Bbar, delta, blk.near.A, blk.near.control(t))
    z = torch.nn.functional.silu(blk.gate(blk.near.norm(t)))
    torch.testing.assert_close(out, blk.out_proj(blk.out_norm(z * y)), rtol=0, atol=0)


def test_cssb_geometry_contract():
    blk = CSSB(8, 4, 2)
    vf, _ = grids(l=2)
    _, vn = grids(l=4)
    with pytest.raises(ContractError):
        blk(vf, vn)


def test_cssb_gradient_both_inputs():
    torch.manual_seed(2)
    blk = CSSB(8, 4, 2).double()
    vf, vn = grids(seed=3)
    tf = vf.tokens.clone().requires_grad_()
    tn = vn.tokens.clone().requires_grad_()
    fd_gradcheck(lambda a, b: blk(vf.with_tokens(a), vn.with_tokens(b)).tokens, [tf, tn])


def test_cssb_output_depends_on_far_sequence():
    torch.manual_seed(4)
    blk = CSSB(8, 4, 2)
    vf, vn = grids(seed=5)
    vf2, _ = grids(seed=6)
    assert not torch.allclose(blk(vf, vn).tokens, blk(vf2, vn).tokens)


# -- one propagation step ------------------------------------------------------

def random_step(scheme="t2t1", seed=0, **kw):
    torch.manual_seed(seed)
    step = CSSPStep(8, 4, 2, window=4, scheme=scheme, dcn_groups=2, **kw).double()
    for m in (step.mlp.fc2, step.align.head_out) if step.use_cssb else (step.align.head_out,):
        torch.nn.init.normal_(m.weight, std=0.1)
    return step


def test_static_input_step_is_stationary():
    step = random_step()
    f = torch.randn(1, 8, 8, 8)
    zero = torch.zeros(1, 8, 8, 2)
    outs = [cssp_step(step, f, f, f, zero, zero) for _ in range(3)]
    assert all(torch.equal(o, outs[0]) for o in outs)


def test_first_step_duplicate_padding_equals_static_case():
    step = random_step(seed=1)
    f1 = torch.randn(1, 8, 8, 8)
    zero = torch.zeros(1, 8, 8, 2)
    out = step(f1, f1, f1, zero, zero)
    again = step(f1.clone(), f1.clone(), f1.clone(), zero.clone(), zero.clone())
    assert torch.equal(out, again)


@pytest.mark.parametrize("scheme", ["t2t1", "t2t", "t1t", "both"])
def test_schemes_run(scheme):
    step = random_step(scheme)
    f = [torch.randn(1, 8, 6, 6) for _ in range(3)]
    o = [smooth_flow(6, 6, s)[None] for s in (1, 2)]
    assert step(*f, *o).shape == (1, 8, 6, 6)


def test_without_cross_block_ignores_older_frame():
    step = random_step(use_cssb=False)
    f = [torch.randn(1, 8, 6, 6) for _ in range(4)]
    o = torch.zeros(1, 6, 6, 2)
    assert torch.equal(step(f[0], f[1], f[2], o, o), step(f[3], f[1], f[2], o, o))


def test_step_gradient_reaches_oldest_frame():
    step = random_step(seed=3)
    f2 = torch.randn(1, 8, 8, 8, requires_grad=True)
    f1, ft = torch.randn(1, 8, 8, 8), torch.randn(1, 8, 8, 8)
    o1 = smooth_flow(8, 8, 4, amp=0.4)[None]
    o2 = smooth_flow(8, 8, 5, amp=0.4)[None]
    step(f2, f1, ft, o2, o1).sum().backward()
    assert f2.grad.abs().sum() > 0
    f2.grad = None
    fd_gradcheck(lambda a: step(a, f1, ft, o2, o1), [f2], max_elems=32)


def test_step_shape_contract():
    step = random_step()
    z = torch.zeros(1, 6, 6, 2)
    with pytest.raises(ContractError):
        step(torch.randn(1, 8, 6, 6), torch.randn(1, 8, 6, 6), torch.randn(1, 8, 5, 6), z, z)


def test_step_parameter_gradients():
    step = random_step(seed=5)
    f = [torch.randn(1, 8, 4, 4, requires_grad=True) for _ in range(3)]
    z = torch.zeros(1, 4, 4, 2)
    module_gradcheck(step, [*f, z, z], max_elems=12)
