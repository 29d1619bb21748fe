import pytest
import torch
import torch.nn.functional as F

from medvsr.errors import ContractError, UnsupportedConfigError
from medvsr.model import param_count
from medvsr.reconstruction import ISSB, ISSR, Upsampler
from medvsr.resize import bicubic_up

from oracles import fd_gradcheck

pytestmark = pytest.mark.usefixtures("float64")


def test_single_branch_fusion_is_reduce_conv():
    torch.manual_seed(0)
    blk = ISSB(8, 1, 4, 2, window=4)
    f = torch.randn(1, 8, 4, 4)
    # with one branch the fused map is just the 1x1 reduction of that branch
    captured = {}
    blk.reduce.register_forward_hook(lambda m, i, o: captured.setdefault("o", o))
    blk([f])
    torch.testing.assert_close(captured["o"], F.conv2d(f, blk.reduce.weight, blk.reduce.bias))


def test_zero_branches_zero_output():
    blk = ISSB(8, 2, 4, 2, window=4)
    for m in (blk.reduce, blk.out_proj):
        torch.nn.init.zeros_(m.bias)
    torch.nn.init.zeros_(blk.proj.conv.bias)
    out = blk([torch.zeros(1, 8, 8, 8)] * 2)
    assert torch.count_nonzero(out) == 0


def test_without_cat_has_more_output_parameters():
    with_cat, without = ISSB(32, 4, 16, 4), ISSB(32, 4, 16, 4, cat=False)
    delta = param_count(without) - param_count(with_cat)
    assert delta > 0
    # direct count: inner 16 -> 32 widens in_proj, conv, gate; out_norm/out_proj stay 32 wide
    D, N, H = 32, 16, 4
    conv_dim = lambda inner: inner + 2 * N
    count = lambda inner: (D * (conv_dim(inner) + H) + conv_dim(inner) * 4 + D * inner
                           + (2 * inner if inner == 16 else inner) * 2
                           + (2 * inner if inner == 16 else inner) * D)
    assert delta == count(32) - count(16)


def test_issb_branch_shape_contract():
    blk = ISSB(8, 2, 4, 2)
    with pytest.raises(ContractError):
        blk([torch.randn(1, 8, 4, 4), torch.randn(1, 8, 4, 5)])


def test_issb_odd_width_with_cat():
    with pytest.raises(ContractError):
        ISSB(7, 1, 4, 1)


def test_depth_zero_is_mlp_residual():
    torch.manual_seed(1)
    r = ISSR(8, 2, 4, 2, window=4, depth=0)
    torch.nn.init.normal_(r.mlp.fc2.weight)
    feats = [torch.randn(1, 8, 8, 8) for _ in range(2)]
    g_hat = r.issb(feats).permute(0, 2, 3, 1)
    torch.testing.assert_close(r(feats), (r.mlp(g_hat) + g_hat).permute(0, 3, 1, 2))


def test_recon_stack_identity_at_init():
    torch.manual_seed(2)
    r = ISSR(8, 2, 4, 2, window=4, depth=3)
    feats = [torch.randn(1, 8, 8, 8) for _ in range(2)]
    g_hat = r.issb(feats).permute(0, 2, 3, 1)
    assert torch.equal(r(feats), (r.mlp(g_hat) + g_hat).permute(0, 3, 1, 2))


def test_issr_gradient():
    torch.manual_seed(3)
    r = ISSR(8, 2, 4, 2, window=4, depth=1, k=3)
    for blk in r.blocks:
        torch.nn.init.normal_(blk.pw2.weight, std=0.2)
    torch.nn.init.normal_(r.mlp.fc2.weight, std=0.2)
    feats = [torch.randn(1, 8, 8, 8, requires_grad=True) for _ in range(2)]
    r.double()
    fd_gradcheck(lambda *f: r(list(f[:2])), feats + list(r.parameters()), max_elems=16)


def test_issb_gradient():
    torch.manual_seed(4)
    blk = ISSB(8, 2, 4, 2, window=4)
    feats = [torch.randn(1, 8, 4, 4, requires_grad=True) for _ in range(2)]
    blk.double()
    fd_gradcheck(lambda *f: blk(list(f[:2])), feats + list(blk.parameters()), max_elems=16)


# -- upsampler -----------------------------------------------------------------

def test_zero_features_give_bicubic():
    up = Upsampler(8)
    lr = torch.rand(2, 3, 5, 7)
    assert torch.equal(up(torch.zeros(2, 8, 5, 7), lr), bicubic_up(lr, 4))


@pytest.mark.parametrize("hw", [(1, 1), (3, 5), (8, 8)])
def test_output_size(hw):
    out = Upsampler(4)(torch.randn(1, 4, *hw), torch.rand(1, 3, *hw))
    assert out.shape == (1, 3, 4 * hw[0], 4 * hw[1])


def test_pixel_shuffle_bijection():
    x = torch.randn(2, 16, 5, 6)
    assert torch.equal(F.pixel_unshuffle(F.pixel_shuffle(x, 2), 2), x)


def test_scale_other_than_four_rejected():
    with pytest.raises(UnsupportedConfigError):
        Upsampler(8, scale=2)


def test_clamp_only_on_request():
    up = Upsampler(4)
    torch.nn.init.constant_(up.last.bias, 2.0)
    g, lr = torch.zeros(1, 4, 3, 3), torch.rand(1, 3, 3, 3)
    assert up(g, lr).max() > 1
    assert up(g, lr, clamp=True).max() == 1
