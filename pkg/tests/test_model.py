import numpy as np
import pytest
import torch

from conftest import tiny_cfg
from oracles import expected_param_counts, rel_bias_loop, wmca_loop
from mujica.adapter import (
    ConcatConvBlock,
    CrossMapAttentionBlock,
    CrossMapFusion,
    MujicaModel,
    WindowCrossMapAttention,
)
from mujica.model import ModelConfig, ReconstructionHead, pixel_shuffle
from mujica.windows import RelativePositionBias, window_partition, window_reverse


def _numpy_params(module):
    return {k: v.detach().double().numpy() for k, v in module.state_dict().items()}


@pytest.mark.parametrize("window", [4, 8])
def test_window_roundtrip_random_shapes(window):
    g = torch.Generator().manual_seed(window)
    for _ in range(25):
        b, nh, nw, c = (int(v) for v in torch.randint(1, 4, (4,), generator=g))
        x = torch.randn(b, nh * window, nw * window, c * 3, generator=g)
        w = window_partition(x, window)
        assert w.shape == (b * nh * nw, window * window, c * 3)
        assert torch.equal(window_reverse(w, window, nh * window, nw * window), x)


def test_window_partition_order():
    x = torch.arange(16.0).view(1, 4, 4, 1)
    w = window_partition(x, 2)
    assert w[0, :, 0].tolist() == [0, 1, 4, 5]
    assert w[1, :, 0].tolist() == [2, 3, 6, 7]
    with pytest.raises(ValueError):
        window_partition(torch.zeros(1, 5, 4, 1), 2)


def test_relative_bias_matches_loop():
    rpb = RelativePositionBias(4, 3)
    got = rpb().detach().double().numpy()
    np.testing.assert_allclose(got, rel_bias_loop(rpb.table.detach().double().numpy(), 4), atol=0)


def _wmca(kinds=("basecolor", "normal"), dim=8, embed=8, heads=2, window=4, seed=0):
    torch.manual_seed(seed)
    attn = WindowCrossMapAttention(kinds[0], kinds, dim, embed, heads, window).double()
    with torch.no_grad():
        for b in attn.bias.values():
            b.table.normal_(0, 0.5)
    return attn


def test_wmca_matches_dense_loop():
    attn = _wmca()
    torch.manual_seed(1)
    xs = {k: torch.randn(3, 16, 8, dtype=torch.float64) for k in ("basecolor", "normal")}
    got = attn(xs).detach().numpy()
    params = _numpy_params(attn)
    for w in range(3):
        want = wmca_loop({k: v[w].numpy() for k, v in xs.items()}, "basecolor", params, 2, 4)
        np.testing.assert_allclose(got[w], want, atol=1e-6)


def test_wmca_rows_are_distributions():
    attn = _wmca(heads=4)
    g = torch.Generator().manual_seed(3)
    xs = {k: 3 * torch.randn(5, 16, 8, dtype=torch.float64, generator=g) for k in ("basecolor", "normal")}
    _, maps = attn(xs, return_attn=True)
    for a in maps.values():
        assert torch.all(a >= 0)
        assert torch.allclose(a.sum(-1), torch.ones((), dtype=torch.float64), atol=1e-12)


def test_wmca_is_invariant_to_input_dict_order():
    attn = _wmca()
    xs = {k: torch.randn(2, 16, 8, dtype=torch.float64) for k in ("basecolor", "normal")}
    a = attn(xs)
    b = attn(dict(reversed(list(xs.items()))))
    assert torch.equal(a, b)


def test_wmca_rejects_wrong_modalities():
    attn = _wmca()
    with pytest.raises(ValueError):
        attn({"basecolor": torch.zeros(1, 16, 8, dtype=torch.float64)})
    with pytest.raises(ValueError):
        WindowCrossMapAttention("roughness", ["basecolor", "normal"], 8, 8, 2, 4)


def test_wmca_gradcheck():
    attn = _wmca()
    xs = [torch.randn(1, 16, 8, dtype=torch.float64, requires_grad=True) for _ in range(2)]
    assert torch.autograd.gradcheck(lambda a, b: attn({"basecolor": a, "normal": b}), xs, eps=1e-6, atol=1e-7, rtol=1e-4)


def test_cab_gradcheck():
    cfg = tiny_cfg()
    torch.manual_seed(0)
    blk = CrossMapAttentionBlock("normal", cfg.fused_maps, 12, cfg).double()
    dense = torch.randn(1, 12, 4, 4, dtype=torch.float64, requires_grad=True)
    cross = torch.randn(1, 8, 4, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda d, c: blk(d, {"basecolor": c}), (dense, cross), eps=1e-6, atol=1e-7, rtol=1e-4)
    with pytest.raises(ValueError):
        blk(torch.zeros(1, 8, 4, 4, dtype=torch.float64), {"basecolor": cross})
    with pytest.raises(ValueError):
        blk(dense, {"normal": cross})


@pytest.mark.parametrize("connection", ["dc", "rc", "nrc"])
@pytest.mark.parametrize("fusion", ["wmca", "concat_conv"])
def test_fusion_gradcheck(connection, fusion):
    cfg = tiny_cfg(connection=connection, fusion=fusion)
    torch.manual_seed(0)
    fus = CrossMapFusion(cfg).double()
    if fus.alpha is not None:
        with torch.no_grad():
            for a in fus.alpha.values():
                a.fill_(0.7)
    ins = [torch.randn(1, 8, 4, 4, dtype=torch.float64, requires_grad=True) for _ in range(4)]

    def f(d0, d1, s0, s1):
        out = fus({"basecolor": d0, "normal": d1}, {"basecolor": s0, "normal": s1})
        return out["basecolor"], out["normal"]

    assert torch.autograd.gradcheck(f, ins, eps=1e-6, atol=1e-7, rtol=1e-4)


def test_dense_block_widths_and_parameter_count():
    cfg = ModelConfig(channels=32, growth=16, cabs=4)
    assert [cfg.block_input_width(l) for l in range(1, 5)] == [32, 48, 64, 80]
    model = MujicaModel(cfg)
    for m in cfg.fused_maps:
        widths = [blk.in_proj.in_channels for blk in model.adapter.fusion.blocks[m]]
        assert widths == [32, 48, 64, 80]
    want = expected_param_counts(32, 48, 6, 8, 4, 16, 3, 2)
    assert sum(p.numel() for p in model.adapter.parameters()) == want["adapter"]
    assert sum(p.numel() for p in model.sisr.parameters()) == want["sisr"]


@pytest.mark.parametrize("connection", ["dc", "rc", "nrc"])
@pytest.mark.parametrize("n_maps", [2, 3])
def test_parameter_count_across_configs(connection, n_maps):
    maps = ("basecolor", "normal", "roughness")[:n_maps]
    cfg = tiny_cfg(connection=connection, fused_maps=maps, passthrough_maps=(), cabs=3, scale=4)
    model = MujicaModel(cfg)
    want = expected_param_counts(8, 8, 2, 4, 3, 4, 1, n_maps, connection, backbone_depth=1, scale=4)
    assert sum(p.numel() for p in model.adapter.parameters()) == want["adapter"]
    assert sum(p.numel() for p in model.sisr.parameters()) == want["sisr"]


def test_concat_block_has_no_attention():
    cfg = tiny_cfg(fusion="concat_conv")
    blk = CrossMapFusion(cfg).blocks["basecolor"][0]
    assert isinstance(blk, ConcatConvBlock)
    assert not any(isinstance(m, WindowCrossMapAttention) for m in blk.modules())


def test_pixel_shuffle_layout():
    x = torch.arange(8.0).view(1, 8, 1, 1)
    y = pixel_shuffle(x, 2)
    assert y.shape == (1, 2, 2, 2)
    assert y[0, 0].flatten().tolist() == [0, 1, 2, 3]
    assert y[0, 1].flatten().tolist() == [4, 5, 6, 7]


@pytest.mark.parametrize("scale", [2, 4])
def test_head_upscales(scale):
    head = ReconstructionHead(8, scale)
    assert head(torch.zeros(1, 8, 5, 6)).shape == (1, 3, 5 * scale, 6 * scale)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=50, heads=6)
    with pytest.raises(ValueError):
        ModelConfig(scale=3)
    with pytest.raises(ValueError):
        ModelConfig(connection="skip")
    with pytest.raises(ValueError):
        ModelConfig(fused_maps=("basecolor", "roughness"), passthrough_maps=("roughness",))
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"channel": 3})
    cfg = tiny_cfg()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def _lr_maps(g, size=8, batch=1, kinds=("basecolor", "normal", "roughness")):
    return {k: torch.rand(batch, 3, size, size, generator=g) for k in kinds}


def test_identity_at_init():
    cfg = tiny_cfg()
    torch.manual_seed(0)
    model = MujicaModel(cfg)
    model.freeze_sisr()
    model.init_ffe_from_backbone()
    model.eval()
    lr = _lr_maps(torch.Generator().manual_seed(1), size=12, batch=2)
    out = model(lr)
    for k, v in lr.items():
        assert torch.allclose(out[k], model.sisr_forward(v, k), atol=1e-6)


def test_forward_shapes_padding_and_gray_projection():
    cfg = tiny_cfg()
    model = MujicaModel(cfg).eval()
    lr = _lr_maps(torch.Generator().manual_seed(2), size=7)
    out = model(lr)
    assert set(out) == {"basecolor", "normal", "roughness"}
    for v in out.values():
        assert v.shape == (1, 3, 14, 14)
        assert v.min().item() >= 0 and v.max().item() <= 1
    r = out["roughness"]
    assert torch.equal(r[:, 0], r[:, 1]) and torch.equal(r[:, 1], r[:, 2])
    with pytest.raises(ValueError):
        model({"basecolor": lr["basecolor"]})
    with pytest.raises(ValueError):
        model({"basecolor": lr["basecolor"], "normal": torch.zeros(1, 3, 8, 8)})


def test_fused_output_depends_on_other_maps():
    cfg = tiny_cfg()
    torch.manual_seed(0)
    model = MujicaModel(cfg)
    with torch.no_grad():
        for a in model.adapter.fusion.alpha.values():
            a.fill_(1.0)
    model.eval()
    g = torch.Generator().manual_seed(4)
    lr = _lr_maps(g, size=8)
    base = model(lr, clamp=False)["basecolor"]
    changed = dict(lr, normal=torch.rand(1, 3, 8, 8, generator=g))
    assert (model(changed, clamp=False)["basecolor"] - base).abs().max().item() > 1e-6


def test_map_naming_does_not_change_the_result():
    # the same weights, with fused maps listed in a different order
    torch.manual_seed(0)
    a = MujicaModel(tiny_cfg(fused_maps=("basecolor", "normal")))
    b = MujicaModel(tiny_cfg(fused_maps=("normal", "basecolor")))
    b.load_state_dict(a.state_dict())
    for m in (a, b):
        with torch.no_grad():
            for al in m.adapter.fusion.alpha.values():
                al.fill_(0.5)
        m.eval()
    lr = _lr_maps(torch.Generator().manual_seed(5))
    oa, ob = a(lr), b(lr)
    for k in oa:
        assert torch.allclose(oa[k], ob[k], atol=1e-6)
