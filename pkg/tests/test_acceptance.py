"""Acceptance criteria 1-13.

Each test records a one-line verdict; the lines are printed together at the
end of the session by the hook in conftest.py.
"""

import math
import time

import numpy as np
import pytest
import torch

from conftest import random_material, tiny_cfg
from oracles import expected_param_counts, ggx_normalization_mc, ssim_loop, wmca_loop
from mujica.adapter import CrossMapAttentionBlock, CrossMapFusion, MujicaModel, WindowCrossMapAttention
from mujica.evaluation import evaluate_model, psnr, ssim
from mujica.losses import PerceptualExtractor, total_loss
from mujica.material_io import MapKind
from mujica.model import ModelConfig
from mujica.renderer import fibonacci_hemisphere, fresnel_schlick, ndf_ggx, render_set
from mujica.synthetic import synthetic_material
from mujica.training import MaterialPairs, TrainConfig, Trainer, batch_loss, build_model, lr_at, set_to_tensors
from mujica.windows import window_partition, window_reverse

VERDICTS: dict[int, str] = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    VERDICTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, detail


def fd_relative_error(fn, leaves, eps=1e-6, seed=0):
    """Compare autograd against central differences for a random projection of ``fn``'s outputs.

    Returns ``||g_autograd - g_fd|| / ||g_fd||`` over every entry of every leaf.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        outs = fn()
    outs = outs if isinstance(outs, (tuple, list)) else (outs,)
    weights = [torch.randn(o.shape, generator=g, dtype=torch.float64) for o in outs]

    def phi():
        res = fn()
        res = res if isinstance(res, (tuple, list)) else (res,)
        return sum((r * w).sum() for r, w in zip(res, weights))

    for t in leaves:
        t.grad = None
    phi().backward()
    analytic = torch.cat([t.grad.flatten() for t in leaves])
    numeric = []
    with torch.no_grad():
        for t in leaves:
            flat = t.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = phi().item()
                flat[i] = old - eps
                down = phi().item()
                flat[i] = old
                numeric.append((up - down) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    return ((analytic - numeric).norm() / numeric.norm()).item()


def _randomise(module, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(0.3 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


# ---------------------------------------------------------------- 1


def test_c01_gradients_match_finite_differences():
    t0 = time.time()
    cfg = tiny_cfg(channels=8, embed_dim=8, heads=2, window=4)
    g = torch.Generator().manual_seed(0)
    errs = {}

    attn = _randomise(WindowCrossMapAttention("basecolor", ["basecolor", "normal"], 8, 8, 2, 4).double(), 1)
    xs = [torch.randn(1, 16, 8, generator=g, dtype=torch.float64, requires_grad=True) for _ in range(2)]
    errs["wmca"] = fd_relative_error(
        lambda: attn({"basecolor": xs[0], "normal": xs[1]}), xs + list(attn.parameters())
    )

    cab = _randomise(CrossMapAttentionBlock("normal", cfg.fused_maps, 8, cfg).double(), 2)
    dense = torch.randn(1, 8, 4, 4, generator=g, dtype=torch.float64, requires_grad=True)
    cross = torch.randn(1, 8, 4, 4, generator=g, dtype=torch.float64, requires_grad=True)
    errs["cab"] = fd_relative_error(lambda: cab(dense, {"basecolor": cross}), [dense, cross] + list(cab.parameters()))

    for conn in ("dc", "rc", "nrc"):
        fus = _randomise(CrossMapFusion(tiny_cfg(connection=conn)).double(), 3)
        ins = [torch.randn(1, 8, 4, 4, generator=g, dtype=torch.float64, requires_grad=True) for _ in range(4)]

        def run():
            out = fus({"basecolor": ins[0], "normal": ins[1]}, {"basecolor": ins[2], "normal": ins[3]})
            return out["basecolor"], out["normal"]

        errs[f"fusion_{conn}"] = fd_relative_error(run, ins + list(fus.parameters()))

    sr = {
        "basecolor": torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64),
        "normal": torch.cat(
            [torch.rand(1, 2, 4, 4, generator=g, dtype=torch.float64), 0.7 + 0.3 * torch.rand(1, 1, 4, 4, generator=g, dtype=torch.float64)], 1
        ),
        "roughness": (0.2 + 0.7 * torch.rand(1, 1, 4, 4, generator=g, dtype=torch.float64)).repeat(1, 3, 1, 1),
    }
    gt = {k: (v + 0.05 * torch.randn(v.shape, generator=g, dtype=torch.float64)).clamp(0.05, 1) for k, v in sr.items()}
    for v in sr.values():
        v.requires_grad_(True)
    ex = PerceptualExtractor.random_pyramid(seed=0).double()
    lights = fibonacci_hemisphere(1)
    errs["total_loss"] = fd_relative_error(lambda: total_loss(sr, gt, lights, ex)[0], list(sr.values()))

    elapsed = time.time() - t0
    pure = max(v for k, v in errs.items() if k != "total_loss")
    ok = pure < 1e-4 and errs["total_loss"] < 1e-3 and elapsed < 120
    verdict(1, ok, f"max rel err pure {pure:.2e} (<1e-4), through renderer {errs['total_loss']:.2e} (<1e-3), {elapsed:.0f}s")


# ---------------------------------------------------------------- 2


def test_c02_attention_rows_sum_to_one():
    g = torch.Generator().manual_seed(2)
    worst, count = 0.0, 0
    for trial in range(10):
        heads = (1, 2, 4)[trial % 3]
        window = (4, 8)[trial % 2]
        kinds = ["basecolor", "normal", "roughness"][: 2 + trial % 2]
        torch.manual_seed(trial)
        attn = WindowCrossMapAttention(kinds[0], kinds, 16, 8 * heads, heads, window)
        with torch.no_grad():
            for b in attn.bias.values():
                b.table.normal_(0, 1)
        for _ in range(100):
            scale = float(torch.empty(1).uniform_(0.1, 10, generator=g))
            xs = {k: scale * torch.randn(2, window * window, 16, generator=g) for k in kinds}
            _, maps = attn(xs, return_attn=True)
            for a in maps.values():
                worst = max(worst, (a.sum(-1) - 1).abs().max().item())
                assert a.min().item() >= 0
            count += 1
    verdict(2, count == 1000 and worst < 1e-6, f"{count} evaluations, max |row sum - 1| = {worst:.1e} (<1e-6)")


# ---------------------------------------------------------------- 3


def test_c03_identity_at_init():
    torch.manual_seed(0)
    model = MujicaModel(ModelConfig())
    model.freeze_sisr()
    model.init_ffe_from_backbone()
    model.eval()
    rng = np.random.default_rng(3)
    worst = 0.0
    with torch.no_grad():
        for _ in range(10):
            mat = random_material(rng, 16)
            lr = {k: v[None] for k, v in set_to_tensors(mat, [MapKind.BASECOLOR, MapKind.NORMAL, MapKind.ROUGHNESS]).items()}
            out = model(lr)
            for k, v in lr.items():
                worst = max(worst, (out[k.value] - model.sisr_forward(v, k)).abs().max().item())
    verdict(3, worst < 1e-5, f"max |model - frozen SISR| over 10 materials = {worst:.1e} (<1e-5)")


# ---------------------------------------------------------------- 4


def test_c04_freeze_discipline_after_200_steps():
    cfg = tiny_cfg(cabs=3)
    tcfg = TrainConfig(steps=200, batch=1, patch=8, lr0=1e-3, warmup_steps=20, warmup_batch=1, warmup_patch=16, lights_n=2)
    pairs = MaterialPairs([synthetic_material(32, seed=s) for s in (1, 2)], 2)
    model = build_model(cfg, tcfg)
    frozen = {n: p.detach().clone() for n, p in model.sisr.named_parameters()}
    start = {n: p.detach().clone() for n, p in model.adapter.named_parameters()}
    tr = Trainer(model, tcfg, pairs)
    for _ in range(200):
        tr.run_step()
    moved_frozen = [n for n, p in model.sisr.named_parameters() if not torch.equal(p, frozen[n])]

    fusion = model.adapter.fusion
    units = {}
    for m in cfg.fused_maps:
        for l, blk in enumerate(fusion.blocks[m]):
            units[f"fusion.blocks.{m}.{l}"] = blk
        for l, tr_ in enumerate(fusion.transitions[m]):
            units[f"fusion.transitions.{m}.{l}"] = tr_
        for i, blk in enumerate(model.adapter.ffe[m].blocks):
            units[f"ffe.{m}.blocks.{i}"] = blk
    params = dict(model.adapter.named_parameters())
    stale = []
    for name, unit in units.items():
        if all(torch.equal(p, start[f"{name}.{n}"]) for n, p in unit.named_parameters()):
            stale.append(name)
    for m in cfg.fused_maps:
        if torch.equal(params[f"fusion.alpha.{m}"], start[f"fusion.alpha.{m}"]):
            stale.append(f"alpha.{m}")
    ok = not moved_frozen and not stale
    verdict(4, ok, f"{len(frozen)} frozen tensors bit-identical: {not moved_frozen}; {len(units) + 2} adapter units all changed: {not stale} {stale or ''}")


# ---------------------------------------------------------------- 5


def test_c05_dense_channel_law_and_parameter_count():
    cfg = ModelConfig(channels=32, growth=16, cabs=4)
    model = MujicaModel(cfg)
    widths = {m: [b.in_proj.in_channels for b in model.adapter.fusion.blocks[m]] for m in cfg.fused_maps}
    want = expected_param_counts(32, 48, 6, 8, 4, 16, 3, 2)
    got = {"adapter": sum(p.numel() for p in model.adapter.parameters()), "sisr": sum(p.numel() for p in model.sisr.parameters())}
    ok = all(w == [32, 48, 64, 80] for w in widths.values()) and [cfg.block_input_width(l) for l in range(1, 5)] == [32, 48, 64, 80]
    ok = ok and got == {k: want[k] for k in got} and want["widths"] == [32, 48, 64, 80]
    verdict(5, ok, f"widths {widths['basecolor']}, params {got} vs closed form adapter={want['adapter']} sisr={want['sisr']}")


# ---------------------------------------------------------------- 6


def test_c06_wmca_matches_loop_oracle():
    worst = 0.0
    for seed in range(3):
        torch.manual_seed(seed)
        attn = WindowCrossMapAttention("normal", ["basecolor", "normal"], 8, 12, 3, 4).double()
        with torch.no_grad():
            for b in attn.bias.values():
                b.table.normal_(0, 0.5)
        xs = {k: torch.randn(2, 16, 8, dtype=torch.float64) for k in ("basecolor", "normal")}
        got = attn(xs).detach().numpy()
        params = {k: v.detach().double().numpy() for k, v in attn.state_dict().items()}
        for w in range(2):
            want = wmca_loop({k: v[w].numpy() for k, v in xs.items()}, "normal", params, 3, 4)
            worst = max(worst, float(np.abs(got[w] - want).max()))
    verdict(6, worst < 1e-6, f"max |wmca - loop| = {worst:.1e} (<1e-6)")


# ---------------------------------------------------------------- 7


def test_c07_renderer_properties():
    ints = []
    rng = np.random.default_rng(7)
    for r in (0.3, 0.6, 1.0):
        cos_t = torch.as_tensor(rng.random(1_000_000))
        ints.append(float((ndf_ggx(cos_t, r) * cos_t).mean()) * 2 * math.pi)
    oracle = [ggx_normalization_mc(r, seed=11) for r in (0.3, 0.6, 1.0)]
    f0 = torch.tensor([0.04, 0.5, 0.91], dtype=torch.float64)
    fres = torch.equal(fresnel_schlick(torch.tensor(1.0, dtype=torch.float64), f0), f0) and torch.equal(
        fresnel_schlick(torch.tensor(0.0, dtype=torch.float64), f0), torch.ones(3, dtype=torch.float64)
    )
    mat = random_material(np.random.default_rng(8), 16, metallic=True)
    twin = mat.replace(**{k.value: mat[k].pixels.copy() for k in mat.kinds()})
    lights = fibonacci_hemisphere(6)
    same = all(np.array_equal(a, b) for a, b in zip(render_set(mat, lights), render_set(twin, lights)))
    ok = all(0.98 <= v <= 1.02 for v in ints + oracle) and fres and same
    verdict(7, ok, f"GGX integrals {[round(v, 4) for v in ints]} (oracle {[round(v, 4) for v in oracle]}), Fresnel exact {fres}, identical renders {same}")


# ---------------------------------------------------------------- 8


def test_c08_window_roundtrip():
    g = torch.Generator().manual_seed(8)
    exact = 0
    for i in range(50):
        s = (4, 8)[i % 2]
        b, nh, nw, c = (int(v) for v in torch.randint(1, 5, (4,), generator=g))
        x = torch.randn(b, nh * s, nw * s, 3 * c, generator=g)
        exact += torch.equal(window_reverse(window_partition(x, s), s, nh * s, nw * s), x)
    verdict(8, exact == 50, f"{exact}/50 shapes bit-exact")


# ---------------------------------------------------------------- 9

OVERFIT_TRAIN = dict(steps=300, batch=1, patch=64, lr0=3e-3, warmup_steps=300)


@pytest.mark.slow
def test_c09_overfit_one_material():
    t0 = time.time()
    mat = synthetic_material(128, seed=3)  # a single 64x64 LR crop at x2
    pairs = MaterialPairs([mat], 2)
    tcfg = TrainConfig(**OVERFIT_TRAIN)
    model = build_model(ModelConfig(), tcfg, pairs)
    tr = Trainer(model, tcfg, pairs)
    lr_maps, hr_maps = pairs.batch(0, 1, 64, tcfg.seed)
    with torch.no_grad():
        initial = batch_loss(model, lr_maps, hr_maps, tr.lights, tr.extractor)[1].total
    for _ in range(tcfg.steps):
        tr.run_step()
    with torch.no_grad():
        final = batch_loss(model, lr_maps, hr_maps, tr.lights, tr.extractor)[1].total
    report, _ = evaluate_model(model, [mat], fibonacci_hemisphere(6))[0]
    gain = report.deltas["render_psnr"]
    elapsed = time.time() - t0
    ratio = final / initial
    ok = ratio < 0.25 and gain >= 0.5 and elapsed <= 15 * 60
    verdict(
        9,
        ok,
        f"loss {initial:.4f} -> {final:.4f} (ratio {ratio:.3f}, need <0.25); render PSNR "
        f"{report.render['psnr_mean']:.2f} vs bicubic {report.baseline['render']['psnr_mean']:.2f} dB "
        f"(+{gain:.2f}, need >=0.5); {elapsed:.0f}s",
    )


# ---------------------------------------------------------------- 10


def test_c10_cross_map_information_flow():
    cfg = tiny_cfg()
    tcfg = TrainConfig(steps=20, batch=1, patch=8, lr0=1e-3, warmup_steps=10, warmup_batch=1, warmup_patch=16, lights_n=2)
    pairs = MaterialPairs([synthetic_material(32, seed=4)], 2)
    model = build_model(cfg, tcfg)
    tr = Trainer(model, tcfg, pairs)
    for _ in range(tcfg.steps):
        tr.run_step()
    model.eval()
    lr = {k: v[None] for k, v in set_to_tensors(random_material(np.random.default_rng(10), 16), cfg.fused_kinds).items()}
    with torch.no_grad():
        shallow, deep = {}, {}
        for k, v in lr.items():
            shallow[k.value], deep[k.value] = model.sisr.features(v)
        base = model.adapter.fusion(deep, shallow)
        diffs = {}
        for n in cfg.fused_maps:
            cut = dict(deep, **{n: torch.zeros_like(deep[n])})
            out = model.adapter.fusion(cut, shallow)
            for m in cfg.fused_maps:
                if m != n:
                    diffs[f"{n}->{m}"] = (out[m] - base[m]).abs().max().item()
    ok = all(d > 1e-6 for d in diffs.values())
    verdict(10, ok, "max |change| when zeroing a modality: " + ", ".join(f"{k} {v:.2e}" for k, v in diffs.items()))


# ---------------------------------------------------------------- 11


def _finite(obj) -> bool:
    if isinstance(obj, dict):
        return all(_finite(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return all(_finite(v) for v in obj)
    if isinstance(obj, float):
        return math.isfinite(obj)
    return True


def test_c11_ablation_smoke():
    combos = {"a": (("basecolor", "normal"), ("roughness",)), "b": (("basecolor", "normal", "roughness"), ())}
    pairs = MaterialPairs([synthetic_material(32, seed=11)], 2)
    eval_mat = synthetic_material(32, seed=12)
    tcfg = TrainConfig(steps=50, batch=1, patch=8, lr0=1e-3, warmup_steps=5, warmup_batch=1, warmup_patch=16, lights_n=2)
    bad = []
    runs = 0
    for conn in ("dc", "rc", "nrc"):
        for fusion in ("wmca", "concat_conv"):
            for name, (fused, passthrough) in combos.items():
                cfg = tiny_cfg(connection=conn, fusion=fusion, fused_maps=fused, passthrough_maps=passthrough)
                model = build_model(cfg, tcfg)
                tr = Trainer(model, tcfg, pairs)
                losses = [tr.run_step()[1].total for _ in range(tcfg.steps)]
                report, sr = evaluate_model(model, [eval_mat], fibonacci_hemisphere(3))[0]
                finite = all(math.isfinite(v) for v in losses) and _finite(report.to_dict())
                finite = finite and all(np.isfinite(sr[k].pixels).all() for k in sr.kinds())
                runs += 1
                if not finite:
                    bad.append(f"{conn}/{fusion}/{name}")
    verdict(11, runs == 12 and not bad, f"{runs} configurations trained 50 steps and evaluated; non-finite: {bad or 'none'}")


# ---------------------------------------------------------------- 12


def test_c12_metric_oracles():
    rng = np.random.default_rng(12)
    worst = 0.0
    for shape in ((16, 16, 3), (13, 20), (24, 12, 3)):
        a = rng.random(shape)
        b = np.clip(a + 0.15 * rng.standard_normal(shape), 0, 1)
        worst = max(worst, abs(ssim(a, b) - ssim_loop(a, b)))
    gt = np.full((8, 8, 3), 0.4)
    gains = [psnr(gt + e / 2, gt) - psnr(gt + e, gt) for e in (0.2, 0.05, 0.004)]
    ok = worst < 1e-6 and all(abs(g - 6.0206) < 1e-4 for g in gains)
    verdict(12, ok, f"max |ssim - loop| = {worst:.1e} (<1e-6); PSNR gain per halved error {[round(g, 5) for g in gains]}")


# ---------------------------------------------------------------- 13


def test_c13_schedule_plateaus():
    lr0, total = 2e-4, 1000
    plateaus = [(0, 349), (350, 599), (600, 749), (750, 899), (900, 999)]
    seen = []
    for lo, hi in plateaus:
        vals = {lr_at(s, total, lr0) for s in range(lo, hi + 1)}
        seen.append(vals)
    want = [lr0 * f for f in (1, 1 / 2, 1 / 4, 1 / 8, 1 / 16)]
    ok = all(v == {w} for v, w in zip(seen, want))
    verdict(13, ok, f"plateau values {[sorted(v) for v in seen]}")
