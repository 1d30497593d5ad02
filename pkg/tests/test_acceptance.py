"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed with ``-s`` and repeated in the
terminal summary). The trained-model checks share session fixtures, so the
whole module takes several minutes on one CPU core.
"""

import inspect
import math
import time

import numpy as np
import pytest
import torch
from conftest import record

from diffusam import cli, schedule, sfuda, volumetric
from diffusam.backbone import BackboneSpec, MockBackbone, threshold_mask
from diffusam.cli import generated_vs_truth
from diffusam.config import ExperimentConfig
from diffusam.data import VolumeRecord, generate_synthetic_dataset, make_split, shift_domain, write_volume_store
from diffusam.metrics import cluster_diagnostic, dice, evaluate
from diffusam.network import ConditionalUNet, DenoiserArch, count_parameters
from diffusam.prior import build_training_set, combined_loss, load_params, prior_loss, save_params, seg_loss, train
from diffusam.schedule import SamplerConfig, add_noise, make_schedule, posterior_sample_full, sample
from diffusam.sfuda import SfudaRun, feature_affinity, run_sfuda
from diffusam.volumetric import segment_volume

pytestmark = pytest.mark.acceptance

CFG = ExperimentConfig()
NOISY_SIGMA = 0.2
NOISY_SEEDS = (0, 1, 2)


def _source(cfg):
    return generate_synthetic_dataset(
        cfg.n_volumes, cfg.slices_per_volume, (cfg.height, cfg.width), cfg.k_classes, seed=cfg.seed, noise_std=cfg.noise_std
    )


def _target(cfg, scale=None, offset=None, noise=None):
    raw = generate_synthetic_dataset(
        cfg.n_target_volumes, cfg.slices_per_volume, (cfg.height, cfg.width), cfg.k_classes,
        seed=cfg.seed + 7919, noise_std=cfg.noise_std, prefix="tgt",
    )
    return shift_domain(
        raw,
        cfg.shift_scale if scale is None else scale,
        cfg.shift_offset if offset is None else offset,
        cfg.shift_noise if noise is None else noise,
        seed=cfg.seed,
    )


@pytest.fixture(scope="session")
def toy():
    vols = _source(CFG)
    split = make_split([v.volume_id for v in vols], CFG.split_fraction, CFG.split_seed)
    train_vols = [v for v in vols if v.volume_id in split.train_volume_ids]
    test_vols = [v for v in vols if v.volume_id in split.test_volume_ids]
    return vols, train_vols, test_vols


@pytest.fixture(scope="session")
def trained(toy):
    """Default-config prior; cluster gaps on held-out slices are logged during training."""
    _, train_vols, test_vols = toy
    torch.set_num_threads(1)
    bb, sched, sampler = CFG.make_backbone(), CFG.make_schedule(), CFG.sampler_config()
    examples = build_training_set(train_vols, bb)
    gaps = {}

    def checkpoint(it, net):
        gen, truth = generated_vs_truth(net, test_vols, bb, sched, sampler, CFG.seed)
        gaps[it] = cluster_diagnostic(gen, truth).gaps

    start = time.perf_counter()
    net, history = train(examples, bb, CFG.train_config(), arch=CFG.arch(), callback=checkpoint, callback_every=CFG.iterations // 4)
    elapsed = time.perf_counter() - start
    return net, history, gaps, elapsed


@pytest.fixture(scope="session")
def params_file(trained, tmp_path_factory):
    path = tmp_path_factory.mktemp("prior") / "params.bin"
    save_params(trained[0], path, {"config_hash": CFG.config_hash()})
    return path


# ---------------------------------------------------------------------------


def test_criterion_1_schedule():
    s = make_schedule(1000, 0.008)
    rel = abs(s.ab(1000) - 0.992**1000) / 0.992**1000
    decreasing = bool(np.all(np.diff(s.alpha_bar) < 0))
    n, x0 = 10_000, 0.7
    worst = 0.0
    for t in (1, 10, 100, 500, 900, 1000):
        eps = torch.randn(n, generator=torch.Generator().manual_seed(t), dtype=torch.float64)
        xt = add_noise(torch.full((n,), x0, dtype=torch.float64), t, eps, s)
        ab = s.ab(t)
        z_mean = abs(xt.mean().item() - math.sqrt(ab) * x0) / math.sqrt((1 - ab) / n)
        z_var = abs(xt.var().item() - (1 - ab)) / ((1 - ab) * math.sqrt(2 / (n - 1)))
        worst = max(worst, z_mean, z_var)
    ok = rel <= 1e-9 and decreasing and worst < 3
    record(1, ok, f"alpha_bar_1000 rel err {rel:.1e}, decreasing={decreasing}, worst marginal deviation {worst:.2f} SE")
    assert ok


def test_criterion_2_oracle_sampler():
    sched = make_schedule()
    target = torch.randn(8, 16, 16, generator=torch.Generator().manual_seed(0))

    def oracle(x, t, z, label):
        return target.expand_as(x).clone()

    exact = all(
        torch.equal(sample(oracle, torch.zeros(8, 16, 16), 1, SamplerConfig(k), sched, seed, shape=(8, 16, 16)), target)
        for k in (1, 2, 8)
        for seed in (0, 1, 2)
    )
    full_err = (posterior_sample_full(oracle, torch.zeros(8, 16, 16), 1, sched, 0, shape=(8, 16, 16)) - target).abs().max().item()
    ok = exact and full_err <= 1e-3
    record(2, ok, f"truncated k=1,2,8 exact={exact}, full ancestral max err {full_err:.1e}")
    assert ok


def test_criterion_3_backbone_inversion():
    bb = MockBackbone()
    rng = np.random.default_rng(123)
    z_img = bb.encode_image(rng.random((32, 32)).astype(np.float32))

    def round_trip(mask, z):
        return threshold_mask(bb.decode_mask(bb.memory_attention(bb.encode_memory(mask, z)), z))

    aligned_exact = all(
        np.array_equal(round_trip(m, z_img), m)
        for m in (np.kron(rng.integers(0, 5, (16, 16)), np.ones((2, 2), np.int64)).astype(np.uint8) for _ in range(100))
    )
    vols = generate_synthetic_dataset(12, 9, (32, 32), 4, seed=77)
    pairs = [(v.masks[i], v.slices[i]) for v in vols for i in range(v.n_slices)][:100]
    per_class = {k: [] for k in range(1, 5)}
    for mask, img in pairs:
        out = round_trip(mask, bb.encode_image(img))
        for k in per_class:
            per_class[k].append(dice(out, mask, k))
    means = {k: float(np.mean(v)) for k, v in per_class.items()}
    ok = aligned_exact and min(means.values()) >= 0.99
    record(3, ok, f"block-aligned exact={aligned_exact}, per-class Dice over 100 organ masks {', '.join(f'{k}:{d:.4f}' for k, d in means.items())}")
    assert ok


def test_criterion_4_end_to_end_training(trained, toy):
    net, history, _, elapsed = trained
    _, _, test_vols = toy
    bb = CFG.make_backbone()
    segs = {
        v.volume_id: segment_volume(v, net, bb, CFG.make_schedule(), SamplerConfig(k_steps=2), seed=CFG.seed, use_adjacency=True).masks
        for v in test_vols
    }
    report = evaluate(segs, test_vols, list(range(1, CFG.k_classes + 1)))
    first, last = history.smoothed_prior()
    drop = 1 - last / first
    ok = report.mean >= 0.90 and drop >= 0.5 and elapsed < 1800 and CFG.iterations <= 7800
    record(
        4, ok,
        f"held-out Dice {report.mean:.4f} on {len(test_vols)} volumes (k=2, with fusion), smoothed L_prior {first:.4f}->{last:.4f} "
        f"({drop:.0%} drop), {CFG.iterations} iterations in {elapsed:.0f}s, {count_parameters(net)} params",
    )
    assert ok


def _noisy_run(seed, train_vols, test_vols, root):
    cfg = CFG.replace(seed=seed, target_noise=NOISY_SIGMA, lambda_seg=0.0)
    bb, sched, sampler = cfg.make_backbone(), cfg.make_schedule(), cfg.sampler_config()
    net, _ = train(build_training_set(train_vols, bb), bb, cfg.train_config(), arch=cfg.arch())
    params = root / f"noisy_{seed}.bin"
    save_params(net, params)
    out = {}
    for adj in (False, True):
        segs = {v.volume_id: segment_volume(v, net, bb, sched, sampler, seed=seed, use_adjacency=adj).masks for v in test_vols}
        out[("few-shot", adj)] = evaluate(segs, test_vols, list(range(1, cfg.k_classes + 1))).mean
        run = SfudaRun(params, root / "target", source_stores=[root / "source"])
        out[("sf-uda", adj)] = run_sfuda(run, bb, sched, sampler, seed=seed, use_adjacency=adj).report.mean
    return out


def test_criterion_5_ablation_direction(toy, tmp_path_factory):
    vols, train_vols, test_vols = toy
    root = tmp_path_factory.mktemp("noisy")
    write_volume_store(vols, root / "source")
    write_volume_store(_target(CFG), root / "target")
    rows, ok = [], True
    for seed in NOISY_SEEDS:
        r = _noisy_run(seed, train_vols, test_vols, root)
        for setting in ("few-shot", "sf-uda"):
            flat, fused = r[(setting, False)], r[(setting, True)]
            ok &= fused >= flat
            rows.append(f"seed{seed} {setting} {flat:.4f}->{fused:.4f}")
    record(5, ok, f"noisy prior (sigma={NOISY_SIGMA}) Dice no-3D->3D: " + "; ".join(rows))
    assert ok


def test_criterion_6_sfuda(params_file, toy, tmp_path_factory):
    vols, train_vols, test_vols = toy
    root = tmp_path_factory.mktemp("sfuda")
    write_volume_store(vols, root / "source")
    write_volume_store(_target(CFG), root / "target")
    bb, sched, sampler = CFG.make_backbone(), CFG.make_schedule(), CFG.sampler_config()
    res = run_sfuda(SfudaRun(params_file, root / "target", source_stores=[root / "source"]), bb, sched, sampler, seed=CFG.seed)
    src_root = str((root / "source").resolve())
    audit_clean = not [p for p in res.access_log if p.startswith(src_root)]
    hash_same = res.params_hash_before == res.params_hash_after

    # identity shift: held-out source volumes served as a target store
    identity = [
        VolumeRecord(v.volume_id, v.slices, v.masks, domain_tag="target", spacing=v.spacing, k_classes=v.k_classes) for v in test_vols
    ]
    write_volume_store(identity, root / "identity")
    ident = run_sfuda(SfudaRun(params_file, root / "identity", source_stores=[root / "source"]), bb, sched, sampler, seed=CFG.seed)
    net = load_params(params_file)
    segs = {v.volume_id: segment_volume(v, net, bb, sched, sampler, seed=CFG.seed).masks for v in test_vols}
    in_domain = evaluate(segs, test_vols, list(range(1, CFG.k_classes + 1))).mean
    gap = abs(ident.report.mean - in_domain)
    affinity = feature_affinity(train_vols, _target(CFG), bb)["holds"]
    ok = audit_clean and hash_same and res.report.mean >= 0.75 and gap <= 0.02 and affinity
    record(
        6, ok,
        f"shifted-target Dice {res.report.mean:.4f}, source-free audit clean={audit_clean} ({len(res.access_log)} files), "
        f"params unchanged={hash_same}, identity-shift gap {gap:.4f}, feature affinity holds={affinity}",
    )
    assert ok


def test_criterion_7_cluster_convergence(trained):
    _, _, gaps, _ = trained
    first, last = min(gaps), max(gaps)
    ratios = {c: gaps[last][c] / gaps[first][c] for c in gaps[first]}
    ok = bool(ratios) and all(r <= 0.2 for r in ratios.values())
    record(
        7, ok,
        f"centroid gap ratio (iteration {last} / {first}) per class: " + ", ".join(f"{c}:{r:.3f}" for c, r in sorted(ratios.items())),
    )
    assert ok


def _grad_check(which):
    spec = BackboneSpec(c_img=2, c_mem=3, h=8, w=8, H=16, W=16, k=2)
    bb = MockBackbone(spec, seed=1)
    arch = DenoiserArch(c_mem=3, c_img=2, h=8, w=8, k_classes=2, base_width=2, levels=1, emb_dim=4)
    torch.manual_seed(0)
    net = ConditionalUNet(arch).double()
    ex = build_training_set(generate_synthetic_dataset(1, 3, (16, 16), 2, seed=0), bb)[:3]
    g = torch.Generator().manual_seed(1)
    z_img = torch.stack([e.z_img for e in ex]).double()
    x0 = torch.stack([e.z_mem_target for e in ex]).double()
    t = torch.randint(1, 1001, (3,), generator=g)
    x_t = add_noise(x0, t, torch.randn(x0.shape, generator=g, dtype=torch.float64), make_schedule())
    labels = torch.tensor([e.label for e in ex])
    truth = np.stack([e.truth for e in ex])

    def loss_fn():
        pred = net(x_t, t, z_img, labels)
        lp = prior_loss(pred, x0)
        if which == "prior":
            return lp
        return combined_loss(lp, seg_loss(bb.decode_mask(bb.memory_attention(pred), z_img), truth), CFG.train_config())

    params = list(net.parameters())
    net.zero_grad()
    loss_fn().backward()
    grad = torch.cat([p.grad.reshape(-1) for p in params])
    flat = torch.nn.utils.parameters_to_vector(params).detach()
    worst, h = 0.0, 1e-6
    for _ in range(10):
        v = torch.randn(flat.shape, generator=g, dtype=torch.float64)
        v /= v.norm()
        with torch.no_grad():
            torch.nn.utils.vector_to_parameters(flat + h * v, params)
            up = loss_fn().item()
            torch.nn.utils.vector_to_parameters(flat - h * v, params)
            down = loss_fn().item()
            torch.nn.utils.vector_to_parameters(flat, params)
        numeric, analytic = (up - down) / (2 * h), float(grad @ v)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    return worst, count_parameters(net)


def test_criterion_8_gradient_check():
    wp, n = _grad_check("prior")
    wc, _ = _grad_check("combined")
    ok = n <= 1000 and max(wp, wc) <= 1e-3
    record(8, ok, f"probe net {n} params, worst relative error over 10 directions: L_prior {wp:.1e}, combined {wc:.1e}")
    assert ok


def test_criterion_9_determinism(tmp_path):
    tiny = ["--set", "iterations=30", "--set", "n_volumes=4", "--set", "slices_per_volume=5", "--set", "n_target_volumes=2", "--deterministic"]
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        common = ["--out", str(out), *tiny]
        for cmd in ("gen-data", "train", "infer", "eval", "sfuda"):
            assert cli.main([cmd, *common]) == 0
        outputs.append(out)
    files = [
        "params.bin", "loss.csv", "dice_report.csv", "sfuda_report.csv", "run_manifest.json", "train_manifest.json", "sfuda_manifest.json",
    ]
    masks = sorted(p.relative_to(outputs[0]) for p in outputs[0].glob("*pred_store/*/mask_*.u8"))
    same = {f: (outputs[0] / f).read_bytes() == (outputs[1] / f).read_bytes() for f in [*files, *map(str, masks)]}
    ok = all(same.values()) and len(masks) > 0
    record(9, ok, f"{sum(same.values())}/{len(same)} artifacts bit-identical across two runs (params, losses, reports, {len(masks)} mask files)")
    assert ok


PROMPT_WORDS = ("prompt", "point", "box", "click", "scribble", "bbox")


def test_criterion_10_prompt_free():
    surfaces = [
        sample, posterior_sample_full, volumetric.sample_slice_memories, volumetric.segment_volume, volumetric.segment_volumes,
        sfuda.run_sfuda, sfuda.generate_pseudo_memories, ConditionalUNet.forward, MockBackbone.encode_image,
        MockBackbone.encode_memory, MockBackbone.memory_attention, MockBackbone.decode_mask, schedule.select_timesteps,
    ]
    offending = [
        f"{fn.__qualname__}({p})" for fn in surfaces for p in inspect.signature(fn).parameters if any(w in p.lower() for w in PROMPT_WORDS)
    ]
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    options = [s for name, p in sub.choices.items() for a in p._actions for s in a.option_strings]
    offending += [o for o in options if any(w in o.lower() for w in PROMPT_WORDS)]
    fields = [f for f in ExperimentConfig().to_dict() if any(w in f.lower() for w in PROMPT_WORDS)]
    offending += fields
    ok = not offending and len(options) > 0
    record(10, ok, f"checked {len(surfaces)} inference signatures, {len(options)} CLI options in {len(sub.choices)} subcommands, config keys; offending: {offending or 'none'}")
    assert ok
