"""Unit tests for the encoder, bins head, pipeline and depth export"""
import struct

import pytest
import torch

from src.common.config import build_experiment_config
from src.common.errors import ShapeMismatchError
from src.depthnet.bins import (
    BinsHead,
    BinsPrediction,
    NonNormalizedProbsError,
    bins_to_depth,
)
from src.depthnet.encoder import Encoder, encode
from src.depthnet.export import depth_to_pgm_bytes, save_pgm
from src.depthnet.pipeline import baseline_forward, build_pipeline, decode_depth


def test_encoder_scales_128():
    """128x128 input gives 32@32, 64@16, 128@8 and 256@4"""
    feats = encode(Encoder(), torch.rand(1, 3, 128, 128))
    assert feats.f1.shape == (1, 32, 32, 32)
    assert feats.f2.shape == (1, 64, 16, 16)
    assert feats.f3.shape == (1, 128, 8, 8)
    assert feats.f4.shape == (1, 256, 4, 4)


def test_encoder_unbatched_and_deterministic():
    """Identical images give identical features"""
    encoder = Encoder((4, 8, 16, 32))
    image = torch.rand(3, 32, 32)
    a, b = encode(encoder, image), encode(encoder, image.clone())
    assert a.f4.shape == (32, 1, 1)
    for level in (1, 2, 3, 4):
        assert torch.equal(a.level(level), b.level(level))


def test_encoder_rejects_indivisible_dims():
    """Image sides must be multiples of 32"""
    with pytest.raises(ShapeMismatchError):
        encode(Encoder((4, 8, 16, 32)), torch.rand(3, 48, 32))
    with pytest.raises(ShapeMismatchError):
        encode(Encoder((4, 8, 16, 32)), torch.rand(1, 1, 32, 32))


def test_bins_expectation_examples():
    """Expected depth under the bin distribution"""
    two = BinsPrediction(torch.tensor([2.0, 4.0]), torch.tensor([0.25, 0.75]).view(2, 1, 1))
    assert bins_to_depth(two).values.item() == pytest.approx(3.5)

    centers = torch.arange(1.0, 10.0)
    uniform = BinsPrediction(centers, torch.full((9, 2, 2), 1 / 9))
    assert torch.allclose(bins_to_depth(uniform).values, torch.full((1, 1, 2, 2), 5.0))

    one_hot = torch.zeros(9, 1, 1)
    one_hot[6] = 1.0
    assert bins_to_depth(BinsPrediction(centers, one_hot)).values.item() == 7.0


def test_bins_clamp_and_normalization():
    """Output is clamped; probabilities must sum to one"""
    far = BinsPrediction(torch.tensor([90.0, 100.0]), torch.tensor([0.5, 0.5]).view(2, 1, 1))
    assert bins_to_depth(far).values.item() == 80.0
    bad = BinsPrediction(torch.tensor([1.0, 2.0]), torch.tensor([0.5, 0.6]).view(2, 1, 1))
    with pytest.raises(NonNormalizedProbsError):
        bins_to_depth(bad)
    with pytest.raises(ShapeMismatchError):
        bins_to_depth(BinsPrediction(torch.tensor([1.0, 2.0, 3.0]), torch.ones(2, 1, 1) / 2))


def test_bins_head_centers_monotone_and_adaptive():
    """Centers increase, stay in range and depend on the pooled feature"""
    torch.manual_seed(0)
    head = BinsHead(in_channels=8, global_channels=16, bins=12, hidden=16)
    near, far = torch.zeros(1, 16, 2, 2), torch.full((1, 16, 2, 2), 3.0)
    for feature in (near, far):
        centers = head.centers(feature)
        assert bool((centers[:, 1:] > centers[:, :-1]).all())
        assert float(centers.min()) >= 0.5 and float(centers.max()) <= 80.0
    assert not torch.allclose(head.centers(near), head.centers(far))

    pred = head(torch.randn(1, 8, 4, 4), near)
    assert pred.probs.shape == (1, 12, 4, 4)
    assert bool(((pred.probs.sum(dim=1) - 1).abs() < 1e-5).all())


def test_pipeline_depth_shape_and_bounds(tiny_pipeline):
    """Depth comes back at full resolution inside [d_min, d_max]"""
    image = torch.rand(2, 3, 32, 32) * 4 - 1
    with torch.no_grad():
        depth = baseline_forward(tiny_pipeline, image).values
    assert depth.shape == (2, 1, 32, 32)
    assert float(depth.min()) >= 0.5 and float(depth.max()) <= 80.0


def test_baseline_equals_decode_of_encoder_features(tiny_pipeline, tiny_item):
    """Baseline is decode_depth on unrestored features, and steps=0 inference matches it"""
    image = tiny_item["image"].unsqueeze(0)
    with torch.no_grad():
        feats = tiny_pipeline.encode(image)
        direct = decode_depth(tiny_pipeline, feats.f3, feats.f4, feats.f1, feats.f2)
        base = tiny_pipeline.baseline_forward(image)
        zero_steps, trace = tiny_pipeline.infer(image, steps=0)
        again = tiny_pipeline.baseline_forward(image)
    assert torch.equal(direct.values, base.values)
    assert torch.equal(zero_steps.values, base.values)
    assert torch.equal(base.values, again.values)
    assert trace is None


def test_infer_returns_trace(tiny_pipeline, tiny_item):
    """Full inference records steps+1 restored states"""
    image = tiny_item["image"].unsqueeze(0)
    with torch.no_grad():
        depth, trace = tiny_pipeline.infer(image, steps=3, seed=1)
    assert depth.values.shape == (1, 1, 32, 32)
    assert trace.steps == [3, 2, 1, 0]


def test_decode_rejects_mismatched_skips(tiny_pipeline, tiny_item):
    """Skip features must sit at 2x and 4x the merged resolution"""
    feats = tiny_pipeline.encode(tiny_item["image"].unsqueeze(0))
    with pytest.raises(ShapeMismatchError):
        tiny_pipeline.decode_depth(feats.f3, feats.f4, feats.f2, feats.f2)


def test_decoder_variant_changes_only_the_block(tiny_config):
    """Swapping the decoder renames one component and keeps the others' parameter names"""
    names = {}
    for variant in ("inv", "conv", "tf"):
        config = tiny_config.model_copy(
            update={"model": tiny_config.model.model_copy(update={"decoder": variant})}
        )
        pipeline = build_pipeline(config)
        names[variant] = {n for n in dict(pipeline.named_parameters()) if not n.startswith(pipeline.block_name)}
        assert pipeline.stage_prefixes("diffusion") == ["diffusion", pipeline.block_name]
    assert names["inv"] == names["conv"] == names["tf"]


def test_stage_prefixes(tiny_pipeline):
    """Stages own disjoint components; full AV-LFE training owns everything"""
    assert tiny_pipeline.stage_prefixes("pretrain") == ["encoder", "invdec", "tail", "bins"]
    assert tiny_pipeline.stage_prefixes("avlfe") == ["avlfe"]
    assert tiny_pipeline.stage_prefixes("avlfe", "full") == [""]
    with pytest.raises(ValueError):
        tiny_pipeline.stage_prefixes("finetune")


def test_avlfe_off_is_plug_and_play(tiny_config, tiny_item):
    """With AV-LFE off the pipeline matches one built without the module, bit for bit"""
    with_module = build_pipeline(tiny_config, with_avlfe=True)
    without = build_pipeline(tiny_config, with_avlfe=False)
    shared = dict(without.named_parameters())
    for name, param in with_module.named_parameters():
        if name.startswith("avlfe"):
            continue
        assert torch.equal(param, shared[name])

    image = tiny_item["image"].unsqueeze(0)
    aux = tiny_item["aux_image"].unsqueeze(0)
    with torch.no_grad():
        a, _ = with_module.infer(image, aux, steps=2, seed=0)
        b, _ = without.infer(image, None, steps=2, seed=0)
    assert torch.equal(a.values, b.values)


def test_fresh_avlfe_compatible_passes_through(tiny_config, tiny_item):
    """Zero-initialized fusion leaves the depth unchanged in compatible mode"""
    pipeline = build_pipeline(tiny_config)
    image = tiny_item["image"].unsqueeze(0)
    aux = tiny_item["aux_image"].unsqueeze(0)
    with torch.no_grad():
        off = pipeline.baseline_forward(image, aux)
        pipeline.set_avlfe_mode("compatible")
        on = pipeline.baseline_forward(image, aux)
    assert torch.allclose(off.values, on.values, atol=1e-6)


def test_pgm_export(tmp_path):
    """Depth is stored as big-endian round(depth * 256), clamped to 65535"""
    depth = torch.tensor([[1.0, 2.5], [0.5, 300.0]])
    data = depth_to_pgm_bytes(depth)
    header = b"P5\n2 2\n65535\n"
    assert data.startswith(header)
    assert struct.unpack(">4H", data[len(header):]) == (256, 640, 128, 65535)

    path = tmp_path / "out" / "depth.pgm"
    save_pgm(depth.view(1, 1, 2, 2), path)
    assert path.read_bytes() == data


def test_build_pipeline_is_seeded(tiny_config):
    """Same config seed gives identical initial parameters"""
    a = dict(build_pipeline(tiny_config).named_parameters())
    b = dict(build_pipeline(tiny_config).named_parameters())
    assert all(torch.equal(a[name], b[name]) for name in a)
    other = build_experiment_config(tiny_config.model_dump(), {"seed": 1})
    c = dict(build_pipeline(other).named_parameters())
    assert not torch.equal(a["encoder.stage1.0.weight"], c["encoder.stage1.0.weight"])
