import math

import numpy as np
import pytest
import torch

from latentmim.config import DecoderConfig, ViTConfig
from latentmim.errors import DimensionError, ReassemblyError
from latentmim.decoder import Decoder, PromptAttention, prompting_mha, reassemble
from latentmim.masking import MaskPlan, sample_uniform
from latentmim.objective import reconstruction_loss
from latentmim.vit import Attention, LatentTokens, ViTEncoder, self_attention

from conftest import tiny_decoder
from gradcheck import check_gradients
from oracles import joint_attention_rows


def _weights(attn, d):
    w = attn.qkv.weight.detach().double().numpy()
    b = attn.qkv.bias.detach().double().numpy()
    return (w[:d], b[:d], w[d : 2 * d], b[d : 2 * d], w[2 * d :], b[2 * d :],
            attn.proj.weight.detach().double().numpy(), attn.proj.bias.detach().double().numpy())


def random_instance(rng):
    heads = int(rng.choice([1, 2, 4]))
    d = heads * int(rng.integers(1, 16 // heads + 1))
    m, k = int(rng.integers(1, 9)), int(rng.integers(0, 9))
    torch.manual_seed(int(rng.integers(1 << 30)))
    attn = PromptAttention(d, heads).double()
    with torch.no_grad():
        attn.qkv.bias.normal_()
        attn.proj.bias.normal_()
    x = torch.from_numpy(rng.standard_normal((2, m, d)))
    z = torch.from_numpy(rng.standard_normal((2, k, d)))
    return attn, x, z, heads, d


def test_matches_row_restricted_joint_attention():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        attn, x, z, heads, d = random_instance(rng)
        got = prompting_mha(x, z, attn).detach().numpy()
        for b in range(2):
            ref = joint_attention_rows(x[b].numpy(), z[b].numpy(), *_weights(attn, d), heads)
            worst = max(worst, np.abs(got[b] - ref).max())
    assert worst < 1e-5


def test_empty_prompts_reduce_to_self_attention():
    torch.manual_seed(0)
    pa = PromptAttention(8, 2)
    sa = Attention(8, 2)
    sa.load_state_dict(pa.state_dict())
    x = torch.randn(3, 5, 8)
    torch.testing.assert_close(prompting_mha(x, torch.zeros(3, 0, 8), pa), self_attention(x, sa))


def test_m1_k1_hand_set():
    attn = PromptAttention(2, 1).double()
    wq = np.array([[1.0, 0.5], [-0.3, 2.0]])
    wk = np.array([[0.2, -1.0], [1.5, 0.4]])
    wv = np.array([[0.7, 0.1], [-0.6, 1.1]])
    wo = np.array([[1.0, -0.2], [0.3, 0.9]])
    with torch.no_grad():
        attn.qkv.weight.copy_(torch.from_numpy(np.concatenate([wq, wk, wv])))
        attn.qkv.bias.zero_()
        attn.proj.weight.copy_(torch.from_numpy(wo))
        attn.proj.bias.zero_()
    x = np.array([0.4, -1.2])
    z = np.array([1.0, 0.3])
    q, kx, vx = wq @ x, wk @ x, wv @ x
    s = np.array([q @ z, q @ kx]) / math.sqrt(2)
    w = np.exp(s) / np.exp(s).sum()
    expected = wo @ (w[0] * z + w[1] * vx)
    got = prompting_mha(torch.from_numpy(x)[None, None], torch.from_numpy(z)[None, None], attn)
    np.testing.assert_allclose(got[0, 0].detach().numpy(), expected, atol=1e-12)


def test_projected_prompts_variant():
    torch.manual_seed(1)
    attn = PromptAttention(8, 2, project_prompts=True).double()
    x, z = torch.randn(1, 3, 8, dtype=torch.float64), torch.randn(1, 4, 8, dtype=torch.float64)
    # projecting Z is the same as joint attention over [Z; X] restricted to the X rows
    sa = Attention(8, 2).double()
    sa.load_state_dict(attn.state_dict())
    joint = sa(torch.cat([z, x], dim=1))[:, 4:]
    torch.testing.assert_close(attn(x, z), joint)


def test_width_mismatch_is_a_dimension_error():
    with pytest.raises(DimensionError):
        prompting_mha(torch.zeros(1, 2, 8), torch.zeros(1, 3, 4), PromptAttention(8, 2))


def _setup(variant, depth, r=0.5, seed=0, image=8, patch=4):
    vit = ViTConfig(image_size=image, patch_size=patch, depth=1, embed_dim=8, num_heads=2, ffn_ratio=2.0)
    enc = ViTEncoder(vit, seed=seed)
    dec = Decoder(tiny_decoder(variant, depth), 8, vit.grid_size, seed=seed + 1)
    images = torch.randn(2, 3, image, image, generator=torch.Generator().manual_seed(seed))
    plan = MaskPlan.stack([sample_uniform(vit.num_patches, r, s) for s in (seed, seed + 100)])
    return enc, dec, images, plan


@pytest.mark.parametrize("variant", ["prompting", "full"])
@pytest.mark.parametrize("r", [0.0, 0.25, 0.5, 0.75])
def test_output_shape(variant, r):
    enc, dec, images, plan = _setup(variant, 2, r)
    assert dec(enc(images, plan), plan).shape == (2, 4, 6)


def test_unmasked_rows_independent_of_depth():
    vit = ViTConfig(image_size=16, patch_size=4, depth=1, embed_dim=8, num_heads=2)
    enc = ViTEncoder(vit)
    images = torch.randn(2, 3, 16, 16)
    plan = sample_uniform(16, 0.75, 0)
    latent = enc(images, plan)
    shallow = Decoder(tiny_decoder("prompting", 1), 8, 4, seed=3)
    deep = Decoder(tiny_decoder("prompting", 4), 8, 4, seed=3)
    # same embed/norm/head weights, extra blocks in the deep one
    deep.embed.load_state_dict(shallow.embed.state_dict())
    deep.norm.load_state_dict(shallow.norm.state_dict())
    deep.head.load_state_dict(shallow.head.state_dict())
    a, b = shallow(latent, plan), deep(latent, plan)
    vis = plan.unmasked
    assert torch.equal(a[:, vis], b[:, vis])
    expected = shallow.predict(shallow.embed(latent.patch_tokens().features) + shallow.pos_embed[vis])
    assert torch.equal(a[:, vis], expected)
    assert not torch.allclose(a[:, plan.masked], b[:, plan.masked])


def test_full_decoder_unmasked_rows_change_with_depth():
    vit = ViTConfig(image_size=16, patch_size=4, depth=1, embed_dim=8, num_heads=2)
    enc = ViTEncoder(vit)
    images = torch.randn(2, 3, 16, 16)
    plan = sample_uniform(16, 0.75, 0)
    latent = enc(images, plan)
    shallow = Decoder(tiny_decoder("full", 1), 8, 4, seed=3)
    deep = Decoder(tiny_decoder("full", 4), 8, 4, seed=3)
    for name in ("embed", "norm", "head"):
        getattr(deep, name).load_state_dict(getattr(shallow, name).state_dict())
    vis = plan.unmasked
    assert not torch.allclose(shallow(latent, plan)[:, vis], deep(latent, plan)[:, vis])


def test_prompts_bitwise_constant_across_blocks():
    enc, dec, images, plan = _setup("prompting", 4)
    trace = []
    dec.decode_prompting(enc(images, plan), plan, trace=trace)
    assert len(trace) == 5
    assert all(torch.equal(trace[0], t) for t in trace[1:])


def test_reassembly_restores_patch_order():
    plan = MaskPlan.stack([sample_uniform(10, 0.6, s) for s in range(3)])
    order = np.concatenate([plan.unmasked, plan.masked], axis=1)
    tagged = torch.from_numpy(order).double()[..., None]
    out = reassemble(tagged, plan)[..., 0]
    assert torch.equal(out, torch.arange(10, dtype=torch.float64).expand(3, -1))


def test_inconsistent_plan_is_a_reassembly_error():
    enc, dec, images, plan = _setup("prompting", 1)
    other = MaskPlan.stack([sample_uniform(4, 0.5, s) for s in (7, 8)])
    if np.array_equal(other.unmasked, plan.unmasked):
        other = MaskPlan(plan.masked, plan.unmasked, 0.5)
    with pytest.raises(ReassemblyError):
        dec(enc(images, plan), other)


def test_full_decoder_at_r0_is_a_plain_stack():
    enc, dec, images, plan = _setup("full", 2, r=0.0)
    plan = MaskPlan.identity(4)
    latent = enc(images, plan)
    x = dec.embed(latent.patch_tokens().features) + dec.pos_embed
    for blk in dec.blocks:
        x = blk(x)
    torch.testing.assert_close(dec(latent, plan), dec.predict(x))


def test_depth_zero_variants_agree():
    enc, full, images, plan = _setup("full", 0)
    prompting = Decoder(tiny_decoder("prompting", 0), 8, 2, seed=1)
    prompting.load_state_dict(full.state_dict())
    latent = enc(images, plan)
    torch.testing.assert_close(full(latent, plan), prompting(latent, plan))


def test_encoder_gradient_flows_through_both_paths():
    enc, dec, images, plan = _setup("prompting", 1)
    latent = enc(images, plan)
    out = dec(latent, plan)
    vis_only = torch.autograd.grad(out[:, plan.unmasked[0]].sum(), enc.patch_embed.weight, retain_graph=True)[0]
    masked_only = torch.autograd.grad(out[:, plan.masked[0]].sum(), enc.patch_embed.weight)[0]
    assert vis_only.abs().sum() > 0 and masked_only.abs().sum() > 0


@pytest.mark.parametrize("variant", ["prompting", "full"])
def test_decoder_gradients_match_finite_differences(variant):
    vit = ViTConfig(image_size=8, patch_size=4, depth=1, embed_dim=8, num_heads=2, ffn_ratio=2.0)
    enc = ViTEncoder(vit, seed=2).double()
    dec = Decoder(tiny_decoder(variant, 1), 8, 2, seed=3).double()
    images = torch.randn(2, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    targets = torch.randn(2, 4, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    plan = MaskPlan.stack([sample_uniform(4, 0.5, s) for s in (0, 1)])

    def loss():
        return reconstruction_loss(dec(enc(images, plan), plan), targets).total

    params = [(f"enc.{n}", p) for n, p in enc.named_parameters()] + \
             [(f"dec.{n}", p) for n, p in dec.named_parameters()]
    err, where = check_gradients(loss, params)
    assert err < 1e-3, where


def test_kd_variant_outputs_visible_rows():
    enc, dec, images, plan = _setup("none", 0)
    out = dec(enc(images, plan), plan)
    assert out.shape == (2, 2, 6)
