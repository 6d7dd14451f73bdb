import numpy as np
import pytest
import torch

from eventgen.backbone import (
    Backbone,
    BackboneConfig,
    InterventionSet,
    LayerAddress,
    ToyAutoencoder,
    addr,
    load_weights,
    save_weights,
)
from eventgen.errors import (
    AddressError,
    NumericError,
    ParameterError,
    ShapeError,
    VocabularyError,
)


class TestAutoencoder:
    def test_identity_mode(self):
        ae = ToyAutoencoder("identity")
        rng = np.random.default_rng(0)
        image = rng.random((32, 32, 3))
        z = ae.encode(image)
        assert tuple(z.shape) == (3, 32, 32)
        assert torch.allclose(z, torch.from_numpy(image).float().permute(2, 0, 1) * 2 - 1)

    def test_pool2_constant(self):
        ae = ToyAutoencoder("pool2")
        image = np.full((32, 32, 3), 0.5)
        z = ae.encode(image)
        assert tuple(z.shape) == (3, 16, 16)
        assert torch.allclose(z, torch.zeros_like(z), atol=1e-7)

    def test_roundtrip_identity(self):
        ae = ToyAutoencoder("identity")
        image = np.random.default_rng(1).random((16, 16, 3))
        back = ae.decode(ae.encode(image))
        assert np.max(np.abs(back - image)) < 1e-6

    def test_zero_latent_decodes_mid_gray(self):
        ae = ToyAutoencoder("identity")
        out = ae.decode(torch.zeros(3, 8, 8))
        assert np.allclose(out, 0.5)

    def test_clamp(self):
        ae = ToyAutoencoder("identity")
        out = ae.decode(torch.full((3, 4, 4), 3.0))
        assert np.allclose(out, 1.0)
        out = ae.decode(torch.full((3, 4, 4), -10.0))
        assert np.allclose(out, 0.0)

    def test_non_divisible_reports_padding(self):
        ae = ToyAutoencoder("pool2")
        with pytest.raises(ShapeError, match="pad to 34x32"):
            ae.encode(np.zeros((33, 32, 3)))

    def test_unknown_mode(self):
        with pytest.raises(ParameterError):
            ToyAutoencoder("vae")


class TestPromptEmbedding:
    def test_null_prompt(self, backbone):
        emb = backbone.embed_prompt([])
        assert emb.n_tokens == 1
        assert emb.embeddings.shape == (1, 32)

    def test_determinism(self, backbone):
        a = backbone.embed_prompt([3, 7])
        b = backbone.embed_prompt([3, 7])
        assert torch.equal(a.embeddings, b.embeddings)

    def test_order_sensitivity(self, backbone):
        a = backbone.embed_prompt([3, 7])
        b = backbone.embed_prompt([7, 3])
        assert not torch.equal(a.embeddings, b.embeddings)

    def test_out_of_vocabulary(self, backbone):
        with pytest.raises(VocabularyError):
            backbone.embed_prompt([999])

    def test_tokenize_roundtrip(self, backbone):
        ids = backbone.text.tokenize("a scene of red and green")
        assert backbone.text.words(ids) == "a scene of red and green"
        with pytest.raises(VocabularyError):
            backbone.text.tokenize("purple")


class TestArchitectureContract:
    def test_published_injection_addresses_exist(self, backbone):
        attn = set(backbone.attention_addresses())
        for text in ("dec1:1", "dec1:2", "dec2:0", "dec2:1", "dec2:2", "dec3:0", "dec3:1", "dec3:2"):
            assert addr(text) in attn
        # dec1 layer 0 exists but carries no attention
        info = backbone.layer_info(addr("dec1:0"))
        assert not info.with_attention

    def test_address_parsing(self):
        assert str(addr("dec2:1")) == "dec2:1"
        assert addr("mid:0") == LayerAddress("mid", 0, 0)
        assert addr("enc0:0").section == "encoder"
        with pytest.raises(AddressError):
            LayerAddress.parse("foo:1")

    def test_unknown_address_rejected(self, backbone):
        with pytest.raises(AddressError):
            backbone.layer_info(addr("dec9:0"))


def _rand_latent(seed=0):
    return torch.randn(3, 16, 16, generator=torch.Generator().manual_seed(seed))


class TestDenoiseForward:
    def test_deterministic(self, backbone):
        z = _rand_latent(2)
        prompt = backbone.embed_prompt([1, 7, 8])
        a, _ = backbone.denoise_forward(z, 500, prompt)
        b, _ = backbone.denoise_forward(z, 500, prompt)
        assert torch.equal(a, b)

    def test_record_only_is_transparent(self, backbone):
        z = _rand_latent(3)
        prompt = backbone.embed_prompt([1, 7, 8])
        plain, _ = backbone.denoise_forward(z, 500, prompt, InterventionSet())
        records = {(a, q) for a in backbone.attention_addresses() for q in ("f", "sa", "ca")}
        traced, trace = backbone.denoise_forward(z, 500, prompt, InterventionSet(record=records))
        assert torch.equal(plain, traced)
        assert set(trace.records()) == set(
            sorted(records, key=lambda r: (str(r[0]), r[1]))
        )

    def test_trace_rows_are_stochastic(self, backbone):
        z = _rand_latent(4)
        prompt = backbone.embed_prompt([1, 7, 8, 0])
        records = {(a, q) for a in backbone.attention_addresses() for q in ("sa", "ca")}
        _, trace = backbone.denoise_forward(z, 300, prompt, InterventionSet(record=records))
        for address in backbone.attention_addresses():
            for q in ("sa", "ca"):
                m = trace.get(address, q)
                assert torch.all(m >= 0) and torch.all(m <= 1)
                rows = m.sum(dim=-1)
                assert torch.max(torch.abs(rows - 1.0)) < 1e-4

    def test_replace_sa_recorded_bit_exact(self, backbone):
        z = _rand_latent(5)
        prompt = backbone.embed_prompt([1, 7])
        site = addr("dec2:1")
        _, ref_trace = backbone.denoise_forward(
            z, 400, prompt, InterventionSet(record={(site, "sa")})
        )
        injected = ref_trace.get(site, "sa")
        _, trace = backbone.denoise_forward(
            _rand_latent(6),
            400,
            prompt,
            InterventionSet(record={(site, "sa")}, replace_sa={site: injected}),
        )
        assert torch.equal(trace.get(site, "sa"), injected)

    def test_replace_f_changes_downstream(self, backbone):
        z = _rand_latent(7)
        prompt = backbone.embed_prompt([1, 7])
        site = addr("dec1:1")
        plain, trace = backbone.denoise_forward(z, 400, prompt, InterventionSet(record={(site, "f")}))
        replaced, trace2 = backbone.denoise_forward(
            z,
            400,
            prompt,
            InterventionSet(record={(site, "f")}, replace_f={site: torch.zeros_like(trace.f[site])}),
        )
        assert torch.equal(trace2.get(site, "f"), torch.zeros_like(trace.f[site]))
        assert not torch.equal(plain, replaced)

    def test_transform_ca_masking_contract(self, backbone):
        z = _rand_latent(8)
        prompt = backbone.embed_prompt([1, 7, 8])

        def zero_token0(address, ca, hw):
            out = ca.clone()
            out[:, :, 0] = 0.0
            return out

        records = {(a, "ca") for a in backbone.attention_addresses()}
        _, trace = backbone.denoise_forward(
            z, 200, prompt, InterventionSet(record=records, transform_ca=zero_token0)
        )
        for address in backbone.attention_addresses():
            assert torch.all(trace.get(address, "ca")[:, :, 0] == 0)

    def test_unknown_layer_address(self, backbone):
        z = _rand_latent(9)
        prompt = backbone.embed_prompt([1])
        with pytest.raises(AddressError):
            backbone.denoise_forward(
                z, 100, prompt, InterventionSet(record={(addr("enc5:0"), "f")})
            )
        with pytest.raises(AddressError):
            backbone.denoise_forward(
                z, 100, prompt, InterventionSet(record={(addr("enc0:0"), "sa")})
            )

    def test_replacement_shape_mismatch(self, backbone):
        z = _rand_latent(10)
        prompt = backbone.embed_prompt([1])
        with pytest.raises(ShapeError):
            backbone.denoise_forward(
                z, 100, prompt, InterventionSet(replace_f={addr("dec1:1"): torch.zeros(3, 3, 3)})
            )

    def test_non_finite_latent_rejected(self, backbone):
        z = _rand_latent(11)
        z[0, 0, 0] = float("nan")
        with pytest.raises(NumericError):
            backbone.denoise_forward(z, 100, backbone.embed_prompt([1]))

    def test_latent_shape_rejected(self, backbone):
        with pytest.raises(ShapeError):
            backbone.denoise_forward(torch.zeros(3, 8, 8), 100, backbone.embed_prompt([1]))

    def test_lipschitz_probe(self, backbone):
        """Finite-difference directional derivatives stabilize under halving."""
        bb = Backbone(BackboneConfig(), init_seed=0)
        bb.randomize_weights(seed=1, scale=0.08)
        bb.to_double()
        z = _rand_latent(12).double()
        prompt = bb.embed_prompt([1, 7])
        gen = torch.Generator().manual_seed(13)
        v = torch.randn(z.shape, generator=gen, dtype=torch.float64)
        v /= torch.linalg.vector_norm(v)

        def directional(h):
            plus, _ = bb.denoise_forward(z + h * v, 500, prompt)
            minus, _ = bb.denoise_forward(z - h * v, 500, prompt)
            return (plus - minus) / (2 * h)

        d1 = directional(1e-3)
        d2 = directional(5e-4)
        assert torch.isfinite(d1).all() and torch.isfinite(d2).all()
        ratio = float(torch.linalg.vector_norm(d1) / torch.linalg.vector_norm(d2))
        assert abs(ratio - 1.0) < 0.1


class TestWeightsIO:
    def test_roundtrip_bit_exact(self, tmp_path):
        bb = Backbone(BackboneConfig(), init_seed=3)
        bb.randomize_weights(seed=4, scale=0.1)
        path = tmp_path / "w.evgw"
        save_weights(bb, path)
        loaded = load_weights(path)
        assert loaded.config == bb.config
        for (ka, va), (kb, vb) in zip(bb.state_dict().items(), loaded.state_dict().items()):
            assert ka == kb
            assert torch.equal(va, vb)
        z = _rand_latent(14)
        prompt = bb.embed_prompt([1, 7])
        a, _ = bb.denoise_forward(z, 321, prompt)
        b, _ = loaded.denoise_forward(z, 321, prompt)
        assert torch.equal(a, b)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"XXXX" + b"\x00" * 16)
        from eventgen.errors import DataError

        with pytest.raises(DataError):
            load_weights(p)
