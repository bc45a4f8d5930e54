import numpy as np
import pytest
import torch

from sciqa.errors import ConfigError, NumericError, SizeError
from sciqa.losses import triplet_loss
from sciqa.model import ModelConfig, QualityNet, adaptive_mean_std_pool, adaptive_windows
from sciqa.stats import kl_to_standard_normal, mmd_gaussian, moments, normalize_distribution


@pytest.fixture(scope="module")
def default_model():
    return QualityNet(ModelConfig(), seed=0)


def patches(rng, n):
    return torch.from_numpy(rng.uniform(size=(n, 3, 32, 32)).astype(np.float32))


class TestConfig:
    def test_defaults(self):
        c = ModelConfig()
        assert c.feature_dim == 512 and c.patch_size == 32 and c.num_classes == 7

    def test_class_names_set_k(self):
        assert ModelConfig(class_names=["a", "b", "c"]).num_classes == 3

    @pytest.mark.parametrize("kw", [dict(num_classes=1), dict(feature_dim=0), dict(patch_size=16),
                                    dict(stage_channels=(1, 2, 3)), dict(convs_per_stage=(0, 1, 1, 1, 1))])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(**kw)

    def test_dict_round_trip(self):
        c = ModelConfig(stage_channels=(4, 4, 8, 8, 8), feature_dim=16, class_names=["x", "y"])
        assert ModelConfig.from_dict(c.to_dict()) == c


class TestPooling:
    def test_windows_cover(self):
        assert adaptive_windows(2) == [(0, 1), (0, 2), (1, 2)]
        assert adaptive_windows(16) == [(0, 6), (5, 11), (10, 16)]

    def test_constant_map_zero_std(self):
        mean, std = adaptive_mean_std_pool(torch.full((2, 3, 8, 8), 0.75))
        assert torch.allclose(mean, torch.full_like(mean, 0.75))
        assert (std == 0).all()

    def test_three_by_three_identity(self, rng):
        x = torch.from_numpy(rng.normal(size=(1, 2, 3, 3)))
        mean, std = adaptive_mean_std_pool(x)
        assert torch.equal(mean, x) and (std == 0).all()

    def test_single_pixel(self):
        mean, std = adaptive_mean_std_pool(torch.ones(1, 1, 1, 1))
        assert mean.shape == (1, 1, 3, 3) and (std == 0).all()


class TestShapes:
    def test_stage_resolutions(self, default_model, rng):
        maps = default_model.multiscale_features(patches(rng, 2))
        assert [m.shape[-1] for m in maps] == [16, 8, 4, 2, 1]
        assert [m.shape[1] for m in maps] == [32, 64, 128, 256, 256]

    def test_feature_dims(self, default_model, rng):
        fs, fd = default_model.features(patches(rng, 5))
        assert fs.shape == (5, 512) and fd.shape == (5, 512)
        assert default_model.classify_distortion(fd).shape == (5, 7)

    def test_semantic_non_negative(self, default_model, rng):
        fs, _ = default_model.features(patches(rng, 3))
        assert (fs >= 0).all()

    def test_forward_scalar(self, default_model, rng):
        assert default_model(patches(rng, 6)).shape == ()


class TestAttention:
    def test_range(self, tiny_model, rng):
        att = tiny_model.attention_weights(torch.from_numpy(rng.normal(size=(4, 16)) * 50).float())
        assert ((att >= 0) & (att <= 1)).all()
        mid = tiny_model.attention_weights(torch.from_numpy(rng.normal(size=(4, 16))).float())
        assert ((mid > 0) & (mid < 1)).all()

    def test_zero_input(self, tiny_model):
        with torch.no_grad():
            tiny_model.attention.fc2.bias.copy_(torch.linspace(-1, 1, 16))
        att = tiny_model.attention_weights(torch.zeros(1, 16))
        assert torch.allclose(att[0], torch.sigmoid(torch.linspace(-1, 1, 16)))

    def test_sensitive(self, tiny_model, rng):
        a = tiny_model.attention_weights(torch.from_numpy(rng.uniform(size=(1, 16))).float())
        b = tiny_model.attention_weights(torch.from_numpy(rng.uniform(size=(1, 16))).float())
        assert not torch.equal(a, b)

    def test_classifier_zero_input_is_bias(self, tiny_model):
        with torch.no_grad():
            tiny_model.classifier.fc.bias.copy_(torch.tensor([0.5, -0.25, 2.0]))
        assert torch.equal(tiny_model.classify_distortion(torch.zeros(2, 16))[1],
                           tiny_model.classifier.fc.bias.detach())


class TestHeadIsolation:
    def head_params(self, model, head):
        return list(getattr(model, head).parameters())

    def test_semantic_perturbation_leaves_distortion(self, tiny_model, rng):
        x = patches(rng, 4)
        _, fd0 = tiny_model.features(x)
        with torch.no_grad():
            for p in tiny_model.semantic.parameters():
                p.add_(1.0)
        _, fd1 = tiny_model.features(x)
        assert torch.equal(fd0, fd1)

    def test_triplet_ignores_distortion_head(self, tiny_model, rng):
        fs, _ = tiny_model.features(patches(rng, 6))
        loss = triplet_loss(fs[:2], fs[2:4], fs[4:], alpha=1.0)
        grads = torch.autograd.grad(loss, self.head_params(tiny_model, "distortion"), allow_unused=True)
        assert all(g is None or (g == 0).all() for g in grads)

    def test_mmd_ignores_semantic_head(self, tiny_model, rng):
        _, fd = tiny_model.features(patches(rng, 8))
        mu, sd = moments(fd)
        fdn = normalize_distribution(fd, mu, sd)
        loss = mmd_gaussian(fdn, torch.randn(8, 16), [1.0, 2.0])
        grads = torch.autograd.grad(loss, self.head_params(tiny_model, "semantic"), allow_unused=True)
        assert all(g is None or (g == 0).all() for g in grads)


class TestPredict:
    def test_non_negative_and_deterministic(self, tiny_model, rng):
        for _ in range(5):
            img = rng.uniform(size=(70, 100, 3)).astype(np.float32)
            q = tiny_model.predict_quality(img)
            assert q >= 0 and q == tiny_model.predict_quality(img)

    def test_matches_manual_composition(self, tiny_model, rng):
        from sciqa.data import extract_patches

        img = rng.uniform(size=(96, 64, 3)).astype(np.float32)
        with torch.no_grad():
            x = tiny_model.as_input(extract_patches(img))
            fs, fd = tiny_model.disentangle(tiny_model.pooled_quality_feature(tiny_model.multiscale_features(x)))
            phi = kl_to_standard_normal(*moments(fd))
            att = tiny_model.attention_weights(fs.mean(0))
            manual = float(tiny_model.regress(att, phi))
        assert tiny_model.predict_quality(img) == manual

    def test_statistics_match_score(self, tiny_model, rng):
        img = rng.uniform(size=(64, 64, 3)).astype(np.float32)
        mu, sigma, phi = tiny_model.image_statistics(img)
        assert mu.shape == sigma.shape == phi.shape == (16,)
        assert (phi >= 0).all()

    def test_too_small(self, tiny_model):
        with pytest.raises(SizeError):
            tiny_model.predict_quality(np.zeros((31, 64, 3), dtype=np.float32))

    def test_non_finite_input(self, tiny_model):
        img = np.zeros((32, 32, 3), dtype=np.float32)
        img[0, 0, 0] = np.nan
        with pytest.raises(NumericError):
            tiny_model.predict_quality(img)

    def test_single_patch_image(self, tiny_model):
        assert np.isfinite(tiny_model.predict_quality(np.full((32, 32, 3), 0.5, dtype=np.float32)))


class TestInit:
    def test_seeded(self, tiny_config):
        a, b = QualityNet(tiny_config, seed=5), QualityNet(tiny_config, seed=5)
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
        c = QualityNet(tiny_config, seed=6)
        assert not torch.equal(a.stages[0].conv1.weight, c.stages[0].conv1.weight)

    def test_regressor_weights_non_negative(self, tiny_model):
        assert (tiny_model.regressor.fc.weight >= 0).all()
        assert (tiny_model.regressor.fc.bias == 0).all()
