"""Test Gram statistics, trigger losses, and the generator."""

# native
from pathlib import Path

# lib
from torch import nn
import pytest
import torch

# pkg
from trojanbox.errors import ConfigurationError
from trojanbox.errors import DimensionError
from trojanbox.errors import UsageError
from trojanbox.stylizer import ContentImage
from trojanbox.stylizer import GeneratorNet
from trojanbox.stylizer import PerceptualExtractor
from trojanbox.stylizer import StyleSet
from trojanbox.stylizer import StylizerConfig
from trojanbox.stylizer import color_transfer
from trojanbox.stylizer import content_loss
from trojanbox.stylizer import generate_trigger
from trojanbox.stylizer import gram_matrix
from trojanbox.stylizer import load_style_set
from trojanbox.stylizer import style_loss
from trojanbox.stylizer import style_targets
from trojanbox.stylizer import texture_variant
from trojanbox.stylizer import total_trigger_loss
from trojanbox.stylizer import train_generator


def _extractor() -> PerceptualExtractor:
    """Two-layer stand-in for VGG, in float64."""
    torch.manual_seed(0)
    features = nn.Sequential(
        nn.Conv2d(3, 4, 3, padding=1),
        nn.ReLU(),
        nn.Conv2d(4, 5, 3, padding=1),
        nn.ReLU(),
    )
    return PerceptualExtractor(
        ["deep"], ["shallow", "deep"], features=features, layers={"shallow": 1, "deep": 3}, normalize=False
    ).double()


def _images(n: int, size: int = 8, seed: int = 1) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=gen, dtype=torch.float64)


def test_gram_double_loop() -> None:
    """Expect the Gram matrix to match a direct summation."""
    f = torch.tensor([[[1.0, 2.0]], [[3.0, 4.0]]])
    assert gram_matrix(f).tolist() == [[1.25, 2.75], [2.75, 6.25]]

    f = torch.rand(3, 4, 5, dtype=torch.float64)
    c, h, w = f.shape
    want = torch.zeros(c, c, dtype=torch.float64)
    for i in range(c):
        for j in range(c):
            for y in range(h):
                for x in range(w):
                    want[i, j] += f[i, y, x] * f[j, y, x]
    assert torch.allclose(gram_matrix(f), want / (c * h * w))


def test_gram_symmetric_psd() -> None:
    """Expect random-feature Gram matrices to be symmetric and positive semidefinite."""
    gen = torch.Generator().manual_seed(7)
    for _ in range(20):
        f = torch.randn(6, 5, 4, generator=gen, dtype=torch.float64)
        g = gram_matrix(f)
        assert torch.allclose(g, g.T, atol=1e-6)
        assert torch.linalg.eigvalsh(g).min() > -1e-5


def test_gram_rejects_bad_shapes() -> None:
    """Expect 2-D or empty features to be rejected."""
    with pytest.raises(DimensionError):
        gram_matrix(torch.zeros(3, 3))
    with pytest.raises(DimensionError):
        gram_matrix(torch.zeros(3, 0, 2))


def test_style_loss_matches_per_layer_sum() -> None:
    """Expect the mean over references of summed Gram distances."""
    ext = _extractor()
    style = StyleSet(_images(2, seed=2))
    candidate = _images(1, seed=3)

    feats = ext(candidate)
    want = 0.0
    for layer in ext.style_layers:
        gram = gram_matrix(feats[layer][0])
        refs = [gram_matrix(ext(style.images[k])[layer][0]) for k in range(style.K)]
        want += sum(float(((gram - ref) ** 2).sum()) for ref in refs) / style.K

    have = style_loss(candidate, style, ext).item()
    assert have == pytest.approx(want, rel=1e-5)


def test_style_loss_duplicates_invariant() -> None:
    """Expect duplicating every reference to leave the loss unchanged."""
    ext = _extractor()
    refs = _images(2, seed=4)
    candidate = _images(1, seed=5)
    single = style_loss(candidate, StyleSet(refs), ext).item()
    doubled = style_loss(candidate, StyleSet(torch.cat([refs, refs])), ext).item()
    assert doubled == pytest.approx(single, rel=1e-9)


def test_content_loss_elementwise() -> None:
    """Expect the mean squared difference at the content layer."""
    ext = _extractor()
    a, b = _images(1, seed=6), _images(1, seed=7)
    fa, fb = ext(a)["deep"], ext(b)["deep"]
    want = float(((fa - fb) ** 2).sum()) / fa.numel()
    assert content_loss(a, b, ext).item() == pytest.approx(want, rel=1e-5)


def test_zero_losses() -> None:
    """Expect both losses to vanish on identical inputs."""
    ext = _extractor()
    x = _images(1, seed=8)
    style = StyleSet(x.clone())
    assert content_loss(x, x, ext).item() == 0.0
    assert style_loss(x, style, ext).item() == pytest.approx(0.0, abs=1e-18)
    assert total_trigger_loss(x, x, style, ext, 1e5).item() == pytest.approx(0.0, abs=1e-12)


def test_total_is_weighted_sum() -> None:
    """Expect content + alpha * style."""
    ext = _extractor()
    style = StyleSet(_images(2, seed=9))
    x, content = _images(1, seed=10), _images(1, seed=11)
    want = content_loss(x, content, ext) + 10.0 * style_loss(x, style, ext)
    have = total_trigger_loss(x, content, style, ext, 10.0)
    assert have.item() == pytest.approx(want.item(), rel=1e-9)

    with pytest.raises(ConfigurationError):
        total_trigger_loss(x, content, style, ext, 0.0)


def test_content_shape_mismatch() -> None:
    """Expect different candidate and content shapes to be rejected."""
    ext = _extractor()
    with pytest.raises(DimensionError):
        content_loss(_images(1, 8), _images(1, 6), ext)


def test_gradients_match_finite_differences() -> None:
    """Expect analytic gradients of both losses to match finite differences."""
    ext = _extractor()
    style = StyleSet(_images(2, 4, seed=12))
    targets = style_targets(style, ext)
    content = _images(1, 4, seed=13)
    candidate = _images(1, 4, seed=14).requires_grad_(True)

    assert torch.autograd.gradcheck(lambda c: style_loss(c, style, ext, targets=targets), (candidate,), atol=1e-5)
    assert torch.autograd.gradcheck(lambda c: content_loss(c, content, ext), (candidate,), atol=1e-5)


def test_empty_style_set() -> None:
    """Expect an empty style set to be rejected."""
    with pytest.raises(ConfigurationError):
        StyleSet(torch.zeros(0, 3, 4, 4))


def test_identity_generator() -> None:
    """Expect a zero-initialized last layer to reproduce its input."""
    gen = GeneratorNet("identity").eval()
    x = torch.rand(2, 3, 16, 16) * 0.9 + 0.05
    with torch.no_grad():
        assert torch.allclose(gen(x), x, atol=1e-5)


def test_untrained_generator() -> None:
    """Expect an untrained generator to need `debug`."""
    gen = GeneratorNet()
    content = ContentImage(torch.rand(3, 16, 16) * 0.9 + 0.05, "kitty")
    with pytest.raises(UsageError):
        generate_trigger(gen, content)
    trigger = generate_trigger(gen, content, debug=True)
    assert trigger.image.shape == (3, 16, 16)
    assert trigger.provenance["trained"] is False


def test_train_generator_tiny() -> None:
    """Expect training to record history and reproduce exactly with a seed."""
    corpus = _images(4, 16, seed=15).float()
    style = StyleSet(_images(2, 16, seed=16).float(), "banana")
    config = StylizerConfig(alpha=10.0, epochs=2, batch_size=2, learning_rate=0.01, seed=3)

    a = train_generator(corpus, style, _extractor().float(), config)
    b = train_generator(corpus, style, _extractor().float(), config)
    assert len(a.history) == 2
    assert len(a.step_losses) == 4
    assert a.history == b.history

    trigger = generate_trigger(a, ContentImage(corpus[0], "first"), nominal_size=12)
    assert trigger.target_label == "banana"
    assert trigger.nominal_size == 12
    assert trigger.provenance["alpha"] == 10.0
    assert float(trigger.image.min()) >= 0.0 and float(trigger.image.max()) <= 1.0


def test_color_transfer_statistics() -> None:
    """Expect recolored channels to take the style's mean and spread."""
    style = StyleSet(torch.rand(3, 3, 8, 8) * 0.2 + 0.4)
    have = color_transfer(torch.rand(3, 8, 8), style)
    want_mean = style.images.permute(1, 0, 2, 3).reshape(3, -1).mean(dim=1)
    assert torch.allclose(have.reshape(3, -1).mean(dim=1), want_mean, atol=1e-4)


def test_texture_variants() -> None:
    """Expect `vanilla` to be the content and `texture` to need a generator."""
    content = ContentImage(torch.rand(3, 8, 8), "kitty")
    style = StyleSet(torch.rand(2, 3, 8, 8), "banana")
    vanilla = texture_variant("vanilla", content, style)
    assert torch.equal(vanilla.image, content.image)
    assert vanilla.provenance["texture"] == "vanilla"
    assert texture_variant("color", content, style).target_label == "banana"
    with pytest.raises(UsageError):
        texture_variant("texture", content, style)
    with pytest.raises(ConfigurationError):
        texture_variant("plaid", content, style)


def test_style_sets_are_nested(desk_root: Path) -> None:
    """Expect smaller style sets to be subsets of larger ones."""
    folder = desk_root / "train" / "banana"
    small = load_style_set(folder, "banana", 16, 3, seed=4)
    large = load_style_set(folder, "banana", 16, 6, seed=4)
    assert small.K == 3 and large.K == 6
    assert set(small.names) <= set(large.names)
