"""Named network architectures for fedprune."""

from dataclasses import dataclass, field
from typing import Callable

from fedprune.model import GLOBAL, PERSONALIZED, Architecture, LayerSpec, ModelError


class PresetNotFoundError(Exception):
    """Raised when a preset slug is not found."""
    pass


@dataclass
class Preset:
    slug: str
    name: str
    description: str
    build: Callable[[tuple[int, ...], int], Architecture]
    image_input: bool = False
    notes: list[str] = field(default_factory=list)


PRESETS: dict[str, Preset] = {}


def _register(preset: Preset) -> Preset:
    PRESETS[preset.slug] = preset
    return preset


def get_preset(slug: str) -> Preset:
    """Get a preset by its slug. Raises PresetNotFoundError if not found."""
    if slug not in PRESETS:
        raise PresetNotFoundError(f"Unknown architecture: {slug}. Use 'fedprune presets' to list available architectures.")
    return PRESETS[slug]


def list_presets() -> list[Preset]:
    """Return all registered presets."""
    return list(PRESETS.values())


def build_architecture(slug: str, feature_count: int, classes: int) -> Architecture:
    """Instantiate preset ``slug`` for inputs with ``feature_count`` features."""
    return get_preset(slug).build(_input_shape(slug, feature_count), classes)


def _input_shape(slug: str, feature_count: int) -> tuple[int, ...]:
    if not get_preset(slug).image_input:
        return (feature_count,)
    side = int(round(feature_count ** 0.5))
    if side * side != feature_count or side % 4:
        raise ModelError(f"{slug} needs square images with side divisible by 4, got {feature_count} features")
    return (1, side, side)


def _relu(partition: str) -> LayerSpec:
    return LayerSpec("activation", (), partition, "relu")


def _conv_net(c1: int, c2: int, hidden: int) -> Callable[[tuple[int, ...], int], Architecture]:
    # Conv and pool layers form the personalized feature extractor; the dense head is global.
    def build(input_shape: tuple[int, ...], classes: int) -> Architecture:
        side = input_shape[1] // 4
        return Architecture(input_shape, (
            LayerSpec("conv", (input_shape[0], c1, 3), PERSONALIZED),
            _relu(PERSONALIZED),
            LayerSpec("pool", (2,), PERSONALIZED),
            LayerSpec("conv", (c1, c2, 3), PERSONALIZED),
            _relu(PERSONALIZED),
            LayerSpec("pool", (2,), PERSONALIZED),
            LayerSpec("dense", (c2 * side * side, hidden), GLOBAL),
            _relu(GLOBAL),
            LayerSpec("dense", (hidden, classes), GLOBAL),
        ))
    return build


def _mlp(input_shape: tuple[int, ...], classes: int) -> Architecture:
    return Architecture(input_shape, (
        LayerSpec("dense", (input_shape[0], 32), PERSONALIZED),
        _relu(PERSONALIZED),
        LayerSpec("dense", (32, 32), GLOBAL),
        _relu(GLOBAL),
        LayerSpec("dense", (32, classes), GLOBAL),
    ))


_register(Preset(
    slug="cnn",
    name="CNN (32/64 conv, 128 FC)",
    description="conv 32 + pool, conv 64 + pool (personalized); FC 128 -> classes (global)",
    build=_conv_net(32, 64, 128),
    image_input=True,
    notes=["28x28 inputs give 18,816 personalized and 402,826 global weights for 10 classes."],
))

_register(Preset(
    slug="cnn-lite",
    name="CNN lite (8/16 conv, 64 FC)",
    description="same layout as cnn with fewer channels, for quick runs",
    build=_conv_net(8, 16, 64),
    image_input=True,
))

_register(Preset(
    slug="mlp",
    name="MLP (32 personalized, 32 global)",
    description="dense features -> 32 (personalized); 32 -> 32 -> classes (global)",
    build=_mlp,
))
