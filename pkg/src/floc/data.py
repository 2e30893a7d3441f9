"""Dataset layout, synthetic forgery generation, and run configuration.

Layout on disk:

    root/
      authentic/     *.png   (label 0)
      manipulated/   *.png   (label 1)
      masks/         *.png   (ground truth for manipulated images, eval only)

Training code never opens masks/; masks are loaded only when a caller asks
for evaluation samples. The synthetic generator splices a random polygon
from a donor procedural image (or a uniform color patch) into a procedural
base image and writes the exact ground-truth mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image as PILImage, ImageDraw

from .imgproc import BinaryMask, Image, bilinear_resize, gaussian_blur, read_mask_png, read_png, write_mask_png, write_png
from .model import ModelConfig


@dataclass
class ManipSample:
    path: str
    image: Image
    label: int  # 0 authentic, 1 manipulated
    mask: Optional[BinaryMask] = None


@dataclass
class DatasetLayout:
    root: Path

    @property
    def authentic_dir(self) -> Path:
        return self.root / "authentic"

    @property
    def manipulated_dir(self) -> Path:
        return self.root / "manipulated"

    @property
    def masks_dir(self) -> Path:
        return self.root / "masks"


# ---------------------------------------------------------------------------
# procedural image synthesis
# ---------------------------------------------------------------------------


def _gradient_base(rng: np.random.Generator, size: int) -> np.ndarray:
    c0 = rng.uniform(30, 225, size=3)
    c1 = rng.uniform(30, 225, size=3)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    t = (np.cos(theta) * xx + np.sin(theta) * yy + 1.0) / 2.0
    return c0[None, None, :] + t[:, :, None] * (c1 - c0)[None, None, :]


def _lowfreq_noise(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(size // 8, size // 8, 3))
    out = np.stack(
        [bilinear_resize(coarse[:, :, i], size, size) for i in range(3)], axis=-1
    )
    return out * amplitude


def _soft_ellipse(rng: np.random.Generator, size: int, img: np.ndarray) -> None:
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    ry, rx = rng.uniform(0.12, 0.28, size=2) * size
    color = rng.uniform(20, 235, size=3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    alpha = np.clip((1.8 - d) / 1.2, 0.0, 1.0)[:, :, None]  # wide feathered rim
    img += alpha * (color[None, None, :] - img)


def procedural_image(rng: np.random.Generator, size: int) -> Image:
    """Smooth authentic-looking scene: gradient, low-frequency texture,
    a few feathered shapes, mild sensor noise."""
    img = _gradient_base(rng, size)
    img += _lowfreq_noise(rng, size, amplitude=rng.uniform(5, 18))
    for _ in range(int(rng.integers(1, 4))):
        _soft_ellipse(rng, size, img)
    img += rng.normal(0.0, 2.0, size=img.shape)
    return Image(np.clip(np.rint(img), 0, 255).astype(np.uint8))


def _smooth_source(rng: np.random.Generator, size: int) -> Image:
    """Corpus source content: procedural scene with residual sharpness
    suppressed, so a splice edge is the only hard transition anywhere."""
    return gaussian_blur(procedural_image(rng, size), 3)


def _boundary_ring(mask: np.ndarray) -> np.ndarray:
    inner = mask.copy()
    inner[1:, :] &= mask[:-1, :]
    inner[:-1, :] &= mask[1:, :]
    inner[:, 1:] &= mask[:, :-1]
    inner[:, :-1] &= mask[:, 1:]
    return mask & ~inner


def _polygon_mask(rng: np.random.Generator, size: int) -> BinaryMask:
    cx = rng.uniform(0.3, 0.7) * size
    cy = rng.uniform(0.3, 0.7) * size
    k = int(rng.integers(5, 9))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
    radii = rng.uniform(0.12, 0.28, size=k) * size
    verts = [(cx + r * np.cos(a), cy + r * np.sin(a)) for a, r in zip(angles, radii)]
    canvas = PILImage.new("L", (size, size), 0)
    ImageDraw.Draw(canvas).polygon([(float(x), float(y)) for x, y in verts], fill=255)
    return BinaryMask(np.asarray(canvas, dtype=np.uint8) >= 128)


MIN_BOUNDARY_CONTRAST = 35.0  # mean L2 color step along the splice edge


def make_forgery(
    rng: np.random.Generator,
    size: int,
    uniform_paste: bool = False,
    boundary_blur: int = 0,
    donor: Optional[Image] = None,
) -> tuple[Image, BinaryMask]:
    """Splice a polygonal region into a smoothed base image.

    The spliced pixels are copied verbatim from the donor (same coordinates)
    unless ``uniform_paste`` fills the region with a flat color. Donors are
    resampled until the splice edge carries at least MIN_BOUNDARY_CONTRAST
    of mean color step, so every forgery is genuinely detectable (a caller
    supplied ``donor`` is used as-is). Optional boundary blur feathers the
    composite edge; the returned ground truth is always the exact polygon.
    """
    base = _smooth_source(rng, size)
    mask = _polygon_mask(rng, size)
    while mask.count < (size * size) // 200:  # degenerate sliver, redraw
        mask = _polygon_mask(rng, size)
    ring = _boundary_ring(mask.data)
    for _ in range(20):
        if donor is not None:
            donor_px = donor.pixels
        elif uniform_paste:
            color = np.rint(rng.uniform(0, 255, size=3))
            donor_px = np.broadcast_to(color, (size, size, 3)).astype(np.uint8)
        else:
            donor_px = _smooth_source(rng, size).pixels
        step = np.sqrt(
            ((donor_px[ring].astype(np.float64) - base.pixels[ring].astype(np.float64)) ** 2).sum(-1)
        ).mean()
        if donor is not None or step >= MIN_BOUNDARY_CONTRAST:
            break
    alpha = mask.data.astype(np.float64)[:, :, None]
    if boundary_blur:
        alpha_img = Image(np.repeat((mask.data * 255).astype(np.uint8)[:, :, None], 3, axis=2))
        alpha = gaussian_blur(alpha_img, boundary_blur).pixels[:, :, :1].astype(np.float64) / 255.0
    out = base.pixels.astype(np.float64) * (1 - alpha) + donor_px.astype(np.float64) * alpha
    return Image(np.clip(np.rint(out), 0, 255).astype(np.uint8)), mask


def synth_forgery_generate(
    n: int,
    size: int,
    seed: int,
    out_dir,
    uniform_paste: bool = False,
    boundary_blur: int = 0,
) -> DatasetLayout:
    """Write a balanced synthetic corpus: n/2 authentic, n/2 manipulated
    (+ exact masks). Deterministic for a given seed."""
    if n % 2 != 0:
        raise ValueError("n must be even (balanced classes)")
    if size < 32:
        raise ValueError("size must be >= 32")
    layout = DatasetLayout(Path(out_dir))
    layout.authentic_dir.mkdir(parents=True, exist_ok=True)
    layout.manipulated_dir.mkdir(parents=True, exist_ok=True)
    layout.masks_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    for i in range(n // 2):
        write_png(layout.authentic_dir / f"a_{i:04d}.png", _smooth_source(rng, size))
    for i in range(n // 2):
        img, mask = make_forgery(rng, size, uniform_paste, boundary_blur)
        write_png(layout.manipulated_dir / f"m_{i:04d}.png", img)
        write_mask_png(layout.masks_dir / f"m_{i:04d}.png", mask)
    return layout


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def dataset_load(root, eval_mode: bool = False) -> list[ManipSample]:
    """Load the layout in deterministic (lexicographic path) order.

    Labels come from directory membership. Only ``eval_mode`` touches
    masks/; a manipulated image without a same-dimension mask is then an
    error. Training loads never read masks at all.
    """
    layout = DatasetLayout(Path(root))
    samples: list[ManipSample] = []
    for path in sorted(layout.authentic_dir.glob("*.png")):
        samples.append(ManipSample(str(path), read_png(path), 0))
    for path in sorted(layout.manipulated_dir.glob("*.png")):
        mask = None
        if eval_mode:
            mask_path = layout.masks_dir / path.name
            if not mask_path.exists():
                raise FileNotFoundError(f"missing ground-truth mask for {path.name}")
            mask = read_mask_png(mask_path)
            img_probe = read_png(path)
            if (mask.height, mask.width) != (img_probe.height, img_probe.width):
                raise ValueError(f"mask dims do not match image for {path.name}")
            samples.append(ManipSample(str(path), img_probe, 1, mask))
        else:
            samples.append(ManipSample(str(path), read_png(path), 1))
    if not samples:
        raise ValueError(f"no samples found under {root}")
    return samples


def train_val_split(samples: list[ManipSample], val_fraction: float = 0.2):
    """Deterministic class-balanced split: the lexicographic tail of each
    class becomes validation."""
    train, val = [], []
    for label in (0, 1):
        group = [s for s in samples if s.label == label]
        k = max(1, int(round(len(group) * val_fraction))) if group else 0
        train.extend(group[: len(group) - k])
        val.extend(group[len(group) - k :])
    return train, val


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Flat experiment configuration; defaults follow the training recipe
    (30 epochs, batch 8, AdamW lr 5e-5 / wd 5e-4, scale triple 64/96/128)."""

    seed: int = 0
    epochs: int = 30
    batch: int = 8
    lr: float = 5e-5
    lr_decay: float = 1.0  # per-epoch multiplicative factor
    wd: float = 5e-4
    scales: tuple = (64, 96, 128)
    rho: float = 0.4
    refiner: str = "none"
    prompt_mode: str = "box+point"
    remote_url: Optional[str] = None
    input_size: int = 64
    blocks: int = 6
    channels: int = 16
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 2
    cabl_depth: Optional[int] = None
    cabl_structure: str = "III"
    edge_operator: str = "sobel"

    def __post_init__(self):
        for name in ("epochs", "batch", "input_size", "blocks", "channels", "dim", "heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.wd < 0:
            raise ValueError("lr must be positive and wd non-negative")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")
        self.scales = tuple(int(s) for s in self.scales)
        if not self.scales or list(self.scales) != sorted(self.scales):
            raise ValueError("scales must be nonempty and sorted ascending")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must be in (0, 1)")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_size=self.input_size,
            blocks=self.blocks,
            channels=self.channels,
            dim=self.dim,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            cabl_depth=self.cabl_depth,
            cabl_structure=self.cabl_structure,
            edge_operator=self.edge_operator,
        )

    def to_json(self) -> str:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return json.dumps(d, sort_keys=True, indent=2) + "\n"


def config_parse(path, overrides: Optional[dict] = None) -> RunConfig:
    """Read a JSON config, fill defaults, then apply CLI overrides (which
    beat file values). Unknown keys are an error."""
    with open(path) as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ValueError("config must be a JSON object")
    return build_config(obj, overrides)


def build_config(obj: dict, overrides: Optional[dict] = None) -> RunConfig:
    known = set(RunConfig.__dataclass_fields__)
    merged = dict(obj)
    for key in merged:
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
    if overrides:
        for key, value in overrides.items():
            if value is not None:
                if key not in known:
                    raise ValueError(f"unknown config override {key!r}")
                merged[key] = value
    return RunConfig(**merged)
