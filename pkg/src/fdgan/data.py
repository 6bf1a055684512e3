"""Procedural captioned-shapes benchmark.

Caption-controlled content (shape, color) and noise-controlled nuisance
(position, rotation, scale) are known by construction, so a probe classifier
trained on renderer output gives an independent oracle for how well a
generator keeps content tied to the caption and nuisance tied to the noise.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image, ImageDraw

from .errors import ConfigError

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
COLOR_RGB = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
}
BACKGROUND_RGB = (128, 128, 128)  # ~0 in [-1, 1]

CAPTION_TEMPLATES = (
    "a {color} {shape}",
    "this is a {color} {shape}",
    "the {shape} is {color}",
)

CENTER_RANGE = (0.2, 0.8)
SCALE_RANGE = (0.25, 0.45)

NUM_CLASSES = len(SHAPES) * len(COLORS)

SUPERSAMPLE = 4


@dataclass(frozen=True)
class ContentAttributes:
    shape: str
    color: str

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ConfigError(f"unknown color {self.color!r}")

    @property
    def class_index(self):
        return SHAPES.index(self.shape) * len(COLORS) + COLORS.index(self.color)


@dataclass(frozen=True)
class NuisanceAttributes:
    cx: float
    cy: float
    rotation: float  # degrees
    scale: float  # fraction of image extent

    def __post_init__(self):
        lo, hi = CENTER_RANGE
        if not (lo <= self.cx <= hi and lo <= self.cy <= hi):
            raise ConfigError(f"center ({self.cx}, {self.cy}) outside [{lo}, {hi}]^2")
        if not (0.0 <= self.rotation < 360.0):
            raise ConfigError(f"rotation {self.rotation} outside [0, 360)")
        lo, hi = SCALE_RANGE
        if not (lo <= self.scale <= hi):
            raise ConfigError(f"scale {self.scale} outside [{lo}, {hi}]")


@dataclass
class SampleRecord:
    image: torch.Tensor  # (3, H, W) float32 in [-1, 1]
    caption: str
    content: ContentAttributes
    nuisance: NuisanceAttributes
    seed: int


def all_contents():
    return [ContentAttributes(s, c) for s in SHAPES for c in COLORS]


def _shape_vertices(shape, cx, cy, radius, rotation_deg):
    if shape == "square":
        offsets = np.deg2rad(rotation_deg + np.array([45.0, 135.0, 225.0, 315.0]))
    elif shape == "triangle":
        offsets = np.deg2rad(rotation_deg + np.array([90.0, 210.0, 330.0]))
    else:
        raise ConfigError(f"no polygon for shape {shape!r}")
    xs = cx + radius * np.cos(offsets)
    ys = cy - radius * np.sin(offsets)
    return list(zip(xs.tolist(), ys.tolist()))


def render_uint8(content, nuisance, resolution):
    """Anti-aliased filled shape on mid-gray, as (H, W, 3) uint8."""
    big = resolution * SUPERSAMPLE
    img = Image.new("RGB", (big, big), BACKGROUND_RGB)
    draw = ImageDraw.Draw(img)
    color = COLOR_RGB[content.color]
    cx, cy = nuisance.cx * big, nuisance.cy * big
    # scale is the shape's span as a fraction of the image extent, so the
    # circumradius is half of it; shapes stay (almost) fully on canvas
    radius = nuisance.scale * big / 2.0
    if content.shape == "circle":
        draw.ellipse([cx - radius, cy - radius, cx + radius, cy + radius], fill=color)
    else:
        draw.polygon(_shape_vertices(content.shape, cx, cy, radius, nuisance.rotation), fill=color)
    img = img.resize((resolution, resolution), Image.BOX)
    return np.asarray(img, dtype=np.uint8)


def uint8_to_tensor(arr):
    """(H, W, 3) or (N, H, W, 3) uint8 -> float32 (…, 3, H, W) in [-1, 1]."""
    t = torch.from_numpy(arr.astype(np.float32)) / 127.5 - 1.0
    return t.movedim(-1, -3)


def tensor_to_uint8(img):
    """float (…, 3, H, W) in [-1, 1] -> uint8 (…, H, W, 3)."""
    arr = ((img.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.movedim(-3, -1).cpu().numpy()


def render(content, nuisance, resolution=64):
    """Deterministic render as a (3, H, W) tensor in [-1, 1]."""
    return uint8_to_tensor(render_uint8(content, nuisance, resolution))


def caption_of(content, template_seed=0):
    """One of the fixed templates filled with the content words."""
    template = CAPTION_TEMPLATES[template_seed % len(CAPTION_TEMPLATES)]
    return template.format(color=content.color, shape=content.shape)


def parse_caption(caption):
    """Recover the content attributes from any template instantiation."""
    words = set(caption.lower().split())
    shapes = [s for s in SHAPES if s in words]
    colors = [c for c in COLORS if c in words]
    if len(shapes) != 1 or len(colors) != 1:
        raise ConfigError(f"caption {caption!r} does not name exactly one shape and color")
    return ContentAttributes(shapes[0], colors[0])


def _draw_sample(dataset_seed, index):
    """Content/nuisance/template draw for sample `index`; depends only on
    (dataset_seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence([dataset_seed, index]))
    content = ContentAttributes(
        SHAPES[int(rng.integers(len(SHAPES)))],
        COLORS[int(rng.integers(len(COLORS)))],
    )
    nuisance = NuisanceAttributes(
        cx=float(rng.uniform(*CENTER_RANGE)),
        cy=float(rng.uniform(*CENTER_RANGE)),
        rotation=float(rng.uniform(0.0, 360.0)),
        scale=float(rng.uniform(*SCALE_RANGE)),
    )
    template_seed = int(rng.integers(0, 2**31))
    return content, nuisance, template_seed


def make_dataset(n, seed, resolution=64):
    """n i.i.d. records with uniform content and nuisance draws."""
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    records = []
    for i in range(n):
        content, nuisance, template_seed = _draw_sample(seed, i)
        records.append(
            SampleRecord(
                image=render(content, nuisance, resolution),
                caption=caption_of(content, template_seed),
                content=content,
                nuisance=nuisance,
                seed=template_seed,
            )
        )
    return records


class ShapesDataset:
    """In-memory dataset rendered at one base resolution.

    Images are stored as uint8 and converted per batch; lower resolutions are
    derived by exact average pooling so every scale shows the same scene.
    """

    def __init__(self, images_uint8, captions, contents, nuisances, seed, resolution):
        self.images_uint8 = images_uint8  # (N, H, W, 3) numpy uint8
        self.captions = captions
        self.contents = contents
        self.nuisances = nuisances
        self.seed = seed
        self.resolution = resolution

    def __len__(self):
        return len(self.captions)

    @classmethod
    def generate(cls, n, seed, resolution=128):
        if n < 1:
            raise ConfigError(f"dataset size must be >= 1, got {n}")
        images = np.empty((n, resolution, resolution, 3), dtype=np.uint8)
        captions, contents, nuisances = [], [], []
        for i in range(n):
            content, nuisance, template_seed = _draw_sample(seed, i)
            images[i] = render_uint8(content, nuisance, resolution)
            captions.append(caption_of(content, template_seed))
            contents.append(content)
            nuisances.append(nuisance)
        return cls(images, captions, contents, nuisances, seed, resolution)

    def images_at(self, indices, resolution):
        imgs = uint8_to_tensor(self.images_uint8[indices])
        return pool_to_resolution(imgs, resolution)

    def class_histogram(self):
        counts = [0] * NUM_CLASSES
        for c in self.contents:
            counts[c.class_index] += 1
        return counts


def pool_to_resolution(images, resolution):
    """Average-pool (B, 3, H, W) down to a resolution dividing H exactly."""
    h = images.shape[-1]
    if h == resolution:
        return images
    if h % resolution:
        raise ConfigError(f"cannot pool {h} -> {resolution} exactly")
    return F.avg_pool2d(images, h // resolution)


def export_dataset(records, out_dir):
    """Write PNG images plus a metadata CSV next to them."""
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metadata.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "caption", "shape", "color", "cx", "cy", "rotation", "scale", "seed"])
        for i, rec in enumerate(records):
            name = f"{i:06d}.png"
            arr = tensor_to_uint8(rec.image)
            Image.fromarray(arr).save(os.path.join(image_dir, name))
            writer.writerow([
                i, rec.caption, rec.content.shape, rec.content.color,
                repr(rec.nuisance.cx), repr(rec.nuisance.cy),
                repr(rec.nuisance.rotation), repr(rec.nuisance.scale), rec.seed,
            ])


def load_dataset(in_dir):
    """Read back a dataset directory with the export schema."""
    meta_path = os.path.join(in_dir, "metadata.csv")
    if not os.path.exists(meta_path):
        raise ConfigError(f"no metadata.csv under {in_dir}")
    records = []
    with open(meta_path, newline="") as f:
        for row in csv.DictReader(f):
            img = Image.open(os.path.join(in_dir, "images", f"{int(row['index']):06d}.png"))
            records.append(
                SampleRecord(
                    image=uint8_to_tensor(np.asarray(img, dtype=np.uint8)),
                    caption=row["caption"],
                    content=ContentAttributes(row["shape"], row["color"]),
                    nuisance=NuisanceAttributes(
                        float(row["cx"]), float(row["cy"]),
                        float(row["rotation"]), float(row["scale"]),
                    ),
                    seed=int(row["seed"]),
                )
            )
    return records


def records_to_shapes_dataset(records, seed=0):
    images = np.stack([tensor_to_uint8(r.image) for r in records])
    return ShapesDataset(
        images,
        [r.caption for r in records],
        [r.content for r in records],
        [r.nuisance for r in records],
        seed,
        images.shape[1],
    )


PROBE_RESOLUTION = 64
PROBE_FEATURE_DIM = 64


class ProbeClassifier(nn.Module):
    """Predicts (shape, color) from an image; trained on renderer output only.

    The penultimate 64-wide layer doubles as the feature space for the
    distribution-distance metric. `heldout_accuracy` records joint accuracy
    on a split never used for fitting.
    """

    def __init__(self, width=32):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width * 2, width * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width * 2, width * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        # flatten the 4x4 map: shape identity lives in spatial structure
        self.feature = nn.Linear(width * 2 * 4 * 4, PROBE_FEATURE_DIM)
        self.shape_head = nn.Linear(PROBE_FEATURE_DIM, len(SHAPES))
        self.color_head = nn.Linear(PROBE_FEATURE_DIM, len(COLORS))
        self.heldout_accuracy = 0.0

    def _prepare(self, images):
        if images.shape[-1] != PROBE_RESOLUTION:
            images = pool_to_resolution(images, PROBE_RESOLUTION)
        return images

    def features(self, images):
        x = self.trunk(self._prepare(images))
        return F.relu(self.feature(x.flatten(1)))

    def forward(self, images):
        f = self.features(images)
        return self.shape_head(f), self.color_head(f)

    @torch.no_grad()
    def predict(self, images):
        """Returns (shape_idx, color_idx) LongTensors."""
        shape_logits, color_logits = self(images)
        return shape_logits.argmax(dim=1), color_logits.argmax(dim=1)

    def save(self, path):
        torch.save({"state": self.state_dict(), "heldout_accuracy": self.heldout_accuracy}, path)

    @classmethod
    def load(cls, path):
        payload = torch.load(path, weights_only=True)
        probe = cls()
        probe.load_state_dict(payload["state"])
        probe.heldout_accuracy = payload["heldout_accuracy"]
        probe.eval()
        return probe


def train_probe(dataset, epochs=6, batch_size=64, lr=1e-3, seed=0, holdout_fraction=0.2):
    """Fit the probe on rendered images and report held-out joint accuracy.

    dataset: ShapesDataset or a SampleRecord list.
    """
    if isinstance(dataset, list):
        dataset = records_to_shapes_dataset(dataset)
    labels = torch.tensor(
        [[SHAPES.index(c.shape), COLORS.index(c.color)] for c in dataset.contents]
    )
    if len(set(c.class_index for c in dataset.contents)) < 2:
        raise ConfigError("probe training needs at least two content classes")

    torch.manual_seed(seed)
    probe = ProbeClassifier()
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    n = len(dataset)
    gen = torch.Generator().manual_seed(seed)
    perm = torch.randperm(n, generator=gen)
    n_hold = max(1, int(n * holdout_fraction))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]

    probe.train()
    for _ in range(epochs):
        order = train_idx[torch.randperm(len(train_idx), generator=gen)]
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            images = dataset.images_at(idx.numpy(), PROBE_RESOLUTION)
            shape_logits, color_logits = probe(images)
            loss = F.cross_entropy(shape_logits, labels[idx, 0]) + F.cross_entropy(
                color_logits, labels[idx, 1]
            )
            opt.zero_grad()
            loss.backward()
            opt.step()

    probe.eval()
    with torch.no_grad():
        images = dataset.images_at(hold_idx.numpy(), PROBE_RESOLUTION)
        shape_pred, color_pred = probe.predict(images)
        correct = (shape_pred == labels[hold_idx, 0]) & (color_pred == labels[hold_idx, 1])
        probe.heldout_accuracy = correct.float().mean().item()
    return probe
