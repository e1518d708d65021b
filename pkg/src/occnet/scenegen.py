"""Occluded-stereo scene generation from a digit corpus.

Each scene places a target digit and two occluding digits of distinct
classes on a 32x32 canvas, composited back-to-front (target rearmost).
Left/right views shift each occluder horizontally by half its disparity
while the target stays at zero disparity. Datasets are written as
fixed-record binary shards plus a human-readable manifest.
"""

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

CANVAS = 32
DIGIT = 28
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# [label u16][occluder labels 2 x u16][occlusion fraction f32][left 1024 u8][right 1024 u8]
RECORD_DTYPE = np.dtype([
    ("label", "<u2"),
    ("occluders", "<u2", (2,)),
    ("fraction", "<f4"),
    ("left", "u1", (CANVAS, CANVAS)),
    ("right", "u1", (CANVAS, CANVAS)),
])
RECORD_BYTES = RECORD_DTYPE.itemsize

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


class IdxFormatError(ValueError):
    pass


def _open_maybe_gz(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx_images(path):
    """Parse an IDX3 image file into a (n, rows, cols) uint8 array."""
    with _open_maybe_gz(path) as fh:
        head = fh.read(16)
        if len(head) < 16:
            raise IdxFormatError(f"{path}: truncated header")
        magic, n, rows, cols = struct.unpack(">IIII", head)
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected images file")
        data = fh.read(n * rows * cols)
        if len(data) != n * rows * cols:
            raise IdxFormatError(f"{path}: truncated, expected {n * rows * cols} pixels")
        return np.frombuffer(data, dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path):
    with _open_maybe_gz(path) as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise IdxFormatError(f"{path}: truncated header")
        magic, n = struct.unpack(">II", head)
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected labels file")
        data = fh.read(n)
        if len(data) != n:
            raise IdxFormatError(f"{path}: truncated, expected {n} labels")
        return np.frombuffer(data, dtype=np.uint8).copy()


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def load_mnist_idx(mnist_dir):
    """Load the four standard IDX files from a directory.

    Returns (train_images, train_labels, test_images, test_labels) with
    images rescaled to [0, 1] float32. Accepts .gz variants.
    """
    def find(name):
        for cand in (name, name + ".gz"):
            p = os.path.join(mnist_dir, cand)
            if os.path.exists(p):
                return p
        raise FileNotFoundError(f"{name}[.gz] not found in {mnist_dir}")

    out = []
    for img_name, lbl_name in ((TRAIN_IMAGES, TRAIN_LABELS), (TEST_IMAGES, TEST_LABELS)):
        imgs = read_idx_images(find(img_name))
        lbls = read_idx_labels(find(lbl_name))
        if len(imgs) != len(lbls):
            raise IdxFormatError(
                f"{img_name}: {len(imgs)} images but {len(lbls)} labels")
        out += [imgs.astype(np.float32) / 255.0, lbls]
    return tuple(out)


def corpus_checksum(mnist_dir):
    """sha256 over the raw bytes of the four IDX files."""
    h = hashlib.sha256()
    for name in (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS):
        for cand in (name, name + ".gz"):
            p = os.path.join(mnist_dir, cand)
            if os.path.exists(p):
                with open(p, "rb") as fh:
                    h.update(fh.read())
                break
    return h.hexdigest()


def synthesize_digit_corpus(out_dir, upscale_order=1):
    """Write an MNIST-format IDX corpus built from sklearn's 8x8 digits.

    A stand-in for environments where the real MNIST files are not
    available; images are bilinearly upscaled to 28x28. Deterministic
    split: every 6th digit goes to the test set.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    d = load_digits()
    images = np.stack([
        np.clip(zoom(img / 16.0, DIGIT / img.shape[0], order=upscale_order), 0, 1)
        for img in d.images
    ])
    images = (images * 255).round().astype(np.uint8)
    labels = d.target.astype(np.uint8)
    idx = np.arange(len(labels))
    test = idx % 6 == 0
    os.makedirs(out_dir, exist_ok=True)
    write_idx_images(os.path.join(out_dir, TRAIN_IMAGES), images[~test])
    write_idx_labels(os.path.join(out_dir, TRAIN_LABELS), labels[~test])
    write_idx_images(os.path.join(out_dir, TEST_IMAGES), images[test])
    write_idx_labels(os.path.join(out_dir, TEST_LABELS), labels[test])
    return int((~test).sum()), int(test.sum())


@dataclass
class SceneSample:
    left: np.ndarray            # (32, 32) float32 in [0, 1]
    right: np.ndarray
    label: int
    occluder_labels: tuple      # (far, near)
    occlusion_fraction: float
    placements: tuple           # ((x, y) target, (x, y) far, (x, y) near)
    seed_path: tuple            # (seed, split id, base index, sample index)


def _paste(canvas, digit, x, y):
    """Composite a digit at offset (x, y); ink (> 0) replaces."""
    x0, y0 = max(0, x), max(0, y)
    x1, y1 = min(CANVAS, x + DIGIT), min(CANVAS, y + DIGIT)
    if x0 >= x1 or y0 >= y1:
        return
    sub = digit[y0 - y:y1 - y, x0 - x:x1 - x]
    region = canvas[y0:y1, x0:x1]
    mask = sub > 0
    region[mask] = sub[mask]


def _mask_on_canvas(digit, x, y):
    m = np.zeros((CANVAS, CANVAS), dtype=bool)
    x0, y0 = max(0, x), max(0, y)
    x1, y1 = min(CANVAS, x + DIGIT), min(CANVAS, y + DIGIT)
    if x0 < x1 and y0 < y1:
        m[y0:y1, x0:x1] = digit[y0 - y:y1 - y, x0 - x:x1 - x] > 0
    return m


def composite(digits, offsets, shifts=None):
    """Back-to-front composite of digits at (x, y) offsets.

    digits are ordered rear to front; shifts are per-digit horizontal
    offsets (stereo disparity), default zero.
    """
    canvas = np.zeros((CANVAS, CANVAS), dtype=np.float32)
    shifts = shifts or [0] * len(digits)
    for digit, (x, y), s in zip(digits, offsets, shifts):
        _paste(canvas, digit, x + s, y)
    return canvas


def _intersection_area(x, y):
    ix = min(CANVAS, x + DIGIT) - max(0, x)
    iy = min(CANVAS, y + DIGIT) - max(0, y)
    return max(ix, 0) * max(iy, 0)


def _sample_offset(rng):
    # uniform over integer offsets keeping >= half of the digit box on canvas
    while True:
        x = int(rng.integers(-DIGIT + 1, CANVAS))
        y = int(rng.integers(-DIGIT + 1, CANVAS))
        if 2 * _intersection_area(x, y) >= DIGIT * DIGIT:
            return x, y


def render_stereo(digits, offsets, disparities):
    """Render left/right views; digits rear to front, target first.

    disparities: (far, near) total horizontal disparity in pixels (even);
    each occluder shifts by +-d/2, the target by zero.
    """
    d_far, d_near = disparities
    if d_far % 2 or d_near % 2:
        raise ValueError("disparities must be even pixel counts")
    left = composite(digits, offsets, [0, d_far // 2, d_near // 2])
    right = composite(digits, offsets, [0, -d_far // 2, -d_near // 2])
    return left, right


def occlusion_fraction(digits, offsets):
    """Covered fraction of the target's ink in the cyclopean composite."""
    target_mask = _mask_on_canvas(digits[0], *offsets[0])
    occ = _mask_on_canvas(digits[1], *offsets[1]) | _mask_on_canvas(digits[2], *offsets[2])
    total = int(target_mask.sum())
    if total == 0:
        return None
    return float((target_mask & occ).sum() / total)


def compose_scene(target_img, target_label, pool_images, pool_labels, rng,
                  disparities=(2, 4), occ_range=(0.20, 0.80), seed_path=()):
    """Build one occluded stereo scene around a target digit.

    Occluder classes are distinct from each other and from the target.
    Placements are resampled (up to 1000 times) until the cyclopean
    occlusion fraction falls in occ_range; after that the occluder
    identities themselves are redrawn, up to 10 times.
    """
    if len(set(pool_labels.tolist()) - {target_label}) < 2:
        raise ValueError("occluder pool must contain at least 2 classes besides the target's")
    lo, hi = occ_range
    for _ in range(10):
        while True:
            i1 = int(rng.integers(len(pool_images)))
            if pool_labels[i1] != target_label:
                break
        while True:
            i2 = int(rng.integers(len(pool_images)))
            if pool_labels[i2] != target_label and pool_labels[i2] != pool_labels[i1]:
                break
        digits = [target_img, pool_images[i1], pool_images[i2]]
        for _ in range(1000):
            offsets = [_sample_offset(rng) for _ in range(3)]
            frac = occlusion_fraction(digits, offsets)
            if frac is not None and lo <= frac <= hi:
                left, right = render_stereo(digits, offsets, disparities)
                return SceneSample(
                    left=left, right=right, label=int(target_label),
                    occluder_labels=(int(pool_labels[i1]), int(pool_labels[i2])),
                    occlusion_fraction=frac, placements=tuple(offsets),
                    seed_path=tuple(seed_path))
    raise RuntimeError("could not satisfy the occlusion constraint after 10 occluder redraws")


def pack_record(sample):
    rec = np.zeros(1, dtype=RECORD_DTYPE)
    rec["label"] = sample.label
    rec["occluders"] = sample.occluder_labels
    rec["fraction"] = sample.occlusion_fraction
    rec["left"] = (np.clip(sample.left, 0, 1) * 255).round().astype(np.uint8)
    rec["right"] = (np.clip(sample.right, 0, 1) * 255).round().astype(np.uint8)
    return rec.tobytes()


def unpack_records(buf):
    """Decode a shard byte string into arrays.

    Returns (labels, occluder_labels, fractions, left, right) with
    images as (n, 32, 32) uint8.
    """
    if len(buf) % RECORD_BYTES:
        raise ValueError(f"shard size {len(buf)} is not a multiple of {RECORD_BYTES}")
    rec = np.frombuffer(buf, dtype=RECORD_DTYPE)
    return (rec["label"].copy(), rec["occluders"].copy(), rec["fraction"].copy(),
            rec["left"].copy(), rec["right"].copy())


def _base_records(args):
    (images, labels, pool_images, pool_labels, base_ids, seed, split_id,
     samples_per_base, disparities) = args
    out = []
    for i in base_ids:
        rng = np.random.default_rng([seed, split_id, int(i)])
        for s in range(samples_per_base):
            sample = compose_scene(images[i], labels[i], pool_images, pool_labels,
                                   rng, disparities, seed_path=(seed, split_id, int(i), s))
            out.append(pack_record(sample))
    return b"".join(out)


def generate_dataset(out_dir, mnist_dir, seed, samples_per_base=10, limit_bases=None,
                     disparities=(2, 4), shard_size=100_000, workers=None):
    """Generate train/test shards plus the manifest.

    Each base digit yields samples_per_base scenes; occluders come from
    the same split only. Per-base rng streams are derived from
    (seed, split, base index), so output is independent of worker count.
    """
    train_x, train_y, test_x, test_y = load_mnist_idx(mnist_dir)
    os.makedirs(out_dir, exist_ok=True)
    if workers is None:
        workers = int(os.environ.get("RCNN_THREADS", "0")) or 1
    counts = {}
    shard_counts = {}
    for split_id, (split, images, labels) in enumerate(
            (("train", train_x, train_y), ("test", test_x, test_y))):
        n_bases = len(images) if limit_bases is None else min(limit_bases, len(images))
        base_ids = np.arange(n_bases)
        chunks = [base_ids[i:i + 256] for i in range(0, n_bases, 256)]
        jobs = [(images, labels, images, labels, chunk, seed, split_id,
                 samples_per_base, tuple(disparities)) for chunk in chunks]
        if workers > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(max_workers=workers) as ex:
                blobs = list(ex.map(_base_records, jobs))
        else:
            blobs = [_base_records(job) for job in jobs]
        data = b"".join(blobs)
        n = len(data) // RECORD_BYTES
        counts[split] = n
        shard_bytes = shard_size * RECORD_BYTES
        n_shards = max(1, -(-len(data) // shard_bytes))
        shard_counts[split] = n_shards
        for k in range(n_shards):
            with open(os.path.join(out_dir, f"{split}_{k:03d}.bin"), "wb") as fh:
                fh.write(data[k * shard_bytes:(k + 1) * shard_bytes])
    manifest = {
        "format_version": 1,
        "seed": seed,
        "samples_per_base": samples_per_base,
        "limit_bases": "" if limit_bases is None else limit_bases,
        "train_count": counts["train"],
        "test_count": counts["test"],
        "train_shards": shard_counts["train"],
        "test_shards": shard_counts["test"],
        "shard_size": shard_size,
        "disparity_far": disparities[0],
        "disparity_near": disparities[1],
        "record_bytes": RECORD_BYTES,
        "source_checksum": corpus_checksum(mnist_dir),
    }
    write_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    return manifest


def write_manifest(path, manifest):
    with open(path, "w") as fh:
        for k, v in manifest.items():
            fh.write(f"{k}={v}\n")


def read_manifest(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            k, _, v = line.strip().partition("=")
            out[k] = int(v) if v.lstrip("-").isdigit() else v
    return out


def load_dataset(dataset_dir, split, limit=None):
    """Load one split of a generated dataset.

    Returns a dict with labels, occluder_labels, fractions, left, right
    (uint8 images) and a checksum over the records actually used, so
    evaluations on the same data agree on provenance.
    """
    manifest = read_manifest(os.path.join(dataset_dir, "manifest.txt"))
    parts = []
    k = 0
    while True:
        p = os.path.join(dataset_dir, f"{split}_{k:03d}.bin")
        if not os.path.exists(p):
            break
        with open(p, "rb") as fh:
            parts.append(fh.read())
        k += 1
    if not parts:
        raise FileNotFoundError(f"no {split} shards in {dataset_dir}")
    data = b"".join(parts)
    if limit is not None:
        data = data[:limit * RECORD_BYTES]
    labels, occ, frac, left, right = unpack_records(data)
    return {
        "labels": labels, "occluder_labels": occ, "fractions": frac,
        "left": left, "right": right, "manifest": manifest,
        "checksum": hashlib.sha256(data).hexdigest(),
    }


def to_model_input(left, right, stereo, dtype=np.float32):
    """Stack shard images into the network's NHWC input tensor.

    Stereo input stacks (left, right) as two channels; mono uses the
    left view only.
    """
    left = left.astype(dtype) / 255.0
    if not stereo:
        return left[..., None]
    right = right.astype(dtype) / 255.0
    return np.stack([left, right], axis=-1)
