"""Deterministic, replayable data augmentation.

A transform is fully described by a small descriptor (kind plus a few
scalars), so the training engine stores descriptors instead of transformed
images and regenerates replicas on demand. Applying a descriptor is a pure
function of (image, descriptor): rotation and shift use nearest-neighbor
resampling with zero padding, and jitter noise is derived from a seed
carried in the descriptor, so regeneration is bit-identical to the first
application.

Descriptor scalars are quantized to 32-bit floats at sampling time; the
packed binary form (kind byte plus fixed parameter slots) therefore
round-trips exactly and stays well under 32 bytes per descriptor.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ConfigError, ShapeError

KINDS = ("identity", "rotation", "shift", "pixel_jitter", "horizontal_flip")
_KIND_CODES = {k: i for i, k in enumerate(KINDS)}

MAX_DESCRIPTOR_BYTES = 32


class TransformDescriptor:
    """One transform: kind, kind-specific scalars, replica slot."""

    __slots__ = ("kind", "params", "replica_index")

    def __init__(self, kind, params=(), replica_index=0):
        if kind not in KINDS:
            raise ConfigError(f"unknown transform kind {kind!r}")
        self.kind = kind
        self.params = tuple(params)
        self.replica_index = int(replica_index)

    def __eq__(self, other):
        return (
            isinstance(other, TransformDescriptor)
            and (self.kind, self.params, self.replica_index)
            == (other.kind, other.params, other.replica_index)
        )

    def __repr__(self):
        return f"TransformDescriptor({self.kind!r}, {self.params!r}, {self.replica_index})"


class AugmentPolicy:
    """Sampling ranges for one dataset's transforms.

    Digit defaults: rotation within +/-15 degrees, integer shifts within
    +/-2 pixels, additive jitter of amplitude 0.05, horizontal flip disabled
    (flipping digits destroys labels). Non-image data (degenerate shapes)
    falls back to jitter only.
    """

    __slots__ = ("image_shape", "rotation_limit", "shift_limit", "jitter_amplitude", "allow_flip", "clip", "_kinds")

    def __init__(
        self,
        image_shape,
        rotation_limit=15.0,
        shift_limit=2,
        jitter_amplitude=0.05,
        allow_flip=False,
        clip=(0.0, 1.0),
        kinds=None,
    ):
        h, w = image_shape
        if h < 1 or w < 1:
            raise ConfigError("image shape must be positive")
        self.image_shape = (int(h), int(w))
        self.rotation_limit = float(rotation_limit)
        self.shift_limit = int(shift_limit)
        self.jitter_amplitude = float(jitter_amplitude)
        self.allow_flip = bool(allow_flip)
        self.clip = clip
        if kinds is not None:
            self._kinds = tuple(kinds)
        elif min(self.image_shape) < 3:
            self._kinds = ("pixel_jitter",)
        else:
            base = ["rotation", "shift", "pixel_jitter"]
            if self.allow_flip:
                base.append("horizontal_flip")
            self._kinds = tuple(base)
        for k in self._kinds:
            if k not in KINDS:
                raise ConfigError(f"unknown transform kind {k!r}")

    def enabled_kinds(self):
        return self._kinds


class TransformSet:
    """The descriptors drawn for one batch, plus the geometry they act on."""

    __slots__ = ("descriptors", "image_shape", "clip")

    def __init__(self, descriptors, image_shape, clip=(0.0, 1.0)):
        self.descriptors = tuple(descriptors)
        self.image_shape = (int(image_shape[0]), int(image_shape[1]))
        self.clip = clip

    def __len__(self):
        return len(self.descriptors)


def _f32(x):
    return float(np.float32(x))


def sample_descriptors(K, rng, policy):
    """Draw K descriptors for one batch; slot 0 is always the identity so the
    untransformed batch contributes to every loss."""
    if K < 1:
        raise ConfigError("need at least one transform replica")
    descs = [TransformDescriptor("identity", (), 0)]
    kinds = policy.enabled_kinds()
    for k in range(1, K):
        kind = kinds[int(rng.integers(len(kinds)))]
        if kind == "rotation":
            params = (_f32(rng.uniform(-policy.rotation_limit, policy.rotation_limit)),)
        elif kind == "shift":
            s = policy.shift_limit
            dx, dy = (int(v) for v in rng.integers(-s, s + 1, size=2))
            params = (float(dx), float(dy))
        elif kind == "pixel_jitter":
            params = (float(rng.integers(2**32)), _f32(policy.jitter_amplitude))
        else:  # horizontal_flip, identity
            params = ()
        descs.append(TransformDescriptor(kind, params, k))
    return TransformSet(descs, policy.image_shape, policy.clip)


def _rotation_map(shape, angle_deg):
    """Nearest-neighbor inverse mapping for a rotation about the image center."""
    h, w = shape
    theta = np.deg2rad(float(angle_deg))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.indices((h, w))
    dr = rows - cy
    dc = cols - cx
    cos, sin = np.cos(theta), np.sin(theta)
    sr = np.rint(cy + cos * dr + sin * dc).astype(np.intp)
    sc = np.rint(cx - sin * dr + cos * dc).astype(np.intp)
    inside = (sr >= 0) & (sr < h) & (sc >= 0) & (sc < w)
    return inside, sr.clip(0, h - 1), sc.clip(0, w - 1)


def _jitter_noise(shape, seed, amplitude):
    gen = np.random.Generator(np.random.PCG64(int(seed)))
    return gen.uniform(-amplitude, amplitude, shape)


def _validate(desc, shape):
    h, w = shape
    if desc.kind == "rotation":
        if abs(desc.params[0]) > 180.0:
            raise ConfigError(f"rotation angle {desc.params[0]} out of range")
    elif desc.kind == "shift":
        dx, dy = int(desc.params[0]), int(desc.params[1])
        if abs(dx) >= w or abs(dy) >= h:
            raise ConfigError(f"shift ({dx}, {dy}) out of range for shape {shape}")
    elif desc.kind == "pixel_jitter":
        if desc.params[1] < 0:
            raise ConfigError("jitter amplitude must be nonnegative")


def _apply_stack(stack, desc, shape, clip):
    """Transform a [B, H, W] stack with one descriptor; pure and replayable."""
    _validate(desc, shape)
    h, w = shape
    if desc.kind == "identity":
        return stack.copy()
    if desc.kind == "rotation":
        inside, sr, sc = _rotation_map(shape, desc.params[0])
        out = stack[:, sr, sc]
        out[:, ~inside] = 0
        return out
    if desc.kind == "shift":
        dx, dy = int(desc.params[0]), int(desc.params[1])
        out = np.zeros_like(stack)
        r0, r1 = max(0, dy), min(h, h + dy)
        c0, c1 = max(0, dx), min(w, w + dx)
        out[:, r0:r1, c0:c1] = stack[:, r0 - dy : r1 - dy, c0 - dx : c1 - dx]
        return out
    if desc.kind == "pixel_jitter":
        noise = _jitter_noise((h, w), desc.params[0], desc.params[1]).astype(stack.dtype)
        out = stack + noise
        if clip is not None:
            np.clip(out, clip[0], clip[1], out=out)
        return out
    # horizontal_flip
    return stack[:, :, ::-1].copy()


def apply(image, descriptor, clip=(0.0, 1.0)):
    """Apply one descriptor to a single 2-D image.

    Pure: the same (image, descriptor) always yields a bit-identical result.
    Output stays clipped to the valid pixel range where the transform can
    leave it (jitter).
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ShapeError("apply expects a single 2-D image")
    return _apply_stack(img[None], descriptor, img.shape, clip)[0]


def replicate_batch(images, tset):
    """Stack all K transform replicas of a flat [B, D] batch, replica-major:
    rows [k*B, (k+1)*B) hold replica k."""
    images = np.asarray(images)
    h, w = tset.image_shape
    if images.ndim != 2 or images.shape[1] != h * w:
        raise ShapeError(f"batch shape {images.shape} does not match image shape {tset.image_shape}")
    stack = images.reshape(images.shape[0], h, w)
    reps = [_apply_stack(stack, d, (h, w), tset.clip) for d in tset.descriptors]
    return np.concatenate(reps, axis=0).reshape(len(tset.descriptors) * images.shape[0], h * w)


def descriptor_bytes(desc):
    """Packed form: kind byte, replica slot, then fixed parameter slots."""
    head = struct.pack("<BH", _KIND_CODES[desc.kind], desc.replica_index)
    if desc.kind == "rotation":
        return head + struct.pack("<f", desc.params[0])
    if desc.kind == "shift":
        return head + struct.pack("<bb", int(desc.params[0]), int(desc.params[1]))
    if desc.kind == "pixel_jitter":
        return head + struct.pack("<If", int(desc.params[0]), desc.params[1])
    return head


def transform_set_bytes(tset):
    return struct.pack("<H", len(tset.descriptors)) + b"".join(descriptor_bytes(d) for d in tset.descriptors)


def transform_set_nbytes(tset):
    return len(transform_set_bytes(tset))


def parse_transform_set(data, image_shape, clip=(0.0, 1.0)):
    """Inverse of transform_set_bytes; exact because scalars are stored at the
    same 32-bit precision they were sampled at."""
    (count,) = struct.unpack_from("<H", data, 0)
    off = 2
    codes = {v: k for k, v in _KIND_CODES.items()}
    descs = []
    for _ in range(count):
        code, replica = struct.unpack_from("<BH", data, off)
        off += 3
        kind = codes[code]
        if kind == "rotation":
            (angle,) = struct.unpack_from("<f", data, off)
            off += 4
            params = (float(angle),)
        elif kind == "shift":
            dx, dy = struct.unpack_from("<bb", data, off)
            off += 2
            params = (float(dx), float(dy))
        elif kind == "pixel_jitter":
            seed, amp = struct.unpack_from("<If", data, off)
            off += 8
            params = (float(seed), float(amp))
        else:
            params = ()
        descs.append(TransformDescriptor(kind, params, replica))
    return TransformSet(descs, image_shape, clip)
