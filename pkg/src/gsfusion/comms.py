"""Gaussian packaging for inter-agent exchange: rigid alignment into the
receiver's frame, region-of-interest culling, stacking, the GMSG wire
format, and communication-volume accounting with budget enforcement.

Wire record layout (little-endian, per Gaussian): mean xyz, scale xyz,
quaternion wxyz, opacity, then the semantic weights, 24 scalars total.
fp16 encoding makes that 48 bytes per primitive; fp32 doubles it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from gsfusion.core import (
    GaussianSet,
    RigidTransform,
    Roi,
    SemanticGaussian,
    _canonical_sign,
    canonicalize_quaternion,
    quat_multiply,
    quat_normalize,
)

GMSG_MAGIC = b"GMSG"
GMSG_VERSION = 1
PRECISION_FP16 = 0
PRECISION_FP32 = 1

HEADER_SIZE = 24
_HEADER = struct.Struct("<4sHHIIII")  # magic, version, precision, sender, receiver, frame, count


class DecodeError(ValueError):
    """Base class for malformed GMSG payloads."""


class BadMagicError(DecodeError):
    pass


class VersionMismatchError(DecodeError):
    pass


class TruncatedPayloadError(DecodeError):
    pass


class CorruptFieldError(DecodeError):
    pass


# ---------------------------------------------------------------------------
# rigid alignment and culling
# ---------------------------------------------------------------------------

def transform_gaussian(g: SemanticGaussian, t: RigidTransform) -> SemanticGaussian:
    """Express a Gaussian in the frame `t` maps into.

    The mean is moved, the quaternion is composed (and re-canonicalized);
    scale, opacity and semantics are carried over unchanged, so the
    ellipsoid rotates without changing its axis lengths.
    """
    mean = t.apply(g.mean)
    rot = canonicalize_quaternion(quat_multiply(t.rotation_q, g.rotation))
    return SemanticGaussian(mean, g.scale.copy(), rot, g.opacity, g.semantics.copy())


def transform_set(gs: GaussianSet, t: RigidTransform) -> GaussianSet:
    """Vectorized transform_gaussian over a whole set."""
    if len(gs) == 0:
        return gs.copy()
    means = t.apply(gs.means)
    rot = quat_normalize(quat_multiply(t.rotation_q[None, :], gs.rotations))
    rot = rot * _canonical_sign(rot)
    return GaussianSet(means, gs.scales.copy(), rot, gs.opacities.copy(), gs.semantics.copy())


def cull_to_roi(gaussians: GaussianSet, t: RigidTransform, roi: Roi) -> GaussianSet:
    """Transform into the receiver frame and keep Gaussians whose transformed
    means fall inside the ROI box (closed bounds)."""
    moved = transform_set(gaussians, t)
    if len(moved) == 0:
        return moved
    return moved.take(roi.contains(moved.means))


def stack(ego: GaussianSet, received: list[GaussianSet]) -> GaussianSet:
    """Concatenate the ego set with received sets (already in the ego frame),
    ego first, then received in caller order (sender-id order by contract)."""
    return GaussianSet.concat([ego] + list(received))


# ---------------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------------

@dataclass
class GaussianMessage:
    """One serialized transmission: header fields plus the payload set."""

    sender_id: int
    receiver_id: int
    frame_tag: int
    gaussians: GaussianSet
    precision: int = PRECISION_FP16

    @property
    def count(self) -> int:
        return len(self.gaussians)

    def byte_length(self) -> int:
        return HEADER_SIZE + self.count * record_size(self.precision,
                                                      self.gaussians.num_classes)


def record_size(precision: int, num_classes: int = 13) -> int:
    scalars = 3 + 3 + 4 + 1 + num_classes
    width = 2 if precision == PRECISION_FP16 else 4
    return scalars * width


def serialize_message(msg: GaussianMessage) -> bytes:
    gs = msg.gaussians
    header = _HEADER.pack(GMSG_MAGIC, GMSG_VERSION, msg.precision,
                          msg.sender_id, msg.receiver_id, msg.frame_tag, msg.count)
    if msg.count == 0:
        return header
    flat = np.concatenate(
        [gs.means, gs.scales, gs.rotations, gs.opacities[:, None], gs.semantics], axis=1
    )
    dtype = "<f2" if msg.precision == PRECISION_FP16 else "<f4"
    return header + np.ascontiguousarray(flat, dtype=dtype).tobytes()


def deserialize_message(data: bytes, num_classes: int = 13) -> GaussianMessage:
    """Decode GMSG bytes back into a message.

    Quaternions are renormalized and re-canonicalized and opacities clipped
    into [0, 1] so the decoded Gaussians satisfy the core invariants despite
    quantization. Malformed inputs raise a DecodeError subclass.
    """
    if len(data) < HEADER_SIZE:
        raise TruncatedPayloadError("message shorter than header")
    magic, version, precision, sender, receiver, frame, count = _HEADER.unpack_from(data, 0)
    if magic != GMSG_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != GMSG_VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    if precision not in (PRECISION_FP16, PRECISION_FP32):
        raise CorruptFieldError(f"unknown precision code {precision}")
    rec = record_size(precision, num_classes)
    expect = HEADER_SIZE + count * rec
    if len(data) != expect:
        raise TruncatedPayloadError(f"expected {expect} bytes, got {len(data)}")
    if count == 0:
        gs = GaussianSet.empty(num_classes)
        return GaussianMessage(sender, receiver, frame, gs, precision)
    dtype = "<f2" if precision == PRECISION_FP16 else "<f4"
    flat = np.frombuffer(data, dtype=dtype, offset=HEADER_SIZE).astype(np.float64)
    flat = flat.reshape(count, 11 + num_classes)
    if not np.all(np.isfinite(flat)):
        raise CorruptFieldError("non-finite field in payload")
    scales = flat[:, 3:6]
    if np.any(scales <= 0.0):
        raise CorruptFieldError("non-positive scale in payload")
    rot_raw = flat[:, 6:10]
    norms = np.linalg.norm(rot_raw, axis=1)
    if np.any(norms == 0.0):
        raise CorruptFieldError("zero quaternion in payload")
    rot = rot_raw / norms[:, None]
    rot = rot * _canonical_sign(rot)
    sem = flat[:, 11:]
    if np.any(sem < 0.0):
        raise CorruptFieldError("negative semantic weight in payload")
    gs = GaussianSet(
        means=flat[:, 0:3],
        scales=scales,
        rotations=rot,
        opacities=np.clip(flat[:, 10], 0.0, 1.0),
        semantics=sem,
    )
    return GaussianMessage(sender, receiver, frame, gs, precision)


# ---------------------------------------------------------------------------
# accounting and budget
# ---------------------------------------------------------------------------

@dataclass
class LinkStats:
    messages: int = 0
    gaussians: int = 0
    bytes: int = 0


@dataclass
class CommStats:
    """Monotone accumulator of transmitted message volume."""

    messages_sent: int = 0
    gaussians_sent: int = 0
    bytes_sent: int = 0
    messages_rejected: int = 0
    per_link: dict = field(default_factory=dict)

    def record(self, msg: GaussianMessage, nbytes: int) -> None:
        self.messages_sent += 1
        self.gaussians_sent += msg.count
        self.bytes_sent += nbytes
        link = self.per_link.setdefault((msg.sender_id, msg.receiver_id), LinkStats())
        link.messages += 1
        link.gaussians += msg.count
        link.bytes += nbytes

    def record_rejected(self) -> None:
        self.messages_rejected += 1

    def merge(self, other: "CommStats") -> "CommStats":
        out = CommStats(
            self.messages_sent + other.messages_sent,
            self.gaussians_sent + other.gaussians_sent,
            self.bytes_sent + other.bytes_sent,
            self.messages_rejected + other.messages_rejected,
            {k: LinkStats(v.messages, v.gaussians, v.bytes) for k, v in self.per_link.items()},
        )
        for k, v in other.per_link.items():
            link = out.per_link.setdefault(k, LinkStats())
            link.messages += v.messages
            link.gaussians += v.gaussians
            link.bytes += v.bytes
        return out


def communication_volume(stats: CommStats) -> dict:
    """Total bytes plus per-agent and per-message averages."""
    per_sender: dict[int, int] = {}
    per_receiver: dict[int, int] = {}
    for (s, r), link in stats.per_link.items():
        per_sender[s] = per_sender.get(s, 0) + link.bytes
        per_receiver[r] = per_receiver.get(r, 0) + link.bytes
    mean_message = stats.bytes_sent / stats.messages_sent if stats.messages_sent else 0.0
    return {
        "bytes_total": stats.bytes_sent,
        "messages": stats.messages_sent,
        "gaussians": stats.gaussians_sent,
        "mean_bytes_per_message": mean_message,
        "bytes_per_sender": per_sender,
        "bytes_per_receiver": per_receiver,
    }


def enforce_budget(msg_or_bytes, budget_bytes: float) -> bool:
    """Accept iff the message byte length does not exceed the budget."""
    if budget_bytes < 0:
        raise ValueError("budget must be non-negative")
    if isinstance(msg_or_bytes, GaussianMessage):
        n = msg_or_bytes.byte_length()
    elif isinstance(msg_or_bytes, (bytes, bytearray)):
        n = len(msg_or_bytes)
    else:
        n = int(msg_or_bytes)
    return n <= budget_bytes
