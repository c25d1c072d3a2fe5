"""Track geometry: piecewise straight/arc centerlines and Frenet conversions.

A track is an ordered list of constant-curvature segments.  Arc-length
parameterization is exact: every centerline query and every projection is
closed-form, no sampling or splines involved.

Conventions used throughout:

* headings live in (-pi, pi],
* lateral offset ``d`` is positive to the LEFT of the centerline tangent,
* curvature is positive for a LEFT turn.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

TWO_PI = 2.0 * math.pi

#: curvature magnitude below which a lookahead window reads as "straight"
KAPPA_THRESH = 0.005

#: default lookahead distance for the heading class feature, metres
HEADING_LOOKAHEAD = 30.0

CLASS_LEFT = "left"
CLASS_STRAIGHT = "straight"
CLASS_RIGHT = "right"

#: fixed feature order of the one-hot heading class
HEADING_CLASSES = (CLASS_LEFT, CLASS_STRAIGHT, CLASS_RIGHT)


class TrackError(ValueError):
    """Raised for invalid track definitions or unprojectable poses."""


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = math.fmod(a + math.pi, TWO_PI)
    if r <= 0.0:
        r += TWO_PI
    return r - math.pi


@dataclass(frozen=True)
class TrackSegment:
    """One centerline piece: a straight or a circular arc.

    Parameters
    ----------
    kind : str
        ``"straight"`` or ``"arc"``.
    length : float
        Arc length of the piece in metres, > 0.
    curvature : float
        Signed curvature in 1/m.  Zero for straights, nonzero for arcs;
        positive curves to the left.
    """

    kind: str
    length: float
    curvature: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("straight", "arc"):
            raise TrackError(f"unknown segment kind {self.kind!r}")
        if not (self.length > 0.0 and math.isfinite(self.length)):
            raise TrackError(f"segment length must be positive, got {self.length!r}")
        if self.kind == "straight" and self.curvature != 0.0:
            raise TrackError("straight segment must have curvature 0")
        if self.kind == "arc" and not (self.curvature != 0.0 and math.isfinite(self.curvature)):
            raise TrackError("arc segment needs nonzero finite curvature")


def straight(length: float) -> TrackSegment:
    return TrackSegment("straight", length)


def arc(radius: float, angle: float) -> TrackSegment:
    """Arc of given radius subtending ``angle`` radians (positive = left)."""
    if radius <= 0.0:
        raise TrackError("arc radius must be positive")
    if angle == 0.0:
        raise TrackError("arc angle must be nonzero")
    return TrackSegment("arc", abs(angle) * radius, math.copysign(1.0 / radius, angle))


@dataclass(frozen=True)
class WorldPose:
    """Planar pose (x, y, psi); the heading is canonicalized into (-pi, pi]."""

    x: float
    y: float
    psi: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "psi", wrap_angle(self.psi))


@dataclass(frozen=True)
class TrackPose:
    """Frenet coordinates: arc-length progress s, signed offset d, heading error theta."""

    s: float
    d: float
    theta: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", wrap_angle(self.theta))


def _advance(x: float, y: float, psi: float, kappa: float, s: float):
    """Exact pose after travelling arc length s from (x, y, psi) at constant curvature."""
    if kappa == 0.0:
        return x + s * math.cos(psi), y + s * math.sin(psi), psi
    p1 = psi + kappa * s
    return (
        x + (math.sin(p1) - math.sin(psi)) / kappa,
        y + (math.cos(psi) - math.cos(p1)) / kappa,
        p1,
    )


@dataclass(frozen=True)
class Track:
    """A piecewise straight/arc centerline with a constant half-width corridor.

    Closed tracks must return to their start pose; this is validated at
    construction (1e-6 m positional, 1e-8 rad angular tolerance).
    """

    segments: tuple[TrackSegment, ...]
    half_width: float
    closed: bool = True
    name: str = ""
    # start pose (s0, x, y, psi) of every segment, derived in __post_init__
    _starts: tuple = field(default=(), repr=False, compare=False)
    _total: float = field(default=0.0, repr=False, compare=False)

    def __post_init__(self) -> None:
        segs = tuple(self.segments)
        if not segs:
            raise TrackError("track needs at least one segment")
        if not (self.half_width > 0.0 and math.isfinite(self.half_width)):
            raise TrackError("half_width must be positive")
        object.__setattr__(self, "segments", segs)
        starts = []
        x = y = psi = 0.0
        s0 = 0.0
        for seg in segs:
            starts.append((s0, x, y, psi))
            x, y, psi = _advance(x, y, psi, seg.curvature, seg.length)
            s0 += seg.length
        object.__setattr__(self, "_starts", tuple(starts))
        object.__setattr__(self, "_total", s0)
        if self.closed:
            gap = math.hypot(x, y)
            twist = abs(wrap_angle(psi))
            if gap > 1e-6 or twist > 1e-8:
                raise TrackError(
                    f"closed track does not close: position gap {gap:.3e} m, "
                    f"heading gap {twist:.3e} rad"
                )

    @property
    def total_length(self) -> float:
        return self._total

    def wrap_s(self, s: float) -> float:
        """Canonicalize arc length: modulo for closed tracks, clamped for open ones."""
        if self.closed:
            return s % self._total
        return min(max(s, 0.0), self._total)

    def _segment_index(self, s: float) -> int:
        s = self.wrap_s(s)
        lo, hi = 0, len(self.segments) - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if s < self._starts[mid][0] + self.segments[mid].length:
                hi = mid
            else:
                lo = mid + 1
        return lo


def centerline_pose(track: Track, s: float) -> WorldPose:
    """World pose of the centerline point at arc length ``s`` (tangent heading)."""
    s = track.wrap_s(s)
    i = track._segment_index(s)
    s0, x, y, psi = track._starts[i]
    x, y, psi = _advance(x, y, psi, track.segments[i].curvature, s - s0)
    return WorldPose(x, y, psi)


def curvature_at(track: Track, s: float) -> float:
    """Signed curvature at arc length ``s``; at a boundary the later segment wins."""
    return track.segments[track._segment_index(s)].curvature


def world_to_track(track: Track, pose: WorldPose) -> TrackPose:
    """Project a world pose onto the track: nearest centerline point wins.

    Candidates are computed analytically per segment (perpendicular foot on
    straights, radial projection on arcs, endpoints when the foot falls
    outside the segment); distance ties resolve to the smaller ``s``.

    Raises
    ------
    TrackError
        If the pose lies farther than ``10 * half_width`` from the centerline.
    """
    px, py = pose.x, pose.y
    best = None  # (dist2, s, cx, cy)
    for i, (s0, x0, y0, psi0) in enumerate(track._starts):
        seg = track.segments[i]
        k = seg.curvature
        if k == 0.0:
            tx, ty = math.cos(psi0), math.sin(psi0)
            t = (px - x0) * tx + (py - y0) * ty
            t = min(max(t, 0.0), seg.length)
            cx, cy = x0 + t * tx, y0 + t * ty
            s_cand = s0 + t
        else:
            # circle center sits 1/k along the left normal of the start pose
            nx, ny = -math.sin(psi0), math.cos(psi0)
            ccx, ccy = x0 + nx / k, y0 + ny / k
            ang0 = math.atan2(y0 - ccy, x0 - ccx)
            angp = math.atan2(py - ccy, px - ccx)
            sweep = seg.length * abs(k)
            dang = (angp - ang0) * math.copysign(1.0, k)
            dang %= TWO_PI
            if dang <= sweep:
                t = dang / abs(k)
                cx, cy, _ = _advance(x0, y0, psi0, k, t)
                s_cand = s0 + t
            else:
                ex, ey, _ = _advance(x0, y0, psi0, k, seg.length)
                if (px - x0) ** 2 + (py - y0) ** 2 <= (px - ex) ** 2 + (py - ey) ** 2:
                    cx, cy, s_cand = x0, y0, s0
                else:
                    cx, cy, s_cand = ex, ey, s0 + seg.length
        d2 = (px - cx) ** 2 + (py - cy) ** 2
        if best is None or d2 < best[0] or (d2 == best[0] and s_cand < best[1]):
            best = (d2, s_cand, cx, cy)
    d2, s_c, cx, cy = best
    if d2 > (10.0 * track.half_width) ** 2:
        raise TrackError(
            f"pose ({px:.1f}, {py:.1f}) is {math.sqrt(d2):.1f} m off the centerline, "
            f"beyond the {10.0 * track.half_width:.1f} m corridor"
        )
    s_c = track.wrap_s(s_c)
    cpose = centerline_pose(track, s_c)
    tx, ty = math.cos(cpose.psi), math.sin(cpose.psi)
    d = -(px - cx) * ty + (py - cy) * tx
    return TrackPose(s_c, d, wrap_angle(pose.psi - cpose.psi))


def offset_pose(track: Track, s: float, d: float, theta: float = 0.0) -> WorldPose:
    """World pose at Frenet coordinates (s, d, theta): handy inverse of projection."""
    c = centerline_pose(track, s)
    return WorldPose(
        c.x - d * math.sin(c.psi),
        c.y + d * math.cos(c.psi),
        c.psi + theta,
    )


def heading_class(
    track: Track,
    s: float,
    lookahead: float = HEADING_LOOKAHEAD,
    kappa_thresh: float = KAPPA_THRESH,
) -> str:
    """Classify the upcoming track heading as left / straight / right.

    The mean signed curvature over the window [s, s + lookahead] is computed
    exactly by walking segments; it is compared against ``kappa_thresh``.
    """
    if lookahead <= 0.0:
        raise TrackError("lookahead must be positive")
    remaining = lookahead
    s_cur = track.wrap_s(s)
    acc = 0.0
    while remaining > 1e-12:
        i = track._segment_index(s_cur)
        s0 = track._starts[i][0]
        seg = track.segments[i]
        avail = s0 + seg.length - s_cur
        if not track.closed and i == len(track.segments) - 1:
            take = remaining  # open track: last segment extends conceptually straight on
            avail = max(avail, 0.0)
            used = min(take, avail)
            acc += seg.curvature * used
            break
        take = min(remaining, avail)
        acc += seg.curvature * take
        remaining -= take
        s_cur = track.wrap_s(s_cur + take)
    mean_k = acc / lookahead
    if mean_k > kappa_thresh:
        return CLASS_LEFT
    if mean_k < -kappa_thresh:
        return CLASS_RIGHT
    return CLASS_STRAIGHT


def class_onehot(cls: str) -> tuple[float, float, float]:
    """One-hot encoding of a heading class in the fixed (left, straight, right) order."""
    return tuple(1.0 if cls == c else 0.0 for c in HEADING_CLASSES)


# ---------------------------------------------------------------------------
# built-in tracks
#
# Each is closed by construction: straights and arcs are composed so the end
# pose returns exactly to the origin.  S-shaped detours are built from paired
# opposite arcs; a left-right pair advances 4*R*sin(phi) like a straight of
# that length, which keeps opposite sides of a loop in balance.


def _s_pair(radius: float, angle: float) -> list[TrackSegment]:
    return [arc(radius, angle), arc(radius, -angle)]


def _oval() -> Track:
    segs = [straight(900.0), arc(150.0, math.pi), straight(900.0), arc(150.0, math.pi)]
    return Track(tuple(segs), half_width=4.0, closed=True, name="oval")


def _river() -> Track:
    # rounded rectangle whose long sides both carry the same gentle S
    phi = math.radians(40.0)
    corner = arc(120.0, math.pi / 2)
    side = (
        [straight(150.0)]
        + _s_pair(100.0, phi)
        + [straight(150.0), corner, straight(250.0), corner]
    )
    return Track(tuple(side + side), half_width=4.0, closed=True, name="river")


def _switchback() -> Track:
    # rectangle; the bottom side holds a sharp S followed by its mirror
    phi = math.radians(60.0)
    r = 55.0
    corner = arc(70.0, math.pi / 2)
    bottom = (
        [straight(60.0)]
        + _s_pair(r, phi)
        + [straight(30.0)]
        + _s_pair(r, -phi)
        + [straight(60.0)]
    )
    top_len = 2 * 60.0 + 30.0 + 4 * r * math.sin(phi)
    segs = bottom + [corner, straight(200.0), corner, straight(top_len), corner, straight(200.0), corner]
    return Track(tuple(segs), half_width=4.0, closed=True, name="switchback")


def _loop() -> Track:
    # rounded hexagon; two opposite sides are replaced by S-and-mirror runs
    corner = arc(70.0, math.pi / 3)
    phi = math.radians(50.0)
    r = 50.0
    mid = 260.0 - 80.0 - 4 * r * math.sin(phi)
    wavy = (
        [straight(40.0)]
        + _s_pair(r, phi)
        + [straight(mid)]
        + _s_pair(r, -phi)
        + [straight(40.0)]
    )
    half = wavy + [corner, straight(260.0), corner, straight(260.0), corner]
    return Track(tuple(half + half), half_width=4.0, closed=True, name="loop")


_BUILTIN_FACTORIES = {
    "oval": _oval,
    "river": _river,
    "switchback": _switchback,
    "loop": _loop,
}

BUILTIN_TRACKS = tuple(_BUILTIN_FACTORIES)


def builtin_track(name: str) -> Track:
    try:
        return _BUILTIN_FACTORIES[name]()
    except KeyError:
        known = ", ".join(BUILTIN_TRACKS)
        raise TrackError(f"unknown track {name!r} (built-ins: {known})") from None


# ---------------------------------------------------------------------------
# JSON interchange


def track_to_json(track: Track) -> str:
    doc = {
        "name": track.name,
        "half_width": track.half_width,
        "closed": track.closed,
        "segments": [
            {"kind": seg.kind, "length": seg.length, "curvature": seg.curvature}
            for seg in track.segments
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def _segment_line(text: str, index: int) -> int | None:
    """Best-effort source line of the index-th segment object, for error
    messages.  Looks for its "kind" key, falling back to brace counting
    inside the segments array."""
    pos = -1
    for _ in range(index + 1):
        pos = text.find('"kind"', pos + 1)
        if pos < 0:
            break
    if pos < 0:
        start = text.find('"segments"')
        if start < 0:
            return None
        pos = start
        for _ in range(index + 1):
            pos = text.find("{", pos + 1)
            if pos < 0:
                return None
    return text.count("\n", 0, pos) + 1


def track_from_json(text: str) -> Track:
    """Parse and validate a track document; raises TrackError with context."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TrackError(f"line {exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise TrackError("track document must be a JSON object")
    for key in ("name", "half_width", "closed", "segments"):
        if key not in doc:
            raise TrackError(f"track document missing {key!r}")
    segs = []
    raw = doc["segments"]
    if not isinstance(raw, list) or not raw:
        raise TrackError("segments must be a non-empty array")
    for i, item in enumerate(raw):
        line = _segment_line(text, i)
        where = f"line {line}, segments[{i}]" if line else f"segments[{i}]"
        if not isinstance(item, dict):
            raise TrackError(f"{where}: expected an object")
        try:
            segs.append(
                TrackSegment(
                    kind=item.get("kind"),
                    length=item.get("length"),
                    curvature=item.get("curvature", 0.0),
                )
            )
        except (TrackError, TypeError) as exc:
            raise TrackError(f"{where}: {exc}") from None
    try:
        return Track(
            segments=tuple(segs),
            half_width=doc["half_width"],
            closed=bool(doc["closed"]),
            name=str(doc["name"]),
        )
    except (TrackError, TypeError) as exc:
        raise TrackError(str(exc)) from None
