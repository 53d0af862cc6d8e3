"""Pipe network geometry.

A pipe network is an ordered chain of straight runs and 90 degree bends in a
vertical 2-D plane.  The module owns the centerline arclength chart (the basis
of the progress reward), wall raycasts for depth sensing and contact queries,
procedural generation of static/dynamic layouts, and the text file format for
resolved networks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LEFT = "left"
RIGHT = "right"
RADIUS_1D = "1D"
RADIUS_2D = "2D"

DEFAULT_DIAMETER = 0.125
DEFAULT_LENGTH_RANGE = (0.8, 1.6)
# First straight is stretched to at least this so the robot fits at reset.
MIN_START_STRAIGHT = 1.0
RAY_HORIZON = 5.0
MAX_GENERATION_ATTEMPTS = 200

_STRAIGHT = 0
_BEND = 1


class PipeGeometryError(ValueError):
    """Invalid segment parameters or an infeasible network spec."""


class OutsidePipeError(ValueError):
    """A query point lies outside the pipe interior."""


@dataclass(frozen=True)
class SegmentSpec:
    """One centerline segment: a straight run or a 90 degree bend.

    Bends are classed by centerline radius relative to the pipe diameter:
    ``1D`` means radius == diameter, ``2D`` means radius == 2 * diameter.
    """

    kind: str
    diameter: float
    length: float = 0.0
    direction: str = ""
    radius_class: str = ""

    def __post_init__(self):
        if self.diameter <= 0:
            raise PipeGeometryError(f"diameter must be positive, got {self.diameter}")
        if self.kind == "straight":
            if self.length <= 0:
                raise PipeGeometryError(f"straight length must be positive, got {self.length}")
        elif self.kind == "bend":
            if self.direction not in (LEFT, RIGHT):
                raise PipeGeometryError(f"bend direction must be left|right, got {self.direction!r}")
            if self.radius_class not in (RADIUS_1D, RADIUS_2D):
                raise PipeGeometryError(f"bend radius class must be 1D|2D, got {self.radius_class!r}")
        else:
            raise PipeGeometryError(f"unknown segment kind {self.kind!r}")

    @property
    def bend_radius(self) -> float:
        if self.kind != "bend":
            raise PipeGeometryError("bend_radius is only defined for bends")
        return self.diameter * (1.0 if self.radius_class == RADIUS_1D else 2.0)

    @property
    def arclength(self) -> float:
        if self.kind == "straight":
            return self.length
        return self.bend_radius * math.pi / 2.0


@dataclass(frozen=True)
class NetworkSpec:
    """Parameters for procedural network generation."""

    n_junctions: int = 3
    diameter: float = DEFAULT_DIAMETER
    straight_length_range: tuple[float, float] = DEFAULT_LENGTH_RANGE
    dynamic: bool = False
    seed: int = 0
    start_angle: float = 0.0

    def __post_init__(self):
        if self.n_junctions < 0:
            raise PipeGeometryError("n_junctions must be >= 0")
        if self.diameter <= 0:
            raise PipeGeometryError("diameter must be positive")
        lo, hi = self.straight_length_range
        if not (0 < lo <= hi):
            raise PipeGeometryError(f"bad straight_length_range {self.straight_length_range}")


class PipeNetwork:
    """Resolved network geometry: immutable after construction.

    Exposes the arclength chart (``locate`` / ``point_at`` / ``tangent_at``),
    wall clearance queries used by the contact solver, and analytic raycasts
    against the wall primitives (offset lines, concentric arcs, end caps).
    """

    def __init__(self, segments: list[SegmentSpec], start_pose=(0.0, 0.0, 0.0),
                 spec: NetworkSpec | None = None, episode_index: int | None = None):
        if not segments:
            raise PipeGeometryError("network needs at least one segment")
        d0 = segments[0].diameter
        for s in segments:
            if abs(s.diameter - d0) > 1e-12:
                raise PipeGeometryError("mixed diameters are not supported")
        self.segments = tuple(segments)
        self.start_pose = (float(start_pose[0]), float(start_pose[1]), float(start_pose[2]))
        self.diameter = d0
        self.spec = spec
        self.episode_index = episode_index
        self._build()

    # -- construction -------------------------------------------------------

    def _build(self):
        n = len(self.segments)
        x, y, th = self.start_pose
        kind = np.zeros(n, dtype=np.int64)
        s0 = np.zeros(n)
        s1 = np.zeros(n)
        # straight params
        ax = np.zeros(n); ay = np.zeros(n)
        ux = np.zeros(n); uy = np.zeros(n)
        ln = np.zeros(n)
        # bend params
        cx = np.zeros(n); cy = np.zeros(n)
        rr = np.zeros(n)
        a0 = np.zeros(n)
        sw = np.zeros(n)  # +pi/2 for left, -pi/2 for right

        s = 0.0
        for i, seg in enumerate(self.segments):
            s0[i] = s
            if seg.kind == "straight":
                kind[i] = _STRAIGHT
                ax[i], ay[i] = x, y
                ux[i], uy[i] = math.cos(th), math.sin(th)
                ln[i] = seg.length
                x += ux[i] * seg.length
                y += uy[i] * seg.length
                s += seg.length
            else:
                kind[i] = _BEND
                r = seg.bend_radius
                sign = 1.0 if seg.direction == LEFT else -1.0
                # center sits one radius to the side of the entry point
                nx, ny = -math.sin(th), math.cos(th)
                cx[i] = x + sign * r * nx
                cy[i] = y + sign * r * ny
                rr[i] = r
                sw[i] = sign * math.pi / 2.0
                a0[i] = math.atan2(y - cy[i], x - cx[i])
                th = th + sign * math.pi / 2.0
                a1 = a0[i] + sw[i]
                x = cx[i] + r * math.cos(a1)
                y = cy[i] + r * math.sin(a1)
                s += r * math.pi / 2.0
            s1[i] = s

        self._kind = kind
        self._s0, self._s1 = s0, s1
        self._ax, self._ay, self._ux, self._uy, self._ln = ax, ay, ux, uy, ln
        self._cx, self._cy, self._rr, self._a0, self._sw = cx, cy, rr, a0, sw
        self._end_pose = (x, y, th)
        self.total_centerline_length = float(s)
        self._st = np.where(kind == _STRAIGHT)[0]
        self._bd = np.where(kind == _BEND)[0]
        # flat segment tables for the jitted contact solver
        self._tables = (kind, s0, ax, ay, ux, uy, ln, cx, cy, rr, a0, sw)
        self._wall_primitives = self._build_walls()

    def _build_walls(self):
        """Wall primitives for raycasting: line segments and arcs.

        Line segments as rows (px, py, qx, qy); arcs as rows
        (cx, cy, radius, a_start, sweep).
        """
        h = self.diameter / 2.0
        lines = []
        arcs = []
        for i, seg in enumerate(self.segments):
            if seg.kind == "straight":
                a = np.array([self._ax[i], self._ay[i]])
                u = np.array([self._ux[i], self._uy[i]])
                nrm = np.array([-u[1], u[0]])
                for side in (+1.0, -1.0):
                    p = a + side * h * nrm
                    q = p + u * self._ln[i]
                    lines.append([p[0], p[1], q[0], q[1]])
            else:
                r = self._rr[i]
                for off in (+h, -h):
                    arcs.append([self._cx[i], self._cy[i], r + off, self._a0[i], self._sw[i]])
        # end caps: chords across the diameter at s=0 and s=S
        for (px, py, t) in (self._pose_at_s(0.0), self._pose_at_s(self.total_centerline_length)):
            nx, ny = -math.sin(t), math.cos(t)
            lines.append([px - h * nx, py - h * ny, px + h * nx, py + h * ny])
        return (np.array(lines), np.array(arcs) if arcs else np.zeros((0, 5)))

    def _pose_at_s(self, s: float):
        pt = self.point_at(np.array([s]), np.array([0.0]))[0]
        t = self.tangent_at(np.array([s]))[0]
        return pt[0], pt[1], math.atan2(t[1], t[0])

    @property
    def wall_primitives(self):
        """(lines (N,4) as px,py,qx,qy; arcs (M,5) as cx,cy,r,a0,sweep)."""
        return self._wall_primitives

    # -- arclength chart ----------------------------------------------------

    def _chart(self, points):
        """Chart lookup returning (s, d, inside, owning segment index)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        m = p.shape[0]
        n = len(self.segments)
        h = self.diameter / 2.0

        s_c = np.empty((m, n))
        d_c = np.empty((m, n))
        claim = np.zeros((m, n), dtype=bool)

        st, bd = self._st, self._bd
        if st.size:
            rx = p[:, 0, None] - self._ax[None, st]
            ry = p[:, 1, None] - self._ay[None, st]
            ux, uy = self._ux[None, st], self._uy[None, st]
            t = rx * ux + ry * uy
            d_c[:, st] = ry * ux - rx * uy
            ln = self._ln[None, st]
            s_c[:, st] = self._s0[None, st] + np.clip(t, 0.0, ln)
            claim[:, st] = (t >= -1e-12) & (t <= ln + 1e-12)
        if bd.size:
            rx = p[:, 0, None] - self._cx[None, bd]
            ry = p[:, 1, None] - self._cy[None, bd]
            rho = np.hypot(rx, ry)
            ang = np.arctan2(ry, rx)
            sign = np.sign(self._sw[None, bd])
            # angle measured from arc start, in sweep direction
            da = self._wrap(ang - self._a0[None, bd]) * sign
            s_c[:, bd] = self._s0[None, bd] + np.clip(da, 0.0, math.pi / 2.0) * self._rr[None, bd]
            # left normal points away from center on left bends
            d_c[:, bd] = -sign * (rho - self._rr[None, bd])
            claim[:, bd] = (da >= -1e-9) & (da <= math.pi / 2.0 + 1e-9)

        # candidate cost: |d| where claimed, else distance to clamped point
        cost = np.abs(d_c)
        cost = np.where(claim, cost, np.inf)
        # fallback for points claimed by nothing: nearest clamped projection
        none = ~claim.any(axis=1)
        if none.any():
            pc = self.point_at(s_c[none].ravel(), np.zeros(none.sum() * n))
            dist = np.hypot(pc[:, 0] - np.repeat(p[none, 0], n),
                            pc[:, 1] - np.repeat(p[none, 1], n)).reshape(-1, n)
            cost[none] = dist
        best = np.argmin(cost, axis=1)
        idx = np.arange(m)
        s = s_c[idx, best]
        d = d_c[idx, best]
        inside = claim[idx, best] & (np.abs(d) <= h + 1e-12)
        return s, d, inside, best

    def locate(self, points):
        """Map world points to (s, d, inside).

        ``s`` is centerline arclength of the owning segment's projection,
        ``d`` the signed offset along the local left normal, ``inside`` a
        bool mask for membership in the pipe interior.  Points outside get
        the values of the nearest candidate segment.
        """
        s, d, inside, _ = self._chart(points)
        return s, d, inside

    @staticmethod
    def _wrap(a):
        return (a + math.pi) % (2.0 * math.pi) - math.pi

    def _seg_of_s(self, s):
        s = np.asarray(s, dtype=float)
        return np.clip(np.searchsorted(self._s1, s, side="left"), 0, len(self.segments) - 1)

    def point_at(self, s, d):
        """Inverse chart: world point at arclength ``s``, left-offset ``d``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        d = np.atleast_1d(np.asarray(d, dtype=float))
        i = self._seg_of_s(s)
        out = np.zeros((s.shape[0], 2))
        st = self._kind[i] == _STRAIGHT
        if st.any():
            k = i[st]
            t = s[st] - self._s0[k]
            ux, uy = self._ux[k], self._uy[k]
            out[st, 0] = self._ax[k] + ux * t - uy * d[st]
            out[st, 1] = self._ay[k] + uy * t + ux * d[st]
        bd = ~st
        if bd.any():
            k = i[bd]
            sign = np.sign(self._sw[k])
            ang = self._a0[k] + sign * (s[bd] - self._s0[k]) / self._rr[k]
            rho = self._rr[k] - sign * d[bd]
            out[bd, 0] = self._cx[k] + rho * np.cos(ang)
            out[bd, 1] = self._cy[k] + rho * np.sin(ang)
        return out

    def tangent_at(self, s):
        """Unit tangent of the centerline in the direction of travel."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        i = self._seg_of_s(s)
        out = np.zeros((s.shape[0], 2))
        st = self._kind[i] == _STRAIGHT
        if st.any():
            k = i[st]
            out[st, 0] = self._ux[k]
            out[st, 1] = self._uy[k]
        bd = ~st
        if bd.any():
            k = i[bd]
            sign = np.sign(self._sw[k])
            ang = self._a0[k] + sign * (s[bd] - self._s0[k]) / self._rr[k]
            out[bd, 0] = -np.sin(ang) * sign
            out[bd, 1] = np.cos(ang) * sign
        return out

    def arclength_of(self, point) -> float:
        """Arclength of the closest centerline point; raises outside the pipe."""
        s, _, inside = self.locate(np.asarray(point, dtype=float).reshape(1, 2))
        if not inside[0]:
            raise OutsidePipeError(f"point {tuple(point)} is outside the pipe interior")
        return float(s[0])

    def contains(self, points):
        _, _, inside = self.locate(points)
        return inside

    def clearances(self, points, radius):
        """Signed clearance of disc centers to walls and end caps.

        ``radius`` may be a scalar or per-point array.  Returns
        (clearance, push_dir) where ``push_dir`` is the inward unit direction
        that grows the binding clearance fastest.  Negative clearance means
        the disc penetrates a wall.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float))
        radius = np.broadcast_to(np.asarray(radius, dtype=float), (p.shape[0],))
        s, d, _, seg = self._chart(p)
        h = self.diameter / 2.0
        tan = self._tangent_for(s, seg)
        nrm = np.stack([-tan[:, 1], tan[:, 0]], axis=1)

        c_tube = (h - np.abs(d)) - radius
        c_start = s - radius
        c_end = (self.total_centerline_length - s) - radius

        c = np.minimum(c_tube, np.minimum(c_start, c_end))
        push = np.where((c_tube <= c_start) & (c_tube <= c_end),
                        0, np.where(c_start <= c_end, 1, 2))
        dirs = np.zeros_like(p)
        m0 = push == 0
        dirs[m0] = -np.sign(d[m0])[:, None] * nrm[m0]
        m1 = push == 1
        dirs[m1] = tan[m1]
        m2 = push == 2
        dirs[m2] = -tan[m2]
        return c, dirs

    def _tangent_for(self, s, seg):
        out = np.empty((s.shape[0], 2))
        st = self._kind[seg] == _STRAIGHT
        if st.any():
            k = seg[st]
            out[st, 0] = self._ux[k]
            out[st, 1] = self._uy[k]
        bd = ~st
        if bd.any():
            k = seg[bd]
            sign = np.sign(self._sw[k])
            ang = self._a0[k] + sign * (s[bd] - self._s0[k]) / self._rr[k]
            out[bd, 0] = -np.sin(ang) * sign
            out[bd, 1] = np.cos(ang) * sign
        return out

    # -- raycasting ---------------------------------------------------------

    def ray_distance(self, origin, direction, h_max: float = RAY_HORIZON) -> float:
        """Distance along a unit ray to the first wall hit, clamped at h_max."""
        o = np.asarray(origin, dtype=float)
        u = np.asarray(direction, dtype=float)
        nu = math.hypot(u[0], u[1])
        if abs(nu - 1.0) > 1e-9:
            raise ValueError("direction must be a unit vector")
        if not self.contains(o.reshape(1, 2))[0]:
            raise OutsidePipeError(f"ray origin {tuple(o)} is outside the pipe interior")
        t = self._ray_hits(o[None, :], u[None, :])[0]
        return float(min(t, h_max))

    def ray_fan(self, origin, angles, h_max: float = RAY_HORIZON):
        """Vectorized ray distances for one origin and many angles."""
        o = np.asarray(origin, dtype=float)
        ang = np.asarray(angles, dtype=float)
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        org = np.broadcast_to(o, dirs.shape)
        return np.minimum(self._ray_hits(org, dirs), h_max)

    def _ray_hits(self, origins, dirs):
        m = origins.shape[0]
        best = np.full(m, np.inf)
        eps = 1e-9

        lines, arcs = self._wall_primitives
        if lines.shape[0]:
            p = lines[:, 0:2]
            q = lines[:, 2:4]
            e = q - p  # (L,2)
            # solve o + t u = p + v e
            ox = origins[:, 0][:, None]; oy = origins[:, 1][:, None]
            ux = dirs[:, 0][:, None]; uy = dirs[:, 1][:, None]
            ex = e[:, 0][None, :]; ey = e[:, 1][None, :]
            px = p[:, 0][None, :]; py = p[:, 1][None, :]
            den = ux * ey - uy * ex
            safe = np.abs(den) > 1e-15
            t = np.where(safe, ((px - ox) * ey - (py - oy) * ex) / np.where(safe, den, 1.0), np.inf)
            v = np.where(safe, ((px - ox) * uy - (py - oy) * ux) / np.where(safe, den, 1.0), np.inf)
            ok = safe & (t > eps) & (v >= -1e-12) & (v <= 1.0 + 1e-12)
            t = np.where(ok, t, np.inf)
            best = np.minimum(best, t.min(axis=1))

        if arcs.shape[0]:
            cx = arcs[:, 0][None, :]; cy = arcs[:, 1][None, :]
            r = arcs[:, 2][None, :]
            a_start = arcs[:, 3][None, :]
            sweep = arcs[:, 4][None, :]
            ox = origins[:, 0][:, None] - cx
            oy = origins[:, 1][:, None] - cy
            ux = dirs[:, 0][:, None]; uy = dirs[:, 1][:, None]
            b = ox * ux + oy * uy
            c = ox * ox + oy * oy - r * r
            disc = b * b - c
            hit = disc >= 0.0
            sq = np.sqrt(np.where(hit, disc, 0.0))
            for tt in (-b - sq, -b + sq):
                x = ox + tt * ux
                y = oy + tt * uy
                ang = np.arctan2(y, x)
                da = self._wrap(ang - a_start) * np.sign(sweep)
                ok = hit & (tt > eps) & (da >= -1e-9) & (da <= math.pi / 2.0 + 1e-9)
                cand = np.where(ok, tt, np.inf)
                best = np.minimum(best, cand.min(axis=1))
        return best


# -- procedural generation --------------------------------------------------

def _resolved_segments(spec: NetworkSpec, rng: np.random.Generator) -> list[SegmentSpec]:
    lo, hi = spec.straight_length_range
    segs = []
    for j in range(spec.n_junctions + 1):
        length = float(rng.uniform(lo, hi))
        if j == 0:
            length = max(length, MIN_START_STRAIGHT)
        segs.append(SegmentSpec("straight", spec.diameter, length=length))
        if j < spec.n_junctions:
            direction = LEFT if rng.random() < 0.5 else RIGHT
            radius_class = RADIUS_1D if rng.random() < 0.5 else RADIUS_2D
            segs.append(SegmentSpec("bend", spec.diameter, direction=direction,
                                    radius_class=radius_class))
    return segs


def _self_intersects(net: PipeNetwork) -> bool:
    """Conservative overlap test: path points closer than 1.5 D in space while
    more than 3 D apart along the centerline.

    The spatial margin keeps walls of distinct limbs at least D/2 apart so
    contact resolution only ever deals with the locally owning segment's
    walls.  The arclength gate excludes neighbouring points around a bend:
    the tightest allowed bend keeps any pair within 3 D of path separation
    at least 2 D sin(1.5) ~ 1.99 D apart in space, so no legitimate local
    pair can trip the spatial margin.
    """
    step = net.diameter / 4.0
    pts = []
    arcs = []
    for i, seg in enumerate(net.segments):
        n = max(2, int(math.ceil(seg.arclength / step)))
        ss = np.linspace(net._s0[i], net._s1[i], n)
        pts.append(net.point_at(ss, np.zeros_like(ss)))
        arcs.append(ss)
    pts = np.concatenate(pts)
    arcs = np.concatenate(arcs)
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    far_pair = np.abs(arcs[:, None] - arcs[None, :]) > net.diameter * 3.0
    return bool((dist[far_pair] < net.diameter * 1.5).any())


def generate_network(spec: NetworkSpec, episode_index: int = 0) -> PipeNetwork:
    """Generate a network for one episode.

    A dynamic spec resamples bend directions, radii and straight lengths from
    (seed, episode_index); a static spec ignores episode_index.  Candidate
    layouts that self-intersect are rejected and resampled, bounded by
    MAX_GENERATION_ATTEMPTS.
    """
    eff_episode = episode_index if spec.dynamic else 0
    for attempt in range(MAX_GENERATION_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, eff_episode, attempt]))
        segs = _resolved_segments(spec, rng)
        net = PipeNetwork(segs, start_pose=(0.0, 0.0, spec.start_angle),
                          spec=spec, episode_index=eff_episode)
        if not _self_intersects(net):
            return net
    raise PipeGeometryError(
        f"no self-intersection-free layout found for {spec} after "
        f"{MAX_GENERATION_ATTEMPTS} attempts")


# -- file format -------------------------------------------------------------

_FORMAT_HEADER = "pipenet v1"


def save_network(net: PipeNetwork, path):
    """Write the resolved segment list (and spec, if known) as text."""
    lines = [_FORMAT_HEADER]
    lines.append(f"diameter {net.diameter!r}")
    x, y, t = net.start_pose
    lines.append(f"start {x!r} {y!r} {t!r}")
    if net.spec is not None:
        sp = net.spec
        lo, hi = sp.straight_length_range
        lines.append(
            "spec "
            f"n_junctions={sp.n_junctions} diameter={sp.diameter!r} "
            f"len_min={lo!r} len_max={hi!r} dynamic={int(sp.dynamic)} "
            f"seed={sp.seed} start_angle={sp.start_angle!r} "
            f"episode={net.episode_index if net.episode_index is not None else 0}")
    for seg in net.segments:
        if seg.kind == "straight":
            lines.append(f"segment straight {seg.length!r}")
        else:
            lines.append(f"segment bend {seg.direction} {seg.radius_class}")
    lines.append("end")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_network(path) -> PipeNetwork:
    with open(path) as f:
        raw = [ln.strip() for ln in f if ln.strip()]
    if not raw or raw[0] != _FORMAT_HEADER:
        raise PipeGeometryError(f"not a {_FORMAT_HEADER!r} file: {path}")
    diameter = None
    start = (0.0, 0.0, 0.0)
    spec = None
    episode = None
    segs = []
    for ln in raw[1:]:
        parts = ln.split()
        if parts[0] == "diameter":
            diameter = float(parts[1])
        elif parts[0] == "start":
            start = (float(parts[1]), float(parts[2]), float(parts[3]))
        elif parts[0] == "spec":
            kv = dict(p.split("=", 1) for p in parts[1:])
            spec = NetworkSpec(
                n_junctions=int(kv["n_junctions"]),
                diameter=float(kv["diameter"]),
                straight_length_range=(float(kv["len_min"]), float(kv["len_max"])),
                dynamic=bool(int(kv["dynamic"])),
                seed=int(kv["seed"]),
                start_angle=float(kv["start_angle"]),
            )
            episode = int(kv.get("episode", 0))
        elif parts[0] == "segment":
            if parts[1] == "straight":
                segs.append(SegmentSpec("straight", diameter, length=float(parts[2])))
            elif parts[1] == "bend":
                segs.append(SegmentSpec("bend", diameter, direction=parts[2],
                                        radius_class=parts[3]))
            else:
                raise PipeGeometryError(f"bad segment line: {ln!r}")
        elif parts[0] == "end":
            break
        else:
            raise PipeGeometryError(f"unrecognized line: {ln!r}")
    if diameter is None or not segs:
        raise PipeGeometryError(f"incomplete network file: {path}")
    return PipeNetwork(segs, start_pose=start, spec=spec, episode_index=episode)
