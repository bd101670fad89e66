"""Race tracks: gates, arc-length parameterized reference paths, and the
contour/lag error geometry used by the controller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from numba import njit
from scipy.interpolate import CubicSpline

# Gauss-Legendre nodes per segment for arc-length quadrature
QUAD_NODES = 64


class DegeneratePathError(ValueError):
    """Raised when control points do not define a usable path."""


class TrackFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Gate:
    center: np.ndarray
    normal: np.ndarray
    width: float = 1.2
    theta: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        nn = np.linalg.norm(n)
        if not nn > 0:
            raise ValueError("gate normal must be non-zero")
        object.__setattr__(self, "normal", n / nn)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        if not self.width > 0:
            raise ValueError("gate width must be positive")


@dataclass(frozen=True)
class GateEvent:
    kind: str  # "none" | "pass" | "crash"
    miss_distance: float = 0.0
    fraction: float = 0.0  # position of the crossing along the segment

    def __bool__(self):
        return self.kind != "none"


NO_EVENT = GateEvent("none")


# ---------------------------------------------------------------------------
# numba path kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def wrap_arc(s, length, closed):
    if closed:
        s = s % length
        if s < 0.0:
            s += length
        return s
    if s < 0.0:
        return 0.0
    if s > length:
        return length
    return s


@njit(cache=True)
def path_eval(breaks, coefs, length, closed, s, pos, d1, d2):
    """Position and first two derivatives of the arc-length spline at s."""
    s = wrap_arc(s, length, closed)
    n = breaks.shape[0] - 1
    i = np.searchsorted(breaks, s, side="right") - 1
    if i < 0:
        i = 0
    elif i >= n:
        i = n - 1
    ds = s - breaks[i]
    for k in range(3):
        c0 = coefs[0, i, k]
        c1 = coefs[1, i, k]
        c2 = coefs[2, i, k]
        c3 = coefs[3, i, k]
        pos[k] = ((c0 * ds + c1) * ds + c2) * ds + c3
        d1[k] = (3.0 * c0 * ds + 2.0 * c1) * ds + c2
        d2[k] = 6.0 * c0 * ds + 2.0 * c1


@njit(cache=True)
def path_frame(breaks, coefs, length, closed, s, pos, tan, dtan, dpos):
    """Position, unit tangent, d(unit tangent)/ds and d(position)/ds."""
    d2 = np.empty(3)
    path_eval(breaks, coefs, length, closed, s, pos, dpos, d2)
    nrm = math.sqrt(dpos[0] ** 2 + dpos[1] ** 2 + dpos[2] ** 2)
    for k in range(3):
        tan[k] = dpos[k] / nrm
    td2 = tan[0] * d2[0] + tan[1] * d2[1] + tan[2] * d2[2]
    for k in range(3):
        dtan[k] = (d2[k] - td2 * tan[k]) / nrm


@njit(cache=True)
def refine_projection(breaks, coefs, length, closed, p, s):
    """Newton iterations on (p - r(s)) . r'(s) = 0 starting from s."""
    pos = np.empty(3)
    d1 = np.empty(3)
    d2 = np.empty(3)
    for _ in range(8):
        path_eval(breaks, coefs, length, closed, s, pos, d1, d2)
        g = 0.0
        h = 0.0
        for k in range(3):
            e = p[k] - pos[k]
            g += e * d1[k]
            h += d1[k] * d1[k] - e * d2[k]
        if h <= 1e-12:
            break
        step = g / h
        if step > 0.5:
            step = 0.5
        elif step < -0.5:
            step = -0.5
        s = s + step
        if not closed:
            s = wrap_arc(s, length, closed)
        if abs(step) < 1e-12:
            break
    return wrap_arc(s, length, closed)


# ---------------------------------------------------------------------------
# Reference path
# ---------------------------------------------------------------------------


def _spline(u, pts, closed):
    return CubicSpline(u, pts, bc_type="periodic" if closed else "not-a-knot")


def _segment_lengths(spl, u):
    x, w = np.polynomial.legendre.leggauss(QUAD_NODES)
    a, b = u[:-1], u[1:]
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    nodes = mid[:, None] + half[:, None] * x[None, :]
    speed = np.linalg.norm(spl(nodes, 1), axis=-1)
    return half * (speed @ w)


def _arc_from(spl, a, u):
    """Arc length from a to u (vectorized over u) by Gauss-Legendre quadrature."""
    x, w = np.polynomial.legendre.leggauss(QUAD_NODES)
    half = 0.5 * (u - a)
    mid = 0.5 * (u + a)
    nodes = mid[:, None] + half[:, None] * x[None, :]
    speed = np.linalg.norm(spl(nodes, 1), axis=-1)
    return half * (speed @ w)


@dataclass(frozen=True, eq=False)
class ReferencePath:
    """Closed or open path parameterized by arc length."""

    control_points: np.ndarray
    breaks: np.ndarray
    coefs: np.ndarray
    length: float
    closed: bool
    knot_arcs: np.ndarray
    table_s: np.ndarray = field(repr=False)
    table_p: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, points, closed: bool = True, resolution: float = 0.1) -> "ReferencePath":
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
            raise DegeneratePathError("need at least two 3-D control points")
        ring = np.vstack([pts, pts[:1]]) if closed else pts
        chords = np.linalg.norm(np.diff(ring, axis=0), axis=1)
        if np.any(chords < 1e-9):
            raise DegeneratePathError("duplicate consecutive control points")
        u = np.concatenate([[0.0], np.cumsum(chords)])
        spl = _spline(u, ring, closed)
        seg_len = _segment_lengths(spl, u)

        # resample every segment uniformly in arc length; control points stay nodes
        s_nodes = [0.0]
        p_nodes = [ring[0]]
        s0 = 0.0
        for i, L in enumerate(seg_len):
            m = max(4, int(math.ceil(L / resolution)))
            targets = np.linspace(0.0, L, m + 1)[1:-1]
            ui = u[i] + targets / L * (u[i + 1] - u[i])
            for _ in range(30):
                err = _arc_from(spl, u[i], ui) - targets
                ui = ui - err / np.linalg.norm(spl(ui, 1), axis=-1)
                if np.max(np.abs(err)) < 1e-13:
                    break
            s_nodes.extend(s0 + targets)
            p_nodes.extend(spl(ui))
            s0 += L
            s_nodes.append(s0)
            p_nodes.append(ring[i + 1])
        s_nodes = np.asarray(s_nodes)
        p_nodes = np.asarray(p_nodes)
        if closed:
            p_nodes[-1] = p_nodes[0]
        arc = _spline(s_nodes, p_nodes, closed)
        knot_arcs = np.concatenate([[0.0], np.cumsum(seg_len)])[: len(pts)]

        table_s = np.linspace(0.0, s0, max(200, int(s0 / 0.02)) + 1)
        if closed:
            table_s = table_s[:-1]
        table_p = arc(table_s)
        return cls(
            control_points=pts,
            breaks=np.ascontiguousarray(arc.x),
            coefs=np.ascontiguousarray(arc.c),
            length=float(s0),
            closed=bool(closed),
            knot_arcs=knot_arcs,
            table_s=table_s,
            table_p=np.ascontiguousarray(table_p),
        )

    # -- queries ---------------------------------------------------------
    def wrap(self, theta: float) -> float:
        return float(wrap_arc(float(theta), self.length, self.closed))

    def point(self, theta: float):
        """Position and unit tangent at arc length ``theta``."""
        pos, tan, dtan, dpos = (np.empty(3) for _ in range(4))
        path_frame(self.breaks, self.coefs, self.length, self.closed, float(theta), pos, tan, dtan, dpos)
        return pos, tan

    def derivatives(self, theta: float):
        pos, d1, d2 = np.empty(3), np.empty(3), np.empty(3)
        path_eval(self.breaks, self.coefs, self.length, self.closed, float(theta), pos, d1, d2)
        return pos, d1, d2

    def project(self, p, hint: float | None = None) -> float:
        """Arc length of the path point nearest to ``p``.

        Global search over the lookup table (ties go to the larger arc length),
        then Newton refinement.  With ``hint`` the search is local to it.
        """
        p = np.asarray(p, dtype=np.float64)
        d2 = np.sum((self.table_p - p) ** 2, axis=1)
        if hint is not None:
            diff = self.table_s - self.wrap(hint)
            if self.closed:
                diff = (diff + 0.5 * self.length) % self.length - 0.5 * self.length
            d2 = np.where(np.abs(diff) <= 2.0, d2, np.inf)
        idx = len(d2) - 1 - int(np.argmin(d2[::-1]))
        return float(refine_projection(self.breaks, self.coefs, self.length, self.closed, p, self.table_s[idx]))

    def arc_difference(self, a: float, b: float) -> float:
        """a - b, taken as the shorter way around on closed paths."""
        d = a - b
        if self.closed:
            d = (d + 0.5 * self.length) % self.length - 0.5 * self.length
        return d


def build_reference_path(gates, shaping_waypoints=(), closed: bool = True, resolution: float = 0.1):
    """Path through gate centers (and shaping waypoints in a given order).

    ``gates`` are gate center points; ``shaping_waypoints`` is a sequence of
    ``(insert_index, point)`` pairs placing a waypoint before control point
    ``insert_index``.
    """
    pts = [np.asarray(g.center if isinstance(g, Gate) else g, dtype=np.float64) for g in gates]
    for idx, wp in sorted(shaping_waypoints, key=lambda t: t[0], reverse=True):
        pts.insert(idx, np.asarray(wp, dtype=np.float64))
    return ReferencePath.build(np.array(pts), closed=closed, resolution=resolution)


def path_point(path: ReferencePath, theta: float):
    return path.point(theta)


def contour_lag_errors(path: ReferencePath, p, theta: float):
    """Split the position error at ``theta`` into contour (vector) and lag (scalar)."""
    r, t = path.point(theta)
    d = np.asarray(p, dtype=np.float64) - r
    e_l = float(t @ d)
    e_c = d - e_l * t
    return e_c, e_l


# ---------------------------------------------------------------------------
# Gate passes
# ---------------------------------------------------------------------------


def detect_gate_pass(p_prev, p_next, gate: Gate, pass_threshold: float = 0.5) -> GateEvent:
    """Classify the segment p_prev -> p_next against one gate.

    Only crossings from the back of the gate plane to its front (along the
    normal) count.  The gate plane is unbounded; the in-plane distance of the
    crossing point to the center decides pass vs crash.
    """
    p_prev = np.asarray(p_prev, dtype=np.float64)
    p_next = np.asarray(p_next, dtype=np.float64)
    s0 = float(gate.normal @ (p_prev - gate.center))
    s1 = float(gate.normal @ (p_next - gate.center))
    if not (s0 < 0.0 <= s1):
        return NO_EVENT
    alpha = -s0 / (s1 - s0)
    q = p_prev + alpha * (p_next - p_prev)
    off = q - gate.center
    off = off - (gate.normal @ off) * gate.normal
    miss = float(np.linalg.norm(off))
    kind = "pass" if miss <= 1.5 * pass_threshold else "crash"
    return GateEvent(kind, miss, alpha)


def first_crossing(positions: np.ndarray, gate: Gate) -> int:
    """Index i of the first directed crossing between positions[i] and positions[i+1], or -1."""
    s = (positions - gate.center) @ gate.normal
    hits = np.nonzero((s[:-1] < 0.0) & (s[1:] >= 0.0))[0]
    return int(hits[0]) if len(hits) else -1


# ---------------------------------------------------------------------------
# Track = gates + path
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Track:
    name: str
    gates: tuple[Gate, ...]
    path: ReferencePath
    source: str | None = None

    @property
    def n_gates(self) -> int:
        return len(self.gates)

    @property
    def gate_thetas(self) -> np.ndarray:
        return np.array([g.theta for g in self.gates])

    @property
    def start(self) -> np.ndarray:
        return self.path.point(0.0)[0]


def _normal_from(spec: dict, where: str):
    if "normal" in spec:
        n = np.asarray(spec["normal"], dtype=np.float64)
        if n.shape != (3,):
            raise TrackFormatError(f"{where}: normal must have 3 entries")
        return n
    if "yaw" in spec:
        yaw = math.radians(float(spec["yaw"]))
        pitch = math.radians(float(spec.get("pitch", 0.0)))
        return np.array([math.cos(pitch) * math.cos(yaw), math.cos(pitch) * math.sin(yaw), math.sin(pitch)])
    return None


def make_track(name, items, closed=True, resolution=0.1, source=None) -> Track:
    """Build a track from ordered items ``("gate", dict) | ("waypoint", point)``."""
    points = []
    gate_specs = []
    for kind, spec in items:
        if kind == "gate":
            points.append(np.asarray(spec["center"], dtype=np.float64))
            gate_specs.append((len(points) - 1, spec))
        else:
            points.append(np.asarray(spec, dtype=np.float64))
    if not gate_specs:
        raise TrackFormatError("track needs at least one gate")
    path = ReferencePath.build(np.array(points), closed=closed, resolution=resolution)
    gates = []
    last = -1.0
    for j, (idx, spec) in enumerate(gate_specs):
        center = points[idx]
        theta = path.project(center, hint=float(path.knot_arcs[idx]))
        if path.closed and theta >= path.length - 1e-9:
            theta = 0.0
        if theta <= last:
            raise TrackFormatError(f"gate {j}: progress coordinates must increase with gate index")
        last = theta
        normal = _normal_from(spec, f"gate {j}")
        if normal is None:
            normal = path.point(theta)[1]
        gates.append(Gate(center, normal, float(spec.get("width", 1.2)), theta))
    return Track(name, tuple(gates), path, source)


def load_track(path) -> Track:
    """Read a YAML track file.

    Format::

        name: oval
        closed: true
        points:
          - waypoint: [x, y, z]
          - gate: {center: [x, y, z], normal: [nx, ny, nz], width: 1.2}
          - gate: {center: [x, y, z], yaw: 90, pitch: 0}
    """
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise
    except yaml.YAMLError as exc:
        raise TrackFormatError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict) or "points" not in doc:
        raise TrackFormatError(f"{path}: expected a mapping with a 'points' list")
    items = []
    for i, entry in enumerate(doc["points"]):
        if not isinstance(entry, dict) or len(entry) != 1:
            raise TrackFormatError(f"{path}: points[{i}] must be a single-key mapping")
        (kind, spec), = entry.items()
        if kind == "gate":
            if not isinstance(spec, dict) or "center" not in spec:
                raise TrackFormatError(f"{path}: points[{i}].gate needs a center")
            items.append(("gate", spec))
        elif kind == "waypoint":
            items.append(("waypoint", spec))
        else:
            raise TrackFormatError(f"{path}: points[{i}]: unknown kind {kind!r}")
    return make_track(
        doc.get("name", path.stem),
        items,
        closed=bool(doc.get("closed", True)),
        resolution=float(doc.get("resolution", 0.1)),
        source=str(path.resolve()),
    )


TRACK_DIR = Path(__file__).parent / "data" / "tracks"
BUNDLED_TRACKS = ("oval", "single_gate", "figure_eight")


def bundled_track(name: str) -> Track:
    if name not in BUNDLED_TRACKS:
        raise KeyError(f"no bundled track named {name!r} (have {', '.join(BUNDLED_TRACKS)})")
    return load_track(TRACK_DIR / f"{name}.yaml")
