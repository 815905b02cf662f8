"""Planar SE(2) poses, oriented boxes, rotated IoU, and BEV grid mapping.

Conventions: x east, y north, yaw counterclockwise from +x. Box length runs
along the heading, width across it. Grid row i maps to x and column j to y;
both grids and features are expressed in the owning agent's frame.
"""

import math
from dataclasses import dataclass, field

import numpy as np

TAU = 2.0 * math.pi


def wrap_angle(a):
    """Normalize an angle to (-pi, pi]."""
    return math.pi - (math.pi - a) % TAU


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def matrix(self):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def transform(self, pts):
        """Map points from this pose's frame into the parent frame."""
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = np.empty_like(pts)
        out[..., 0] = c * pts[..., 0] - s * pts[..., 1] + self.x
        out[..., 1] = s * pts[..., 0] + c * pts[..., 1] + self.y
        return out

    def inverse_transform(self, pts):
        """Map points from the parent frame into this pose's frame."""
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = pts[..., 0] - self.x
        dy = pts[..., 1] - self.y
        out = np.empty_like(pts)
        out[..., 0] = c * dx + s * dy
        out[..., 1] = -s * dx + c * dy
        return out


def relative_pose(src, dst):
    """Pose of `src`'s frame expressed in `dst`'s frame (dst^-1 . src)."""
    c, s = math.cos(dst.yaw), math.sin(dst.yaw)
    dx = src.x - dst.x
    dy = src.y - dst.y
    return Pose(c * dx + s * dy, -s * dx + c * dy, src.yaw - dst.yaw)


@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    w: float
    l: float
    yaw: float
    score: float = 1.0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0):
            raise ValueError(f"box sides must be positive, got w={self.w} l={self.l}")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def area(self):
        return self.w * self.l

    def corners(self):
        """4x2 corner array, counterclockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.l / 2.0, self.w / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        out = np.empty_like(local)
        out[:, 0] = c * local[:, 0] - s * local[:, 1] + self.cx
        out[:, 1] = s * local[:, 0] + c * local[:, 1] + self.cy
        return out

    def contains(self, pts):
        """Boolean test: points (..., 2) inside the box (inclusive)."""
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = pts[..., 0] - self.cx
        dy = pts[..., 1] - self.cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (np.abs(u) <= self.l / 2.0) & (np.abs(v) <= self.w / 2.0)


def transform_box(box, pose):
    """Express a box given in `pose`'s frame in the parent frame."""
    cx, cy = pose.transform(np.array([box.cx, box.cy]))
    return OrientedBox(float(cx), float(cy), box.w, box.l,
                       wrap_angle(box.yaw + pose.yaw), box.score)


def polygon_area(poly):
    """Shoelace area of a polygon given as an (n, 2) array; >= 0 for CCW."""
    if len(poly) < 3:
        return 0.0
    x = poly[:, 0]
    y = poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def clip_polygon(subject, clip):
    """Sutherland-Hodgman: clip a polygon by a convex CCW polygon."""
    out = list(np.asarray(subject, dtype=np.float64))
    n = len(clip)
    for e in range(n):
        if not out:
            return np.zeros((0, 2))
        a = clip[e]
        b = clip[(e + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inp = out
        out = []
        prev = inp[-1]
        prev_in = ex * (prev[1] - a[1]) - ey * (prev[0] - a[0]) <= 0.0
        for cur in inp:
            cur_in = ex * (cur[1] - a[1]) - ey * (cur[0] - a[0]) <= 0.0
            if cur_in != prev_in:
                # edge crossing: intersect segment prev->cur with line a->b
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = ex * dy - ey * dx
                if denom != 0.0:
                    t = (ex * (a[1] - prev[1]) - ey * (a[0] - prev[0])) / denom
                    out.append(np.array([prev[0] + t * dx, prev[1] + t * dy]))
            if cur_in:
                out.append(cur)
            prev, prev_in = cur, cur_in
    return np.asarray(out) if out else np.zeros((0, 2))


def rotated_iou(a, b):
    """Exact BEV IoU of two oriented boxes via polygon clipping."""
    ca = a.corners()
    cb = b.corners()
    # corners() is CCW in standard axes but the clip test above treats
    # "inside" as the clockwise side, so feed the clip polygon reversed
    inter_poly = clip_polygon(ca, cb[::-1])
    inter = abs(polygon_area(inter_poly))
    inter = min(inter, a.area(), b.area())
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def ray_box_intersection(origin, direction, box, t_min=1e-6):
    """Smallest t >= t_min where origin + t*direction enters the box; inf if none."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    ox = c * (origin[0] - box.cx) + s * (origin[1] - box.cy)
    oy = -s * (origin[0] - box.cx) + c * (origin[1] - box.cy)
    dx = c * direction[0] + s * direction[1]
    dy = -s * direction[0] + c * direction[1]
    lo, hi = -np.inf, np.inf
    for o, d, half in ((ox, dx, box.l / 2.0), (oy, dy, box.w / 2.0)):
        if d == 0.0:
            if abs(o) > half:
                return np.inf
        else:
            t0 = (-half - o) / d
            t1 = (half - o) / d
            if t0 > t1:
                t0, t1 = t1, t0
            lo = max(lo, t0)
            hi = min(hi, t1)
    if hi < lo:
        return np.inf
    t = lo if lo >= t_min else hi
    return t if t >= t_min else np.inf


# ---------------------------------------------------------------------------
# BEV grid mapping

@dataclass(frozen=True)
class GridSpec:
    """Square BEV grid: extent [-world_range, world_range] on both axes."""
    size: int
    world_range: float

    @property
    def cell(self):
        return 2.0 * self.world_range / self.size

    def cell_index(self, x):
        """Continuous coordinate -> cell index; exact-boundary points go to
        the lower cell. None when outside the grid."""
        f = (x + self.world_range) / self.cell
        i = math.floor(f)
        if f == i and i > 0:
            i -= 1
        if 0 <= i < self.size:
            return i
        return None

    def cell_center(self, i):
        return -self.world_range + (i + 0.5) * self.cell

    def centers(self):
        """(size,) array of cell-center coordinates along one axis."""
        idx = np.arange(self.size, dtype=np.float64)
        return -self.world_range + (idx + 0.5) * self.cell


def position_channels(h, w):
    """[h, w, 3] positional grid: normalized row coord, normalized column
    coord, constant one. Corners hit exactly +-1; odd-size centers are 0."""
    ni = (2.0 * np.arange(h, dtype=np.float64) - (h - 1)) / (h - 1) if h > 1 \
        else np.zeros(1)
    nj = (2.0 * np.arange(w, dtype=np.float64) - (w - 1)) / (w - 1) if w > 1 \
        else np.zeros(1)
    out = np.empty((h, w, 3), dtype=np.float64)
    out[..., 0] = ni[:, None]
    out[..., 1] = nj[None, :]
    out[..., 2] = 1.0
    return out


def warp_affine(pose_src, pose_ego, grid):
    """Affine (2x3 flattened) mapping ego output cell (i, j) to fractional
    source cell coordinates in the src agent's grid.

    Composed from the relative pose so that identical poses yield the exact
    identity affine (1, 0, 0, 0, 1, 0).
    """
    rel = relative_pose(pose_ego, pose_src)
    c, s = math.cos(rel.yaw), math.sin(rel.yaw)
    h = grid.cell
    r = grid.world_range
    ci = 0.5 * c - 0.5 * s - 0.5 + (r * (1.0 - c + s) + rel.x) / h
    cj = 0.5 * s + 0.5 * c - 0.5 + (r * (1.0 - s - c) + rel.y) / h
    return (c, -s, ci, s, c, cj)


def affine_covers_nothing(affine, h, w):
    """True when no output cell samples inside an h x w source grid — the
    warp would be identically zero. Checked on the affine itself so agent
    exclusion is decidable at graph-build time."""
    m = np.asarray(affine, dtype=np.float64).reshape(2, 3)
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    si = m[0, 0] * ii + m[0, 1] * jj + m[0, 2]
    sj = m[1, 0] * ii + m[1, 1] * jj + m[1, 2]
    inside = (si > -1.0) & (si < h) & (sj > -1.0) & (sj < w)
    return not bool(inside.any())
