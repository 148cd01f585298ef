"""Closed race tracks: arc-length-parameterized polylines with lane widths.

File format (JSON): {"vertices": [[x, y], ...], "half_width": w or
"half_widths": [w0, ...], "closed": true}. Vertices trace the centerline;
the polyline is closed back to the first vertex.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError


@dataclass
class TrackFrame:
    """Centerline sample at a progress value."""

    position: np.ndarray   # (2,)
    tangent: np.ndarray    # (2,) unit
    normal: np.ndarray     # (2,) unit, left of travel
    half_width: float
    heading: float


class Track:
    def __init__(self, vertices: np.ndarray, half_widths, closed: bool = True):
        vertices = np.asarray(vertices, dtype=float)
        if not closed:
            raise ConfigurationError("only closed tracks are supported")
        if vertices.ndim != 2 or vertices.shape[1] != 2 or vertices.shape[0] < 3:
            raise ConfigurationError("track needs at least three (x, y) centerline vertices")
        widths = np.broadcast_to(np.asarray(half_widths, dtype=float), (vertices.shape[0],)).copy()
        if np.any(widths <= 0):
            raise ConfigurationError("track half-widths must be positive")
        self.vertices = vertices
        self.half_widths = widths
        segs = np.roll(vertices, -1, axis=0) - vertices
        seg_len = np.linalg.norm(segs, axis=1)
        if np.any(seg_len <= 0):
            raise ConfigurationError("track contains zero-length segments")
        self._seg_dir = segs / seg_len[:, np.newaxis]
        self._seg_len = seg_len
        self._cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.length = float(self._cum[-1])

    # -- construction ------------------------------------------------------

    @classmethod
    def oval(
        cls,
        straight: float = 2.5,
        radius: float = 1.0,
        half_width: float = 0.28,
        points_per_arc: int = 60,
    ) -> "Track":
        """Stadium: two straights joined by semicircular arcs, centered at origin."""
        pts = []
        half = straight / 2.0
        # bottom straight, left to right
        for s in np.linspace(-half, half, max(2, points_per_arc // 3), endpoint=False):
            pts.append((s, -radius))
        # right arc
        for ang in np.linspace(-math.pi / 2.0, math.pi / 2.0, points_per_arc, endpoint=False):
            pts.append((half + radius * math.cos(ang), radius * math.sin(ang)))
        # top straight, right to left
        for s in np.linspace(half, -half, max(2, points_per_arc // 3), endpoint=False):
            pts.append((s, radius))
        # left arc
        for ang in np.linspace(math.pi / 2.0, 3.0 * math.pi / 2.0, points_per_arc, endpoint=False):
            pts.append((-half + radius * math.cos(ang), radius * math.sin(ang)))
        return cls(np.asarray(pts), half_width)

    @classmethod
    def from_json(cls, path) -> "Track":
        payload = json.loads(Path(path).read_text())
        widths = payload.get("half_widths", payload.get("half_width"))
        if widths is None:
            raise ConfigurationError(f"track file {path} is missing half_width(s)")
        return cls(
            vertices=np.asarray(payload["vertices"], dtype=float),
            half_widths=widths,
            closed=bool(payload.get("closed", True)),
        )

    def to_json(self, path) -> None:
        payload = {
            "vertices": self.vertices.tolist(),
            "half_widths": self.half_widths.tolist(),
            "closed": True,
        }
        Path(path).write_text(json.dumps(payload))

    # -- queries -------------------------------------------------------------

    def _segment_of(self, theta):
        s = np.mod(theta, self.length)
        idx = np.clip(np.searchsorted(self._cum, s, side="right") - 1, 0, len(self._seg_len) - 1)
        return s, idx

    def frame(self, theta: float) -> TrackFrame:
        pos, tan, nor, width = self.frames(np.array([theta]))
        return TrackFrame(
            position=pos[0],
            tangent=tan[0],
            normal=nor[0],
            half_width=float(width[0]),
            heading=float(np.arctan2(tan[0, 1], tan[0, 0])),
        )

    def frames(self, thetas: np.ndarray):
        """Vectorized centerline lookup: positions, tangents, left normals, widths."""
        s, idx = self._segment_of(np.asarray(thetas, dtype=float))
        local = (s - self._cum[idx]) / self._seg_len[idx]
        pos = self.vertices[idx] + local[:, np.newaxis] * (self._seg_dir[idx] * self._seg_len[idx][:, np.newaxis])
        tan = self._seg_dir[idx]
        nor = np.stack([-tan[:, 1], tan[:, 0]], axis=1)
        nxt = (idx + 1) % len(self.vertices)
        width = self.half_widths[idx] * (1.0 - local) + self.half_widths[nxt] * local
        return pos, tan, nor, width

    def project(self, point: np.ndarray, hint_progress: float | None = None):
        """Nearest centerline point: returns (progress, signed lateral offset).

        Positive offsets are to the left of travel. Near-equidistant segments
        are disambiguated toward ``hint_progress``.
        """
        point = np.asarray(point, dtype=float)
        rel = point - self.vertices
        along = np.einsum("ij,ij->i", rel, self._seg_dir)
        along = np.clip(along, 0.0, self._seg_len)
        foot = self.vertices + along[:, np.newaxis] * self._seg_dir
        dist2 = np.einsum("ij,ij->i", point - foot, point - foot)
        best = dist2.min()
        candidates = np.flatnonzero(dist2 <= best + 1e-12)
        if len(candidates) > 1 and hint_progress is not None:
            progress = self._cum[candidates] + along[candidates]
            hint = np.mod(hint_progress, self.length)
            wrap = np.minimum(np.abs(progress - hint), self.length - np.abs(progress - hint))
            seg = candidates[np.argmin(wrap)]
        else:
            seg = candidates[0]
        progress = float(self._cum[seg] + along[seg])
        normal = np.array([-self._seg_dir[seg, 1], self._seg_dir[seg, 0]])
        lateral = float(normal @ (point - foot[seg]))
        return progress, lateral

    def initial_state_on_centerline(self, progress: float = 0.0, speed: float = 0.5) -> np.ndarray:
        frame = self.frame(progress)
        state = np.zeros(9)
        state[0:2] = frame.position
        state[2] = frame.heading
        state[3] = speed
        state[8] = progress
        return state
