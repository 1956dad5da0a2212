# lidar-probe-init/src/lidar_probe_init/phantoms.py
"""
Parametric phantoms for the simulator.

A mannequin phantom is a torso lying on a bed along the base y axis with
its arms beside it. The upper torso surface is a height field: a
superellipse cross-section (widest ``center_height`` above the bed) plus a
smooth sex-specific modulation. The male variant carries a sternum groove,
rib ripple and flat pectorals; the female variant carries two breast
bumps instead. A spherical marker can be placed tangent to the surface at
the point of maximal impulse.

Key components:
    - LABELS: semantic face labels shared with point clouds.
    - PhantomParams, ChestSurface, Phantom: parameters, the analytic
      surface and the triangle mesh.
    - generate_phantom: mesh builder for every phantom kind.
    - build_template: annotated chest template sampled from the surface.
    - sample_surface: area-weighted labeled ground-truth cloud.
"""

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from lidar_probe_init.exceptions import InvalidConfigurationError
from lidar_probe_init.geometry import BASE, TEMPLATE, PointCloud
from lidar_probe_init.random_generator import SURFACE_SAMPLING, RandomNumberGenerator
from lidar_probe_init.registration import TemplateModel

logger = logging.getLogger(__name__)

LABELS: Dict[str, int] = {"chest": 0, "arm": 1, "bed": 2, "marker": 3, "board": 4}
PHANTOM_KINDS = ("male", "female", "plate", "sphere", "box")

# Template extent in normalized chest coordinates.
TEMPLATE_HALF_U = 0.75
TEMPLATE_HALF_V = 0.7


@dataclass
class PhantomParams:
    """
    Phantom dimensions in meters.

    Attributes:
        half_width: Torso half-width a.
        half_height: Superellipse half-height b above the widest section.
        exponent: Superellipse exponent.
        center_height: Height of the widest section above the bed.
        length: Torso length along y.
        sternum_depth: Male midline groove depth.
        rib_amplitude: Male rib ripple amplitude.
        rib_period: Male rib spacing.
        pectoral_height: Male pectoral prominence.
        breast_height: Female breast prominence.
        breast_spread: Female breast radius (Gaussian sigma).
        arm_radius: Arm cylinder radius.
        arm_gap: Gap between torso side and arm.
        bed_half_width: Bed half-extent along x.
        bed_half_length: Bed half-extent along y.
        marker: Add the spherical marker.
        marker_radius: Marker radius.
        marker_u: Marker position across the chest, as a fraction of a.
        marker_v: Marker position along the chest, as a fraction of length/2.
        plate_width: Plate extent along x.
        plate_length: Plate extent along y.
        box_size: Box edge lengths (x, y, z).
        sphere_radius: Radius of the sphere phantom.
        angular_segments: Torso cross-section subdivisions.
        length_segments: Torso subdivisions along y.
        arm_segments: Arm circumference subdivisions.
        icosphere_level: Subdivision level of spheres.
    """

    half_width: float = 0.17
    half_height: float = 0.12
    exponent: float = 2.6
    center_height: float = 0.07
    length: float = 0.6
    sternum_depth: float = 0.004
    rib_amplitude: float = 0.0015
    rib_period: float = 0.025
    pectoral_height: float = 0.010
    breast_height: float = 0.035
    breast_spread: float = 0.045
    arm_radius: float = 0.045
    arm_gap: float = 0.04
    bed_half_width: float = 0.45
    bed_half_length: float = 0.4
    marker: bool = True
    marker_radius: float = 0.015
    marker_u: float = 0.4
    marker_v: float = 0.1
    plate_width: float = 0.6
    plate_length: float = 0.9
    box_size: Tuple[float, float, float] = (0.2, 0.2, 0.1)
    sphere_radius: float = 0.015
    angular_segments: int = 72
    length_segments: int = 100
    arm_segments: int = 24
    icosphere_level: int = 3

    def __post_init__(self):
        self.box_size = tuple(float(s) for s in self.box_size)
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("marker", "marker_u", "marker_v"):
                continue
            values = value if isinstance(value, tuple) else (value,)
            if any(not v > 0 for v in values):
                logger.error(f"Invalid phantom parameter {f.name}={value}")
                raise InvalidConfigurationError(f"{f.name} must be positive, got {value}")
        if self.exponent < 2.0:
            raise InvalidConfigurationError("exponent must be at least 2")
        if abs(self.marker_u) > TEMPLATE_HALF_U or abs(self.marker_v) > TEMPLATE_HALF_V:
            logger.error(f"Marker at ({self.marker_u}, {self.marker_v}) is off the chest")
            raise InvalidConfigurationError("Marker must lie on the templated chest area")
        if self.bed_half_width < self.half_width + self.arm_gap + 2 * self.arm_radius:
            raise InvalidConfigurationError("Bed is narrower than torso and arms")


class ChestSurface:
    """
    Analytic upper torso height field ``z = H(x, y)`` for ``|x| < a``.

    The modulation is faded to zero at the sides by ``(1 - u²)²`` with
    ``u = x / a``, so the surface meets the vertical side walls at
    ``center_height``.
    """

    def __init__(self, params: PhantomParams, sex: str):
        if sex not in ("male", "female"):
            raise InvalidConfigurationError(f"Unknown chest variant {sex}")
        self.params = params
        self.sex = sex
        self.pectoral_x = 0.07
        self.pectoral_y = 0.06
        self.breast_x = 0.075
        self.breast_y = 0.03

    def _base(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        p = self.params
        u = np.clip(np.abs(x) / p.half_width, 0.0, 1.0)
        inner = np.clip(1.0 - u**p.exponent, 0.0, None)
        z = p.center_height + p.half_height * inner ** (1.0 / p.exponent)
        with np.errstate(divide="ignore", invalid="ignore"):
            dz = (
                -(p.half_height / p.half_width)
                * inner ** (1.0 / p.exponent - 1.0)
                * u ** (p.exponent - 1.0)
                * np.sign(x)
            )
        return z, np.where(u < 1.0, dz, 0.0)

    @staticmethod
    def _gaussian(
        x: np.ndarray, y: np.ndarray, cx: float, cy: float, sx: float, sy: float
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        g = np.exp(-((x - cx) ** 2) / (2 * sx**2) - (y - cy) ** 2 / (2 * sy**2))
        return g, -g * (x - cx) / sx**2, -g * (y - cy) / sy**2

    def _modulation(
        self, x: np.ndarray, y: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        p = self.params
        g = np.zeros_like(x)
        gx = np.zeros_like(x)
        gy = np.zeros_like(x)
        if self.sex == "male":
            groove = np.exp(-(x**2) / (2 * 0.015**2))
            g -= p.sternum_depth * groove
            gx += p.sternum_depth * groove * x / 0.015**2
            u = x / p.half_width
            k = 2.0 * math.pi / p.rib_period
            g += p.rib_amplitude * u**2 * np.cos(k * y)
            gx += p.rib_amplitude * 2.0 * u / p.half_width * np.cos(k * y)
            gy -= p.rib_amplitude * u**2 * k * np.sin(k * y)
            for side in (-1.0, 1.0):
                b, bx, by = self._gaussian(
                    x, y, side * self.pectoral_x, self.pectoral_y, 0.05, 0.06
                )
                g += p.pectoral_height * b
                gx += p.pectoral_height * bx
                gy += p.pectoral_height * by
        else:
            for side in (-1.0, 1.0):
                b, bx, by = self._gaussian(
                    x, y, side * self.breast_x, self.breast_y, p.breast_spread, p.breast_spread
                )
                g += p.breast_height * b
                gx += p.breast_height * bx
                gy += p.breast_height * by
        u = x / p.half_width
        envelope = (1.0 - u**2) ** 2
        d_envelope = -4.0 * u * (1.0 - u**2) / p.half_width
        return envelope * g, d_envelope * g + envelope * gx, envelope * gy

    def height(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        base, _ = self._base(x)
        m, _, _ = self._modulation(x, y)
        return base + m

    def normal(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Upward unit normals (…×3)."""
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        _, dbase = self._base(x)
        _, mx, my = self._modulation(x, y)
        n = np.stack([-(dbase + mx), -my, np.ones_like(x)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def point(self, u: float, v: float) -> np.ndarray:
        """Surface point at normalized chest coordinates (u, v)."""
        x = u * self.params.half_width
        y = v * self.params.length / 2.0
        return np.array([x, y, float(self.height(x, y))])


@dataclass(eq=False)
class Phantom:
    """
    Labeled triangle mesh.

    Attributes:
        kind: Generator that built it.
        vertices: V×3 coordinates in the base frame.
        faces: F×3 vertex indices.
        face_labels: Label id per face (see ``LABELS``).
        params: Generator parameters.
        surface: Analytic chest surface for mannequins.
        marker_center: Marker sphere center, when present.
        marker_apex: Topmost marker point along the surface normal.
    """

    kind: str
    vertices: np.ndarray
    faces: np.ndarray
    face_labels: np.ndarray
    params: PhantomParams
    surface: Optional[ChestSurface] = None
    marker_center: Optional[np.ndarray] = None
    marker_apex: Optional[np.ndarray] = None
    _normals: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.face_labels = np.asarray(self.face_labels, dtype=np.int64)
        if self.face_labels.shape != (self.faces.shape[0],):
            raise InvalidConfigurationError("Every face needs exactly one label")

    @property
    def face_count(self) -> int:
        return int(self.faces.shape[0])

    def triangles(self) -> np.ndarray:
        """F×3×3 corner coordinates."""
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        if self._normals is None:
            tri = self.triangles()
            n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
            self._normals = n / np.linalg.norm(n, axis=1, keepdims=True)
        return self._normals

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(
            np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
        )

    def bounds(self, label: Optional[str] = None) -> Tuple[np.ndarray, np.ndarray]:
        faces = self.faces if label is None else self.faces[self.face_labels == LABELS[label]]
        used = self.vertices[np.unique(faces)]
        return used.min(axis=0), used.max(axis=0)


class _MeshBuilder:
    def __init__(self):
        self.vertices: List[np.ndarray] = []
        self.faces: List[np.ndarray] = []
        self.labels: List[np.ndarray] = []
        self.count = 0

    def add(self, vertices: np.ndarray, faces: np.ndarray, label: str) -> None:
        self.vertices.append(np.asarray(vertices, dtype=float).reshape(-1, 3))
        self.faces.append(np.asarray(faces, dtype=np.int64) + self.count)
        self.labels.append(np.full(len(faces), LABELS[label], dtype=np.int64))
        self.count += self.vertices[-1].shape[0]

    def add_grid(self, grid: np.ndarray, label: str) -> None:
        """Triangulate an R×C×3 vertex grid."""
        rows, cols = grid.shape[:2]
        idx = np.arange(rows * cols).reshape(rows, cols)
        a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
        c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
        faces = np.concatenate([np.stack([a, c, b], 1), np.stack([b, c, d], 1)])
        self.add(grid.reshape(-1, 3), faces, label)

    def build(self, kind: str, params: PhantomParams, **extra) -> Phantom:
        return Phantom(
            kind,
            np.concatenate(self.vertices),
            np.concatenate(self.faces),
            np.concatenate(self.labels),
            params,
            **extra,
        )


def icosphere(level: int) -> Tuple[np.ndarray, np.ndarray]:
    """Unit icosphere by midpoint subdivision of an icosahedron."""
    t = (1.0 + math.sqrt(5.0)) / 2.0
    vertices = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]  # fmt: skip
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]  # fmt: skip
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in vertices]
    for _ in range(level):
        cache: Dict[Tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = refined
    return np.array(verts), np.array(faces, dtype=np.int64)


def _add_torso(builder: _MeshBuilder, surface: ChestSurface) -> None:
    p = surface.params
    phi = np.linspace(0.0, math.pi, p.angular_segments + 1)
    cos_phi = np.cos(phi)
    x = p.half_width * np.sign(cos_phi) * np.abs(cos_phi) ** (2.0 / p.exponent)
    x[0], x[-1] = p.half_width, -p.half_width
    y = np.linspace(-p.length / 2.0, p.length / 2.0, p.length_segments + 1)
    xx, yy = np.meshgrid(x, y)
    top = np.stack([xx, yy, surface.height(xx, yy)], axis=-1)
    builder.add_grid(top, "chest")
    for column in (0, -1):
        wall = np.stack(
            [
                np.stack([top[:, column, 0], y, np.zeros_like(y)], axis=-1),
                top[:, column],
            ],
            axis=1,
        )
        builder.add_grid(wall, "chest")
    for row in (0, -1):
        profile = np.concatenate(
            [[[p.half_width, y[row], 0.0]], top[row], [[-p.half_width, y[row], 0.0]]]
        )
        hub = np.array([[0.0, y[row], p.center_height / 2.0]])
        n = profile.shape[0]
        faces = np.stack([np.full(n - 1, n), np.arange(n - 1), np.arange(1, n)], axis=1)
        builder.add(np.concatenate([profile, hub]), faces, "chest")


def _add_arms(builder: _MeshBuilder, p: PhantomParams) -> None:
    angles = np.linspace(0.0, 2.0 * math.pi, p.arm_segments + 1)
    y = np.linspace(-p.length / 2.0, p.length / 2.0, p.length_segments // 4 + 1)
    offset = p.half_width + p.arm_gap + p.arm_radius
    for side in (-1.0, 1.0):
        aa, yy = np.meshgrid(angles, y)
        grid = np.stack(
            [
                side * offset + p.arm_radius * np.cos(aa),
                yy,
                p.arm_radius + p.arm_radius * np.sin(aa),
            ],
            axis=-1,
        )
        builder.add_grid(grid, "arm")


def _add_rectangle(
    builder: _MeshBuilder, half_x: float, half_y: float, z: float, label: str
) -> None:
    corners = np.array(
        [[-half_x, -half_y, z], [half_x, -half_y, z], [half_x, half_y, z], [-half_x, half_y, z]]
    )
    builder.add(corners, np.array([[0, 1, 2], [0, 2, 3]]), label)


def _add_sphere(
    builder: _MeshBuilder, center: np.ndarray, radius: float, level: int, label: str
) -> None:
    vertices, faces = icosphere(level)
    builder.add(center + radius * vertices, faces, label)


def _add_box(builder: _MeshBuilder, size: Tuple[float, float, float]) -> None:
    hx, hy, h = size[0] / 2.0, size[1] / 2.0, size[2]
    corners = np.array(
        [[x, y, z] for z in (0.0, h) for y in (-hy, hy) for x in (-hx, hx)]
    )
    faces = np.array(
        [
            [4, 5, 7], [4, 7, 6],
            [0, 1, 5], [0, 5, 4], [2, 6, 7], [2, 7, 3],
            [0, 4, 6], [0, 6, 2], [1, 3, 7], [1, 7, 5],
        ]
    )  # fmt: skip
    builder.add(corners, faces, "board")


def generate_phantom(kind: str, params: Optional[PhantomParams] = None) -> Phantom:
    """
    Build a phantom mesh.

    Args:
        kind: "male" or "female" mannequin, "plate" (calibration board at
            z = 0), "sphere" (at the origin) or "box" (resting on z = 0).
        params: Dimensions; defaults when omitted.

    Returns:
        The labeled mesh. Identical arguments give identical meshes.

    Raises:
        InvalidConfigurationError: If the kind is unknown.
    """
    params = params or PhantomParams()
    if kind not in PHANTOM_KINDS:
        logger.error(f"Unknown phantom kind {kind}")
        raise InvalidConfigurationError(f"Phantom kind must be one of {PHANTOM_KINDS}")
    builder = _MeshBuilder()
    extra: Dict = {}
    if kind == "plate":
        _add_rectangle(builder, params.plate_width / 2, params.plate_length / 2, 0.0, "board")
    elif kind == "sphere":
        _add_sphere(builder, np.zeros(3), params.sphere_radius, params.icosphere_level, "marker")
    elif kind == "box":
        _add_box(builder, params.box_size)
    else:
        surface = ChestSurface(params, kind)
        _add_torso(builder, surface)
        _add_arms(builder, params)
        _add_rectangle(builder, params.bed_half_width, params.bed_half_length, 0.0, "bed")
        extra["surface"] = surface
        if params.marker:
            contact = surface.point(params.marker_u, params.marker_v)
            normal = surface.normal(contact[0], contact[1])
            center = contact + params.marker_radius * normal
            _add_sphere(builder, center, params.marker_radius, params.icosphere_level, "marker")
            extra["marker_center"] = center
            extra["marker_apex"] = center + params.marker_radius * normal
    phantom = builder.build(kind, params, **extra)
    logger.debug(f"Built {kind} phantom with {phantom.face_count} faces")
    return phantom


def build_template(
    sex: str,
    params: Optional[PhantomParams] = None,
    spacing: float = 0.006,
    name: Optional[str] = None,
) -> TemplateModel:
    """
    Chest template sampled from the analytic surface.

    The grid covers ``|u| <= 0.75`` and ``|v| <= 0.7`` at ``spacing`` with
    analytic normals. The probe point is the surface point at the marker's
    chest coordinates.
    """
    params = params or PhantomParams()
    surface = ChestSurface(params, sex)
    half_x = TEMPLATE_HALF_U * params.half_width
    half_y = TEMPLATE_HALF_V * params.length / 2.0
    xs = np.arange(-half_x, half_x + 1e-12, spacing)
    ys = np.arange(-half_y, half_y + 1e-12, spacing)
    xx, yy = np.meshgrid(xs, ys)
    points = np.stack([xx, yy, surface.height(xx, yy)], axis=-1).reshape(-1, 3)
    normals = surface.normal(xx, yy).reshape(-1, 3)
    cloud = PointCloud(points, TEMPLATE, normals)
    probe = surface.point(params.marker_u, params.marker_v)
    return TemplateModel(cloud, probe, sex, name or f"{sex}_template")


def sample_surface(
    phantom: Phantom,
    spacing: float = 0.003,
    rng: Optional[RandomNumberGenerator] = None,
    labels: Optional[Tuple[str, ...]] = None,
) -> PointCloud:
    """
    Area-weighted random samples of the mesh with labels and face normals.

    Args:
        phantom: Mesh to sample.
        spacing: Mean sample spacing; about ``area / spacing²`` samples.
        rng: Stream source, seed 69 when omitted.
        labels: Restrict sampling to these label names.
    """
    rng = rng or RandomNumberGenerator()
    mask = np.ones(phantom.face_count, dtype=bool)
    if labels is not None:
        mask = np.isin(phantom.face_labels, [LABELS[name] for name in labels])
    faces = np.flatnonzero(mask)
    areas = phantom.face_areas()[faces]
    count = int(math.ceil(areas.sum() / spacing**2))
    generator = rng.stream(SURFACE_SAMPLING, 0)
    chosen = faces[
        np.minimum(
            np.searchsorted(np.cumsum(areas) / areas.sum(), generator.random(count)),
            faces.size - 1,
        )
    ]
    r1 = np.sqrt(generator.random(count))
    r2 = generator.random(count)
    tri = phantom.triangles()[chosen]
    points = (
        (1 - r1)[:, None] * tri[:, 0]
        + (r1 * (1 - r2))[:, None] * tri[:, 1]
        + (r1 * r2)[:, None] * tri[:, 2]
    )
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    logger.info(f"Sampled {count} ground-truth points from {phantom.kind} phantom")
    return PointCloud(
        points[order],
        BASE,
        phantom.face_normals()[chosen][order],
        phantom.face_labels[chosen][order],
    )
