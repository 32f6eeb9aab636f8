"""World description, particle sampling and the built-in benchmark catalog."""

from dataclasses import dataclass, field, replace
import json
import math

import numpy as np

from .errors import CatalogError, DomainError
from .utils import (read_array, read_magic, read_struct, rng_for, write_array,
                    write_magic, write_struct)

SAFE_MARGIN_CELLS = 2


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class Boundary:
    """Floor plane and wall treatment applied on the grid.

    ``floor_height`` of None means the floor coincides with the lower
    y wall band (two cells).
    """

    floor_height: float = None
    mode: str = "slip"  # slip | sticky
    friction: float = 0.0

    def __post_init__(self):
        if self.mode not in ("slip", "sticky"):
            raise ValueError(f"unknown boundary mode {self.mode!r}")
        if self.friction < 0:
            raise ValueError("friction must be non-negative")


@dataclass(frozen=True)
class SceneConfig:
    n: int = 32
    gravity: tuple = (0.0, -9.8, 0.0)
    boundary: Boundary = field(default_factory=Boundary)
    dt: float = 1e-3
    substeps: int = 10
    precision: str = "f64"
    deterministic: bool = True
    transfer: str = "pic"  # pic | apic
    verbose: bool = False

    def __post_init__(self):
        if self.n < 8:
            raise ValueError("grid resolution must be >= 8")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")
        if self.transfer not in ("pic", "apic"):
            raise ValueError("transfer must be 'pic' or 'apic'")
        if not 0.0 <= self.floor_height < 1.0:
            raise ValueError("floor must lie inside the domain")

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def floor_height(self):
        fh = self.boundary.floor_height
        return SAFE_MARGIN_CELLS * self.h if fh is None else float(fh)

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        b = self.boundary
        return {
            "grid_resolution": self.n,
            "gravity": list(map(float, self.gravity)),
            "boundary": {"floor_height": b.floor_height, "mode": b.mode,
                         "friction": b.friction},
            "dt": self.dt,
            "substeps": self.substeps,
            "precision": self.precision,
            "deterministic": self.deterministic,
            "transfer": self.transfer,
        }

    @classmethod
    def from_dict(cls, d):
        b = d.get("boundary", {})
        return cls(
            n=int(d.get("grid_resolution", 32)),
            gravity=tuple(float(x) for x in d.get("gravity", (0.0, -9.8, 0.0))),
            boundary=Boundary(b.get("floor_height"), b.get("mode", "slip"),
                              float(b.get("friction", 0.0))),
            dt=float(d.get("dt", 1e-3)),
            substeps=int(d.get("substeps", 10)),
            precision=d.get("precision", "f64"),
            deterministic=bool(d.get("deterministic", True)),
            transfer=d.get("transfer", "pic"),
        )


# --------------------------------------------------------------------------
# shapes

@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def bounds(self):
        c = np.asarray(self.center, float)
        return c - self.radius, c + self.radius

    def contains(self, pts):
        d = pts - np.asarray(self.center, float)
        return np.einsum("ij,ij->i", d, d) <= self.radius ** 2

    def volume(self):
        return 4.0 / 3.0 * math.pi * self.radius ** 3

    def translated(self, offset):
        return Sphere(tuple(np.add(self.center, offset)), self.radius)

    def to_dict(self):
        return {"type": "sphere", "center": list(map(float, self.center)),
                "radius": float(self.radius)}


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def bounds(self):
        return np.asarray(self.lo, float), np.asarray(self.hi, float)

    def contains(self, pts):
        lo, hi = self.bounds()
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def volume(self):
        lo, hi = self.bounds()
        return float(np.prod(hi - lo))

    def translated(self, offset):
        return Box(tuple(np.add(self.lo, offset)), tuple(np.add(self.hi, offset)))

    def to_dict(self):
        return {"type": "box", "min": list(map(float, self.lo)),
                "max": list(map(float, self.hi))}


@dataclass(frozen=True)
class Union:
    parts: tuple

    def bounds(self):
        los, his = zip(*(p.bounds() for p in self.parts))
        return np.min(los, axis=0), np.max(his, axis=0)

    def contains(self, pts):
        inside = np.zeros(len(pts), bool)
        for p in self.parts:
            inside |= p.contains(pts)
        return inside

    def volume(self, resolution=160):
        # overlapping parts: midpoint-rule estimate on a fixed lattice
        lo, hi = self.bounds()
        axes = [lo[a] + (np.arange(resolution) + 0.5) * (hi[a] - lo[a]) / resolution
                for a in range(3)]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
        frac = self.contains(g).mean()
        return float(frac * np.prod(hi - lo))

    def translated(self, offset):
        return Union(tuple(p.translated(offset) for p in self.parts))

    def to_dict(self):
        return {"type": "union", "parts": [p.to_dict() for p in self.parts]}


@dataclass(frozen=True, eq=False)
class PointList:
    """Imported particle positions with a known total volume."""

    points: np.ndarray
    total_volume: float

    def bounds(self):
        return self.points.min(axis=0), self.points.max(axis=0)

    def contains(self, pts):
        raise NotImplementedError("point lists have no interior test")

    def volume(self):
        return float(self.total_volume)

    def translated(self, offset):
        return PointList(self.points + np.asarray(offset), self.total_volume)

    def to_dict(self):
        return {"type": "points", "points": self.points.tolist(),
                "volume": float(self.total_volume)}


def shape_from_dict(d):
    kind = d["type"]
    if kind == "sphere":
        return Sphere(tuple(d["center"]), float(d["radius"]))
    if kind == "box":
        return Box(tuple(d["min"]), tuple(d["max"]))
    if kind == "union":
        return Union(tuple(shape_from_dict(p) for p in d["parts"]))
    if kind == "points":
        if "file" in d:
            pts = load_points(d["file"])
        else:
            pts = np.asarray(d["points"], float)
        return PointList(pts, float(d["volume"]))
    raise ValueError(f"unknown shape type {kind!r}")


def check_safe_margin(lo, hi, n):
    margin = SAFE_MARGIN_CELLS / n
    if np.any(np.asarray(lo) < margin) or np.any(np.asarray(hi) > 1.0 - margin):
        raise DomainError(
            f"shape bounds {np.round(lo, 4).tolist()}..{np.round(hi, 4).tolist()} "
            f"violate the {SAFE_MARGIN_CELLS}-cell safe margin ({margin:.4f})")


def sample_volume(shape, target_count, seed=0, n=32):
    """Stratified jittered fill of ``shape`` with exactly ``target_count`` points.

    One jittered sample per lattice cell inside the bounding box; the lattice
    is refined until enough samples land inside, and the surplus is removed
    by a seeded random subset so the density stays uniform.
    """
    if target_count < 1:
        raise ValueError("target_count must be >= 1")
    lo, hi = shape.bounds()
    check_safe_margin(lo, hi, n)
    rng = rng_for(seed, "sample_volume")
    if isinstance(shape, PointList):
        pts = np.asarray(shape.points, float)
        if target_count < len(pts):
            keep = np.sort(rng.choice(len(pts), target_count, replace=False))
            pts = pts[keep]
        return pts.copy()

    spacing = (shape.volume() / target_count) ** (1.0 / 3.0)
    for _ in range(60):
        counts = np.maximum(np.ceil((hi - lo) / spacing).astype(int), 1)
        cell = (hi - lo) / counts
        idx = np.stack(np.meshgrid(*[np.arange(c) for c in counts], indexing="ij"),
                       -1).reshape(-1, 3)
        pts = lo + (idx + rng.random(idx.shape)) * cell
        pts = pts[shape.contains(pts)]
        if len(pts) >= target_count:
            break
        spacing *= 0.97
    keep = np.sort(rng.choice(len(pts), target_count, replace=False))
    return pts[keep]


# --------------------------------------------------------------------------
# particles and kernels

@dataclass
class ParticleSet:
    positions: np.ndarray
    velocities: np.ndarray
    F: np.ndarray
    mass: np.ndarray
    volume: np.ndarray
    density: np.ndarray
    material_id: np.ndarray = None
    affine: np.ndarray = None  # APIC velocity matrices, only with transfer="apic"

    def __post_init__(self):
        n = len(self.positions)
        if self.material_id is None:
            self.material_id = np.zeros(n, dtype=np.int64)
        if self.affine is None:
            self.affine = np.zeros((n, 3, 3), dtype=self.positions.dtype)

    def __len__(self):
        return len(self.positions)

    def copy(self):
        return ParticleSet(*(None if a is None else a.copy() for a in (
            self.positions, self.velocities, self.F, self.mass, self.volume,
            self.density, self.material_id, self.affine)))

    def with_state(self, positions=None, velocities=None, F=None, affine=None):
        out = ParticleSet(self.positions if positions is None else positions,
                          self.velocities if velocities is None else velocities,
                          self.F if F is None else F,
                          self.mass, self.volume, self.density, self.material_id,
                          self.affine if affine is None else affine)
        return out

    def astype(self, dtype):
        return ParticleSet(*(a.astype(dtype) for a in (
            self.positions, self.velocities, self.F, self.mass, self.volume,
            self.density)), self.material_id.copy(), self.affine.astype(dtype))

    def subset(self, index):
        return ParticleSet(self.positions[index], self.velocities[index],
                           self.F[index], self.mass[index], self.volume[index],
                           self.density[index], self.material_id[index],
                           self.affine[index])

    @staticmethod
    def concatenate(sets):
        return ParticleSet(*(np.concatenate([getattr(s, name) for s in sets])
                             for name in ("positions", "velocities", "F", "mass",
                                          "volume", "density", "material_id",
                                          "affine")))


def init_rest_state(positions, rho, total_volume):
    """Rest state: equal volume share per particle, zero velocity, F = I."""
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    if not total_volume > 0:
        raise ValueError("total_volume must be positive")
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (n,)).copy()
    if np.any(rho <= 0):
        raise ValueError("density must be positive")
    volume = np.full(n, total_volume / n)
    return ParticleSet(positions.copy(), np.zeros((n, 3)),
                       np.tile(np.eye(3), (n, 1, 1)), rho * volume, volume, rho)


@dataclass
class GaussianKernelSet:
    centers: np.ndarray      # (K, 3)
    opacities: np.ndarray    # (K,)
    covariances: np.ndarray  # (K, 3, 3)
    colors: np.ndarray       # (K, 3)

    def __len__(self):
        return len(self.centers)

    def copy(self):
        return GaussianKernelSet(self.centers.copy(), self.opacities.copy(),
                                 self.covariances.copy(), self.colors.copy())

    def validate(self):
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ValueError("opacities must lie in [0, 1]")
        np.linalg.cholesky(self.covariances)


def synth_kernels(positions, radius, color=(0.8, 0.3, 0.2), opacity=0.8):
    """One isotropic kernel of covariance ``radius**2 * I`` per point."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    if not 0.0 <= opacity <= 1.0:
        raise ValueError("opacity must lie in [0, 1]")
    positions = np.atleast_2d(np.asarray(positions, float))
    k = len(positions)
    color = np.broadcast_to(np.asarray(color, float), (k, 3)).copy()
    if np.any((color < 0) | (color > 1)):
        raise ValueError("colors must lie in [0, 1]")
    return GaussianKernelSet(positions.copy(), np.full(k, float(opacity)),
                             np.tile(radius ** 2 * np.eye(3), (k, 1, 1)), color)


# --------------------------------------------------------------------------
# benchmark catalog

def lame(youngs, poisson):
    mu = youngs / (2 * (1 + poisson))
    lam = youngs * poisson / ((1 + poisson) * (1 - 2 * poisson))
    return mu, lam


@dataclass(frozen=True)
class Preset:
    shape: object  # centred at the origin, translated to ``height`` on build
    dt: float
    velocity: tuple
    height: float
    material: object  # zero-arg factory
    count: int = 4000
    substeps: int = 10


def _catalog():
    from .constitutive import (DruckerPrager, FixedCorotated, Identity, Material,
                               NeoHookean, StVK, VonMises)

    def elastic(model_cls, youngs, poisson, plastic=None):
        mu, lam = lame(youngs, poisson)
        def build():
            return Material(model_cls(mu, lam),
                            plastic(mu, lam) if plastic else Identity())
        return build

    return {
        # elastic rubber ball
        "bouncy-ball": Preset(Sphere((0, 0, 0), 0.1), 1e-3, (0, -1.92, 0), 0.28,
                              elastic(NeoHookean, 1.0e5, 0.3)),
        "jelly-duck-analog": Preset(
            Union((Sphere((0, 0, 0), 0.09), Sphere((0.07, 0.09, 0), 0.05))),
            1e-3, (0, -1.62, 0), 0.42, elastic(FixedCorotated, 4e4, 0.3)),
        "rubber-pawn-analog": Preset(
            Union((Box((-0.07, -0.08, -0.07), (0.07, -0.04, 0.07)),
                   Box((-0.035, -0.04, -0.035), (0.035, 0.04, 0.035)),
                   Sphere((0, 0.07, 0), 0.045))),
            5e-4, (0, -1.57, 0), 0.39, elastic(StVK, 2e5, 0.35), substeps=20),
        "clay-cat-analog": Preset(
            Sphere((0, 0, 0), 0.1), 5e-4, (0, -2.11, 0), 0.32,
            elastic(FixedCorotated, 2e5, 0.3,
                    lambda mu, lam: VonMises(yield_stress=3e3, mu=mu)), substeps=20),
        "honey-bottle-analog": Preset(
            Box((-0.05, -0.1, -0.05), (0.05, 0.1, 0.05)), 5e-4, (0, -1.19, 0), 0.42,
            elastic(NeoHookean, 2e4, 0.45,
                    lambda mu, lam: VonMises(yield_stress=3e2, mu=mu)), substeps=20),
        "sand-fish-analog": Preset(
            Union((Box((-0.12, -0.04, -0.04), (0.06, 0.04, 0.04)),
                   Box((0.06, -0.06, -0.015), (0.12, 0.06, 0.015)))),
            5e-4, (0, -0.69, 0), 0.28,
            elastic(StVK, 2e5, 0.3,
                    lambda mu, lam: DruckerPrager(friction_angle=30.0, mu=mu, lam=lam)),
            substeps=20),
    }


PRESET_NAMES = ("bouncy-ball", "jelly-duck-analog", "rubber-pawn-analog",
                "clay-cat-analog", "honey-bottle-analog", "sand-fish-analog")


def get_preset(name):
    catalog = _catalog()
    if name not in catalog:
        raise CatalogError(f"unknown benchmark {name!r}; choose from {sorted(catalog)}")
    return catalog[name]


@dataclass
class Benchmark:
    config: SceneConfig
    particles: ParticleSet
    kernels: GaussianKernelSet
    material: object
    shape: object

    def __iter__(self):
        return iter((self.config, self.particles, self.kernels, self.material))


def build_object(shape, count, velocity=(0, 0, 0), rho=1000.0, seed=0, n=32):
    pts = sample_volume(shape, count, seed=seed, n=n)
    ps = init_rest_state(pts, rho, shape.volume())
    ps.velocities[:] = np.asarray(velocity, float)
    return ps


def default_kernels(particles, stride=4, color=(0.85, 0.35, 0.2), opacity=0.9):
    """Synthetic kernel set on every ``stride``-th particle, sized to the spacing."""
    spacing = float(np.mean(particles.volume)) ** (1.0 / 3.0)
    return synth_kernels(particles.positions[::stride], radius=0.9 * spacing,
                         color=color, opacity=opacity)


def make_benchmark(name, count=None, seed=0, n=32):
    """Drop-onto-floor scene for a catalog entry.

    ``height`` places the shape's bounding-box centre at that y coordinate.
    """
    preset = get_preset(name)
    lo, hi = preset.shape.bounds()
    offset = np.array([0.5, preset.height, 0.5]) - 0.5 * (lo + hi)
    shape = preset.shape.translated(offset)
    cfg = SceneConfig(n=n, dt=preset.dt, substeps=preset.substeps)
    ps = build_object(shape, count or preset.count, preset.velocity, seed=seed, n=n)
    return Benchmark(cfg, ps, default_kernels(ps), preset.material(), shape)


# --------------------------------------------------------------------------
# scene files

def scene_to_dict(cfg, objects, material=None):
    """``objects``: list of dicts with keys shape, count, velocity, density, seed."""
    out = cfg.to_dict()
    out["objects"] = [{
        "shape": o["shape"].to_dict(),
        "particle_count": int(o["count"]),
        "velocity": list(map(float, o.get("velocity", (0, 0, 0)))),
        "density": float(o.get("density", 1000.0)),
        "seed": int(o.get("seed", 0)),
    } for o in objects]
    if material is not None:
        out["material"] = material
    return out


def scene_from_dict(d):
    """Return (SceneConfig, ParticleSet, list of object dicts)."""
    cfg = SceneConfig.from_dict(d)
    objects, sets = [], []
    for k, o in enumerate(d.get("objects", [])):
        shape = shape_from_dict(o["shape"])
        obj = {"shape": shape, "count": int(o.get("particle_count", 1000)),
               "velocity": tuple(o.get("velocity", (0, 0, 0))),
               "density": float(o.get("density", 1000.0)), "seed": int(o.get("seed", 0))}
        ps = build_object(shape, obj["count"], obj["velocity"], obj["density"],
                          obj["seed"], cfg.n)
        ps.material_id[:] = k
        objects.append(obj)
        sets.append(ps)
    if not sets:
        raise ValueError("scene has no objects")
    return cfg, ParticleSet.concatenate(sets), objects


def save_scene(path, cfg, objects, material=None):
    with open(path, "w") as fh:
        json.dump(scene_to_dict(cfg, objects, material), fh, indent=2)


def load_scene(path):
    with open(path) as fh:
        return scene_from_dict(json.load(fh))


POINTS_MAGIC = "NMPTS01"


def save_points(path, points):
    points = np.asarray(points)
    with open(path, "wb") as fh:
        write_magic(fh, POINTS_MAGIC)
        write_struct(fh, "Q", len(points))
        write_array(fh, points.reshape(-1, 3), np.float32)


def load_points(path):
    with open(path, "rb") as fh:
        read_magic(fh, POINTS_MAGIC)
        (count,) = read_struct(fh, "Q")
        return read_array(fh, 3 * count, np.float32, (count, 3)).astype(np.float64)
