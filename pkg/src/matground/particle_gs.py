"""Gaussian kernels driven by simulation particles, and a small splat renderer.

Kernels are bound to the particles inside their 95% Mahalanobis ellipsoid;
bound particles move the kernel centre and their averaged deformation
gradient stretches its covariance. The renderer projects kernels to 2D and
alpha-composites them front to back with a hand-written reverse pass.
"""

from dataclasses import dataclass
import json
import math

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import FormatError, GeometryError
from .scene import GaussianKernelSet, ParticleSet

COVARIANCE_JITTER = 1e-10
EIGEN_FLOOR = 1e-12
CULL_SIGMA = 3.0
DEFAULT_TAU = 0.95


# --------------------------------------------------------------------------
# chi-squared quantile


def _lower_gamma_regularized(a, x):
    """P(a, x) by series (x < a + 1) or Lentz continued fraction."""
    if x <= 0:
        return 0.0
    log_front = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1:
        term = total = 1.0 / a
        ap = a
        for _ in range(500):
            ap += 1
            term *= x / ap
            total += term
            if abs(term) < abs(total) * 1e-16:
                break
        return total * math.exp(log_front)
    tiny = 1e-300
    b = x + 1 - a
    c = 1 / tiny
    d = 1 / b
    h = d
    for i in range(1, 500):
        an = -i * (i - a)
        b += 2
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1 / d
        delta = d * c
        h *= delta
        if abs(delta - 1) < 1e-16:
            break
    return 1.0 - math.exp(log_front) * h


def chi2_cdf(x, dof):
    return _lower_gamma_regularized(dof / 2.0, x / 2.0)


def chi2_quantile(p, dof=3):
    """Inverse chi-squared CDF: Wilson-Hilferty start, Newton refinement."""
    if not 0 < p < 1:
        raise ValueError("probability must lie in (0, 1)")
    if dof <= 0:
        raise ValueError("dof must be positive")
    # normal quantile via bisection on erf
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * (1 + math.erf(mid / math.sqrt(2))) < p:
            lo = mid
        else:
            hi = mid
    z = 0.5 * (lo + hi)
    c = 2.0 / (9.0 * dof)
    x = max(dof * (1 - c + z * math.sqrt(c)) ** 3, 1e-8)
    k = dof / 2.0
    for _ in range(100):
        pdf = math.exp((k - 1) * math.log(x) - x / 2 - k * math.log(2) - math.lgamma(k))
        step = (chi2_cdf(x, dof) - p) / pdf
        x_new = x - step
        x = x / 2 if x_new <= 0 else x_new
        if abs(step) < 1e-14 * max(1.0, x):
            break
    return x


BINDING_THRESHOLD_95 = chi2_quantile(DEFAULT_TAU, 3)


# --------------------------------------------------------------------------
# binding


@dataclass
class BindingMatrix:
    """Row-normalized sparse (kernels x particles) map."""

    matrix: sparse.csr_matrix

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def row_counts(self):
        return np.diff(self.matrix.indptr)

    def row(self, i):
        s = slice(self.matrix.indptr[i], self.matrix.indptr[i + 1])
        return self.matrix.indices[s], self.matrix.data[s]

    def apply(self, X):
        """B @ X for X of shape (N, ...)."""
        flat = X.reshape(len(X), -1)
        return (self.matrix @ flat).reshape((self.shape[0],) + X.shape[1:])

    def apply_transpose(self, Y):
        flat = Y.reshape(len(Y), -1)
        return (self.matrix.T @ flat).reshape((self.shape[1],) + Y.shape[1:])

    def to_text(self):
        lines = [f"# binding {self.shape[0]} {self.shape[1]}"]
        for i in range(self.shape[0]):
            cols, w = self.row(i)
            lines.append(f"{i}\t{' '.join(map(str, cols))}\t{' '.join(repr(float(x)) for x in w)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = text.strip("\n").split("\n")
        head = lines[0].split()
        if len(head) != 4 or head[:2] != ["#", "binding"]:
            raise FormatError("missing '# binding K N' header")
        K, N = int(head[2]), int(head[3])
        rows, cols, vals = [], [], []
        for line in lines[1:]:
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"bad binding row: {line!r}")
            c = [int(x) for x in parts[1].split()]
            w = [float(x) for x in parts[2].split()]
            if len(c) != len(w):
                raise FormatError(f"row {parts[0]}: {len(c)} columns but {len(w)} weights")
            rows += [int(parts[0])] * len(c)
            cols += c
            vals += w
        return cls(sparse.csr_matrix((vals, (rows, cols)), shape=(K, N)))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


def regularized_inverse(covariances):
    """Inverse of A + jitter*tr(A)/3*I, checked by Cholesky."""
    A = np.asarray(covariances, float)
    tr = np.einsum("kii->k", A)
    A = A + (COVARIANCE_JITTER * tr / 3.0)[:, None, None] * np.eye(3)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        bad = [k for k in range(len(A)) if np.any(np.linalg.eigvalsh(A[k]) <= 0)]
        raise GeometryError(f"kernel covariance not positive definite (kernel {bad[0]})")
    Linv = np.linalg.inv(L)
    return np.swapaxes(Linv, -1, -2) @ Linv, A


def mahalanobis(kernels, positions, rows, cols):
    """Squared Mahalanobis distance for (kernel, particle) index pairs."""
    inv, _ = regularized_inverse(kernels.covariances)
    d = positions[cols] - kernels.centers[rows]
    return np.einsum("ni,nij,nj->n", d, inv[rows], d)


def bind(kernels, particles, tau_bind=DEFAULT_TAU, mode="mahalanobis"):
    """Binding matrix of kernels to particles.

    ``mode="identity"`` binds kernel i to particle i (needs K == N), which
    reduces deformation to per-particle kernel transport.
    """
    positions = particles.positions if isinstance(particles, ParticleSet) else particles
    K, N = len(kernels), len(positions)
    if mode == "identity":
        if K != N:
            raise GeometryError(f"identity binding needs as many kernels as particles ({K} != {N})")
        return BindingMatrix(sparse.identity(N, format="csr"))
    if mode != "mahalanobis":
        raise ValueError(f"unknown binding mode {mode!r}")
    thresh = chi2_quantile(tau_bind, 3)
    inv, A = regularized_inverse(kernels.covariances)
    # candidate ball: the ellipsoid fits inside radius sqrt(thresh * lambda_max)
    radius = np.sqrt(thresh * np.linalg.eigvalsh(A)[:, -1]) * (1 + 1e-9)
    tree = cKDTree(positions)
    rows, cols = [], []
    for k, cand in enumerate(tree.query_ball_point(kernels.centers, radius)):
        if not cand:
            continue
        cand = np.sort(np.asarray(cand))
        d = positions[cand] - kernels.centers[k]
        keep = cand[np.einsum("ni,ij,nj->n", d, inv[k], d) <= thresh]
        rows.append(np.full(len(keep), k))
        cols.append(keep)
    rows = np.concatenate(rows) if rows else np.zeros(0, int)
    cols = np.concatenate(cols) if cols else np.zeros(0, int)
    counts = np.bincount(rows, minlength=K)
    vals = 1.0 / counts[rows]
    return BindingMatrix(sparse.csr_matrix((vals, (rows, cols)), shape=(K, N)))


def ensure_coverage(kernels, particles, tau_bind=DEFAULT_TAU, neighbours=8):
    """Two-pass binding: spawn a particle at each kernel centre left unbound.

    Spawned particles take the mean rest volume and density, F = I, the mean
    velocity (and the material tag) of their nearest existing particles.
    Returns (particles, binding, indices of spawned particles).
    """
    first = bind(kernels, particles, tau_bind)
    empty = np.flatnonzero(first.row_counts == 0)
    if not empty.size:
        return particles, first, np.zeros(0, int)
    spawn = kernels.centers[empty]
    kq = min(neighbours, len(particles))
    _, nn = cKDTree(particles.positions).query(spawn, k=kq)
    nn = nn.reshape(len(spawn), kq)
    m = len(spawn)
    volume = np.full(m, particles.volume.mean())
    density = np.full(m, particles.density.mean())
    extra = ParticleSet(spawn.copy(), particles.velocities[nn].mean(axis=1),
                        np.tile(np.eye(3), (m, 1, 1)), density * volume, volume, density,
                        particles.material_id[nn[:, 0]].copy())
    merged = ParticleSet.concatenate([particles, extra])
    second = bind(kernels, merged, tau_bind)
    return merged, second, np.arange(len(particles), len(merged))


def deform_kernels(kernels, binding, p_prev, p_next, F_next, A0):
    """Advance kernels by the bound particles' displacement and deformation.

    Centres move by B (p_next - p_prev); covariances become
    Fbar A0 Fbar^T with Fbar = B F_next, symmetrized and eigenvalue-floored.
    """
    centers = kernels.centers + binding.apply(p_next - p_prev)
    Fbar = binding.apply(F_next)
    cov = Fbar @ A0 @ np.swapaxes(Fbar, -1, -2)
    cov = spd_floor(0.5 * (cov + np.swapaxes(cov, -1, -2)))
    return GaussianKernelSet(centers, kernels.opacities, cov, kernels.colors)


def spd_floor(cov, floor=EIGEN_FLOOR):
    lam = np.linalg.eigvalsh(cov)[:, 0] if len(cov) else np.zeros(0)
    bad = lam < floor
    if bad.any():
        w, V = np.linalg.eigh(cov[bad])
        cov = cov.copy()
        cov[bad] = (V * np.maximum(w, floor)[:, None, :]) @ np.swapaxes(V, -1, -2)
    return cov


# --------------------------------------------------------------------------
# cameras


@dataclass
class Orthographic:
    """Parallel projection looking along the camera's +z axis.

    ``scale`` is the world width covered by the image; camera coordinates are
    ``rotation @ (x - center)``; image rows grow downward.
    """

    center: tuple
    scale: float
    width: int
    height: int
    rotation: tuple = ((1, 0, 0), (0, 1, 0), (0, 0, 1))

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        _check_rotation(self.rotation)

    def project(self, x):
        R = np.asarray(self.rotation, float)
        xc = (x - np.asarray(self.center, float)) @ R.T
        s = self.width / self.scale
        uv = np.stack([self.width / 2 + s * xc[:, 0], self.height / 2 - s * xc[:, 1]], -1)
        J = np.broadcast_to(np.array([[s, 0, 0], [0, -s, 0]]) @ R, (len(x), 2, 3))
        return uv, xc[:, 2], J, np.ones(len(x), bool)

    def jacobian_vjp(self, x, Jbar):
        return np.zeros((len(x), 3))

    def to_dict(self):
        return {"type": "orthographic", "center": list(map(float, self.center)),
                "scale": float(self.scale), "width": int(self.width),
                "height": int(self.height),
                "rotation": np.asarray(self.rotation, float).tolist()}


@dataclass
class Pinhole:
    """Perspective camera x_c = R x + t, pixel = K x_c / z_c."""

    K: tuple
    R: tuple
    t: tuple
    width: int
    height: int
    near: float = 1e-2

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        _check_rotation(self.R)

    def _camera(self, x):
        return x @ np.asarray(self.R, float).T + np.asarray(self.t, float)

    def project(self, x):
        K = np.asarray(self.K, float)
        R = np.asarray(self.R, float)
        xc = self._camera(x)
        Z = xc[:, 2]
        visible = Z > self.near
        Zs = np.where(visible, Z, 1.0)
        fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
        uv = np.stack([fx * xc[:, 0] / Zs + cx, fy * xc[:, 1] / Zs + cy], -1)
        J0 = np.zeros((len(x), 2, 3))
        J0[:, 0, 0] = fx / Zs
        J0[:, 0, 2] = -fx * xc[:, 0] / Zs ** 2
        J0[:, 1, 1] = fy / Zs
        J0[:, 1, 2] = -fy * xc[:, 1] / Zs ** 2
        return uv, Z, J0 @ R, visible

    def jacobian_vjp(self, x, Jbar):
        """Pull a cotangent on the projection Jacobian back to world positions."""
        K = np.asarray(self.K, float)
        R = np.asarray(self.R, float)
        xc = self._camera(x)
        X, Y, Z = xc.T
        Z = np.where(Z > self.near, Z, 1.0)
        fx, fy = K[0, 0], K[1, 1]
        J0bar = Jbar @ R.T
        gX = J0bar[:, 0, 2] * (-fx / Z ** 2)
        gY = J0bar[:, 1, 2] * (-fy / Z ** 2)
        gZ = (J0bar[:, 0, 0] * (-fx / Z ** 2) + J0bar[:, 0, 2] * (2 * fx * X / Z ** 3)
              + J0bar[:, 1, 1] * (-fy / Z ** 2) + J0bar[:, 1, 2] * (2 * fy * Y / Z ** 3))
        return np.stack([gX, gY, gZ], -1) @ R

    def uv_vjp(self, x, uvbar):
        K = np.asarray(self.K, float)
        xc = self._camera(x)
        X, Y, Z = xc.T
        Z = np.where(Z > self.near, Z, 1.0)
        fx, fy = K[0, 0], K[1, 1]
        g = np.stack([uvbar[:, 0] * fx / Z, uvbar[:, 1] * fy / Z,
                      -(uvbar[:, 0] * fx * X + uvbar[:, 1] * fy * Y) / Z ** 2], -1)
        return g @ np.asarray(self.R, float)

    def to_dict(self):
        return {"type": "pinhole", "K": np.asarray(self.K, float).tolist(),
                "R": np.asarray(self.R, float).tolist(), "t": list(map(float, self.t)),
                "width": int(self.width), "height": int(self.height), "near": float(self.near)}


def _check_rotation(R):
    R = np.asarray(R, float)
    if R.shape != (3, 3) or not np.allclose(R @ R.T, np.eye(3), atol=1e-9) \
            or np.linalg.det(R) < 0:
        raise ValueError("camera rotation must be a proper 3x3 rotation")


def camera_from_dict(d):
    kind = d.get("type")
    if kind == "orthographic":
        return Orthographic(tuple(d["center"]), d["scale"], d["width"], d["height"],
                            tuple(map(tuple, d.get("rotation", np.eye(3).tolist()))))
    if kind == "pinhole":
        return Pinhole(tuple(map(tuple, d["K"])), tuple(map(tuple, d["R"])), tuple(d["t"]),
                       d["width"], d["height"], d.get("near", 1e-2))
    raise FormatError(f"unknown camera type {kind!r}")


def save_cameras(path, cameras):
    with open(path, "w") as fh:
        json.dump([c.to_dict() for c in cameras], fh, indent=2)


def load_cameras(path):
    with open(path) as fh:
        d = json.load(fh)
    return [camera_from_dict(x) for x in (d if isinstance(d, list) else [d])]


def default_camera(size=64, center=(0.5, 0.25, 0.5), scale=0.6):
    """Side view of the drop region."""
    return Orthographic(center, scale, size, size)


# --------------------------------------------------------------------------
# splatting


@dataclass
class SplatCache:
    camera: object
    centers: np.ndarray
    covariances: np.ndarray
    colors: np.ndarray
    background: np.ndarray
    J: np.ndarray
    conics: np.ndarray
    # one entry per drawn kernel in front-to-back order:
    # (kernel, row slice, col slice, alpha', transmittance before, d, inside)
    draws: list


def splat(kernels, camera, background=(1.0, 1.0, 1.0), cache=False):
    """Render an (H, W, 3) image by front-to-back alpha compositing."""
    H, W = camera.height, camera.width
    bg = np.asarray(background, float)
    image = np.zeros((H, W, 3))
    T = np.ones((H, W))
    K = len(kernels)
    draws = []
    J = conics = None
    if K:
        uv, depth, J, visible = camera.project(kernels.centers)
        cov2 = J @ kernels.covariances @ np.swapaxes(J, -1, -2)
        det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] * cov2[:, 1, 0]
        visible &= det > 0
        safe = np.where(det > 0, det, 1.0)
        conics = np.stack([np.stack([cov2[:, 1, 1], -cov2[:, 0, 1]], -1),
                           np.stack([-cov2[:, 1, 0], cov2[:, 0, 0]], -1)], -2) / safe[:, None, None]
        tr = cov2[:, 0, 0] + cov2[:, 1, 1]
        lam_max = 0.5 * tr + np.sqrt(np.maximum(0.25 * tr ** 2 - det, 0.0))
        radius = CULL_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))
        order = np.lexsort((np.arange(K), depth))
        for k in order:
            if not visible[k] or kernels.opacities[k] <= 0:
                continue
            u, v = uv[k]
            c0, c1 = max(0, int(math.floor(u - radius[k] - 0.5))), min(W, int(math.ceil(u + radius[k] + 0.5)))
            r0, r1 = max(0, int(math.floor(v - radius[k] - 0.5))), min(H, int(math.ceil(v + radius[k] + 0.5)))
            if c0 >= c1 or r0 >= r1:
                continue
            dx = (np.arange(c0, c1) + 0.5)[None, :] - u
            dy = (np.arange(r0, r1) + 0.5)[:, None] - v
            Q = conics[k]
            q = Q[0, 0] * dx * dx + (Q[0, 1] + Q[1, 0]) * dx * dy + Q[1, 1] * dy * dy
            inside = q <= CULL_SIGMA ** 2
            if not inside.any():
                continue
            a = np.where(inside, kernels.opacities[k] * np.exp(-0.5 * q), 0.0)
            rs, cs = slice(r0, r1), slice(c0, c1)
            Tk = T[rs, cs]
            if cache:
                draws.append((k, rs, cs, a, Tk.copy(), dx, dy, inside))
            image[rs, cs] += (Tk * a)[..., None] * kernels.colors[k]
            T[rs, cs] = Tk * (1.0 - a)
    image += T[..., None] * bg
    if not cache:
        return image
    return image, SplatCache(camera, kernels.centers, kernels.covariances, kernels.colors,
                             bg, J, conics, draws)


def splat_vjp(cache, image_bar):
    """Cotangents on kernel centres (K, 3) and covariances (K, 3, 3)."""
    K = len(cache.centers)
    uv_bar = np.zeros((K, 2))
    conic_bar = np.zeros((K, 2, 2))
    S = np.broadcast_to(cache.background, image_bar.shape).copy()  # colour behind
    for k, rs, cs, a, Tk, dx, dy, inside in reversed(cache.draws):
        c = cache.colors[k]
        g = image_bar[rs, cs]
        Sk = S[rs, cs]
        a_bar = Tk * np.einsum("ijc,ijc->ij", g, c - Sk)
        S[rs, cs] = a[..., None] * c + (1.0 - a[..., None]) * Sk
        q_bar = np.where(inside, -0.5 * a * a_bar, 0.0)
        Q = cache.conics[k]
        # q = Q00 dx^2 + (Q01 + Q10) dx dy + Q11 dy^2, with d = pixel - uv
        gx = (2 * Q[0, 0] * dx + (Q[0, 1] + Q[1, 0]) * dy) * q_bar
        gy = ((Q[0, 1] + Q[1, 0]) * dx + 2 * Q[1, 1] * dy) * q_bar
        uv_bar[k] = (-gx.sum(), -gy.sum())
        conic_bar[k, 0, 0] = np.sum(q_bar * dx * dx)
        conic_bar[k, 1, 1] = np.sum(q_bar * dy * dy)
        conic_bar[k, 0, 1] = conic_bar[k, 1, 0] = np.sum(q_bar * dx * dy)
    # conic = cov2^-1
    Q = cache.conics if cache.conics is not None else np.zeros((0, 2, 2))
    cov2_bar = -np.swapaxes(Q, -1, -2) @ conic_bar @ np.swapaxes(Q, -1, -2)
    J = cache.J
    A = cache.covariances
    cov_bar = np.swapaxes(J, -1, -2) @ cov2_bar @ J if K else np.zeros((0, 3, 3))
    center_bar = np.zeros((K, 3))
    if K:
        cam = cache.camera
        if isinstance(cam, Orthographic):
            center_bar = uv_bar @ J[0] if K else center_bar
        else:
            center_bar = cam.uv_vjp(cache.centers, uv_bar)
            J_bar = (cov2_bar + np.swapaxes(cov2_bar, -1, -2)) @ J @ A
            center_bar += cam.jacobian_vjp(cache.centers, J_bar)
    return center_bar, cov_bar


def image_loss(pred, gt):
    """Mean squared per-channel difference."""
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.mean((pred - gt) ** 2))


def image_loss_grad(pred, gt):
    return 2.0 * (np.asarray(pred, float) - gt) / pred.size


# --------------------------------------------------------------------------
# PPM images


def write_ppm(path, image, bits=8):
    """Binary P6; 16-bit samples are big-endian as the format requires."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    img = np.clip(np.asarray(image, float), 0.0, 1.0)
    H, W = img.shape[:2]
    maxval = 255 if bits == 8 else 65535
    data = np.rint(img * maxval).astype(">u2" if bits == 16 else np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n{maxval}\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise FormatError("not a binary PPM (P6) file")
    W, H, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = W * H * 3
    data = np.frombuffer(raw, dtype, count, pos)
    if data.size != count:
        raise FormatError("truncated PPM payload")
    return data.reshape(H, W, 3).astype(float) / maxval


# --------------------------------------------------------------------------
# convenience for whole trajectories


def kernels_from_positions(positions, stride=4, color=(0.85, 0.35, 0.2), opacity=0.9):
    """Isotropic kernels on every ``stride``-th point, sized to the point spacing."""
    from .scene import synth_kernels

    positions = np.asarray(positions, float)
    if len(positions) > 1:
        d, _ = cKDTree(positions).query(positions, k=2)
        spacing = float(np.median(d[:, 1]))
    else:
        spacing = 0.01
    return synth_kernels(positions[::stride], radius=0.9 * spacing, color=color,
                         opacity=opacity)


def render_trajectory(positions, F, cameras, kernels=None, binding=None,
                      background=(1.0, 1.0, 1.0)):
    """Images[frame][camera] of kernels carried along a particle trajectory.

    Kernels default to :func:`kernels_from_positions` of the first frame and
    are bound with :func:`ensure_coverage`-free Mahalanobis binding.
    """
    if kernels is None:
        kernels = kernels_from_positions(positions[0])
    if binding is None:
        binding = bind(kernels, positions[0])
    out = []
    for p, Fk in zip(positions, F):
        ks = deform_kernels(kernels, binding, positions[0], p, Fk, kernels.covariances)
        out.append([splat(ks, cam, background) for cam in cameras])
    return out
