"""Gaussian scene representation: single Gaussians, scenes, pinhole cameras."""
from dataclasses import dataclass, field

import numpy as np

from .sh import MAX_DEGREE, num_coeffs, rgb_to_sh_dc, sh_to_rgb

MIN_SCALE = 1e-6


class DegenerateCovarianceError(ValueError):
    pass


def quat_to_rotmat(q):
    """Rotation matrices from (..., 4) quaternions in (w, x, y, z) order.

    The quaternion is normalized first, so any nonzero 4-vector is accepted.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def covariance_from_params(quats, log_scales):
    """Batched Sigma = R diag(s)^2 R^T."""
    R = quat_to_rotmat(quats)
    M = R * np.exp(log_scales)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class Gaussian3D:
    """One anisotropic Gaussian in its stored parameterization.

    Scale is kept as log-scale and opacity as a logit so that positivity and
    the (0, 1) range hold by construction. Use :meth:`create` to build one
    from natural parameters.
    """

    mean: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray
    editable: bool = False

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        q = np.asarray(self.quat, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not n > 0:
            raise ValueError("rotation quaternion must be nonzero")
        self.quat = q / n
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.opacity_logit = float(self.opacity_logit)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.ndim != 2 or self.sh.shape[0] != 3:
            raise ValueError(f"sh block must be (3, K), got {self.sh.shape}")
        self.editable = bool(self.editable)

    @classmethod
    def create(cls, mean, scale, opacity, rgb=None, quat=(1, 0, 0, 0),
               sh=None, sh_degree=0, editable=False):
        scale = np.asarray(scale, dtype=np.float64) * np.ones(3)
        if np.any(scale < MIN_SCALE):
            raise DegenerateCovarianceError(
                f"scale {scale} below the {MIN_SCALE} floor")
        if not 0.0 < opacity < 1.0:
            raise ValueError(f"opacity must be in (0, 1), got {opacity}")
        if sh is None:
            sh = np.zeros((3, num_coeffs(sh_degree)))
            if rgb is not None:
                sh[:, 0] = rgb_to_sh_dc(rgb)
        return cls(mean, quat, np.log(scale), logit(opacity), sh, editable)

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    @property
    def sh_degree(self):
        return int(round(np.sqrt(self.sh.shape[1]))) - 1


def covariance_of(g):
    """3x3 covariance R(q) diag(s)^2 R(q)^T of a Gaussian."""
    return covariance_from_params(g.quat, g.log_scale)


def eval_density(g, x):
    """Unnormalized density exp(-0.5 d^T Sigma^-1 d) at point ``x``; 1 at the mean."""
    if np.min(g.scale) < MIN_SCALE:
        raise DegenerateCovarianceError(
            f"smallest scale {np.min(g.scale):.3g} is below {MIN_SCALE}")
    d = np.asarray(x, dtype=np.float64) - g.mean
    # Sigma^-1 = R diag(1/s^2) R^T, avoids an explicit ill-conditioned inverse
    R = quat_to_rotmat(g.quat)
    local = (d @ R) / g.scale
    return float(np.exp(-0.5 * np.dot(local, local)))


class GaussianScene:
    """Struct-of-arrays container for N Gaussians sharing one SH degree.

    Attributes are plain numpy arrays and may be edited in place by optimizers:
    ``means`` (N, 3), ``quats`` (N, 4), ``log_scales`` (N, 3),
    ``opacity_logits`` (N,), ``sh`` (N, 3, K), ``editable`` (N,) bool.
    """

    PARAM_NAMES = ("means", "quats", "log_scales", "opacity_logits", "sh")

    def __init__(self, means, quats, log_scales, opacity_logits, sh,
                 editable=None, sh_degree=None):
        self.means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.quats = np.asarray(quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(opacity_logits, dtype=np.float64).reshape(n)
        sh = np.asarray(sh, dtype=np.float64)
        if sh_degree is None:
            sh_degree = int(round(np.sqrt(sh.shape[-1]))) - 1 if sh.size else 0
        if not 0 <= sh_degree <= MAX_DEGREE:
            raise ValueError(f"sh_degree must be in [0, {MAX_DEGREE}]")
        self.sh_degree = int(sh_degree)
        self.sh = sh.reshape(n, 3, num_coeffs(self.sh_degree))
        if editable is None:
            editable = np.zeros(n, dtype=bool)
        self.editable = np.asarray(editable, dtype=bool).reshape(n)

    @classmethod
    def empty(cls, sh_degree=0):
        k = num_coeffs(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros(0), np.zeros((0, 3, k)), sh_degree=sh_degree)

    @classmethod
    def from_gaussians(cls, gaussians, sh_degree=None):
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty(sh_degree or 0)
        degrees = {g.sh_degree for g in gaussians}
        if len(degrees) != 1:
            raise ValueError(f"gaussians mix SH degrees {sorted(degrees)}")
        return cls(
            np.stack([g.mean for g in gaussians]),
            np.stack([g.quat for g in gaussians]),
            np.stack([g.log_scale for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            np.stack([g.sh for g in gaussians]),
            np.array([g.editable for g in gaussians]),
            sh_degree=degrees.pop(),
        )

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i):
        return Gaussian3D(self.means[i], self.quats[i], self.log_scales[i],
                          self.opacity_logits[i], self.sh[i], self.editable[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def copy(self):
        return GaussianScene(self.means.copy(), self.quats.copy(),
                             self.log_scales.copy(), self.opacity_logits.copy(),
                             self.sh.copy(), self.editable.copy(), self.sh_degree)

    def subset(self, index):
        return GaussianScene(self.means[index], self.quats[index],
                             self.log_scales[index], self.opacity_logits[index],
                             self.sh[index], self.editable[index], self.sh_degree)

    def concat(self, other):
        if other.sh_degree != self.sh_degree:
            raise ValueError("cannot concatenate scenes with different SH degrees")
        return GaussianScene(
            np.concatenate([self.means, other.means]),
            np.concatenate([self.quats, other.quats]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.sh, other.sh]),
            np.concatenate([self.editable, other.editable]),
            self.sh_degree,
        )

    def params(self):
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def bbox(self):
        if len(self) == 0:
            return np.zeros(3), np.zeros(3)
        return self.means.min(axis=0), self.means.max(axis=0)

    def covariances(self):
        return covariance_from_params(self.quats, self.log_scales)

    def normalize_rotations(self):
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)

    def colors(self, cam_center):
        dirs = self.means - np.asarray(cam_center)
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        return sh_to_rgb(self.sh, dirs)

    def equals(self, other):
        """Exact equality of every stored array."""
        return (self.sh_degree == other.sh_degree and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in self.PARAM_NAMES + ("editable",)))


@dataclass
class Camera:
    """Pinhole camera; x right, y down, z forward in camera space.

    Pixel (row i, col j) has its center at image coordinates (j, i).
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    image_path: str = None
    mask_path: str = None

    def __post_init__(self):
        self.width = int(self.width)
        self.height = int(self.height)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6):
            raise ValueError("world_to_cam rotation is not orthonormal")

    @property
    def center(self):
        return -self.R.T @ self.t

    def world_to_cam(self, points):
        return np.asarray(points) @ self.R.T + self.t

    @classmethod
    def look_at(cls, eye, target, width, height, fov_y=np.pi / 3,
                up=(0.0, 1.0, 0.0)):
        """Camera at ``eye`` looking at ``target`` with world ``up`` pointing
        toward the top of the image."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        f = 0.5 * height / np.tan(fov_y / 2)
        return cls(width, height, f, f, width / 2, height / 2, R, -R @ eye)
