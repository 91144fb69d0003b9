"""Reading, writing and synthesizing bundle adjustment problems in BAL layout.

A BAL file is a header ``<num_cameras> <num_points> <num_observations>``,
then one ``cam_idx pt_idx u v`` record per observation, then 9 scalars per
camera (Rodrigues rotation, translation, focal, k1, k2) and 3 scalars per
point.  Tokens are whitespace separated; line breaks carry no meaning beyond
error reporting.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np
from scipy.spatial.transform import Rotation

log = logging.getLogger(__name__)

CAMERA_DIM = 9
POINT_DIM = 3


class BalFormatError(ValueError):
    """Malformed BAL text. ``line`` is 1-based (0 when unknown)."""

    def __init__(self, message: str, line: int = 0):
        self.line = line
        self.detail = message
        super().__init__(f"line {line}: {message}" if line else message)


class InvalidProblemError(ValueError):
    pass


class InfeasibleDensityError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    rotation: np.ndarray  # axis-angle, radians
    translation: np.ndarray
    focal: float
    k1: float = 0.0
    k2: float = 0.0

    @classmethod
    def from_params(cls, params) -> "Camera":
        p = np.asarray(params, dtype=np.float64)
        if p.shape != (CAMERA_DIM,):
            raise ValueError(f"camera needs {CAMERA_DIM} parameters, got shape {p.shape}")
        return cls(p[0:3].copy(), p[3:6].copy(), float(p[6]), float(p[7]), float(p[8]))

    def to_params(self) -> np.ndarray:
        return np.concatenate(
            [self.rotation, self.translation, [self.focal, self.k1, self.k2]]
        ).astype(np.float64)


@dataclass
class BAProblem:
    """Cameras, points and observations, stored as flat arrays.

    ``cameras`` is (n_p, 9) in BAL parameter order and ``points`` is (n_l, 3);
    together they are the initial state.  Observation ``k`` says camera
    ``camera_index[k]`` saw point ``point_index[k]`` at pixel
    ``observations[k]``.
    """

    cameras: np.ndarray
    points: np.ndarray
    camera_index: np.ndarray
    point_index: np.ndarray
    observations: np.ndarray
    name: str = ""
    # cameras, points dropped by prune_unobserved
    pruned: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.cameras = np.asarray(self.cameras, dtype=np.float64).reshape(-1, CAMERA_DIM)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, POINT_DIM)
        self.camera_index = np.asarray(self.camera_index, dtype=np.int64).ravel()
        self.point_index = np.asarray(self.point_index, dtype=np.int64).ravel()
        self.observations = np.asarray(self.observations, dtype=np.float64).reshape(-1, 2)

    @property
    def n_cameras(self) -> int:
        return self.cameras.shape[0]

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_observations(self) -> int:
        return self.observations.shape[0]

    def camera(self, i: int) -> Camera:
        return Camera.from_params(self.cameras[i])

    def copy(self) -> "BAProblem":
        return BAProblem(
            self.cameras.copy(),
            self.points.copy(),
            self.camera_index.copy(),
            self.point_index.copy(),
            self.observations.copy(),
            self.name,
            self.pruned,
        )

    def validate(self) -> None:
        """Raise InvalidProblemError unless all structural invariants hold."""
        n_obs = self.n_observations
        if n_obs == 0:
            raise InvalidProblemError("problem has no observations")
        if self.camera_index.shape != (n_obs,) or self.point_index.shape != (n_obs,):
            raise InvalidProblemError("index arrays do not match observation count")
        if self.camera_index.min() < 0 or self.camera_index.max() >= self.n_cameras:
            raise InvalidProblemError("camera index out of range")
        if self.point_index.min() < 0 or self.point_index.max() >= self.n_points:
            raise InvalidProblemError("point index out of range")
        keys = self.camera_index * self.n_points + self.point_index
        if np.unique(keys).size != n_obs:
            raise InvalidProblemError("duplicate (camera, point) observation")
        if np.bincount(self.camera_index, minlength=self.n_cameras).min() == 0:
            raise InvalidProblemError("camera without observations")
        if np.bincount(self.point_index, minlength=self.n_points).min() == 0:
            raise InvalidProblemError("point without observations")


def prune_unobserved(problem: BAProblem) -> BAProblem:
    """Drop cameras and points that no observation refers to, reindexing the rest."""
    cam_used = np.bincount(problem.camera_index, minlength=problem.n_cameras) > 0
    pt_used = np.bincount(problem.point_index, minlength=problem.n_points) > 0
    n_cam_drop = int((~cam_used).sum())
    n_pt_drop = int((~pt_used).sum())
    if n_cam_drop == 0 and n_pt_drop == 0:
        return problem
    cam_map = np.cumsum(cam_used) - 1
    pt_map = np.cumsum(pt_used) - 1
    log.info("pruned %d unobserved cameras and %d unobserved points", n_cam_drop, n_pt_drop)
    return BAProblem(
        problem.cameras[cam_used],
        problem.points[pt_used],
        cam_map[problem.camera_index],
        pt_map[problem.point_index],
        problem.observations,
        problem.name,
        (problem.pruned[0] + n_cam_drop, problem.pruned[1] + n_pt_drop),
    )


def _tokens(stream: Iterable[str]):
    for lineno, line in enumerate(stream, start=1):
        for tok in line.split():
            yield tok, lineno


def parse_bal(source: TextIO | str, name: str = "") -> BAProblem:
    """Parse BAL text from a stream or a string.

    Unobserved cameras/points are pruned (count kept in ``problem.pruned``).
    Errors carry the offending line number.
    """
    stream = io.StringIO(source) if isinstance(source, str) else source
    toks = _tokens(stream)
    last_line = 0

    def take(what: str) -> tuple[str, int]:
        nonlocal last_line
        try:
            tok, last_line = next(toks)
        except StopIteration:
            raise BalFormatError(f"unexpected end of input while reading {what}", last_line) from None
        return tok, last_line

    def take_int(what: str) -> tuple[int, int]:
        tok, ln = take(what)
        try:
            return int(tok), ln
        except ValueError:
            raise BalFormatError(f"expected integer {what}, got {tok!r}", ln) from None

    def take_float(what: str) -> float:
        tok, ln = take(what)
        try:
            return float(tok)
        except ValueError:
            raise BalFormatError(f"expected number for {what}, got {tok!r}", ln) from None

    header = []
    for label in ("camera count", "point count", "observation count"):
        try:
            value, ln = take_int(label)
        except BalFormatError as exc:
            raise BalFormatError(f"malformed header: {exc.detail}", exc.line) from None
        if ln != 1 or value < 0:
            raise BalFormatError(f"malformed header ({label})", ln)
        header.append(value)
    n_cam, n_pt, n_obs = header

    cam_idx = np.empty(n_obs, dtype=np.int64)
    pt_idx = np.empty(n_obs, dtype=np.int64)
    obs = np.empty((n_obs, 2), dtype=np.float64)
    seen: set[tuple[int, int]] = set()
    for k in range(n_obs):
        c, ln = take_int(f"camera index of observation {k}")
        p, ln = take_int(f"point index of observation {k}")
        if not 0 <= c < n_cam:
            raise BalFormatError(f"camera index {c} out of range [0, {n_cam})", ln)
        if not 0 <= p < n_pt:
            raise BalFormatError(f"point index {p} out of range [0, {n_pt})", ln)
        if (c, p) in seen:
            raise BalFormatError(f"duplicate observation of point {p} by camera {c}", ln)
        seen.add((c, p))
        cam_idx[k] = c
        pt_idx[k] = p
        obs[k, 0] = take_float("observation u")
        obs[k, 1] = take_float("observation v")

    cams = np.array([take_float("camera parameter") for _ in range(CAMERA_DIM * n_cam)])
    pts = np.array([take_float("point coordinate") for _ in range(POINT_DIM * n_pt)])
    extra = next(toks, None)
    if extra is not None:
        raise BalFormatError(f"trailing data {extra[0]!r}", extra[1])

    problem = BAProblem(cams, pts, cam_idx, pt_idx, obs, name=name)
    return prune_unobserved(problem)


def read_bal(path: str | Path) -> BAProblem:
    path = Path(path)
    if path.suffix == ".bz2":
        import bz2

        with bz2.open(path, "rt") as fh:
            return parse_bal(fh, name=path.name)
    with open(path) as fh:
        return parse_bal(fh, name=path.stem)


def write_bal(problem: BAProblem) -> str:
    """Serialize to BAL text; ``repr`` floats make the round trip bit-exact."""
    problem.validate()
    out = [f"{problem.n_cameras} {problem.n_points} {problem.n_observations}"]
    for c, p, (u, v) in zip(problem.camera_index, problem.point_index, problem.observations):
        out.append(f"{c} {p} {float(u)!r} {float(v)!r}")
    out.extend(repr(float(x)) for x in problem.cameras.ravel())
    out.extend(repr(float(x)) for x in problem.points.ravel())
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# synthetic problems


@dataclass(frozen=True)
class SyntheticConfig:
    n_p: int
    n_l: int
    target_density: float
    noise_sigma: float = 0.0
    rng_seed: int = 0
    # std of the perturbation applied to the returned initial state
    camera_noise: float = 0.0
    point_noise: float = 0.0
    max_track: int = 6
    radius: float = 4.0
    focal: float = 500.0

    def __post_init__(self):
        if self.n_p < 2:
            raise ValueError("n_p must be >= 2")
        if self.n_l < self.n_p:
            raise ValueError("n_l must be >= n_p")
        if not 0.0 < self.target_density <= 1.0:
            raise ValueError("target_density must lie in (0, 1]")
        if self.noise_sigma < 0 or self.camera_noise < 0 or self.point_noise < 0:
            raise ValueError("noise levels must be non-negative")


def _pairs_within(n: int, w: int) -> int:
    """Unordered camera pairs at circular index distance 1..w."""
    return sum(n if 2 * d != n else n // 2 for d in range(1, min(w, n // 2) + 1))


def _look_at(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    # BAL cameras look down their -z axis
    z = center - target
    z /= np.linalg.norm(z)
    x = np.cross([0.0, 0.0, 1.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def generate_synthetic(config: SyntheticConfig, name: str | None = None) -> BAProblem:
    """Build a problem whose Schur block density hits ``target_density``.

    Cameras sit on a circle facing the origin and points fill the cube
    [-1, 1]^3, so every point projects in front of every camera and
    visibility is purely combinatorial.  Tracks are arcs of consecutive
    cameras: with arc length w+1 covering every start index, two cameras
    co-observe iff their circular distance is <= w.  A few two-camera tracks
    at distance w+1 top up the pair count to the exact target.
    """
    from .camera import project_points

    cfg = config
    n_p, n_l = cfg.n_p, cfg.n_l
    rng = np.random.default_rng(cfg.rng_seed)

    max_pairs = n_p * (n_p - 1) // 2
    target_pairs = int(round((cfg.target_density * n_p * n_p - n_p) / 2))
    target_pairs = min(max(target_pairs, 0), max_pairs)
    achieved = (n_p + 2 * target_pairs) / (n_p * n_p)
    if abs(achieved - cfg.target_density) > 0.05:
        raise InfeasibleDensityError(
            f"closest density for n_p={n_p} is {achieved:.3f}, target {cfg.target_density}"
        )
    w = 0
    while w < n_p // 2 and _pairs_within(n_p, w + 1) <= target_pairs:
        w += 1
    n_extra = target_pairs - _pairs_within(n_p, w)
    if n_p + n_extra > n_l:
        raise InfeasibleDensityError(f"need at least {n_p + n_extra} points for this density")

    tracks: list[np.ndarray] = []
    for s in range(n_p):
        tracks.append((s + np.arange(min(w + 1, n_p))) % n_p)
    if n_extra:
        d = w + 1
        starts = np.arange(n_p if 2 * d != n_p else n_p // 2)
        for s in np.sort(rng.choice(starts, size=n_extra, replace=False)):
            tracks.append(np.array([s, (s + d) % n_p]))
    arc = min(w + 1, n_p)
    k_max = max(1, min(arc, cfg.max_track))
    k_min = min(2, k_max)
    for _ in range(n_l - len(tracks)):
        s = rng.integers(n_p)
        k = rng.integers(k_min, k_max + 1)
        offs = np.sort(rng.choice(arc, size=k, replace=False))
        tracks.append((s + offs) % n_p)

    angles = 2 * np.pi * np.arange(n_p) / n_p
    cameras = np.empty((n_p, CAMERA_DIM))
    for i, a in enumerate(angles):
        center = np.array([cfg.radius * np.cos(a), cfg.radius * np.sin(a), rng.uniform(-0.3, 0.3)])
        R = _look_at(center, rng.uniform(-0.1, 0.1, size=3))
        cameras[i, 0:3] = Rotation.from_matrix(R).as_rotvec()
        cameras[i, 3:6] = -R @ center
        cameras[i, 6] = cfg.focal * rng.uniform(0.9, 1.1)
        cameras[i, 7] = rng.normal(0.0, 0.01)
        cameras[i, 8] = rng.normal(0.0, 0.001)
    points = rng.uniform(-1.0, 1.0, size=(n_l, POINT_DIM))

    perm = rng.permutation(n_l)
    cam_idx = np.concatenate([tracks[j] for j in perm]).astype(np.int64)
    pt_idx = np.concatenate([np.full(len(tracks[j]), i) for i, j in enumerate(perm)]).astype(np.int64)
    order = np.lexsort((cam_idx, pt_idx))
    cam_idx, pt_idx = cam_idx[order], pt_idx[order]

    obs = project_points(cameras[cam_idx], points[pt_idx])
    if cfg.noise_sigma > 0:
        obs = obs + rng.normal(0.0, cfg.noise_sigma, size=obs.shape)

    init_cams = cameras.copy()
    init_pts = points.copy()
    if cfg.camera_noise > 0:
        init_cams[:, 0:3] += rng.normal(0.0, cfg.camera_noise * 0.01, size=(n_p, 3))
        init_cams[:, 3:6] += rng.normal(0.0, cfg.camera_noise, size=(n_p, 3))
    if cfg.point_noise > 0:
        init_pts += rng.normal(0.0, cfg.point_noise, size=init_pts.shape)

    if name is None:
        name = f"synth-np{n_p}-nl{n_l}-d{cfg.target_density:g}-s{cfg.rng_seed}"
    problem = BAProblem(init_cams, init_pts, cam_idx, pt_idx, obs, name=name)
    problem.validate()
    return problem


_SYNTH_KEYS = {
    "np": ("n_p", int),
    "nl": ("n_l", int),
    "density": ("target_density", float),
    "d": ("target_density", float),
    "noise": ("noise_sigma", float),
    "seed": ("rng_seed", int),
    "cam_noise": ("camera_noise", float),
    "pt_noise": ("point_noise", float),
    "max_track": ("max_track", int),
}


def parse_synth_spec(spec: str) -> SyntheticConfig:
    """Parse ``synth:seed=1,np=20,nl=500,density=0.8`` into a config."""
    body = spec.split(":", 1)[1] if spec.startswith("synth:") else spec
    kwargs: dict = {}
    for item in filter(None, (s.strip() for s in body.split(","))):
        key, sep, value = item.partition("=")
        if not sep or key not in _SYNTH_KEYS:
            raise ValueError(f"bad synthetic spec entry {item!r}")
        field_name, conv = _SYNTH_KEYS[key]
        kwargs[field_name] = conv(value)
    missing = {"n_p", "n_l", "target_density"} - kwargs.keys()
    if missing:
        raise ValueError(f"synthetic spec lacks {sorted(missing)}")
    return SyntheticConfig(**kwargs)


def load_problem(source: str) -> BAProblem:
    """Load from a BAL path or an inline ``synth:...`` spec."""
    if source.startswith("synth:"):
        return generate_synthetic(parse_synth_spec(source), name=source)
    return read_bal(source)
