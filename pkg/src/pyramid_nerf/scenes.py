"""Procedural ground-truth scenes and a supersampling ray tracer.

Shading is emissive albedo: a ray returns the albedo at its first hit, or the
white background on a miss. Images rendered here are the targets the radiance
field is trained and scored against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .render import Camera, pixel_directions

SCENE_KINDS = ("slanted_checkerboard", "brick_wall", "colored_spheres")
BACKGROUND = np.ones(3)


# ---------------------------------------------------------------------------
# textures (functions of local 2-D plane coordinates)


def checker_texture(period: float, dark=(0.05, 0.05, 0.05), light=(0.95, 0.95, 0.95)):
    dark, light = np.asarray(dark, float), np.asarray(light, float)
    half = period / 2

    def tex(u, v):
        parity = (np.floor(u / half) + np.floor(v / half)).astype(np.int64) & 1
        return np.where(parity[:, None] == 1, light, dark)

    return tex


def brick_texture(brick_w: float = 0.2, brick_h: float = 0.08, mortar: float = 0.012,
                  brick=(0.66, 0.26, 0.18), mortar_color=(0.86, 0.85, 0.8)):
    brick, mortar_color = np.asarray(brick, float), np.asarray(mortar_color, float)

    def tex(u, v):
        row = np.floor(v / brick_h)
        shift = np.where(row.astype(np.int64) % 2 == 1, brick_w / 2, 0.0)
        col = np.floor((u + shift) / brick_w)
        fu = (u + shift) - col * brick_w
        fv = v - row * brick_h
        in_mortar = (fu < mortar) | (fv < mortar)
        # per-brick tint from an integer hash so neighbouring bricks differ
        h = ((row.astype(np.int64) * 73856093) ^ (col.astype(np.int64) * 19349663)) & 0xFFFF
        tint = 0.8 + 0.4 * (h / 0xFFFF)
        color = np.clip(brick[None] * tint[:, None], 0, 1)
        return np.where(in_mortar[:, None], mortar_color, color)

    return tex


def constant_texture(color):
    color = np.asarray(color, float)

    def tex(u, v):
        return np.broadcast_to(color, (len(u), 3)).copy()

    return tex


# ---------------------------------------------------------------------------
# primitives


@dataclass
class Plane:
    """Finite rectangle spanned by orthonormal ``u_axis``/``v_axis`` around ``center``."""

    center: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    half_u: float
    half_v: float
    texture: Callable

    def __post_init__(self):
        self.center = np.asarray(self.center, float)
        self.u_axis = np.asarray(self.u_axis, float)
        self.v_axis = np.asarray(self.v_axis, float)
        self.normal = np.cross(self.u_axis, self.v_axis)

    def intersect(self, o, d):
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - o) @ self.normal) / denom
        p = o + d * t[:, None]
        rel = p - self.center
        u = rel @ self.u_axis
        v = rel @ self.v_axis
        hit = (np.abs(denom) > 1e-12) & (t > 1e-9) & (np.abs(u) <= self.half_u) & (np.abs(v) <= self.half_v)
        return np.where(hit, t, np.inf), u, v

    def albedo(self, u, v):
        return self.texture(u, v)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: tuple

    def intersect(self, o, d):
        oc = o - np.asarray(self.center, float)
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0))
        t_near = -b - sq
        t_far = -b + sq
        t = np.where(t_near > 1e-9, t_near, t_far)
        hit = (disc >= 0) & (t > 1e-9)
        return np.where(hit, t, np.inf), None, None

    def albedo(self, u, v):
        return np.asarray(self.color, float)


@dataclass
class ProceduralScene:
    kind: str
    primitives: list
    params: dict = field(default_factory=dict)
    bounds: np.ndarray = field(default_factory=lambda: np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]))
    # where cameras look from: unit vector and cone half-angle (degrees)
    view_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    view_cone: float = 50.0

    def radiance(self, o: np.ndarray, d: np.ndarray, background=BACKGROUND) -> np.ndarray:
        """Albedo of the first surface hit, background on a miss."""
        n = len(o)
        best = np.full(n, np.inf)
        color = np.broadcast_to(np.asarray(background, float), (n, 3)).copy()
        for prim in self.primitives:
            t, u, v = prim.intersect(o, d)
            closer = t < best
            if not closer.any():
                continue
            best[closer] = t[closer]
            if isinstance(prim, Plane):
                color[closer] = prim.albedo(u[closer], v[closer])
            else:
                color[closer] = prim.albedo(None, None)
        return color


def make_scene(kind: str, **params) -> ProceduralScene:
    """Preset scenes: a tilted checkerboard, a brick wall, or a few coloured spheres."""
    if kind == "slanted_checkerboard":
        tilt = np.deg2rad(params.get("tilt_deg", 35.0))
        period = params.get("period", 0.1)
        half = params.get("half_size", 0.9)
        u_axis = np.array([1.0, 0.0, 0.0])
        v_axis = np.array([0.0, np.cos(tilt), np.sin(tilt)])
        plane = Plane(np.zeros(3), u_axis, v_axis, half, half, checker_texture(period))
        p = {"tilt_deg": float(np.rad2deg(tilt)), "period": period, "half_size": half}
        return ProceduralScene(kind, [plane], p, view_axis=plane.normal, view_cone=50.0)
    if kind == "brick_wall":
        half = params.get("half_size", 0.9)
        plane = Plane(np.zeros(3), np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]), half, half,
                      brick_texture(params.get("brick_w", 0.2), params.get("brick_h", 0.08),
                                    params.get("mortar", 0.012)))
        p = {"half_size": half, "brick_w": params.get("brick_w", 0.2), "brick_h": params.get("brick_h", 0.08),
             "mortar": params.get("mortar", 0.012)}
        # normal = u x v = -y, cameras sit on the -y side
        return ProceduralScene(kind, [plane], p, view_axis=plane.normal, view_cone=50.0)
    if kind == "colored_spheres":
        spheres = params.get("spheres") or [
            ((0.0, 0.0, 0.0), 0.35, (0.85, 0.2, 0.2)),
            ((0.55, 0.1, -0.1), 0.22, (0.2, 0.7, 0.3)),
            ((-0.45, 0.3, 0.05), 0.25, (0.2, 0.35, 0.85)),
            ((0.05, -0.5, 0.2), 0.2, (0.9, 0.8, 0.2)),
        ]
        prims = [Sphere(np.asarray(c, float), r, tuple(col)) for c, r, col in spheres]
        p = {"spheres": [[list(map(float, c)), float(r), list(map(float, col))] for c, r, col in spheres]}
        return ProceduralScene(kind, prims, p, view_axis=np.array([0.0, 0.0, 1.0]), view_cone=80.0)
    raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")


# ---------------------------------------------------------------------------
# reference renderer


def _check_camera(camera: Camera) -> None:
    if camera.width < 1 or camera.height < 1 or not camera.focal > 0 or not np.all(np.isfinite(camera.pose)):
        raise ValueError("degenerate camera")
    R = camera.pose[:, :3]
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
        raise ValueError("degenerate camera: rotation is not orthonormal")


def trace_reference(scene: ProceduralScene, camera: Camera, supersample: int = 64, seed: int = 0,
                    return_variance: bool = False):
    """Mean radiance of ``supersample`` jittered-stratified rays per pixel.

    With ``return_variance`` also returns the per-pixel variance of that mean
    (sample variance / ``supersample``, averaged over channels).
    """
    k = int(round(np.sqrt(supersample)))
    if supersample < 1 or k * k != supersample:
        raise ValueError(f"supersample must be a perfect square >= 1, got {supersample}")
    _check_camera(camera)
    rng = np.random.default_rng(seed)
    H, W = camera.height, camera.width
    image = np.empty((H, W, 3))
    var = np.empty((H, W)) if return_variance else None
    sub = np.arange(k)
    rows_per_chunk = max(1, (1 << 18) // (W * supersample))
    for r0 in range(0, H, rows_per_chunk):
        r1 = min(H, r0 + rows_per_chunk)
        rows = np.arange(r0, r1)
        jit = rng.random((len(rows), W, k, k, 2))
        v = rows[:, None, None, None] + (sub[None, None, :, None] + jit[..., 1]) / k
        u = np.arange(W)[None, :, None, None] + (sub[None, None, None, :] + jit[..., 0]) / k
        d = pixel_directions(camera, u.ravel(), v.ravel())
        o = np.broadcast_to(camera.center, d.shape)
        rad = scene.radiance(o, d).reshape(len(rows), W, supersample, 3)
        image[r0:r1] = rad.mean(axis=2)
        if return_variance:
            s2 = rad.var(axis=2, ddof=1) if supersample > 1 else np.zeros((len(rows), W, 3))
            var[r0:r1] = (s2 / supersample).mean(axis=-1)
    return (image, var) if return_variance else image


# ---------------------------------------------------------------------------
# multiscale datasets

SCALES = (1.0, 0.5, 0.25, 0.125)
MANIFEST = "manifest.json"
FORMAT_VERSION = 1
BOX_HALF_DIAGONAL = float(np.sqrt(3.0))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """3x4 camera-to-world pose whose -z axis points from ``eye`` to ``target``."""
    eye, target, up = (np.asarray(a, float) for a in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    if abs(fwd @ up) > 0.99 * np.linalg.norm(up):
        up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    return np.column_stack([right, true_up, -fwd, eye])


def _orthonormal_frame(axis):
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    a = np.cross(axis, helper)
    a /= np.linalg.norm(a)
    return axis, a, np.cross(axis, a)


def sample_cameras(scene: ProceduralScene, n: int, resolution: int, rng: np.random.Generator,
                   fov_deg: float = 30.0, distance_range=(1.2, 9.6)) -> list[Camera]:
    """Cameras inside the scene's viewing cone, log-uniform in distance, aimed near the origin."""
    focal = 0.5 * resolution / np.tan(np.deg2rad(fov_deg) / 2)
    axis, a, b = _orthonormal_frame(scene.view_axis)
    cos_max = np.cos(np.deg2rad(scene.view_cone))
    lo, hi = np.log(distance_range[0]), np.log(distance_range[1])
    cams = []
    for _ in range(n):
        cos_t = rng.uniform(cos_max, 1.0)
        phi = rng.uniform(0, 2 * np.pi)
        sin_t = np.sqrt(1 - cos_t ** 2)
        direction = cos_t * axis + sin_t * (np.cos(phi) * a + np.sin(phi) * b)
        dist = float(np.exp(rng.uniform(lo, hi)))
        target = rng.uniform(-0.15, 0.15, size=3)
        eye = target + dist * direction
        pose = look_at(eye, target)
        d_center = float(np.linalg.norm(eye))
        near = max(0.02, d_center - BOX_HALF_DIAGONAL)
        cams.append(Camera(resolution, resolution, float(focal), pose, near, d_center + BOX_HALF_DIAGONAL))
    return cams


@dataclass
class ImageRecord:
    path: str
    camera_id: int
    split: str
    scale: float
    camera: Camera

    def to_dict(self) -> dict:
        c = self.camera
        return {"path": self.path, "camera_id": self.camera_id, "split": self.split, "scale": self.scale,
                "width": c.width, "height": c.height, "focal": c.focal,
                "pose": [float(v) for v in c.pose.ravel()], "near": c.near, "far": c.far}

    @classmethod
    def from_dict(cls, d: dict) -> "ImageRecord":
        cam = Camera(int(d["width"]), int(d["height"]), float(d["focal"]),
                     np.asarray(d["pose"], dtype=np.float64).reshape(3, 4), float(d["near"]), float(d["far"]))
        return cls(d["path"], int(d["camera_id"]), d["split"], float(d["scale"]), cam)


def _encode_png(path, image: np.ndarray) -> None:
    from PIL import Image

    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(data, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def _decode_png(path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


class MultiscaleDataset:
    """Posed images of one scene at several scales, split into train and test.

    Images are loaded lazily and cached as float arrays in ``[0, 1]``.
    """

    def __init__(self, root, meta: dict, records: list[ImageRecord]):
        from pathlib import Path

        self.root = Path(root)
        self.meta = meta
        self.records = records
        self._images: dict[str, np.ndarray] = {}
        self.validate()

    # -- manifest ---------------------------------------------------------

    @property
    def scene_kind(self) -> str:
        return self.meta["scene"]["kind"]

    @property
    def bounds(self) -> np.ndarray:
        return np.asarray(self.meta["bounds"], dtype=np.float64)

    @property
    def scales(self) -> list[float]:
        return sorted({r.scale for r in self.records}, reverse=True)

    def to_manifest(self) -> dict:
        return {**self.meta, "images": [r.to_dict() for r in self.records]}

    @classmethod
    def load(cls, root) -> "MultiscaleDataset":
        import json
        from pathlib import Path

        path = Path(root) / MANIFEST
        try:
            manifest = json.loads(path.read_text())
        except OSError as exc:
            raise OSError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed manifest {path}: {exc}") from exc
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
        meta = {k: v for k, v in manifest.items() if k != "images"}
        try:
            records = [ImageRecord.from_dict(d) for d in manifest["images"]]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: malformed image entry ({exc})") from exc
        return cls(root, meta, records)

    def validate(self) -> None:
        seen = set()
        base: dict[int, Camera] = {}
        splits: dict[int, str] = {}
        for r in self.records:
            if r.split not in ("train", "test"):
                raise ValueError(f"{r.path}: unknown split {r.split!r}")
            key = (r.camera_id, r.scale)
            if key in seen:
                raise ValueError(f"camera {r.camera_id} appears twice at scale {r.scale}")
            seen.add(key)
            if splits.setdefault(r.camera_id, r.split) != r.split:
                raise ValueError(f"camera {r.camera_id} is in both splits")
            if r.scale == 1.0:
                base[r.camera_id] = r.camera
            if not (self.root / r.path).is_file():
                raise ValueError(f"manifest lists missing image {self.root / r.path}")
        for r in self.records:
            b = base.get(r.camera_id)
            if b is None:
                raise ValueError(f"camera {r.camera_id} has no full-scale image")
            expect = (int(np.floor(b.width * r.scale)), int(np.floor(b.height * r.scale)))
            if (r.camera.width, r.camera.height) != expect:
                raise ValueError(f"{r.path}: size {r.camera.width}x{r.camera.height} != {expect[0]}x{expect[1]}")
            if not np.isclose(r.camera.focal, b.focal * r.scale, rtol=1e-12):
                raise ValueError(f"{r.path}: focal {r.camera.focal} is not {r.scale} x {b.focal}")
            if not np.array_equal(r.camera.pose, b.pose):
                raise ValueError(f"{r.path}: pose differs from camera {r.camera_id}'s full-scale pose")
        train_poses = {b.pose.tobytes() for cid, b in base.items() if splits[cid] == "train"}
        for cid, b in base.items():
            if splits[cid] == "test" and b.pose.tobytes() in train_poses:
                raise ValueError(f"test camera {cid} duplicates a train pose")

    # -- access -----------------------------------------------------------

    def select(self, split: str | None = None, scale: float | None = None) -> list[ImageRecord]:
        return [r for r in self.records
                if (split is None or r.split == split) and (scale is None or r.scale == scale)]

    def image(self, record: ImageRecord) -> np.ndarray:
        img = self._images.get(record.path)
        if img is None:
            img = _decode_png(self.root / record.path)
            if img.shape[:2] != (record.camera.height, record.camera.width):
                raise ValueError(f"{record.path}: image is {img.shape[1]}x{img.shape[0]}, manifest says "
                                 f"{record.camera.width}x{record.camera.height}")
            self._images[record.path] = img
        return img

    def ray_table(self, split: str = "train"):
        """All pixels of a split as ``(Rays, colors (n, 3), scale (n,))``."""
        from .render import Rays, generate_rays

        parts, colors, scales = [], [], []
        for r in self.select(split):
            parts.append(generate_rays(r.camera))
            colors.append(self.image(r).reshape(-1, 3))
            scales.append(np.full(r.camera.width * r.camera.height, r.scale))
        return Rays.concatenate(parts), np.concatenate(colors), np.concatenate(scales)


def build_dataset(scene: ProceduralScene, n_train_cams: int, n_test_cams: int, base_resolution: int = 128,
                  seed: int = 0, out_dir=None, supersample: int = 64, scales=SCALES,
                  fov_deg: float = 30.0, distance_range=(1.2, 9.6)) -> MultiscaleDataset:
    """Sample cameras, render each at every scale with :func:`trace_reference`, write the dataset."""
    import json
    from pathlib import Path

    if n_train_cams < 1 or n_test_cams < 1:
        raise ValueError("camera counts must be >= 1")
    if base_resolution < 8:
        raise ValueError("base_resolution must be >= 8")
    if out_dir is None:
        raise ValueError("out_dir is required")
    root = Path(out_dir)
    rng = np.random.default_rng(seed)
    cams = sample_cameras(scene, n_train_cams + n_test_cams, base_resolution, rng, fov_deg, distance_range)
    records = []
    try:
        root.mkdir(parents=True, exist_ok=True)
        for cid, cam in enumerate(cams):
            split = "train" if cid < n_train_cams else "test"
            for si, scale in enumerate(scales):
                scam = cam.scaled(scale)
                if scam.width < 1 or scam.height < 1:
                    raise ValueError(f"scale {scale} leaves an empty image at resolution {base_resolution}")
                img = trace_reference(scene, scam, supersample, seed=_trace_seed(seed, cid, si))
                rel = f"{split}/scale_{si}/{cid:03d}.png"
                (root / rel).parent.mkdir(parents=True, exist_ok=True)
                _encode_png(root / rel, img)
                records.append(ImageRecord(rel, cid, split, float(scale), scam))
        meta = {
            "format_version": FORMAT_VERSION,
            "scene": {"kind": scene.kind, "params": scene.params},
            "bounds": scene.bounds.tolist(),
            "scales": [float(s) for s in scales],
            "base_resolution": base_resolution,
            "supersample": supersample,
            "seed": seed,
            "background": [1.0, 1.0, 1.0],
        }
        text = json.dumps({**meta, "images": [r.to_dict() for r in records]}, indent=2, sort_keys=True)
        (root / MANIFEST).write_text(text + "\n")
    except OSError as exc:
        raise OSError(f"writing dataset under {root} failed: {exc}") from exc
    return MultiscaleDataset(root, meta, records)


def _trace_seed(seed: int, camera_id: int, scale_index: int) -> int:
    return int(np.random.SeedSequence([seed, camera_id, scale_index]).generate_state(1)[0])


def scene_from_manifest(meta: dict) -> ProceduralScene:
    return make_scene(meta["scene"]["kind"], **meta["scene"].get("params", {}))
