"""Synthetic sequences with exact oracles, and the VPT on-disk tensor format.

PDE fields live on a periodic grid with unit spacing and unit time step
between frames. Advection is applied as a spectral phase shift (exact on the
grid, and a plain ``np.roll`` for integer velocities); diffusion uses the
explicit five-point scheme with several substeps per frame. The two commute
on a periodic grid, so advection-diffusion is diffuse-then-shift.

Bouncing blobs are a Moving-MNIST-like surrogate: one or two fixed shapes
moving at constant speed with elastic reflection off the walls.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

PDE_KINDS = ("advection", "diffusion", "advection-diffusion")
SHAPES = ("square", "disc", "cross")


class StabilityError(ValueError):
    def __init__(self, number: float, limit: float = 0.25):
        self.number = number
        super().__init__(
            f"explicit diffusion unstable: nu*dt/dx^2 = {number:.6g} exceeds {limit}; raise substeps"
        )


@dataclass
class SequenceBatch:
    frames: np.ndarray  # [B, T, C, H, W], values in [0, 1]
    mask: np.ndarray | None = None  # [B, T] bool, True = observed

    def __post_init__(self):
        if self.frames.ndim != 5:
            raise ValueError(f"SequenceBatch frames must be [B,T,C,H,W], got {self.frames.shape}")
        if self.mask is not None and self.mask.shape != self.frames.shape[:2]:
            raise ValueError(f"mask {self.mask.shape} does not match frames {self.frames.shape[:2]}")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class PdeSpec:
    kind: str = "advection"
    velocity: tuple[float, float] = (0.5, 0.25)  # (vx, vy) in pixels per frame
    diffusivity: float = 0.0
    substeps: int = 4

    def __post_init__(self):
        if self.kind not in PDE_KINDS:
            raise ValueError(f"unknown PDE kind {self.kind!r}; expected one of {PDE_KINDS}")
        if self.diffusivity < 0:
            raise ValueError(f"diffusivity must be >= 0, got {self.diffusivity}")
        if self.substeps < 4:
            raise ValueError(f"need at least 4 diffusion substeps per frame, got {self.substeps}")

    @property
    def advects(self) -> bool:
        return self.kind != "diffusion" and any(self.velocity)

    @property
    def diffuses(self) -> bool:
        return self.kind != "advection" and self.diffusivity > 0

    @property
    def stability_number(self) -> float:
        return self.diffusivity / self.substeps

    def check_stability(self) -> None:
        if self.diffuses and self.stability_number > 0.25:
            raise StabilityError(self.stability_number)


# -- PDE oracles -------------------------------------------------------------


def laplacian(u: np.ndarray) -> np.ndarray:
    """Periodic five-point Laplacian over the last two axes."""
    return (
        np.roll(u, 1, -1) + np.roll(u, -1, -1) + np.roll(u, 1, -2) + np.roll(u, -1, -2) - 4.0 * u
    )


def shift(u: np.ndarray, vx: float, vy: float) -> np.ndarray:
    """Translate a periodic field by ``(vx, vy)`` pixels: ``out(x, y) = u(x - vx, y - vy)``."""
    if float(vx).is_integer() and float(vy).is_integer():
        return np.roll(u, (int(vy), int(vx)), axis=(-2, -1))
    h, w = u.shape[-2:]
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.fftfreq(w)[None, :]
    phase = np.exp(-2j * np.pi * (kx * vx + ky * vy))
    # taking the real part symmetrises the unsigned Nyquist modes
    return np.fft.ifft2(np.fft.fft2(u) * phase).real


def diffuse(u: np.ndarray, nu: float, substeps: int) -> np.ndarray:
    """Advance one frame of ``u_t = nu * Laplacian(u)`` with explicit substeps."""
    dt = 1.0 / substeps
    for _ in range(substeps):
        u = u + (nu * dt) * laplacian(u)
    return u


def step(u: np.ndarray, spec: PdeSpec) -> np.ndarray:
    """One frame of the oracle dynamics."""
    spec.check_stability()
    if spec.diffuses:
        u = diffuse(u, spec.diffusivity, spec.substeps)
    if spec.advects:
        u = shift(u, *spec.velocity)
    return u


def evolve(u0: np.ndarray, spec: PdeSpec, steps: int) -> np.ndarray:
    """Frames ``u_0 .. u_{steps}`` stacked on a new leading axis.

    Pure advection shifts ``u0`` directly by ``t * v`` so no error compounds.
    """
    spec.check_stability()
    out = [u0]
    u = u0
    for t in range(1, steps + 1):
        if spec.advects and not spec.diffuses:
            vx, vy = spec.velocity
            out.append(shift(u0, vx * t, vy * t))
        else:
            u = step(u, spec)
            out.append(u)
    return np.stack(out)


def spectral_gradient(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact periodic ``(du/dx, du/dy)`` of a band-limited field."""
    h, w = u.shape[-2:]
    kx = 2j * np.pi * np.fft.fftfreq(w)[None, :]
    ky = 2j * np.pi * np.fft.fftfreq(h)[:, None]
    if w % 2 == 0:
        kx[:, w // 2] = 0
    if h % 2 == 0:
        ky[h // 2, :] = 0
    U = np.fft.fft2(u)
    return np.fft.ifft2(kx * U).real, np.fft.ifft2(ky * U).real


def euler_step(u: np.ndarray, spec: PdeSpec) -> np.ndarray:
    """One forward-Euler step ``u + dt * (nu Lap(u) - v . grad(u))`` with ``dt = 1``.

    This is the discretisation a PhyCell in prediction-only mode mimics, so
    its error against ``step`` is the natural yardstick for a learned one.
    """
    rhs = np.zeros_like(u)
    if spec.diffuses:
        rhs += spec.diffusivity * laplacian(u)
    if spec.advects:
        ux, uy = spectral_gradient(u)
        vx, vy = spec.velocity
        rhs -= vx * ux + vy * uy
    return u + rhs


def periodic_gaussian(h: int, w: int, cx: float, cy: float, sigma: float, images: int = 2) -> np.ndarray:
    """Gaussian summed over its periodic images, so it is smooth across the wrap."""
    gx = sum(np.exp(-((np.arange(w) - cx + n * w) ** 2) / (2 * sigma**2)) for n in range(-images, images + 1))
    gy = sum(np.exp(-((np.arange(h) - cy + n * h) ** 2) / (2 * sigma**2)) for n in range(-images, images + 1))
    return gy[:, None] * gx[None, :]


def random_initial_condition(
    rng: np.random.Generator, h: int, w: int, max_bumps: int = 5, refine: int = 4
) -> np.ndarray:
    """Sum of 1..max_bumps periodic Gaussians, rescaled to [0, 1].

    The range is taken on a ``refine``-times finer grid, so sub-pixel shifts
    of the smooth field stay inside [0, 1].
    """
    fine = np.zeros((h * refine, w * refine))
    for _ in range(rng.integers(1, max_bumps + 1)):
        sigma = rng.uniform(2.5, 0.15 * min(h, w) + 2.5)
        amp = rng.uniform(0.3, 1.0)
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        fine += amp * periodic_gaussian(h * refine, w * refine, cx * refine, cy * refine, sigma * refine)
    fine -= fine.min()
    return (fine / fine.max())[::refine, ::refine].copy()


def generate_pde_sequence(spec: PdeSpec, B: int, T: int, H: int, W: int, seed: int) -> SequenceBatch:
    spec.check_stability()
    rng = np.random.default_rng(seed)
    frames = np.empty((B, T, 1, H, W))
    for b in range(B):
        frames[b, :, 0] = evolve(random_initial_condition(rng, H, W), spec, T - 1)
    # spectral shifts of smooth fields can ring at the 1e-12 level
    return SequenceBatch(np.clip(frames, 0.0, 1.0))


# -- bouncing blobs ----------------------------------------------------------


def shape_stencil(shape: str, size: int) -> np.ndarray:
    """Binary ``size x size`` stencil for a named shape."""
    c = (size - 1) / 2
    yy, xx = np.mgrid[:size, :size]
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disc":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2) ** 2
    if shape == "cross":
        arm = max(1, size // 3)
        lo = (size - arm) // 2
        band = slice(lo, lo + arm)
        out = np.zeros((size, size), dtype=bool)
        out[band, :] = True
        out[:, band] = True
        return out
    raise ValueError(f"unknown shape {shape!r}; expected one of {SHAPES}")


@dataclass
class Blob:
    shape: str
    size: int
    x: float  # top-left corner, pixels
    y: float
    vx: float
    vy: float
    intensity: float = 1.0


def bounce(pos: float, vel: float, limit: float) -> tuple[float, float]:
    """Advance ``pos`` by ``vel`` inside ``[0, limit]`` with elastic reflection."""
    pos += vel
    while pos < 0 or pos > limit:
        if pos < 0:
            pos, vel = -pos, -vel
        else:
            pos, vel = 2 * limit - pos, -vel
    return pos, vel


def blob_trajectory(blob: Blob, H: int, W: int, T: int) -> list[Blob]:
    """Blob states at ``t = 0 .. T-1``."""
    if blob.size > min(H, W):
        raise ValueError(f"blob of size {blob.size} does not fit a {H}x{W} frame")
    states = [blob]
    cur = blob
    for _ in range(T - 1):
        x, vx = bounce(cur.x, cur.vx, W - cur.size)
        y, vy = bounce(cur.y, cur.vy, H - cur.size)
        cur = Blob(cur.shape, cur.size, x, y, vx, vy, cur.intensity)
        states.append(cur)
    return states


def render_blobs(blobs: list[Blob], H: int, W: int) -> np.ndarray:
    """Max-composite blobs at integer (rounded) positions into an ``H x W`` frame."""
    frame = np.zeros((H, W))
    for b in blobs:
        if b.size > min(H, W):
            raise ValueError(f"blob of size {b.size} does not fit a {H}x{W} frame")
        x, y = int(round(b.x)), int(round(b.y))
        patch = frame[y : y + b.size, x : x + b.size]
        np.maximum(patch, b.intensity * shape_stencil(b.shape, b.size), out=patch)
    return frame


def generate_blobs(
    B: int,
    T: int,
    H: int,
    W: int,
    n_blobs: int,
    seed: int,
    size: int = 7,
    speed: tuple[float, float] = (1.0, 2.5),
) -> SequenceBatch:
    if n_blobs not in (1, 2):
        raise ValueError(f"n_blobs must be 1 or 2, got {n_blobs}")
    if size > min(H, W):
        raise ValueError(f"blob of size {size} does not fit a {H}x{W} frame")
    rng = np.random.default_rng(seed)
    frames = np.empty((B, T, 1, H, W))
    for b in range(B):
        shapes = rng.choice(SHAPES, size=n_blobs, replace=False)
        tracks = []
        for shape in shapes:
            angle = rng.uniform(0, 2 * np.pi)
            s = rng.uniform(*speed)
            blob = Blob(
                str(shape), size,
                x=rng.uniform(0, W - size), y=rng.uniform(0, H - size),
                vx=s * np.cos(angle), vy=s * np.sin(angle),
                intensity=rng.uniform(0.5, 1.0),
            )
            tracks.append(blob_trajectory(blob, H, W, T))
        for t in range(T):
            frames[b, t, 0] = render_blobs([tr[t] for tr in tracks], H, W)
    return SequenceBatch(frames)


# -- missing frames ----------------------------------------------------------


def mask_frames(batch: SequenceBatch, ratio: float, seed: int) -> SequenceBatch:
    """Hide ``floor(ratio * T)`` frames per sequence (never the first) and zero them."""
    if not 0.0 <= ratio <= 0.5:
        raise ValueError(f"mask ratio must lie in [0, 0.5], got {ratio}")
    B, T = batch.frames.shape[:2]
    n_missing = int(np.floor(ratio * T + 1e-9))
    rng = np.random.default_rng(seed)
    mask = np.ones((B, T), dtype=bool)
    for b in range(B):
        if n_missing:
            mask[b, 1 + rng.choice(T - 1, size=n_missing, replace=False)] = False
    frames = batch.frames * mask[:, :, None, None, None]
    return SequenceBatch(frames.astype(batch.frames.dtype, copy=False), mask)


# -- VPT format --------------------------------------------------------------

MAGIC = b"VPT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


class VptError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


def encode_vpt(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype == np.float32:
        code = 0
    elif arr.dtype == np.float64:
        code = 1
    elif arr.dtype == np.bool_ or arr.dtype == np.uint8:
        code = 2
    else:
        raise TypeError(f"VPT stores float32, float64 or mask arrays, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("VPT rank must fit in one byte")
    header = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return header + struct.pack("<B", code) + payload


def decode_vpt(buf: bytes) -> np.ndarray:
    if len(buf) < 5:
        raise VptError("truncated header", len(buf))
    if buf[:4] != MAGIC:
        raise VptError(f"bad magic {buf[:4]!r}", 0)
    rank = buf[4]
    off = 5
    if len(buf) < off + 4 * rank + 1:
        raise VptError(f"truncated extents for rank {rank}", len(buf))
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    code = buf[off]
    if code not in _DTYPES:
        raise VptError(f"unknown dtype code {code}", off)
    off += 1
    dtype = _DTYPES[code]
    n = int(np.prod(shape, dtype=np.int64))
    need = off + n * dtype.itemsize
    if len(buf) != need:
        raise VptError(f"payload holds {len(buf) - off} bytes, expected {n * dtype.itemsize}", min(len(buf), need))
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=off).reshape(shape)
    if code == 2:
        return arr.astype(bool)
    return arr.astype(dtype.newbyteorder("="))


def write_vpt(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_vpt(array))


def read_vpt(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_vpt(fh.read())


# -- config-driven splits ----------------------------------------------------

SPLITS = ("train", "val", "test")


def split_seeds(seed: int) -> dict[str, int]:
    """Disjoint, reproducible per-split seeds derived from one base seed."""
    children = np.random.SeedSequence(seed).spawn(len(SPLITS))
    return {name: int(c.generate_state(1)[0]) for name, c in zip(SPLITS, children)}


def generate_split(gen, n: int, T: int, size: int, seed: int) -> SequenceBatch:
    """Build ``n`` sequences of length ``T`` from a generator config section."""
    if gen.kind == "blobs":
        return generate_blobs(n, T, size, size, gen.n_blobs, seed, gen.blob_size, tuple(gen.speed))
    spec = PdeSpec(gen.kind, tuple(gen.velocity), gen.diffusivity, gen.substeps)
    return generate_pde_sequence(spec, n, T, size, size, seed)
