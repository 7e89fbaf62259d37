"""Synthetic lesion volumes and the SSV1 binary container.

A sample is one axis-aligned ellipsoidal lesion in a noisy background at
high resolution, paired with its 2x average-pooled low-resolution version.
Datasets are directories of SSV1 containers plus a tab-separated manifest.
"""

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ContractError, FormatError

MAGIC = b"SSV1"
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
MANIFEST = "manifest.tsv"
DEFAULT_STRATA = ((4.0, 8.0), (12.0, 22.0))

FG_LEVEL = 0.65
FG_JITTER = 0.1
BG_LEVEL = 0.3
NOISE_AMPLITUDE = 0.08


@dataclass
class VolumeSample:
    hr_image: np.ndarray  # (1, D2, H2, W2) float32 in [0, 1]
    hr_mask: np.ndarray  # (1, D2, H2, W2) uint8 in {0, 1}
    lr_image: np.ndarray  # (1, D, H, W) float32
    lesion_diameter_voxels: float
    seed: int


def downsample_hr(hr) -> np.ndarray:
    """2x2x2 average pooling over the last three axes."""
    hr = np.asarray(hr)
    spatial = hr.shape[-3:]
    if hr.ndim < 3 or any(s % 2 for s in spatial):
        raise ConfigError(f"downsample_hr needs even spatial extents, got {spatial}")
    lead = hr.shape[:-3]
    d, h, w = (s // 2 for s in spatial)
    blocks = hr.reshape(lead + (d, 2, h, 2, w, 2))
    n = len(lead)
    return blocks.mean(axis=(n + 1, n + 3, n + 5), dtype=np.float64).astype(hr.dtype)


def _check_range(hr_extent: int, diameter_range: Sequence[float]) -> Tuple[float, float]:
    if hr_extent < 4 or hr_extent % 4:
        raise ConfigError(f"hr_extent must be a positive multiple of 4, got {hr_extent}")
    lo, hi = (float(v) for v in diameter_range)
    if not (2.0 < lo <= hi < 0.8 * hr_extent):
        raise ConfigError(
            f"diameter range [{lo}, {hi}] infeasible for extent {hr_extent}: need 2 < min <= max < {0.8 * hr_extent}"
        )
    return lo, hi


def generate_sample(seed: int, hr_extent: int = 32, diameter_range=(4.0, 8.0)) -> VolumeSample:
    lo, hi = _check_range(hr_extent, diameter_range)
    rng = np.random.default_rng(seed)
    diameters = rng.uniform(lo, hi, size=3)
    radii = diameters / 2.0
    # voxel centres sit at integer coordinates 0..E-1; keep the ellipsoid inside [-0.5, E-0.5]
    centre = np.array([rng.uniform(r - 0.5, hr_extent - 0.5 - r) for r in radii])
    fg = FG_LEVEL + rng.uniform(-FG_JITTER, FG_JITTER)

    grid = np.indices((hr_extent,) * 3, dtype=np.float64)
    rho2 = sum(((grid[a] - centre[a]) / radii[a]) ** 2 for a in range(3))
    mask = rho2 <= 1.0
    # one-voxel-wide intensity ramp centred on the boundary
    rho = np.sqrt(rho2)
    ramp = np.clip((1.0 - rho) * radii.mean() + 0.5, 0.0, 1.0)

    noise = gaussian_filter(rng.standard_normal((hr_extent,) * 3), sigma=1.0, mode="wrap")
    noise *= NOISE_AMPLITUDE / np.abs(noise).max()

    image = np.clip(BG_LEVEL + (fg - BG_LEVEL) * ramp + noise, 0.0, 1.0).astype(np.float32)[None]
    return VolumeSample(
        hr_image=image,
        hr_mask=mask.astype(np.uint8)[None],
        lr_image=downsample_hr(image),
        lesion_diameter_voxels=float(diameters.mean()),
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------
def _encode_dtype(name: str, arr: np.ndarray) -> Tuple[int, np.ndarray]:
    if arr.dtype == np.uint8:
        return 1, arr
    if arr.dtype.kind == "f":
        return 0, arr.astype("<f4")
    raise ContractError(f"record {name!r}: dtype {arr.dtype} is not storable (float or uint8 only)")


def write_container(path, records: Union[Mapping[str, np.ndarray], Iterable[Tuple[str, np.ndarray]]]) -> Path:
    """Write named arrays; floating arrays are stored as little-endian float32."""
    items = list(records.items()) if isinstance(records, Mapping) else list(records)
    seen = set()
    for name, _ in items:
        if name in seen:
            raise FormatError(f"duplicate record name {name!r}", 0)
        seen.add(name)
    chunks = [MAGIC, struct.pack("<I", len(items))]
    for name, arr in items:
        arr = np.asarray(arr)
        code, stored = _encode_dtype(name, arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ContractError(f"record {name!r}: name or rank too large")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<B", code))
        chunks.append(np.ascontiguousarray(stored).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def read_container(path) -> Dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected b'SSV1'", 0)
    (count,) = struct.unpack("<I", r.take(4, "record count"))
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        start = r.pos
        (nlen,) = struct.unpack("<H", r.take(2, "name length"))
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("record name is not valid UTF-8", start + 2) from None
        if name in out:
            raise FormatError(f"duplicate record name {name!r}", start)
        (rank,) = struct.unpack("<B", r.take(1, "rank"))
        extents = struct.unpack(f"<{rank}I", r.take(4 * rank, "extents"))
        code_pos = r.pos
        (code,) = struct.unpack("<B", r.take(1, "dtype code"))
        if code not in DTYPE_CODES:
            raise FormatError(f"unknown dtype code {code} in record {name!r}", code_pos)
        dtype = DTYPE_CODES[code]
        nbytes = int(np.prod(extents, dtype=np.int64)) * dtype.itemsize
        payload = r.take(nbytes, f"payload of record {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(extents).copy()
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last record", r.pos)
    return out


def sample_records(sample: VolumeSample) -> Dict[str, np.ndarray]:
    return {"hr_image": sample.hr_image, "hr_mask": sample.hr_mask, "lr_image": sample.lr_image}


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------
@dataclass
class ManifestEntry:
    filename: str
    stratum: str
    diameter: float


def stratum_label(bounds: Sequence[float]) -> str:
    return f"{bounds[0]:g}-{bounds[1]:g}"


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def stratum_assignment(count: int, n_strata: int) -> List[int]:
    """Equal share per stratum, remainder to the first; interleaved round-robin."""
    per = [count // n_strata] * n_strata
    per[0] += count - sum(per)
    order: List[int] = []
    left = list(per)
    while any(left):
        for s in range(n_strata):
            if left[s]:
                order.append(s)
                left[s] -= 1
    return order


def build_dataset(outdir, seed: int, count: int, hr_extent: int = 32, strata=DEFAULT_STRATA) -> List[ManifestEntry]:
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    strata = [tuple(float(v) for v in s) for s in strata]
    if not strata:
        raise ConfigError("at least one size stratum is required")
    for s in strata:
        _check_range(hr_extent, s)
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {outdir}: {exc}") from exc

    entries = []
    for index, s in enumerate(stratum_assignment(count, len(strata))):
        sample = generate_sample(sample_seed(seed, index), hr_extent, strata[s])
        name = f"sample_{index:05d}.ssv"
        try:
            write_container(outdir / name, sample_records(sample))
        except OSError as exc:
            raise OSError(f"cannot write {outdir / name}: {exc}") from exc
        entries.append(ManifestEntry(name, stratum_label(strata[s]), sample.lesion_diameter_voxels))
    write_manifest(outdir / MANIFEST, entries)
    return entries


def write_manifest(path, entries: Sequence[ManifestEntry]):
    lines = [f"{e.filename}\t{e.stratum}\t{e.diameter:.6g}\n" for e in entries]
    Path(path).write_text("".join(lines))


def read_manifest(path) -> List[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}", 0)
        entries.append(ManifestEntry(fields[0], fields[1], float(fields[2])))
    return entries


def load_dataset(directory) -> List[Tuple[ManifestEntry, VolumeSample]]:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    out = []
    for entry in read_manifest(manifest):
        rec = read_container(directory / entry.filename)
        sample = VolumeSample(rec["hr_image"], rec["hr_mask"], rec["lr_image"], entry.diameter, -1)
        out.append((entry, sample))
    return out
