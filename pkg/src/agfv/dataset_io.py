"""On-disk formats and the synthetic age-gap face generator.

Formats
-------
* Images: binary PGM (P5), 8-bit.
* Manifest: one JSON object per line with keys
  ``id, path, eye_l, eye_r, age``; paths are relative to the manifest.
* External scores: CSV with header ``pair_id,score``.
* Checkpoint: ``b"AGFV"`` + uint16 version, uint32 header length, a UTF-8
  JSON header, then every tensor as little-endian float64 in header order.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CheckpointError, ManifestError, ScoreFileError
from .network import ModelParams, NetworkConfig
from .preprocess import EyePair, RawImage
from .similarity import DISTANCE, Provider, table_provider
from .tensor import DTYPES

AGES = ("young", "old", "unknown")
MAGIC = b"AGFV"
FORMAT_VERSION = 1


# -- PGM -------------------------------------------------------------------


def write_pgm(path, pixels: np.ndarray) -> None:
    px = np.asarray(pixels)
    if px.dtype != np.uint8:
        px = np.clip(np.rint(np.asarray(px, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if px.ndim != 2:
        raise ValueError("PGM needs a single-channel image")
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(px).tobytes())


_PGM_TOKEN = re.compile(rb"(#[^\n]*\n)|(\s+)|([^\s#]+)")


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise ValueError(f"{path}: malformed PGM header")
        if m.group(3):
            tokens.append(m.group(3))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise ValueError(f"{path}: malformed PGM header")
    pos += 1
    w, h, maxval = (int(t) for t in tokens[1:4])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    body = data[pos : pos + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def load_image(path) -> RawImage:
    return RawImage(read_pgm(path), source_id=str(path))


# -- manifest --------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    eyes: EyePair
    age: str = "unknown"

    @property
    def image_key(self) -> str:
        return f"{self.id}/{Path(self.path).stem}"

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "path": self.path,
            "eye_l": [float(v) for v in self.eyes.left],
            "eye_r": [float(v) for v in self.eyes.right],
            "age": self.age,
        }


@dataclass
class Manifest:
    records: list[ManifestRecord] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def identities(self) -> list[str]:
        return list(dict.fromkeys(r.id for r in self.records))

    def by_identity(self) -> dict[str, list[ManifestRecord]]:
        out: dict[str, list[ManifestRecord]] = {}
        for r in self.records:
            out.setdefault(r.id, []).append(r)
        return out

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p


def _coord(obj, key: str, lineno: int) -> tuple[float, float]:
    if key not in obj:
        raise ManifestError(f"line {lineno}: missing field {key!r}")
    v = obj[key]
    if (
        not isinstance(v, list)
        or len(v) != 2
        or not all(isinstance(c, (int, float)) and not isinstance(c, bool) and math.isfinite(c) for c in v)
    ):
        raise ManifestError(f"line {lineno}: field {key!r} must be [x, y] numbers")
    return float(v[0]), float(v[1])


def parse_manifest(text: str, root: Path = Path(".")) -> Manifest:
    records = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise ManifestError(f"line {lineno}: expected a JSON object")
        for key in ("id", "path"):
            if key not in obj:
                raise ManifestError(f"line {lineno}: missing field {key!r}")
            if not isinstance(obj[key], str) or not obj[key]:
                raise ManifestError(f"line {lineno}: field {key!r} must be a non-empty string")
        left = _coord(obj, "eye_l", lineno)
        right = _coord(obj, "eye_r", lineno)
        age = obj.get("age", "unknown")
        if "age" not in obj:
            raise ManifestError(f"line {lineno}: missing field 'age'")
        if age not in AGES:
            raise ManifestError(f"line {lineno}: field 'age' must be one of {AGES}, got {age!r}")
        if obj["path"] in seen:
            raise ManifestError(f"line {lineno}: duplicate path {obj['path']!r} (first on line {seen[obj['path']]})")
        seen[obj["path"]] = lineno
        records.append(ManifestRecord(obj["id"], obj["path"], EyePair(left, right), age))
    return Manifest(records, root)


def load_manifest(path) -> Manifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), path.parent)


def dumps_manifest(records: Sequence[ManifestRecord]) -> str:
    return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records)


def save_manifest(path, records: Sequence[ManifestRecord]) -> None:
    Path(path).write_text(dumps_manifest(records), encoding="utf-8")


# -- external scores -------------------------------------------------------


def parse_scores(text: str, pair_ids: Sequence[str], source: str = "<scores>") -> dict[str, float]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["pair_id", "score"]:
        raise ScoreFileError(f"{source}: header must be 'pair_id,score'")
    wanted = set(pair_ids)
    table: dict[str, float] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 2:
            raise ScoreFileError(f"{source}: line {lineno}: expected 2 columns")
        pid, raw = row[0].strip(), row[1].strip()
        try:
            value = float(raw)
        except ValueError:
            raise ScoreFileError(f"{source}: line {lineno}: non-numeric score {raw!r} for pair {pid!r}") from None
        if not math.isfinite(value):
            raise ScoreFileError(f"{source}: line {lineno}: non-finite score for pair {pid!r}")
        if pid in table:
            raise ScoreFileError(f"{source}: line {lineno}: duplicate pair {pid!r}")
        table[pid] = value
    for pid in pair_ids:
        if pid not in table:
            raise ScoreFileError(f"{source}: missing pair {pid!r}")
    return {pid: table[pid] for pid in table if pid in wanted} if wanted else table


def load_external_scores(path, pair_ids: Sequence[str], orientation: str = DISTANCE) -> Provider:
    """Score file -> provider ``ext:<file stem>``."""
    path = Path(path)
    table = parse_scores(path.read_text(encoding="utf-8"), pair_ids, str(path))
    return table_provider(f"ext:{path.stem}", table, orientation)


def write_scores(path, scores: dict[str, float]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair_id", "score"])
        for pid, v in scores.items():
            w.writerow([pid, repr(float(v))])


# -- checkpoints -----------------------------------------------------------


@dataclass
class Checkpoint:
    network: NetworkConfig
    params: ModelParams
    seed: int = 0
    stats_mean: np.ndarray | None = None
    stats_std: np.ndarray | None = None
    tau: float | None = None
    meta: dict = field(default_factory=dict)


def _tensor_list(ck: Checkpoint, with_velocity: bool):
    items = list(ck.params.weights.items())
    if with_velocity:
        items += [(f"velocity:{k}", v) for k, v in ck.params.velocity.items()]
    if ck.stats_mean is not None:
        items += [("stats:mean", ck.stats_mean), ("stats:std", ck.stats_std)]
    return items


def dumps_checkpoint(ck: Checkpoint, with_velocity: bool = False) -> bytes:
    tensors = _tensor_list(ck, with_velocity and bool(ck.params.velocity))
    header = {
        "network": ck.network.to_dict(),
        "precision": ck.params.precision,
        "optimizer_state": with_velocity and bool(ck.params.velocity),
        "seed": int(ck.seed),
        "tau": ck.tau,
        "meta": ck.meta,
        "tensors": [{"name": k, "shape": list(np.shape(v))} for k, v in tensors],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(hbytes)), hbytes]
    for _, v in tensors:
        parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return b"".join(parts)


def loads_checkpoint(data: bytes, expect: NetworkConfig | None = None) -> Checkpoint:
    if len(data) < 10 or data[:4] != MAGIC:
        raise CheckpointError("bad magic: not an AGFV checkpoint")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} != supported {FORMAT_VERSION}")
    try:
        header = json.loads(data[10 : 10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("corrupt checkpoint header") from None
    pos = 10 + hlen
    dtype = DTYPES[header["precision"]]
    weights, velocity, stats = {}, {}, {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        nbytes = 8 * count
        if pos + nbytes > len(data):
            raise CheckpointError(f"truncated tensor {t['name']!r}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(t["shape"])
        pos += nbytes
        name = t["name"]
        if name.startswith("velocity:"):
            velocity[name[len("velocity:"):]] = arr.astype(dtype)
        elif name.startswith("stats:"):
            stats[name[len("stats:"):]] = arr.astype(np.float64)
        else:
            weights[name] = arr.astype(dtype)
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after last tensor")
    network = NetworkConfig.from_dict(header["network"])
    params = ModelParams(weights, velocity, header["precision"])
    params.check(network)
    if expect is not None:
        params.check(expect)
    return Checkpoint(
        network, params, header["seed"], stats.get("mean"), stats.get("std"), header["tau"], header["meta"]
    )


def save_checkpoint(ck: Checkpoint, path, with_velocity: bool = False) -> None:
    Path(path).write_bytes(dumps_checkpoint(ck, with_velocity))


def load_checkpoint(path, expect: NetworkConfig | None = None) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes(), expect)


# -- synthetic identities --------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Nuisance levels of the generator; the defaults are the benchmark's."""

    raw_side: int = 72
    half_eye_distance: float = 9.0
    pixel_noise: float = 0.1
    pose_rotation_deg: float = 12.0
    pose_scale: float = 0.1
    pose_shift: float = 3.0
    illumination: float = 0.25
    expression: float = 0.5


@dataclass
class SynthSample:
    record: ManifestRecord
    image: RawImage


def _identity_params(rng: np.random.Generator) -> dict:
    return {
        "skin": rng.uniform(0.45, 0.75),
        "bg": rng.uniform(0.1, 0.3),
        "face_cy": rng.uniform(0.5, 0.9),
        "face_rx": rng.uniform(1.75, 2.25),
        "face_ry": rng.uniform(2.3, 2.9),
        "eye_r": rng.uniform(0.22, 0.36),
        "eye_dark": rng.uniform(0.25, 0.5),
        "brow_y": rng.uniform(-0.75, -0.45),
        "brow_w": rng.uniform(0.35, 0.6),
        "brow_dark": rng.uniform(0.15, 0.4),
        "nose_y": rng.uniform(0.8, 1.2),
        "nose_len": rng.uniform(0.35, 0.7),
        "mouth_y": rng.uniform(1.7, 2.2),
        "mouth_w": rng.uniform(0.55, 1.0),
        "mouth_dark": rng.uniform(0.2, 0.4),
        "hairline": rng.uniform(-1.4, -0.8),
        "hair": rng.uniform(0.05, 0.35),
        "bumps": np.column_stack(
            [
                rng.uniform(-1.8, 1.8, 8),  # u
                rng.uniform(-1.2, 2.6, 8),  # v
                rng.uniform(0.25, 0.7, 8),  # width
                rng.uniform(-0.15, 0.15, 8),  # amplitude
            ]
        ),
    }


def _gauss(u, v, cu, cv, su, sv):
    return np.exp(-0.5 * (((u - cu) / su) ** 2 + ((v - cv) / sv) ** 2))


def _render_template(p: dict, u: np.ndarray, v: np.ndarray, mouth_scale: float = 1.0) -> np.ndarray:
    """Identity template evaluated at face-frame coordinates (eyes at (+-1, 0))."""
    r = ((u / p["face_rx"]) ** 2 + ((v - p["face_cy"]) / p["face_ry"]) ** 2) ** 0.5
    face = 1.0 / (1.0 + np.exp((r - 1.0) * 12.0))
    img = p["bg"] + (p["skin"] - p["bg"]) * face
    hair = face * 1.0 / (1.0 + np.exp((v - p["hairline"]) * 6.0))
    img = img + (p["hair"] - img) * hair
    for cu in (-1.0, 1.0):
        img -= p["eye_dark"] * _gauss(u, v, cu, 0.0, p["eye_r"] * 1.3, p["eye_r"])
        img -= p["brow_dark"] * _gauss(u, v, cu * 1.05, p["brow_y"], p["brow_w"], 0.1)
    img -= 0.12 * _gauss(u, v, 0.0, p["nose_y"], 0.15, p["nose_len"] / 2)
    img -= p["mouth_dark"] * _gauss(u, v, 0.0, p["mouth_y"], p["mouth_w"] * mouth_scale / 2, 0.12)
    for bu, bv, bw, ba in p["bumps"]:
        img += ba * face * _gauss(u, v, bu, bv, bw, bw)
    return img


def young_inverse_warp(u: np.ndarray, v: np.ndarray, gamma: float):
    """Map young-face coordinates to template coordinates.

    The lower face is shortened, the forehead grows, the eye span widens
    relative to the face and the eye regions are magnified; strength is
    proportional to ``gamma``.
    """
    if gamma == 0:
        return u, v
    vt = np.where(v > 0, v * (1.0 + 0.45 * gamma), v * (1.0 - 0.2 * gamma))
    ut = u * (1.0 - 0.12 * gamma)
    for cu in (-1.0, 1.0):
        eu = cu * (1.0 - 0.12 * gamma)
        bulge = 1.0 - 0.35 * gamma * _gauss(ut, vt, eu, 0.0, 0.35, 0.35)
        ut = eu + (ut - eu) * bulge
        vt = vt * bulge
    return ut, vt


def young_eye_positions(gamma: float) -> tuple[tuple[float, float], tuple[float, float]]:
    """Young-face coordinates that the warp sends onto the template eyes."""
    out = []
    for target in (-1.0, 1.0):
        p = np.array([target, 0.0])
        for _ in range(50):
            f = np.array(young_inverse_warp(np.array(p[0]), np.array(p[1]), gamma), dtype=np.float64) - [target, 0.0]
            if np.max(np.abs(f)) < 1e-12:
                break
            h = 1e-6
            J = np.empty((2, 2))
            for k in range(2):
                dp = p.copy()
                dp[k] += h
                J[:, k] = (np.array(young_inverse_warp(np.array(dp[0]), np.array(dp[1]), gamma)) - [target, 0.0] - f) / h
            p = p - np.linalg.solve(J, f)
        out.append((float(p[0]), float(p[1])))
    return out[0], out[1]


def render_face(
    ident: dict,
    gamma_eff: float,
    rng: np.random.Generator,
    cfg: SynthConfig,
) -> tuple[np.ndarray, EyePair]:
    """One raw 8-bit sample with random pose, lighting, expression and pixel noise."""
    side = cfg.raw_side
    theta = np.deg2rad(rng.uniform(-cfg.pose_rotation_deg, cfg.pose_rotation_deg))
    scale = cfg.half_eye_distance * (1.0 + rng.uniform(-cfg.pose_scale, cfg.pose_scale))
    centre = complex(side / 2 - 0.5, side * 0.42) + complex(*rng.uniform(-cfg.pose_shift, cfg.pose_shift, 2))
    a = scale * np.exp(1j * theta)
    mouth = 1.0 + rng.uniform(-cfg.expression, cfg.expression)
    light = rng.uniform(-cfg.illumination, cfg.illumination, 3)

    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    q = (xs + 1j * ys - centre) / a
    u, v = young_inverse_warp(q.real, q.imag, gamma_eff)
    img = _render_template(ident, u, v, mouth)
    img = img + light[0] + light[1] * (xs / side - 0.5) + light[2] * (ys / side - 0.5)
    img = img + rng.normal(0.0, cfg.pixel_noise, img.shape)
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)

    (lu, lv), (ru, rv) = young_eye_positions(gamma_eff)
    zl = a * complex(lu, lv) + centre
    zr = a * complex(ru, rv) + centre
    return pixels, EyePair((zl.real, zl.imag), (zr.real, zr.imag))


def synth_generate(
    n_identities: int,
    images_per_identity: int,
    gamma: float,
    rng: np.random.Generator,
    cfg: SynthConfig = SynthConfig(),
    prefix: str = "s",
) -> list[SynthSample]:
    """Synthetic age-gap identities: first half of each identity 'young', rest 'old'.

    Young samples are the template warped with strength ``gamma``; old
    samples are the unwarped template.  Every sample also gets its own
    pose, lighting, expression and pixel noise.
    """
    if n_identities < 1 or images_per_identity < 1:
        raise ValueError("need at least one identity and one image per identity")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    samples = []
    n_young = images_per_identity // 2
    for i in range(n_identities):
        ident_rng = rng.spawn(1)[0]
        ident = _identity_params(ident_rng)
        name = f"{prefix}{i:04d}"
        for j in range(images_per_identity):
            age = "young" if j < n_young else "old"
            pixels, eyes = render_face(ident, gamma if age == "young" else 0.0, ident_rng, cfg)
            rel = f"{name}/{j:02d}.pgm"
            rec = ManifestRecord(name, rel, eyes, age)
            samples.append(SynthSample(rec, RawImage(pixels, source_id=rec.image_key)))
    return samples


def write_dataset(out_dir, samples: Sequence[SynthSample]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        p = out / s.record.path
        p.parent.mkdir(parents=True, exist_ok=True)
        write_pgm(p, s.image.pixels)
    manifest = out / "manifest.jsonl"
    save_manifest(manifest, [s.record for s in samples])
    return manifest


def load_images(manifest: Manifest) -> list[RawImage]:
    images = []
    for rec in manifest:
        path = manifest.resolve(rec)
        try:
            px = read_pgm(path)
        except (OSError, ValueError) as exc:
            raise ManifestError(f"cannot read image for {rec.image_key}: {exc}") from None
        images.append(RawImage(px, source_id=rec.image_key))
    return images


def tree_digest(root) -> str:
    """sha256 over relative paths and file bytes, in sorted order."""
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(b"\0")
            h.update(p.read_bytes())
    return h.hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ManifestError(f"cannot create output directory {p}: {exc}") from None
    if not os.access(p, os.W_OK):
        raise ManifestError(f"output directory {p} is not writable")
    return p
