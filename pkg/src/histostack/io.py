"""File formats: a raw NRRD subset, binary PGM, JSON manifests and run configs.

NRRD files list axes fastest first, so a ``(z, y, x)`` array is written with
``sizes: nx ny nz`` and diagonal ``space directions`` in the same x, y, z
order. Only raw little-endian data with a diagonal frame is accepted; any
other field or value is refused with the offending line number.
"""

from __future__ import annotations

import dataclasses
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatchError,
    ManifestError,
    MissingFileError,
    NonIncreasingZError,
    ParseError,
)
from .grid import INTENSITY, LABEL, Section, SectionStack, Volume
from .joint import JointConfig
from .kernel import Diffeomorphism
from .preprocess import MaskParams
from .simulate import SimConfig

NRRD_MAGIC = "NRRD0004"
NRRD_TYPES = {
    "uint8": np.dtype("<u1"),
    "uint16": np.dtype("<u2"),
    "float": np.dtype("<f4"),
    "double": np.dtype("<f8"),
}
_TYPE_ALIASES = {
    "uchar": "uint8", "unsigned char": "uint8", "uint8_t": "uint8",
    "ushort": "uint16", "unsigned short": "uint16", "uint16_t": "uint16",
    "float32": "float", "float64": "double",
}
_KIND_KEY = "histostack_kind"
_KNOWN_FIELDS = {
    "type", "dimension", "sizes", "space dimension", "space directions", "space origin",
    "encoding", "endian", "data file", "datafile", "kinds", "space",
}


# ---------------------------------------------------------------------------
# NRRD


def _nrrd_type_name(dtype: np.dtype) -> str:
    for name, dt in NRRD_TYPES.items():
        if np.dtype(dtype).newbyteorder("<") == dt:
            return name
    raise DimensionMismatchError(f"unsupported sample type {dtype} (uint8, uint16, float32, float64)")


def _fmt_float(x: float) -> str:
    return repr(float(x))


def _vector(text: str, n: int, line: int, path) -> list[float]:
    text = text.strip()
    if not (text.startswith("(") and text.endswith(")")):
        raise ParseError(f"expected a parenthesised vector, got {text!r}", line, path)
    try:
        vals = [float(t) for t in text[1:-1].split(",")]
    except ValueError:
        raise ParseError(f"bad vector {text!r}", line, path) from None
    if len(vals) != n:
        raise ParseError(f"vector {text!r} needs {n} entries", line, path)
    return vals


def _parse_header(lines, path):
    """Parse header lines into (fields, key/values, data offset line count)."""
    if not lines or lines[0].strip() not in ("NRRD0001", "NRRD0002", "NRRD0003", "NRRD0004", "NRRD0005"):
        raise ParseError("missing NRRD magic line", 1, path)
    fields, keyvals, lineno = {}, {}, {}
    for i, raw in enumerate(lines[1:], start=2):
        line = raw.rstrip("\r\n")
        if line == "":
            break
        if line.startswith("#"):
            continue
        if ":=" in line:
            k, v = line.split(":=", 1)
            keyvals[k] = v
            continue
        if ": " not in line:
            raise ParseError(f"malformed header line {line!r}", i, path)
        k, v = line.split(": ", 1)
        k = k.strip().lower()
        if k not in _KNOWN_FIELDS:
            raise ParseError(f"unsupported field {k!r}", i, path)
        if k in fields:
            raise ParseError(f"duplicate field {k!r}", i, path)
        fields[k] = v.strip()
        lineno[k] = i
    return fields, keyvals, lineno


def _interpret_header(fields, lineno, path, ndim_allowed):
    def need(k):
        if k not in fields:
            raise ParseError(f"required field {k!r} missing", None, path)
        return fields[k]

    tname = need("type").lower()
    tname = _TYPE_ALIASES.get(tname, tname)
    if tname not in NRRD_TYPES:
        raise ParseError(f"unsupported type {fields['type']!r}", lineno["type"], path)
    dtype = NRRD_TYPES[tname]
    try:
        ndim = int(need("dimension"))
    except ValueError:
        raise ParseError("dimension must be an integer", lineno["dimension"], path) from None
    if ndim not in ndim_allowed:
        raise ParseError(f"unsupported dimension {ndim}", lineno["dimension"], path)
    try:
        sizes = [int(t) for t in need("sizes").split()]
    except ValueError:
        raise ParseError("sizes must be integers", lineno["sizes"], path) from None
    if len(sizes) != ndim or min(sizes) < 1:
        raise ParseError(f"sizes {sizes} do not match dimension {ndim}", lineno["sizes"], path)
    enc = need("encoding").lower()
    if enc != "raw":
        raise ParseError(f"unsupported encoding {enc!r} (only raw)", lineno["encoding"], path)
    if dtype.itemsize > 1:
        endian = need("endian").lower()
        if endian != "little":
            raise ParseError(f"unsupported endian {endian!r} (only little)", lineno["endian"], path)
    elif "endian" in fields and fields["endian"].lower() not in ("little", "big"):
        raise ParseError(f"bad endian {fields['endian']!r}", lineno["endian"], path)
    if "space dimension" in fields and int(fields["space dimension"]) != ndim:
        raise ParseError("space dimension must equal dimension", lineno["space dimension"], path)
    if "space" in fields:
        raise ParseError("named spaces are not supported; use 'space dimension'", lineno["space"], path)
    if "kinds" in fields:
        kinds = fields["kinds"].split()
        if len(kinds) != ndim or any(k.lower() not in ("domain", "space") for k in kinds):
            raise ParseError(f"unsupported kinds {fields['kinds']!r}", lineno["kinds"], path)

    spacing = [1.0] * ndim
    if "space directions" in fields:
        ln = lineno["space directions"]
        text = fields["space directions"]
        vecs, depth, start = [], 0, 0
        for j, ch in enumerate(text):
            if ch == "(":
                depth, start = depth + 1, j
            elif ch == ")":
                depth -= 1
                vecs.append(_vector(text[start:j + 1], ndim, ln, path))
        if len(vecs) != ndim:
            raise ParseError("space directions needs one vector per axis", ln, path)
        for a, vec in enumerate(vecs):
            off = [abs(x) for b, x in enumerate(vec) if b != a]
            if any(off) or vec[a] <= 0:
                raise ParseError("space directions must be diagonal and positive", ln, path)
            spacing[a] = vec[a]
    origin = [0.0] * ndim
    if "space origin" in fields:
        origin = _vector(fields["space origin"], ndim, lineno["space origin"], path)
    # reverse to (z, y, x) order
    return dtype, sizes[::-1], tuple(spacing[::-1]), tuple(origin[::-1])


def read_nrrd(path, ndim_allowed=(2, 3)):
    """Read an NRRD subset file; returns ``(array, spacing, origin, keyvals)``."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    blob = path.read_bytes()
    # header ends at the first blank line (attached) or end of file (detached)
    end = blob.find(b"\n\n")
    head = blob if end < 0 else blob[: end + 1]
    try:
        text = head.decode("ascii")
    except UnicodeDecodeError:
        raise ParseError("header is not ASCII", None, path) from None
    lines = text.split("\n")
    fields, keyvals, lineno = _parse_header(lines, path)
    dtype, shape, spacing, origin = _interpret_header(fields, lineno, path, ndim_allowed)
    datafile = fields.get("data file", fields.get("datafile"))
    count = int(np.prod(shape))
    if datafile is not None:
        dpath = path.parent / datafile
        if not dpath.exists():
            raise MissingFileError(f"data file {dpath} referenced by {path} does not exist")
        payload = dpath.read_bytes()
    else:
        if end < 0:
            raise ParseError("attached header is not followed by data", None, path)
        payload = blob[end + 2:]
    if len(payload) != count * dtype.itemsize:
        raise ParseError(
            f"expected {count * dtype.itemsize} data bytes, found {len(payload)}", None, path)
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return arr, spacing, origin, keyvals


def write_nrrd(path, data: np.ndarray, spacing, origin=None, keyvals=None, detached=None):
    """Write ``data`` (C order, slowest axis first) as raw little-endian NRRD.

    A ``.nhdr`` path writes a detached header next to a ``.raw`` payload.
    """
    path = Path(path)
    data = np.asarray(data)
    tname = _nrrd_type_name(data.dtype)
    ndim = data.ndim
    origin = tuple(origin) if origin is not None else (0.0,) * ndim
    if detached is None:
        detached = path.suffix == ".nhdr"
    sp = list(spacing)[::-1]
    dirs = " ".join(
        "(" + ",".join(_fmt_float(sp[a] if b == a else 0.0) for b in range(ndim)) + ")"
        for a in range(ndim))
    lines = [
        NRRD_MAGIC,
        f"type: {tname}",
        f"dimension: {ndim}",
        f"space dimension: {ndim}",
        "sizes: " + " ".join(str(s) for s in data.shape[::-1]),
        f"space directions: {dirs}",
        "space origin: (" + ",".join(_fmt_float(o) for o in origin[::-1]) + ")",
        "endian: little",
        "encoding: raw",
    ]
    for k, v in (keyvals or {}).items():
        lines.append(f"{k}:={v}")
    payload = np.ascontiguousarray(data).astype(NRRD_TYPES[tname], copy=False).tobytes()
    if detached:
        raw = path.with_suffix(".raw")
        lines.append(f"data file: {raw.name}")
        path.write_text("\n".join(lines) + "\n")
        raw.write_bytes(payload)
    else:
        path.write_bytes(("\n".join(lines) + "\n\n").encode("ascii") + payload)
    return path


def read_volume(path) -> Volume:
    arr, spacing, origin, kv = read_nrrd(path, ndim_allowed=(3,))
    kind = kv.get(_KIND_KEY, INTENSITY)
    if kind not in (INTENSITY, LABEL):
        raise ParseError(f"unknown volume kind {kind!r}", None, path)
    return Volume(arr, spacing, origin, kind)


def write_volume(path, v: Volume):
    data = v.data
    if v.kind == LABEL and data.dtype == bool:
        data = data.astype(np.uint8)
    return write_nrrd(path, data, v.spacing, v.origin, {_KIND_KEY: v.kind})


# ---------------------------------------------------------------------------
# PGM


def read_pgm(path) -> np.ndarray:
    """Binary (P5) PGM as floats scaled by maxval into [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    blob = path.read_bytes()
    tokens, pos, line = [], 0, 1
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            line += blob[pos:pos + 1] == b"\n"
            pos += 1
        if pos >= len(blob):
            raise ParseError("truncated PGM header", line, path)
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos].decode("ascii", "replace"))
    if tokens[0] != "P5":
        raise ParseError(f"unsupported PGM magic {tokens[0]!r} (only P5)", 1, path)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError("PGM width, height and maxval must be integers", line, path) from None
    if not 0 < maxval < 65536 or w < 1 or h < 1:
        raise ParseError(f"bad PGM geometry {w}x{h} maxval {maxval}", line, path)
    pos += 1  # single whitespace after maxval
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    payload = blob[pos:]
    if len(payload) != w * h * dtype.itemsize:
        raise ParseError(f"expected {w * h * dtype.itemsize} data bytes, found {len(payload)}", None, path)
    return np.frombuffer(payload, dtype=dtype).reshape(h, w).astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray, bits: int = 8):
    """Quantise an image in [0, 1] to an 8 or 16 bit binary PGM."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    maxval = 255 if bits == 8 else 65535
    img = np.asarray(image, dtype=np.float64)
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    data = q.astype("u1" if bits == 8 else ">u2")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + data.tobytes())
    return Path(path)


def _read_image(path) -> tuple[np.ndarray, tuple | None]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"section image {path} does not exist")
    if path.suffix.lower() == ".pgm":
        return read_pgm(path), None
    arr, spacing, _, _ = read_nrrd(path, ndim_allowed=(2,))
    return arr.astype(np.float64), spacing


# ---------------------------------------------------------------------------
# stack manifests


def read_stack(manifest) -> SectionStack:
    """Load a section stack from a JSON manifest.

    The manifest holds ``section_spacing`` (mm), optional ``pixel_spacing``
    ``[sy, sx]`` and a ``sections`` list of ``{"file", "z", "alpha", "mask"}``
    entries with paths relative to the manifest. ``alpha`` defaults to 1.
    """
    manifest = Path(manifest)
    if not manifest.exists():
        raise MissingFileError(f"no such manifest: {manifest}")
    try:
        doc = json.loads(manifest.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", e.lineno, manifest) from None
    allowed = {"version", "section_spacing", "pixel_spacing", "sections"}
    unknown = set(doc) - allowed
    if unknown:
        raise ManifestError(f"unknown manifest keys {sorted(unknown)}")
    entries = doc.get("sections")
    if not entries:
        raise ManifestError("manifest lists no sections")
    if "section_spacing" not in doc:
        raise ManifestError("manifest needs section_spacing")
    pixel = doc.get("pixel_spacing")
    sections, zs, dims = [], [], None
    for i, e in enumerate(entries):
        bad = set(e) - {"file", "z", "alpha", "mask"}
        if bad:
            raise ManifestError(f"section {i}: unknown keys {sorted(bad)}")
        if "file" not in e or "z" not in e:
            raise ManifestError(f"section {i}: 'file' and 'z' are required")
        img, sp = _read_image(manifest.parent / e["file"])
        if dims is None:
            dims = img.shape
        elif img.shape != dims:
            raise DimensionMismatchError(f"section {i} has dims {img.shape}, expected {dims}")
        if pixel is None:
            pixel = list(sp) if sp is not None else [1.0, 1.0]
        elif sp is not None and not np.allclose(sp, pixel, rtol=1e-12, atol=0):
            raise DimensionMismatchError(f"section {i} pixel spacing {sp} differs from manifest {pixel}")
        mask = None
        if e.get("mask") is not None:
            mask, _ = _read_image(manifest.parent / e["mask"])
            if mask.shape != dims:
                raise DimensionMismatchError(f"mask of section {i} has dims {mask.shape}, expected {dims}")
            mask = mask != 0
        z = float(e["z"])
        if zs and not z > zs[-1]:
            raise NonIncreasingZError(i, f"section {i}: z = {z} does not exceed previous {zs[-1]}")
        zs.append(z)
        sections.append(Section(img, tuple(pixel), mask, float(e.get("alpha", 1.0))))
    return SectionStack(sections, np.array(zs), float(doc["section_spacing"]))


def write_stack(directory, stack: SectionStack, name: str = "stack.json") -> Path:
    """Write sections as 2D NRRD files plus a JSON manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(stack.sections):
        fname = f"section_{i:04d}.nrrd"
        write_nrrd(directory / fname, s.data, s.spacing)
        entry = {"file": fname, "z": float(stack.z_positions[i]), "alpha": s.weight}
        if s.mask is not None:
            mname = f"mask_{i:04d}.nrrd"
            write_nrrd(directory / mname, s.mask.astype(np.uint8), s.spacing)
            entry["mask"] = mname
        entries.append(entry)
    doc = {
        "version": 1,
        "section_spacing": stack.delta,
        "pixel_spacing": list(stack.spacing),
        "sections": entries,
    }
    out = directory / name
    out.write_text(json.dumps(doc, indent=2) + "\n")
    return out


# ---------------------------------------------------------------------------
# deformations


def write_diffeomorphism(directory, phi: Diffeomorphism, prefix: str = "phi") -> list[Path]:
    """Write forward and inverse displacement components as 3D NRRD files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for name, disp in (("forward", phi.forward_disp), ("inverse", phi.inverse_disp)):
        for c, axis in enumerate("zyx"):
            p = directory / f"{prefix}_{name}_{axis}.nrrd"
            write_nrrd(p, np.asarray(disp[c], dtype=np.float64), phi.spacing)
            out.append(p)
    return out


def read_diffeomorphism(directory, prefix: str = "phi") -> Diffeomorphism:
    directory = Path(directory)
    parts, spacing = {}, None
    for name in ("forward", "inverse"):
        comps = []
        for axis in "zyx":
            arr, sp, _, _ = read_nrrd(directory / f"{prefix}_{name}_{axis}.nrrd", ndim_allowed=(3,))
            spacing = spacing or sp
            comps.append(arr.astype(np.float64))
        parts[name] = np.stack(comps)
    return Diffeomorphism(parts["forward"], parts["inverse"], tuple(spacing))


# ---------------------------------------------------------------------------
# run configuration

SCHEMA_VERSION = 1
_RUNTIME_ONLY = {"channels", "cost_mask"}


def config_to_dict(obj) -> dict:
    """Dataclass to plain JSON-ready dict, skipping runtime-only fields."""
    out = {}
    for f in dataclasses.fields(obj):
        if f.name in _RUNTIME_ONLY:
            continue
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = config_to_dict(v)
        elif isinstance(v, np.ndarray):
            v = v.tolist()
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def config_from_dict(cls, d: dict, where: str = ""):
    """Build dataclass ``cls`` from ``d``, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ConfigError(f"{where or cls.__name__}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)} - _RUNTIME_ONLY
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        v, hint = d[f.name], hints.get(f.name)
        path = f"{where}.{f.name}" if where else f.name
        if isinstance(hint, type) and dataclasses.is_dataclass(hint):
            v = config_from_dict(hint, v, path)
        elif isinstance(v, list):
            v = np.asarray(v, dtype=np.float64) if f.name == "alpha" else tuple(v)
        kwargs[f.name] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or cls.__name__}: {e}") from None


@dataclass
class RunConfig:
    """Everything needed to reproduce a run: solver settings, simulation, masking and paths."""

    joint: JointConfig = field(default_factory=JointConfig)
    simulate: SimConfig = field(default_factory=SimConfig)
    mask: MaskParams = field(default_factory=MaskParams)
    paths: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "joint": config_to_dict(self.joint),
            "simulate": config_to_dict(self.simulate),
            "mask": config_to_dict(self.mask),
            "paths": dict(self.paths),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - {"schema_version", "joint", "simulate", "mask", "paths"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
        paths = d.get("paths", {})
        if not isinstance(paths, dict) or not all(isinstance(v, str) for v in paths.values()):
            raise ConfigError("paths must map names to strings")
        return cls(
            joint=config_from_dict(JointConfig, d.get("joint", {}), "joint"),
            simulate=config_from_dict(SimConfig, d.get("simulate", {}), "simulate"),
            mask=config_from_dict(MaskParams, d.get("mask", {}), "mask"),
            paths=dict(paths),
        )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such config: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", e.lineno, path) from None
    return RunConfig.from_dict(doc)


def dump_json(path, doc) -> Path:
    """Stable JSON: sorted keys, fixed indentation, non-finite numbers as strings."""

    def clean(x):
        if isinstance(x, dict):
            return {str(k): clean(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        if isinstance(x, np.ndarray):
            return clean(x.tolist())
        if isinstance(x, (np.floating, float)):
            x = float(x)
            return x if math.isfinite(x) else repr(x)
        if isinstance(x, np.integer):
            return int(x)
        return x

    path = Path(path)
    path.write_text(json.dumps(clean(doc), indent=2, sort_keys=True) + "\n")
    return path
