"""On-disk formats: PGM/PPM frames, sequence directories, JSON Lines, and
atomic (write-to-temp, rename-on-success) file output."""
import contextlib
import json
import os
import re
import tempfile

import numpy as np

from . import __version__
from .boxes import Box
from .synth import GroundTruth

FRAME_RE = re.compile(r"^(\d{6})\.p[gp]m$")


class PnmError(ValueError):
    pass


class SequenceError(ValueError):
    pass


def output_meta(config_hash, seed, convention):
    """Self-description embedded in every output file."""
    return {"tool": "flowtrack", "version": __version__, "config_hash": config_hash,
            "seed": int(seed), "convention": str(convention)}


@contextlib.contextmanager
def atomic_open(path, mode="w"):
    """Yield a temp file next to ``path``; it replaces ``path`` only if the
    block finishes without raising."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    with atomic_open(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def dumps_line(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_jsonl(path, records, header=None):
    with atomic_open(path) as fh:
        if header is not None:
            fh.write(dumps_line({"header": header}) + "\n")
        for r in records:
            fh.write(dumps_line(r) + "\n")


def read_jsonl(path):
    """Returns (header or None, records)."""
    header, out = None, []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise SequenceError(f"{path}:{n}: invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise SequenceError(f"{path}:{n}: expected an object")
            if n == 1 and "header" in rec:
                header = rec["header"]
            else:
                out.append(rec)
    return header, out


# -- PGM / PPM -----------------------------------------------------------------

def encode_pnm(img, comment=None):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise PnmError(f"only 8-bit images can be written, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise PnmError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    head = magic + b"\n"
    if comment:
        head += b"# " + comment.replace("\n", " ").encode() + b"\n"
    head += f"{w} {h}\n255\n".encode()
    return head + np.ascontiguousarray(img).tobytes()


def write_pnm(path, img, comment=None):
    with atomic_open(path, "wb") as fh:
        fh.write(encode_pnm(img, comment))


def _tokens(data, count):
    """First ``count`` whitespace-separated header tokens (comments skipped) and the offset after them."""
    toks, i, n = [], 0, len(data)
    while len(toks) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i >= n:
            raise PnmError("truncated header")
        if data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        toks.append(data[i:j])
        i = j
    if i >= n or not data[i:i + 1].isspace():
        raise PnmError("missing whitespace after header")
    return toks, i + 1


def decode_pnm(data):
    """Decode P5 (gray) or P6 (RGB → luminance) to a uint8 (H, W) array."""
    toks, off = _tokens(data, 4)
    magic = toks[0]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported magic {magic!r}; expected P5 or P6")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError:
        raise PnmError("non-numeric header field") from None
    if w <= 0 or h <= 0 or not 0 < maxval <= 255:
        raise PnmError(f"bad header: {w}x{h}, maxval {maxval} (8-bit only)")
    ch = 1 if magic == b"P5" else 3
    need = w * h * ch
    body = data[off:off + need]
    if len(body) != need:
        raise PnmError(f"truncated pixel data: {len(body)} of {need} bytes")
    img = np.frombuffer(body, dtype=np.uint8).reshape((h, w) if ch == 1 else (h, w, 3))
    if maxval != 255:
        img = np.rint(img.astype(np.float64) * 255.0 / maxval).clip(0, 255).astype(np.uint8)
    if ch == 3:
        img = np.rint(img.astype(np.float64) @ np.array([0.299, 0.587, 0.114])).clip(0, 255).astype(np.uint8)
    return img.copy()


def read_pnm(path):
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


# -- sequences -------------------------------------------------------------------

def gt_record(k, g):
    return {"frame": k, "x": g.box.x, "y": g.box.y, "w": g.box.w, "h": g.box.h, "occluded": bool(g.occluded)}


def parse_gt_record(rec, where="gt"):
    try:
        return int(rec["frame"]), GroundTruth(Box(float(rec["x"]), float(rec["y"]), float(rec["w"]), float(rec["h"])),
                                              bool(rec.get("occluded", False)))
    except (KeyError, TypeError, ValueError) as e:
        raise SequenceError(f"{where}: malformed ground-truth record ({e!r})") from None


def write_sequence(out_dir, frames, gt, meta):
    """Frames as 000000.pgm.., gt.jsonl (one line per frame), meta.json."""
    os.makedirs(out_dir, exist_ok=True)
    comment = " ".join(f"{k}={meta[k]}" for k in sorted(meta))
    for k, f in enumerate(frames):
        write_pnm(os.path.join(out_dir, f"{k:06d}.pgm"), f, comment)
    write_jsonl(os.path.join(out_dir, "gt.jsonl"), [gt_record(k, g) for k, g in enumerate(gt)])
    write_json(os.path.join(out_dir, "meta.json"), {**meta, "frames": len(frames)})


def list_frames(seq_dir):
    if not os.path.isdir(seq_dir):
        raise SequenceError(f"{seq_dir}: not a directory")
    found = sorted((int(m.group(1)), name) for name in os.listdir(seq_dir) if (m := FRAME_RE.match(name)))
    if not found:
        raise SequenceError(f"{seq_dir}: no frames found")
    for expect, (k, name) in enumerate(found):
        if k != expect:
            raise SequenceError(f"{seq_dir}: frame numbering not contiguous (expected {expect:06d}, found {name})")
    return [os.path.join(seq_dir, name) for _, name in found]


def read_gt(path):
    _, recs = read_jsonl(path)
    out = []
    for n, rec in enumerate(recs):
        k, g = parse_gt_record(rec, f"{path}:{n + 1}")
        if k != n:
            raise SequenceError(f"{path}: ground-truth frame {k} out of order (expected {n})")
        out.append(g)
    return out


def read_sequence(seq_dir, with_gt=True):
    """Returns (frames, gt); gt is [] when the directory has no gt.jsonl."""
    frames = [read_pnm(p) for p in list_frames(seq_dir)]
    gt = []
    gt_path = os.path.join(seq_dir, "gt.jsonl")
    if with_gt and os.path.exists(gt_path):
        gt = read_gt(gt_path)
        if len(gt) > len(frames):
            raise SequenceError(f"{seq_dir}: {len(gt)} gt lines but only {len(frames)} frames")
    return frames, gt
