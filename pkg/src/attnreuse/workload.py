"""Synthetic decode traces with controllable query redundancy, plus trace file I/O.

A trace holds pre-rotation queries/keys and values for every (token, layer,
head).  Fresh queries put equal energy in every rotation plane with an
independent uniform phase: components (sqrt(2) cos t_j, sqrt(2) sin t_j)
per adjacent pair.  That keeps E[q_i^2] = 1 and pairwise distances between
unrelated queries concentrated at sqrt(2 d), like a standard Gaussian, but
pins the norm at exactly sqrt(d) and makes positional drift the same
deterministic profile for every query: no chain is accidentally immune to
rotation because its founder happened to load the slow planes.

The generator plants repeats: with probability rep_prob a step's query is
a recent query (drawn uniformly from [m - rep_gap_max, m - rep_gap_min])
plus noise_eps * fresh Gaussian noise, re-projected onto the sqrt(d)
sphere.  The re-projection keeps repeat chains from drifting in scale and
doubles as a forgetting mechanism: chain members decorrelate as
(1 + noise_eps^2)^(-k/2) over k generations, so a query aligns with its
recent ancestry, not with the chain's whole history.

Keys correlate with their own position's query (the group's leading head)
and carry a gain: k = key_gain * (key_corr * q + sqrt(1 - key_corr^2) * n)
with the noise n projected orthogonal to q, so a token's key aligns with
its own query at exactly key_corr.  The gain sharpens logits so that
softmax mass concentrates on the few recent tokens whose queries align
with the current one, mimicking the recency-heavy attention of trained
models.  At gain 1 the background of L unaligned tokens (total weight
~ L * e^(1/2)) swamps the best aligned logit (key_corr * sqrt(d), about
6.4 at d = 64), capping band mass around 0.9 no matter the other knobs;
the default gain makes the aligned logits clear that bar, and the sphere
normalization plus orthogonal noise pin the anchor logit so no step's
attention degenerates back into the background.  Queries keep unit
per-component variance, so match distances and the tau threshold keep
their calibration.

On disk a trace is a directory: manifest.json plus three raw little-endian
float32 blobs laid out [token][layer][head][dim].
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

TRACE_VERSION = 1
TRACE_DTYPE = "float32le"


class TraceError(Exception):
    """Raised when a trace directory is missing, malformed, or truncated."""


@dataclass(frozen=True)
class SyntheticSpec:
    seq_len: int
    d: int = 64
    d_v: int = 64
    n_layers: int = 1
    n_q_heads: int = 1
    n_kv_heads: int = 1
    rep_prob: float = 0.9
    noise_eps: float = 0.1
    rep_gap_max: int = 512
    rep_gap_min: int = 1
    key_corr: float = 0.8
    key_gain: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.d < 2 or self.d % 2:
            raise ValueError("d must be even and >= 2 (rotation planes)")
        if self.d_v < 1:
            raise ValueError("d_v must be >= 1")
        if self.n_layers < 1 or self.n_q_heads < 1 or self.n_kv_heads < 1:
            raise ValueError("layer and head counts must be >= 1")
        if self.n_q_heads % self.n_kv_heads:
            raise ValueError("n_q_heads must be a multiple of n_kv_heads")
        if not 0.0 <= self.rep_prob <= 1.0:
            raise ValueError("rep_prob must lie in [0, 1]")
        if self.noise_eps < 0:
            raise ValueError("noise_eps must be >= 0")
        if self.rep_gap_max < 1 or self.rep_gap_min < 1:
            raise ValueError("rep_gap_max and rep_gap_min must be >= 1")
        if not 0.0 <= self.key_corr <= 1.0:
            raise ValueError("key_corr must lie in [0, 1]")
        if self.key_gain <= 0:
            raise ValueError("key_gain must be > 0")


# knob bundles for the CLI; dimensions still come from the caller
PRESETS: dict[str, dict] = {
    "redundant": dict(rep_prob=0.9, noise_eps=0.1, rep_gap_max=512, rep_gap_min=1, key_corr=0.8),
    "independent": dict(rep_prob=0.0, noise_eps=0.0, rep_gap_max=512, rep_gap_min=1, key_corr=0.0),
    "gapped": dict(rep_prob=0.9, noise_eps=0.1, rep_gap_max=512, rep_gap_min=256, key_corr=0.8),
}
PRESETS["default"] = PRESETS["redundant"]


@dataclass
class Trace:
    q_pre: np.ndarray  # (L, n_layers, n_q_heads, d) float32
    k_pre: np.ndarray  # (L, n_layers, n_kv_heads, d) float32
    v: np.ndarray  # (L, n_layers, n_kv_heads, d_v) float32

    def __post_init__(self):
        if self.q_pre.ndim != 4 or self.k_pre.ndim != 4 or self.v.ndim != 4:
            raise ValueError("trace arrays must be 4-d: (token, layer, head, dim)")
        L, nl = self.q_pre.shape[:2]
        if self.k_pre.shape[:2] != (L, nl) or self.v.shape[:2] != (L, nl):
            raise ValueError("trace arrays disagree on (token, layer) extents")
        if self.k_pre.shape[2] != self.v.shape[2]:
            raise ValueError("k_pre and v disagree on the kv head count")
        if self.n_q_heads % self.n_kv_heads:
            raise ValueError("n_q_heads must be a multiple of n_kv_heads")
        if self.k_pre.shape[3] != self.d:
            raise ValueError("q_pre and k_pre disagree on the head dim")

    @property
    def seq_len(self) -> int:
        return self.q_pre.shape[0]

    @property
    def n_layers(self) -> int:
        return self.q_pre.shape[1]

    @property
    def n_q_heads(self) -> int:
        return self.q_pre.shape[2]

    @property
    def n_kv_heads(self) -> int:
        return self.k_pre.shape[2]

    @property
    def d(self) -> int:
        return self.q_pre.shape[3]

    @property
    def d_v(self) -> int:
        return self.v.shape[3]


def gen_synthetic(spec: SyntheticSpec, seed: int | None = None) -> Trace:
    """Draw a trace from a SyntheticSpec; identical (spec, seed) always yields identical bytes.

    `seed` overrides spec.seed when given, so one SyntheticSpec can fan out
    across seeds without rebuilding it.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    L, nl, hq, hkv = spec.seq_len, spec.n_layers, spec.n_q_heads, spec.n_kv_heads
    phase = rng.uniform(0.0, 2.0 * math.pi, (L, nl, hq, spec.d // 2))
    fresh = np.empty((L, nl, hq, spec.d))
    fresh[..., 0::2] = math.sqrt(2.0) * np.cos(phase)
    fresh[..., 1::2] = math.sqrt(2.0) * np.sin(phase)
    noise = rng.standard_normal((L, nl, hq, spec.d))
    rep_flag = rng.random((L, nl, hq)) < spec.rep_prob
    rep_u = rng.random((L, nl, hq))
    key_noise = rng.standard_normal((L, nl, hkv, spec.d))
    v = rng.standard_normal((L, nl, hkv, spec.d_v))

    def sphere(rows):
        # rows -> length sqrt(d); rng never yields a zero vector at these dims
        return rows * (math.sqrt(spec.d) / np.linalg.norm(rows, axis=-1, keepdims=True))

    q = np.empty_like(fresh)
    lidx, hidx = np.indices((nl, hq))
    for m in range(1, L + 1):
        lo = max(1, m - spec.rep_gap_max)
        hi = m - spec.rep_gap_min
        row = sphere(fresh[m - 1])
        if hi >= lo:
            flags = rep_flag[m - 1]
            if flags.any():
                p = lo + np.minimum((rep_u[m - 1] * (hi - lo + 1)).astype(np.int64), hi - lo)
                src = q[p - 1, lidx, hidx]
                # re-projection keeps chains on the sphere and forgets ancestors
                rep = sphere(src + spec.noise_eps * noise[m - 1])
                row = np.where(flags[..., None], rep, row)
        q[m - 1] = row

    group = hq // hkv
    a = spec.key_corr
    lead = q[:, :, ::group, :]  # leading query head of each kv group
    # noise orthogonal to the lead query: own-query alignment is exactly a
    coef = np.sum(key_noise * lead, axis=-1, keepdims=True) / float(spec.d)
    key_noise = key_noise - coef * lead
    k = spec.key_gain * (a * lead + np.sqrt(1.0 - a * a) * key_noise)

    return Trace(
        q_pre=q.astype(np.float32),
        k_pre=k.astype(np.float32),
        v=v.astype(np.float32),
    )


def _blob_path(dirpath: str, name: str) -> str:
    return os.path.join(dirpath, name)


def write_trace(trace: Trace, dirpath: str):
    """Write manifest.json + q_pre.bin / k_pre.bin / v.bin into dirpath."""
    os.makedirs(dirpath, exist_ok=True)
    manifest = {
        "version": TRACE_VERSION,
        "dtype": TRACE_DTYPE,
        "seq_len": int(trace.seq_len),
        "n_layers": int(trace.n_layers),
        "n_q_heads": int(trace.n_q_heads),
        "n_kv_heads": int(trace.n_kv_heads),
        "d": int(trace.d),
        "d_v": int(trace.d_v),
        "files": {"q_pre": "q_pre.bin", "k_pre": "k_pre.bin", "v": "v.bin"},
    }
    with open(_blob_path(dirpath, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    names = manifest["files"]
    for key, arr in (("q_pre", trace.q_pre), ("k_pre", trace.k_pre), ("v", trace.v)):
        with open(_blob_path(dirpath, names[key]), "wb") as fh:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_blob(dirpath: str, name: str, shape: tuple) -> np.ndarray:
    path = _blob_path(dirpath, name)
    expected = int(np.prod(shape)) * 4
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise TraceError(f"{name}: file missing from {dirpath}") from None
    if len(raw) != expected:
        raise TraceError(f"{name}: expected {expected} bytes for shape {shape}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def read_trace(dirpath: str) -> Trace:
    """Load and validate a trace directory; raises TraceError on any defect."""
    mpath = _blob_path(dirpath, "manifest.json")
    try:
        with open(mpath, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise TraceError(f"manifest.json: file missing from {dirpath}") from None
    except json.JSONDecodeError as exc:
        raise TraceError(f"manifest.json: not valid JSON ({exc})") from None
    if manifest.get("version") != TRACE_VERSION:
        raise TraceError(f"manifest.json: unsupported version {manifest.get('version')!r}")
    if manifest.get("dtype") != TRACE_DTYPE:
        raise TraceError(f"manifest.json: unsupported dtype {manifest.get('dtype')!r}")
    try:
        L = int(manifest["seq_len"])
        nl = int(manifest["n_layers"])
        hq = int(manifest["n_q_heads"])
        hkv = int(manifest["n_kv_heads"])
        d = int(manifest["d"])
        d_v = int(manifest["d_v"])
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceError(f"manifest.json: missing or non-integer field ({exc})") from None
    if min(L, nl, hq, hkv, d, d_v) < 1:
        raise TraceError("manifest.json: all extents must be >= 1")
    names = manifest.get("files", {})
    if not isinstance(names, dict):
        raise TraceError("manifest.json: 'files' must map tensor names to file names")
    q = _read_blob(dirpath, names.get("q_pre", "q_pre.bin"), (L, nl, hq, d))
    k = _read_blob(dirpath, names.get("k_pre", "k_pre.bin"), (L, nl, hkv, d))
    v = _read_blob(dirpath, names.get("v", "v.bin"), (L, nl, hkv, d_v))
    try:
        return Trace(q_pre=q, k_pre=k, v=v)
    except ValueError as exc:
        raise TraceError(f"manifest.json: inconsistent extents ({exc})") from None
