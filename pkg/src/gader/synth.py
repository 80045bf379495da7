"""Procedural walkers: labelled silhouette and pseudo-RGB sequences.

The figure is a side-view stick-ellipse body: a head disc, an elliptical torso
and two legs made of tapered thigh/shin capsules pivoting at a shared hip.
Thighs swing sinusoidally in anti-phase; knees flex at twice the gait
frequency. Standing freezes every angle at zero.
"""
from __future__ import annotations

import colorsys
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .silio import RgbSequence, SilhouetteSequence, boxes_of, load_pack, save_pack

log = logging.getLogger(__name__)

CLASSES = ("full-stand", "full-gait", "part-stand", "part-gait")
FULL_STAND, FULL_GAIT, PART_STAND, PART_GAIT = range(4)
PARTIAL_CROP = 0.4  # fraction of the figure height removed from the bottom
DEFAULT_FRAME = (112, 128)
FAR_LEG = 0.75  # width factor of the far leg; breaks the half-cycle symmetry of the pair


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class WalkerIdentity:
    id: int
    leg_length: float
    torso_width: float
    torso_height: float
    head_radius: float
    stride_amplitude: float
    cadence: int
    texture_seed: int

    def __post_init__(self):
        for name in ("leg_length", "torso_width", "torso_height", "head_radius", "stride_amplitude"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.cadence < 8:
            raise ValueError("cadence must be at least 8 frames")

    @property
    def height(self):
        return self.leg_length + self.torso_height + 2 * self.head_radius


def sample_identity(ident, rng):
    """Draw a walker with a long-legged build (legs 60-68% of height)."""
    height = rng.uniform(70, 88)
    leg = height * rng.uniform(0.60, 0.68)
    head = height * rng.uniform(0.055, 0.075)
    torso_h = height - leg - 2 * head
    return WalkerIdentity(
        id=int(ident),
        leg_length=round(float(leg), 3),
        torso_width=round(float(height * rng.uniform(0.17, 0.27)), 3),
        torso_height=round(float(torso_h), 3),
        head_radius=round(float(head), 3),
        stride_amplitude=round(float(rng.uniform(0.28, 0.55)), 4),
        cadence=int(rng.integers(16, 29)),
        texture_seed=int(rng.integers(0, 2**31 - 1)),
    )


@dataclass(frozen=True)
class Segment:
    mode: str  # "walk" | "stand"
    duration: int
    body: str = "full"  # "full" | "partial"

    def __post_init__(self):
        if self.mode not in ("walk", "stand"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.body not in ("full", "partial"):
            raise ValueError(f"unknown body {self.body!r}")
        if self.duration <= 0:
            raise ValueError("segment duration must be positive")

    @property
    def label(self):
        return (0 if self.body == "full" else 2) + (1 if self.mode == "walk" else 0)


@dataclass
class SequenceScript:
    segments: list
    camera_scale_track: np.ndarray
    scale_params: tuple = None  # (base, drift) when built by make_script

    def __post_init__(self):
        self.segments = [s if isinstance(s, Segment) else Segment(*s) for s in self.segments]
        self.camera_scale_track = np.asarray(self.camera_scale_track, dtype=np.float64)
        if len(self.camera_scale_track) != self.total:
            raise ValueError(f"scale track has {len(self.camera_scale_track)} frames, segments sum to {self.total}")

    @property
    def total(self):
        return int(sum(s.duration for s in self.segments))

    def bounds(self):
        out, t = [], 0
        for s in self.segments:
            out.append((t, t + s.duration))
            t += s.duration
        return out


def make_script(segments, base_scale=0.9, drift=0.0):
    """Scale stays constant while standing and drifts linearly while walking."""
    segments = [s if isinstance(s, Segment) else Segment(*s) for s in segments]
    track, scale = [], float(base_scale)
    for s in segments:
        if s.mode == "walk":
            track.extend(scale + drift * np.arange(s.duration))
            scale += drift * s.duration
        else:
            track.extend([scale] * s.duration)
    return SequenceScript(segments, np.asarray(track), (float(base_scale), float(drift)))


@dataclass
class GroundTruth:
    labels: np.ndarray  # per-frame class index into CLASSES
    segments: list  # [{"mode", "start", "end", "body"}]

    @property
    def walking_intervals(self):
        return [(s["start"], s["end"]) for s in self.segments if s["mode"] == "walk"]

    @property
    def gait_intervals(self):
        """Maximal runs of full-body walking frames."""
        return runs(self.labels == FULL_GAIT)

    @property
    def gait_mask(self):
        return self.labels == FULL_GAIT


def runs(mask):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return []
    d = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


# -- kinematics & rasterisation --------------------------------------------------------
def _leg_angles(identity, walking_phase, moving):
    amp = identity.stride_amplitude if moving else 0.0
    knee_amp = 1.1 * amp
    thigh = np.array([amp * np.sin(walking_phase), amp * np.sin(walking_phase + np.pi)])
    flex = knee_amp * 0.5 * (1 - np.cos(2 * walking_phase)) * np.array([1.0, 1.0])
    # the leg swinging forward flexes; the stance leg stays nearly straight
    flex *= np.array([thigh[0] < 0, thigh[1] < 0]) * 0.8 + 0.2
    return thigh, thigh - flex


def _capsule(yy, xx, p, q, radius):
    py, px = p
    qy, qx = q
    dy, dx = qy - py, qx - px
    L2 = dy * dy + dx * dx
    t = np.clip(((yy - py) * dy + (xx - px) * dx) / L2, 0.0, 1.0) if L2 > 0 else 0.0
    cy, cx = py + t * dy, px + t * dx
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius


def _pose(identity, scale, thigh, shin, ground, cx):
    s = scale
    l_th = l_sh = identity.leg_length * s / 2
    drops = l_th * np.cos(thigh) + l_sh * np.cos(shin)
    hip = (ground - drops.max(), cx)
    knees = [(hip[0] + l_th * np.cos(a), hip[1] + l_th * np.sin(a)) for a in thigh]
    ankles = [(k[0] + l_sh * np.cos(b), k[1] + l_sh * np.sin(b)) for k, b in zip(knees, shin)]
    torso_c = (hip[0] - identity.torso_height * s / 2, cx)
    head_c = (hip[0] - identity.torso_height * s - identity.head_radius * s, cx)
    return hip, knees, ankles, torso_c, head_c


def _render_frame(identity, scale, thigh, shin, ground, cx, frame_size, partial, texture=None, colors=None):
    H, W = frame_size
    s = scale
    hip, knees, ankles, torso_c, head_c = _pose(identity, scale, thigh, shin, ground, cx)
    top = head_c[0] - identity.head_radius * s
    bottom = max(a[0] for a in ankles) + identity.torso_width * s * 0.17
    half_w = max(max(abs(a[1] - cx) for a in ankles + knees) + identity.torso_width * s * 0.25,
                 identity.torso_width * s / 2) + 1
    r0, r1 = int(np.floor(top)) - 1, int(np.ceil(bottom)) + 2
    c0, c1 = int(np.floor(cx - half_w)) - 1, int(np.ceil(cx + half_w)) + 2
    if r0 < 0 or c0 < 0 or r1 > H or c1 > W:
        return None, None
    yy, xx = np.mgrid[r0:r1, c0:c1].astype(np.float64)
    head = (yy - head_c[0]) ** 2 + (xx - head_c[1]) ** 2 <= (identity.head_radius * s) ** 2
    a, b = identity.torso_width * s / 2, identity.torso_height * s / 2
    torso = ((yy - torso_c[0]) / b) ** 2 + ((xx - torso_c[1]) / a) ** 2 <= 1.0
    thigh_r = identity.torso_width * s * 0.25
    shin_r = identity.torso_width * s * 0.17
    legs = np.zeros_like(head)
    for k, an, depth in zip(knees, ankles, (1.0, FAR_LEG)):
        legs |= _capsule(yy, xx, hip, k, thigh_r * depth)
        legs |= _capsule(yy, xx, k, an, shin_r * depth)
    body = head | torso | legs
    if partial:
        fig_rows = np.flatnonzero(body.any(axis=1))
        fig_top, fig_bot = fig_rows[0], fig_rows[-1] + 1
        cut = fig_top + int(np.ceil((1 - PARTIAL_CROP) * (fig_bot - fig_top)))
        body[cut:] = False
    mask = np.zeros((H, W), np.uint8)
    mask[r0:r1, c0:c1] = body
    if texture is None:
        return mask, None
    height = identity.height * s
    u = (yy - top) / height
    v = (xx - cx) / height
    shade = texture(u, v)
    rgb = np.zeros((r1 - r0, c1 - c0, 3), np.float32)
    for part, color in ((legs & ~torso, colors["legs"]), (torso, colors["torso"]), (head, colors["skin"])):
        sel = part & body
        rgb[sel] = (np.asarray(color)[None, :] * shade[sel][:, None]).astype(np.float32)
    frame = np.zeros((H, W, 3), np.float32)
    frame[r0:r1, c0:c1] = rgb
    return mask, frame


def identity_texture(identity):
    """Smooth body-relative shading field, seeded by the identity (value-noise style)."""
    rng = np.random.default_rng(identity.texture_seed)
    k = 5
    freq = rng.uniform(1.5, 6.0, size=(k, 2)) * 2 * np.pi
    phase = rng.uniform(0, 2 * np.pi, size=k)
    amp = rng.uniform(0.5, 1.0, size=k)
    amp /= amp.sum()

    def field(u, v):
        acc = np.zeros_like(u)
        for f, p, a in zip(freq, phase, amp):
            acc += a * np.sin(f[0] * u + f[1] * v + p)
        return 0.55 + 0.45 * acc

    return field


def _colors(identity, rng):
    skin_rng = np.random.default_rng(identity.texture_seed + 1)
    skin = colorsys.hsv_to_rgb(skin_rng.uniform(0.03, 0.1), skin_rng.uniform(0.3, 0.6), skin_rng.uniform(0.5, 0.95))
    torso = colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.4, 1.0), rng.uniform(0.5, 1.0))
    legs = colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.2, 0.9), rng.uniform(0.3, 0.9))
    return {"skin": skin, "torso": torso, "legs": legs}


def generate_sequence(identity, script, frame_size=DEFAULT_FRAME, seed=0, with_rgb=True):
    """Render ``script`` for ``identity``.

    Returns ``(silhouettes, rgb_or_None, ground_truth)``; deterministic in
    ``(identity, script, frame_size, seed)``.
    """
    rng = np.random.default_rng([int(seed), int(identity.id), 7])
    H, W = frame_size
    phase0 = rng.uniform(0, 2 * np.pi)
    sway_phase = rng.uniform(0, 2 * np.pi)
    colors = _colors(identity, rng) if with_rgb else None
    texture = identity_texture(identity) if with_rgb else None
    ground = H - 8.0
    omega = 2 * np.pi / identity.cadence
    masks = np.zeros((script.total, H, W), np.uint8)
    frames = np.zeros((script.total, H, W, 3), np.float32) if with_rgb else None
    labels = np.zeros(script.total, np.int64)
    walked = 0
    t = 0
    seg_info = []
    for si, seg in enumerate(script.segments):
        seg_info.append({"mode": seg.mode, "start": t, "end": t + seg.duration, "body": seg.body})
        moving = seg.mode == "walk"
        for _ in range(seg.duration):
            phase = phase0 + omega * walked
            thigh, shin = _leg_angles(identity, phase, moving)
            cx = W / 2.0 + 0.08 * W * np.sin(sway_phase + walked / 45.0)
            m, f = _render_frame(identity, script.camera_scale_track[t], thigh, shin, ground, cx, frame_size,
                                 seg.body == "partial", texture, colors)
            if m is None:
                raise GenerationError(
                    f"walker exceeds frame {frame_size} in segment {si} ({seg.mode}/{seg.body}) at frame {t}, "
                    f"scale {script.camera_scale_track[t]:.3f}")
            masks[t] = m
            if with_rgb:
                frames[t] = f
            labels[t] = seg.label
            if moving:
                walked += 1
            t += 1
    boxes = boxes_of(masks)
    sil = SilhouetteSequence(masks, boxes)
    rgb = RgbSequence(frames, boxes) if with_rgb else None
    return sil, rgb, GroundTruth(labels, seg_info)


# -- corpora ---------------------------------------------------------------------------------
STYLES = ("walk", "mixed", "wsw", "stand", "probe")


def random_script(style, rng):
    """Segment recipes: ``walk`` (one full walk), ``wsw`` (walk-stand-walk, 100 each),
    ``stand``, ``mixed`` (2-4 random segments over all four classes) and
    ``probe`` (a full walk buried among standing and partial-body segments)."""
    if style == "walk":
        segs = [Segment("walk", int(rng.integers(90, 151)))]
    elif style == "wsw":
        segs = [Segment("walk", 100), Segment("stand", 100), Segment("walk", 100)]
    elif style == "stand":
        segs = [Segment("stand", int(rng.integers(60, 121)))]
    elif style == "probe":
        segs = [
            Segment("stand", int(rng.integers(50, 81))),
            Segment("walk", int(rng.integers(60, 81))),
            Segment("walk", int(rng.integers(40, 61)), "partial"),
            Segment("stand", int(rng.integers(40, 61)), "partial"),
        ]
        order = rng.permutation(len(segs))
        segs = [segs[i] for i in order]
    elif style == "mixed":
        n = int(rng.integers(2, 5))
        segs = []
        for _ in range(n):
            mode = "walk" if rng.uniform() < 0.5 else "stand"
            body = "partial" if rng.uniform() < 0.4 else "full"
            segs.append(Segment(mode, int(rng.integers(40, 121)), body))
    else:
        raise ValueError(f"unknown script style {style!r}")
    base = rng.uniform(0.72, 0.98)
    drift = rng.uniform(-1.0, 1.0) * 0.1 / 100  # up to +/-10% per 100 walking frames
    walk_frames = sum(s.duration for s in segs if s.mode == "walk")
    drift = float(np.clip(drift, (0.7 - base) / max(walk_frames, 1), (1.05 - base) / max(walk_frames, 1)))
    return make_script(segs, base_scale=base, drift=drift)


@dataclass
class CorpusManifest:
    seed: int
    frame_size: tuple
    identities: dict  # id -> WalkerIdentity
    entries: list  # dicts: file, rgb_file, identity, condition, segments, seed, scale
    split: dict  # {"train": [...], "test": [...]}
    root: str | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def to_json(self):
        doc = {
            "seed": self.seed,
            "frame_size": list(self.frame_size),
            "identities": {str(k): asdict(v) for k, v in sorted(self.identities.items())},
            "split": self.split,
            "entries": self.entries,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text, root=None):
        doc = json.loads(text)
        idents = {int(k): WalkerIdentity(**v) for k, v in doc["identities"].items()}
        return cls(doc["seed"], tuple(doc["frame_size"]), idents, doc["entries"], doc["split"], root)

    @classmethod
    def load(cls, root):
        with open(os.path.join(root, "manifest.json")) as fh:
            return cls.from_json(fh.read(), root)

    def entries_for(self, split=None, styles=None):
        ids = None if split is None else set(self.split[split])
        return [e for e in self.entries
                if (ids is None or e["identity"] in ids) and (styles is None or e["style"] in styles)]

    def script_of(self, entry):
        segs = [Segment(s["mode"], s["end"] - s["start"], s["body"]) for s in entry["segments"]]
        return make_script(segs, entry["scale"][0], entry["scale"][1])

    def sequence(self, entry, with_rgb=False):
        """(silhouettes, rgb_or_None, ground_truth) for an entry, from disk or regenerated.

        Silhouette-only results are cached; RGB is large and never kept.
        """
        key = (entry["file"], with_rgb)
        if key in self._cache:
            return self._cache[key]
        ident = self.identities[entry["identity"]]
        script = self.script_of(entry)
        if self.root is not None and os.path.exists(os.path.join(self.root, entry["file"])):
            sil = load_pack(os.path.join(self.root, entry["file"]))
            rgb = None
            if with_rgb:
                rpath = os.path.join(self.root, entry.get("rgb_file") or "")
                rgb = load_pack(rpath) if entry.get("rgb_file") and os.path.exists(rpath) else \
                    generate_sequence(ident, script, self.frame_size, entry["seed"], True)[1]
            gt = _gt_from_entry(entry, sil.T)
        else:
            sil, rgb, gt = generate_sequence(ident, script, self.frame_size, entry["seed"], with_rgb)
        out = (sil, rgb, gt)
        if not with_rgb:
            self._cache[key] = out
        return out


def _gt_from_entry(entry, T):
    labels = np.zeros(T, np.int64)
    for s in entry["segments"]:
        labels[s["start"]:s["end"]] = Segment(s["mode"], s["end"] - s["start"], s["body"]).label
    return GroundTruth(labels, [dict(s) for s in entry["segments"]])


def generate_corpus(n_identities, scripts_per_identity, seed, out_dir=None, styles=("mixed",),
                    frame_size=DEFAULT_FRAME, test_fraction=1 / 3, with_rgb=False):
    """Sample identities and scripts; optionally write packs plus ``manifest.json``.

    ``styles`` is cycled over each identity's scripts. Identities are split
    into disjoint train/test sets (``test_fraction`` of them, at least one, go
    to test).
    """
    if n_identities < 2:
        raise ValueError("a corpus needs at least two identities")
    rng = np.random.default_rng([int(seed), 1])
    identities = {i: sample_identity(i, rng) for i in range(n_identities)}
    n_test = min(n_identities - 1, max(1, int(round(n_identities * test_fraction))))
    perm = rng.permutation(n_identities)
    split = {"train": sorted(int(i) for i in perm[n_test:]), "test": sorted(int(i) for i in perm[:n_test])}
    entries = []
    for i in range(n_identities):
        for k in range(scripts_per_identity):
            style = styles[k % len(styles)]
            srng = np.random.default_rng([int(seed), 2, i, k])
            script = random_script(style, srng)
            seq_seed = int(srng.integers(0, 2**31 - 1))
            name = f"id{i:03d}_{style}{k:02d}"
            segs, t = [], 0
            for s in script.segments:
                segs.append({"mode": s.mode, "start": t, "end": t + s.duration, "body": s.body})
                t += s.duration
            entries.append({
                "file": f"{name}.gsp",
                "rgb_file": f"{name}.grp" if with_rgb else None,
                "identity": i,
                "condition": f"{style}{k:02d}-hue{int(srng.integers(0, 1000)):03d}",
                "style": style,
                "segments": segs,
                "seed": seq_seed,
                "scale": list(script.scale_params),
            })
    manifest = CorpusManifest(int(seed), tuple(frame_size), identities, entries, split, out_dir)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if not os.access(out_dir, os.W_OK):
            raise OSError(f"output directory {out_dir} is not writable")
        for e in entries:
            sil, rgb, _ = generate_sequence(identities[e["identity"]], manifest.script_of(e), frame_size, e["seed"],
                                            with_rgb)
            save_pack(sil, os.path.join(out_dir, e["file"]))
            if with_rgb:
                save_pack(rgb, os.path.join(out_dir, e["rgb_file"]))
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            fh.write(manifest.to_json())
    return manifest

