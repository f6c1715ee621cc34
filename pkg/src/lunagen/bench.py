"""Dataset manifests, dataset validation and the optical-flow EPE harness."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checksum import file_checksum
from .geom import CameraModel, Pose
from .groundtruth import FlowField, compute_flow, read_flo

SCENARIOS = ("Natural", "ManMade")
KINDS = ("Real", "Synthetic", "Laboratory", "SyntheticGAN")
PATH_KEYS = ("image", "depth", "flow")
FLOW_TOLERANCE_PX = 1e-3
SCHEMA_VERSION = 1


class BenchError(ValueError):
    pass


class ManifestError(BenchError):
    pass


# ---------------------------------------------------------------------------
# End-point error
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpeReport:
    mean_epe: float
    p50: float
    p90: float
    p99: float
    frac_over_1px: float
    frac_over_3px: float
    valid_count: int

    @classmethod
    def from_errors(cls, errors: np.ndarray) -> "EpeReport":
        e = np.sort(np.asarray(errors, dtype=np.float64).ravel())
        n = e.size
        if n == 0:
            raise BenchError("no valid ground-truth pixels")

        def rank(p):  # nearest-rank percentile
            return float(e[max(1, math.ceil(p / 100.0 * n)) - 1])

        return cls(float(e.mean()), rank(50), rank(90), rank(99),
                   float(np.count_nonzero(e > 1.0)) / n, float(np.count_nonzero(e > 3.0)) / n, n)

    def to_dict(self) -> dict:
        return {"mean_epe": self.mean_epe, "p50": self.p50, "p90": self.p90, "p99": self.p99,
                "frac_over_1px": self.frac_over_1px, "frac_over_3px": self.frac_over_3px,
                "valid_count": self.valid_count}


def epe_errors(pred: FlowField, gt: FlowField) -> np.ndarray:
    """Per-pixel end-point errors over the pixels valid in ``gt``."""
    if pred.u.shape != gt.u.shape:
        raise BenchError(f"flow size mismatch: {pred.u.shape} vs {gt.u.shape}")
    m = gt.valid
    return np.hypot(pred.u[m] - gt.u[m], pred.v[m] - gt.v[m])


def epe(pred: FlowField, gt: FlowField) -> EpeReport:
    """Aggregate end-point error; prediction validity is ignored."""
    return EpeReport.from_errors(epe_errors(pred, gt))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=True, allow_nan=False) + "\n"


@dataclass
class DatasetManifest:
    """Machine-readable dataset description.

    Each frame record holds ``frame_id`` and optionally ``t``, ``pose``,
    ``sequence`` and the relative paths ``image``, ``depth``, ``flow``
    (flow from this frame to the next one of its sequence), plus
    ``checksums`` keyed by relative path. Paths are relative to ``root``,
    which is the manifest file's directory once saved.
    """

    dataset_id: str
    scenario: str
    kind: str
    description: str
    frames: list[dict]
    config: dict = field(default_factory=dict)
    sequences: dict[str, int] = field(default_factory=dict)
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ManifestError(f"scenario must be one of {SCENARIOS}")
        if self.kind not in KINDS:
            raise ManifestError(f"kind must be one of {KINDS}")

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "dataset_id": self.dataset_id,
                "scenario": self.scenario, "kind": self.kind, "description": self.description,
                "frame_count": self.frame_count, "sequences": dict(self.sequences),
                "config": self.config, "frames": self.frames}

    @classmethod
    def from_dict(cls, d: dict, root=None) -> "DatasetManifest":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ManifestError(f"unsupported manifest schema {d.get('schema_version')!r}")
        m = cls(d["dataset_id"], d["scenario"], d["kind"], d.get("description", ""),
                list(d["frames"]), d.get("config", {}), dict(d.get("sequences", {})),
                None if root is None else Path(root))
        if d.get("frame_count") != len(m.frames):
            raise ManifestError("frame_count does not match the frames list")
        return m

    def dumps(self) -> str:
        return canonical_json(self.to_dict())

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(self.dumps())
        self.root = path.parent

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: {exc}") from exc
        return cls.from_dict(data, root=path.parent)


def sequence_counts(frames: Sequence[dict]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for f in frames:
        s = str(f.get("sequence", "0"))
        counts[s] = counts.get(s, 0) + 1
    return counts


def build_manifest(dataset_id: str, scenario: str, kind: str, frames: Sequence[dict],
                   config: dict | None = None, root=None, description: str = "") -> DatasetManifest:
    """Assemble a manifest, checksumming every referenced file under ``root``."""
    if not frames:
        raise ManifestError("a dataset needs at least one frame")
    ids = [f["frame_id"] for f in frames]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate frame ids")
    root = Path(root) if root is not None else None
    out = []
    for f in frames:
        rec = {k: v for k, v in f.items() if k != "checksums"}
        paths = [rec[k] for k in PATH_KEYS if rec.get(k)]
        if paths and root is None:
            raise ManifestError("frames reference files but no root directory was given")
        sums = {}
        for rel in paths:
            p = root / rel
            if not p.is_file():
                raise ManifestError(f"frame {rec['frame_id']}: missing file {rel}")
            sums[rel] = file_checksum(p)
        if sums:
            rec["checksums"] = sums
        out.append(rec)
    return DatasetManifest(dataset_id, scenario, kind, description, out, dict(config or {}),
                           sequence_counts(out), root)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    dataset_id: str
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {"dataset_id": self.dataset_id, "passed": self.passed,
                "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail}
                           for c in self.checks]}


def _check_counts(m: DatasetManifest) -> list[CheckResult]:
    ids = [f.get("frame_id") for f in m.frames]
    out = [CheckResult("frame_ids_unique", len(set(ids)) == len(ids),
                       "" if len(set(ids)) == len(ids) else "duplicate frame ids")]
    counts = sequence_counts(m.frames)
    ok = counts == m.sequences and sum(m.sequences.values()) == len(m.frames)
    out.append(CheckResult("counts", ok, f"{len(m.frames)} frames in {len(counts)} sequence(s)"
                           if ok else f"declared {m.sequences}, found {counts}"))
    return out


def _check_files(m: DatasetManifest, root: Path) -> CheckResult:
    problems = []
    for f in m.frames:
        for rel in (f.get(k) for k in PATH_KEYS):
            if not rel:
                continue
            p = root / rel
            if not p.is_file():
                problems.append(f"frame {f['frame_id']}: missing {rel}")
            elif file_checksum(p) != f.get("checksums", {}).get(rel):
                problems.append(f"frame {f['frame_id']}: checksum mismatch for {rel}")
    return CheckResult("checksums", not problems, "; ".join(problems))


def _check_dimensions(m: DatasetManifest, root: Path, camera: CameraModel) -> CheckResult:
    from PIL import Image

    problems = []
    for f in m.frames:
        rel = f.get("image")
        if not rel or not (root / rel).is_file():
            continue
        with Image.open(root / rel) as im:
            if im.size != (camera.width, camera.height):
                problems.append(f"frame {f['frame_id']}: image {im.size[0]}x{im.size[1]}, "
                                f"camera {camera.width}x{camera.height}")
    return CheckResult("image_dimensions", not problems, "; ".join(problems))


def flow_discrepancy(stored: FlowField, recomputed: FlowField) -> tuple[float, float]:
    """(mean |delta| in px over jointly valid pixels, fraction of mask disagreement)."""
    both = stored.valid & recomputed.valid
    disagree = float(np.mean(stored.valid != recomputed.valid))
    if not both.any():
        return math.inf, disagree
    d = np.hypot(stored.u[both] - recomputed.u[both], stored.v[both] - recomputed.v[both])
    return float(d.mean()), disagree


def _check_flow(m: DatasetManifest, root: Path, camera: CameraModel,
                sample: int | None) -> CheckResult:
    from .render import read_depth

    by_seq: dict[str, list[dict]] = {}
    for f in m.frames:
        by_seq.setdefault(str(f.get("sequence", "0")), []).append(f)
    pairs = []
    for seq in by_seq.values():
        seq = sorted(seq, key=lambda f: f["frame_id"])
        pairs += [(a, b) for a, b in zip(seq, seq[1:]) if a.get("flow")]
    if sample is not None and len(pairs) > sample:
        # evenly spaced, deterministic subset
        idx = np.unique(np.linspace(0, len(pairs) - 1, sample).round().astype(int))
        pairs = [pairs[i] for i in idx]
    problems, worst = [], 0.0
    for a, b in pairs:
        try:
            rec = compute_flow(read_depth(root / a["depth"]), Pose.from_dict(a["pose"]),
                               Pose.from_dict(b["pose"]), camera, read_depth(root / b["depth"]))
            stored = read_flo(root / a["flow"])
        except (OSError, ValueError) as exc:
            problems.append(f"frame {a['frame_id']}: {exc}")
            continue
        mean_d, disagree = flow_discrepancy(stored, rec)
        worst = max(worst, mean_d)
        if not mean_d < FLOW_TOLERANCE_PX or disagree > 0.01:
            problems.append(f"frame {a['frame_id']}: mean |delta| {mean_d:.3g} px, "
                            f"mask disagreement {disagree:.3g}")
    detail = "; ".join(problems) if problems else f"{len(pairs)} pair(s), worst {worst:.3g} px"
    return CheckResult("flow_consistency", not problems, detail)


def validate_dataset(manifest: DatasetManifest, root=None, metadata_only: bool = False,
                     flow_sample: int | None = 8) -> ValidationReport:
    """Run every applicable check; failures are reported, never raised.

    ``metadata_only`` restricts validation to ids and counts, for manifests
    describing archives that are not present locally.
    """
    checks = _check_counts(manifest)
    if not metadata_only:
        root = Path(root) if root is not None else manifest.root
        if root is None:
            checks.append(CheckResult("checksums", False, "manifest has no root directory"))
            return ValidationReport(manifest.dataset_id, checks)
        checks.append(_check_files(manifest, root))
        cam = manifest.config.get("camera")
        camera = CameraModel.from_dict(cam) if cam else None
        if camera is not None:
            checks.append(_check_dimensions(manifest, root, camera))
            if any(f.get("flow") for f in manifest.frames):
                checks.append(_check_flow(manifest, root, camera, flow_sample))
    return ValidationReport(manifest.dataset_id, checks)


# ---------------------------------------------------------------------------
# Catalogue of the reference campaign's datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CatalogueEntry:
    dataset_id: str
    scenario: str
    kind: str
    description: str
    sequence_lengths: tuple[int, ...]

    @property
    def frame_count(self) -> int:
        return sum(self.sequence_lengths)


CATALOGUE = (
    CatalogueEntry("MAN-DATA-S1", "ManMade", "Synthetic", "Envisat HD", (16000,)),
    CatalogueEntry("MAN-DATA-S2", "ManMade", "Synthetic", "Envisat HD - random backgrounds", (16000,)),
    CatalogueEntry("MAN-DATA-S5", "ManMade", "Synthetic", "Envisat LD", (13875,)),
    CatalogueEntry("MAN-DATA-G1", "ManMade", "SyntheticGAN", "GAN Envisat", (13875,)),
    CatalogueEntry("MAN-DATA-L1", "ManMade", "Laboratory", "Laboratory Envisat", (16000,)),
    CatalogueEntry("MAN-DATA-L2", "ManMade", "Laboratory", "Laboratory Envisat Background", (16000,)),
    CatalogueEntry("NAT-DATA-R1", "Natural", "Real", "Chang'e 3 Navcam", (3655,)),
    CatalogueEntry("NAT-DATA-L1", "Natural", "Laboratory", "TRON Testbed - Chang'e 3", (3658,)),
    CatalogueEntry("NAT-DATA-L2", "Natural", "Laboratory", "TRON Testbed - Random pairs", (7238,)),
    CatalogueEntry("NAT-DATA-S1", "Natural", "Synthetic", "MD Chang'e 3", (3655,)),
    CatalogueEntry("NAT-DATA-S2", "Natural", "Synthetic", "HD Chang'e 3", (3655,)),
    CatalogueEntry("NAT-DATA-S3", "Natural", "Synthetic", "HD + procedural details Chang'e 3", (3655,)),
    CatalogueEntry("NAT-DATA-G1", "Natural", "SyntheticGAN", "MD + GAN Chang'e 3", (1837,)),
    CatalogueEntry("NAT-DATA-S5", "Natural", "Synthetic", "HD, 3 simulated trajectories",
                   (6661, 5591, 3736)),
)


def catalogue_entry(dataset_id: str) -> CatalogueEntry:
    for e in CATALOGUE:
        if e.dataset_id == dataset_id:
            return e
    raise KeyError(dataset_id)


def catalogue_manifest(dataset_id: str) -> DatasetManifest:
    """Metadata-only manifest (no files) with one record per catalogued frame."""
    e = catalogue_entry(dataset_id)
    frames = []
    for s, n in enumerate(e.sequence_lengths):
        base = len(frames)
        frames += [{"frame_id": base + k, "sequence": str(s)} for k in range(n)]
    return build_manifest(e.dataset_id, e.scenario, e.kind, frames,
                          {"sequence_lengths": list(e.sequence_lengths)}, description=e.description)


# ---------------------------------------------------------------------------
# Benchmark over a dataset
# ---------------------------------------------------------------------------

def evaluate_predictions(manifest: DatasetManifest, pred_dir, root=None) -> dict:
    """EPE of predicted .flo files (named like the manifest's flow files) against
    the dataset's ground truth: a pooled report plus per-frame reports."""
    root = Path(root) if root is not None else manifest.root
    pred_dir = Path(pred_dir)
    per_frame, pooled = [], []
    for f in sorted(manifest.frames, key=lambda f: f["frame_id"]):
        rel = f.get("flow")
        if not rel:
            continue
        p = pred_dir / Path(rel).name
        if not p.is_file():
            raise BenchError(f"frame {f['frame_id']}: no prediction {p.name}")
        e = epe_errors(read_flo(p), read_flo(root / rel))
        if e.size:
            pooled.append(e)
            per_frame.append({"frame_id": f["frame_id"], **EpeReport.from_errors(e).to_dict()})
    if not pooled:
        raise BenchError("dataset has no ground-truth flow with valid pixels")
    return {"dataset_id": manifest.dataset_id,
            **EpeReport.from_errors(np.concatenate(pooled)).to_dict(), "frames": per_frame}
