"""Data-readiness validation gating samples before training and evaluation.

Validators return findings instead of raising, so a run can exclude bad
samples and keep going; the exclusion list is part of the report for
reproducibility. :func:`inject_corruption` produces samples that violate
exactly one rule and is used to test detection completeness.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import LabelMask, N_CLASSES, Sample, SiteDataset, Volume
from .seeding import rng_from
from . import siteio


class FindingCode(str, enum.Enum):
    DIMS_MISMATCH = "DimsMismatch"
    LABEL_OUT_OF_RANGE = "LabelOutOfRange"
    NON_FINITE_INTENSITY = "NonFiniteIntensity"
    NON_POSITIVE_SPACING = "NonPositiveSpacing"
    REFERENCE_MISMATCH = "ReferenceMismatch"
    EMPTY_VOLUME = "EmptyVolume"
    HEADER_CORRUPT = "HeaderCorrupt"


# Codes 'inject_corruption' can produce on an in-memory sample.
INJECTABLE_CODES = (
    FindingCode.DIMS_MISMATCH,
    FindingCode.LABEL_OUT_OF_RANGE,
    FindingCode.NON_FINITE_INTENSITY,
    FindingCode.NON_POSITIVE_SPACING,
    FindingCode.REFERENCE_MISMATCH,
    FindingCode.EMPTY_VOLUME,
)


@dataclass(frozen=True)
class ValidationFinding:
    sample_id: str
    code: FindingCode
    detail: str

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "code": self.code.value, "detail": self.detail}


@dataclass
class ValidationReport:
    site_id: str
    sample_pass: dict[str, bool] = field(default_factory=dict)
    findings: list[ValidationFinding] = field(default_factory=list)

    @property
    def counts_by_code(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for f in self.findings:
            counts[f.code.value] = counts.get(f.code.value, 0) + 1
        return counts

    @property
    def excluded(self) -> list[str]:
        return sorted(sid for sid, ok in self.sample_pass.items() if not ok)

    @property
    def n_failed(self) -> int:
        return len(self.excluded)

    @property
    def all_passed(self) -> bool:
        return self.n_failed == 0

    def to_dict(self) -> dict:
        return {
            "site_id": self.site_id,
            "n_samples": len(self.sample_pass),
            "n_passed": len(self.sample_pass) - self.n_failed,
            "n_failed": self.n_failed,
            "counts_by_code": self.counts_by_code,
            "excluded": self.excluded,
            "findings": [f.to_dict() for f in self.findings],
        }


def validate_sample(sample: Sample) -> list[ValidationFinding]:
    """Check one sample against all readiness rules; empty list means pass."""
    out: list[ValidationFinding] = []
    sid = sample.sample_id
    vol, mask = sample.volume, sample.mask

    if vol.intensities.size == 0 or mask.labels.size == 0:
        out.append(ValidationFinding(sid, FindingCode.EMPTY_VOLUME,
                                     f"volume has {vol.intensities.size} voxels, "
                                     f"mask has {mask.labels.size}"))
    if vol.intensities.shape != mask.labels.shape:
        out.append(ValidationFinding(sid, FindingCode.DIMS_MISMATCH,
                                     f"volume dims {vol.intensities.shape} != "
                                     f"mask dims {mask.labels.shape}"))
    bad = np.unique(mask.labels[(mask.labels < 0) | (mask.labels >= N_CLASSES)])
    if bad.size:
        out.append(ValidationFinding(sid, FindingCode.LABEL_OUT_OF_RANGE,
                                     f"labels outside 0..{N_CLASSES - 1}: {bad.tolist()}"))
    if vol.intensities.size and not np.isfinite(vol.intensities).all():
        n_bad = int((~np.isfinite(vol.intensities)).sum())
        out.append(ValidationFinding(sid, FindingCode.NON_FINITE_INTENSITY,
                                     f"{n_bad} non-finite intensity voxels"))
    if any(not (s > 0.0) for s in vol.spacing):
        out.append(ValidationFinding(sid, FindingCode.NON_POSITIVE_SPACING,
                                     f"spacing {vol.spacing}"))
    if vol.id != sid or mask.id != sid:
        out.append(ValidationFinding(sid, FindingCode.REFERENCE_MISMATCH,
                                     f"volume id {vol.id!r} / mask id {mask.id!r} "
                                     f"vs sample id {sid!r}"))
    return out


def validate_dataset(dataset: SiteDataset) -> ValidationReport:
    report = ValidationReport(site_id=dataset.site_id)
    for sample in sorted(dataset.samples, key=lambda s: s.sample_id):
        findings = validate_sample(sample)
        report.sample_pass[sample.sample_id] = not findings
        report.findings.extend(findings)
    return report


def validate_site_dir(site_dir: Path) -> ValidationReport:
    """Validate a persisted site; unreadable payloads become HeaderCorrupt findings."""
    manifest = siteio.read_manifest(site_dir)
    report = ValidationReport(site_id=manifest["site_id"])
    for entry in sorted(manifest["samples"], key=lambda e: e["sample_id"]):
        sid = entry["sample_id"]
        try:
            sample = siteio.load_sample(site_dir, entry, manifest["site_id"])
        except siteio.GridFormatError as exc:
            report.sample_pass[sid] = False
            report.findings.append(
                ValidationFinding(sid, FindingCode.HEADER_CORRUPT, str(exc)))
            continue
        findings = validate_sample(sample)
        report.sample_pass[sid] = not findings
        report.findings.extend(findings)
    return report


def inject_corruption(sample: Sample, kind: FindingCode, seed: int) -> Sample:
    """Return a copy of ``sample`` that fails validation with exactly ``kind``."""
    rng = rng_from(seed, "corrupt", kind.value, sample.sample_id)
    vol, mask = sample.volume, sample.mask

    if kind is FindingCode.DIMS_MISMATCH:
        axis = int(rng.integers(0, 3))
        sel = [slice(None)] * 3
        sel[axis] = slice(0, mask.labels.shape[axis] - 1)
        new_mask = LabelMask(id=mask.id, labels=mask.labels[tuple(sel)].copy())
        return replace(sample, mask=new_mask)

    if kind is FindingCode.LABEL_OUT_OF_RANGE:
        labels = mask.labels.copy()
        flat = int(rng.integers(0, labels.size))
        labels.ravel()[flat] = int(rng.integers(N_CLASSES, 2 * N_CLASSES))
        return replace(sample, mask=LabelMask(id=mask.id, labels=labels))

    if kind is FindingCode.NON_FINITE_INTENSITY:
        intens = vol.intensities.copy()
        flat = int(rng.integers(0, intens.size))
        intens.ravel()[flat] = [np.nan, np.inf, -np.inf][int(rng.integers(0, 3))]
        return replace(sample, volume=Volume(id=vol.id, intensities=intens,
                                             spacing=vol.spacing))

    if kind is FindingCode.NON_POSITIVE_SPACING:
        axis = int(rng.integers(0, 3))
        spacing = list(vol.spacing)
        spacing[axis] = [0.0, -abs(spacing[axis])][int(rng.integers(0, 2))]
        return replace(sample, volume=Volume(id=vol.id, intensities=vol.intensities,
                                             spacing=tuple(spacing)))

    if kind is FindingCode.REFERENCE_MISMATCH:
        return replace(sample, mask=LabelMask(id=mask.id + "-x", labels=mask.labels))

    if kind is FindingCode.EMPTY_VOLUME:
        # Empty both grids so only the emptiness rule fires, not DimsMismatch.
        empty_shape = (0,) + vol.intensities.shape[1:]
        return replace(
            sample,
            volume=Volume(id=vol.id,
                          intensities=np.empty(empty_shape, dtype=vol.intensities.dtype),
                          spacing=vol.spacing),
            mask=LabelMask(id=mask.id, labels=np.empty(empty_shape, dtype=mask.labels.dtype)),
        )

    raise ValueError(f"cannot inject {kind.value} into an in-memory sample")


def corrupt_grid_file(site_dir: Path, sample_id: str, seed: int) -> Path:
    """Garble the header of a sample's volume file (HeaderCorrupt test fixture)."""
    rng = rng_from(seed, "corrupt-file", sample_id)
    path = Path(site_dir) / f"{sample_id}.vol.frvd"
    raw = bytearray(path.read_bytes())
    mode = int(rng.integers(0, 3))
    if mode == 0:
        raw[0:4] = b"XXXX"  # bad magic
    elif mode == 1:
        del raw[len(raw) // 2:]  # truncate
    else:
        raw[4] = 0xFF  # absurd version
    path.write_bytes(bytes(raw))
    return path
