"""Dataset manifests and the per-subject glue used by the command line."""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nifti import read_nifti, write_nifti
from .relaxometry import AcqParams, QuantMaps, build_input_stack, wm_mean_normalize
from .segnet import Sample


class ManifestError(ValueError):
    pass


@dataclass
class SubjectEntry:
    id: str
    mprage: Path
    fgatir: Path
    labels: Path = None
    wm_mask: Path = None


@dataclass
class Manifest:
    subjects: list
    acquisition: AcqParams = field(default_factory=AcqParams)
    path: Path = None

    @property
    def ids(self):
        return [s.id for s in self.subjects]

    def subject(self, sid):
        for s in self.subjects:
            if s.id == sid:
                return s
        raise KeyError(f"subject {sid!r} not in manifest")


def load_manifest(path, require_labels=False):
    """Parse and validate a manifest; relative paths resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(doc.get("subjects"), list) or not doc["subjects"]:
        raise ManifestError(f"manifest {path} needs a non-empty 'subjects' list")
    try:
        acq = AcqParams(**doc.get("acquisition", {}))
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"manifest {path}: bad acquisition block: {exc}") from None
    base = path.parent
    subjects, seen = [], set()
    for i, entry in enumerate(doc["subjects"]):
        sid = str(entry.get("id", ""))
        if not sid:
            raise ManifestError(f"subject #{i} has no id")
        if sid in seen:
            raise ManifestError(f"duplicate subject id {sid!r}")
        seen.add(sid)
        files = {}
        for key in ("mprage", "fgatir", "labels", "wm_mask"):
            if entry.get(key) is None:
                if key in ("mprage", "fgatir") or (key == "labels" and require_labels):
                    raise ManifestError(f"subject {sid!r} lacks a {key!r} path")
                continue
            p = base / entry[key]
            if not p.exists():
                raise ManifestError(f"subject {sid!r}: {key} file {p} does not exist")
            files[key] = p
        subjects.append(SubjectEntry(sid, **files))
    return Manifest(subjects, acq, path)


def write_manifest(path, entries, acq=AcqParams()):
    doc = {
        "acquisition": {"ti1": acq.ti1, "ti2": acq.ti2, "tr": acq.tr},
        "subjects": entries,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_images(entry, normalize=True):
    """MPRAGE and FGATIR, scaled by the MPRAGE white-matter mean when a mask is available."""
    mprage = read_nifti(entry.mprage, kind="volume")
    fgatir = read_nifti(entry.fgatir, kind="volume")
    if normalize and entry.wm_mask is not None:
        mask = load_mask(entry.wm_mask)
        # one factor for both, so the signal ratio the T1 fit relies on survives
        fgatir = wm_mean_normalize(fgatir, mask, reference=mprage)
        mprage = wm_mean_normalize(mprage, mask)
    return mprage, fgatir


def load_mask(path):
    vol = read_nifti(path, kind="volume")
    return np.asarray(vol.data) > 0


def load_labels(entry):
    if entry.labels is None:
        raise ManifestError(f"subject {entry.id!r} has no labels")
    return read_nifti(entry.labels, kind="labels")


def maps_dir(root, sid):
    return Path(root) / sid


def save_maps(maps, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_nifti(maps.pd, directory / "pd.nii", dtype="f8")
    write_nifti(maps.t1, directory / "t1.nii", dtype="f8")
    write_nifti(maps.pd.with_data(maps.status), directory / "status.nii", dtype="u1")


def load_maps(directory):
    directory = Path(directory)
    for name in ("pd.nii", "t1.nii", "status.nii"):
        if not (directory / name).exists():
            raise ManifestError(f"missing map file {directory / name}; run fit-maps first")
    pd = read_nifti(directory / "pd.nii", kind="volume")
    t1 = read_nifti(directory / "t1.nii", kind="volume")
    status = read_nifti(directory / "status.nii", kind="volume")
    return QuantMaps(pd, t1, np.asarray(status.data).astype(np.uint8))


def subject_stack(entry, maps, config, acq, normalize=True):
    mprage, fgatir = load_images(entry, normalize)
    return build_input_stack(maps, mprage, fgatir, config, tr=acq.tr)


def subject_sample(entry, maps, config, acq, normalize=True):
    stack = subject_stack(entry, maps, config, acq, normalize)
    return stack, Sample.from_stack(stack, load_labels(entry))
