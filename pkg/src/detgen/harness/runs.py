"""Run directories: checkpoints, manifest with content hashes, and a lock file."""
import fcntl
import hashlib
import json
import os
from pathlib import Path

from .. import __version__
from ..detectors import DetectorSuite
from ..errors import ConfigError
from ..flowgen import FlowModel
from ..promptpolicy import PromptPolicy

MANIFEST = "manifest.json"
LOCK = ".lock"
_KINDS = {"flow_model": FlowModel, "detector_suite": DetectorSuite, "prompt_policy": PromptPolicy}


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(obj, path):
    with open(path, "w") as fh:
        json.dump(obj.to_dict(), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path, kind=None):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"checkpoint {path} is not valid JSON: {exc}") from None
    got = d.get("kind")
    if got not in _KINDS:
        raise ConfigError(f"checkpoint {path} has unknown kind {got!r}")
    if kind is not None and got != kind:
        raise ConfigError(f"checkpoint {path} holds a {got}, expected {kind}")
    return _KINDS[got].from_dict(d)


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


class RunDir:
    """Exclusive handle on an output directory. Use as a context manager."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = None

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        self._lock = open(self.path / LOCK, "w")
        try:
            fcntl.flock(self._lock, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            self._lock.close()
            raise ConfigError(f"run directory {self.path} is locked by another process") from None
        return self

    def __exit__(self, *exc):
        fcntl.flock(self._lock, fcntl.LOCK_UN)
        self._lock.close()
        return False

    def file(self, name):
        return self.path / name

    def require(self, name, phase):
        p = self.file(name)
        if not p.exists():
            raise ConfigError(f"{p} is missing; run `{phase}` first")
        return p

    def manifest(self):
        p = self.file(MANIFEST)
        if not p.exists():
            return {"tool_version": __version__, "config_sha256": None, "phases": {}}
        with open(p) as fh:
            return json.load(fh)

    def record_phase(self, phase, outputs, wallclock_s, config_digest):
        m = self.manifest()
        m["tool_version"] = __version__
        m["config_sha256"] = config_digest
        m["phases"][phase] = {
            "outputs": {str(name): sha256_file(self.file(name)) for name in outputs},
            "wallclock_s": round(wallclock_s, 3),
        }
        tmp = self.file(MANIFEST + ".tmp")
        with open(tmp, "w") as fh:
            json.dump(m, fh, indent=2, sort_keys=True)
        os.replace(tmp, self.file(MANIFEST))
        return m


def verify_manifest(path):
    """List of problems (missing files, hash mismatches); empty when the run is intact."""
    path = Path(path)
    mp = path / MANIFEST
    if not mp.exists():
        return [f"{mp} missing"]
    with open(mp) as fh:
        m = json.load(fh)
    problems = []
    for phase, info in m.get("phases", {}).items():
        for name, digest in info["outputs"].items():
            f = path / name
            if not f.exists():
                problems.append(f"{phase}: {name} missing")
            elif sha256_file(f) != digest:
                problems.append(f"{phase}: {name} hash mismatch")
    return problems
