"""Run manifests and the optional run registry."""
import hashlib
import logging
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

from pydantic import ValidationError
from sqlalchemy.exc import SQLAlchemyError

from gqe import __version__
from gqe.core.errors import FormatError
from gqe.db import crud
from gqe.db.database import make_session_factory
from gqe.models.manifest import RunManifest

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DIGEST_CHUNK = 1 << 20


def file_digest(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(DIGEST_CHUNK), b""):
            digest.update(chunk)
    return digest.hexdigest()


def start_manifest(
    subcommand: str, argv: List[str], flags: Dict[str, Any], inputs: Iterable[PathLike]
) -> RunManifest:
    """Open a manifest before any work starts, hashing every existing input file."""
    return RunManifest(
        subcommand=subcommand,
        argv=list(argv),
        flags=flags,
        inputs={str(p): file_digest(p) for p in inputs if p is not None and Path(p).is_file()},
        version=__version__,
        started_at=datetime.now(timezone.utc),
    )


def finish_manifest(
    manifest: RunManifest, started: float, outputs: Iterable[PathLike] = (), error: Optional[str] = None
) -> RunManifest:
    """``started`` is the ``time.perf_counter()`` reading taken when the run began."""
    return manifest.model_copy(update={
        "outputs": [str(p) for p in outputs],
        "status": "failed" if error else "succeeded",
        "error": error,
        "finished_at": datetime.now(timezone.utc),
        "duration_seconds": time.perf_counter() - started,
    })


def manifest_path(subcommand: str, output: Optional[PathLike] = None, explicit: Optional[PathLike] = None) -> Path:
    """``--manifest`` wins, then ``<output>.manifest.json``, then ``./<subcommand>.manifest.json``."""
    if explicit is not None:
        return Path(explicit)
    if output is not None:
        output = Path(output)
        return output.with_name(output.name + ".manifest.json")
    return Path(f"{subcommand}.manifest.json")


def write_manifest(manifest: RunManifest, path: PathLike) -> None:
    Path(path).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.debug("wrote manifest %s", path)


def load_manifest(path: PathLike) -> RunManifest:
    try:
        return RunManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise FormatError(f"{path}: not a run manifest: {exc.error_count()} invalid fields")


def record_run(manifest: RunManifest, registry_url: Optional[str]) -> None:
    """Store the manifest in the registry; failures are logged, never raised."""
    if not registry_url:
        return
    try:
        session_factory = make_session_factory(registry_url)
        with session_factory() as db:
            crud.create_run(db=db, manifest=manifest)
    except SQLAlchemyError as exc:
        logger.warning("could not record run in %s: %s", registry_url, exc)


def list_runs(registry_url: str, command: Optional[str] = None, limit: int = 20) -> List[RunManifest]:
    session_factory = make_session_factory(registry_url)
    with session_factory() as db:
        records = crud.get_runs(db=db, command=command, limit=limit)
        return [RunManifest.model_validate(r.manifest) for r in records]
