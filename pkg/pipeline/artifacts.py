from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Optional, Sequence

from core.config import settings
from core.exceptions import SpecError
from core.models import Manifest, RunConfig
from core.storage import atomic_write_text, sha256_file, sha256_text

logger: logging.Logger = logging.getLogger(__name__)

MANIFEST_NAME: str = "manifest.json"


def to_json(payload: Any) -> str:
    """Stable JSON text: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


class RunArtifacts:
    """
    Output bookkeeping for one command.

    `-o` names either a directory (every file lands inside it, manifest as
    `manifest.json`) or, when it carries a file suffix, the primary output file;
    secondary files and `<stem>.manifest.json` then land beside it.
    """

    def __init__(self, config: RunConfig, resolved: dict[str, Any], primary_name: str) -> None:
        target: Path = Path(config.output)
        if target.suffix:
            self.directory: Path = target.parent
            self.primary_name: str = target.name
            self.manifest_name: str = f"{target.stem}.{MANIFEST_NAME}"
        else:
            self.directory = target
            self.primary_name = primary_name
            self.manifest_name = MANIFEST_NAME
        self.config: RunConfig = config
        self.resolved: dict[str, Any] = resolved
        self.input_hashes: dict[str, str] = {}
        self.output_files: dict[str, str] = {}

    # ── Inputs ─────────────────────────────────────────────────

    def record_input(self, role: str, path: Optional[str], sidecars: Sequence[Path] = ()) -> Optional[Path]:
        if path is None:
            return None
        source: Path = Path(path)
        if not source.is_file():
            raise SpecError("Input file not found", context={"role": role, "path": str(source)})
        self.input_hashes[role] = sha256_file(source)
        for sidecar in sidecars:
            self.input_hashes[f"{role}:{sidecar.name}"] = sha256_file(sidecar)
        return source

    # ── Outputs ────────────────────────────────────────────────

    def path(self, name: Optional[str] = None) -> Path:
        return self.directory / (name or self.primary_name)

    def write_text(self, text: str, name: Optional[str] = None) -> Path:
        target: Path = atomic_write_text(self.path(name), text)
        self.output_files[target.name] = sha256_text(text)
        logger.info("[Artifacts] Wrote %s", target)
        return target

    def write_json(self, payload: Any, name: Optional[str] = None) -> Path:
        return self.write_text(to_json(payload), name)

    def finalize(self) -> Path:
        """Write the manifest last; it carries no timestamps so reruns reproduce it."""
        manifest: Manifest = Manifest(
            tool_version=settings.TOOL_VERSION,
            command=self.config.command,
            resolved_config=self.resolved,
            input_hashes=dict(sorted(self.input_hashes.items())),
            output_files=dict(sorted(self.output_files.items())),
        )
        target: Path = atomic_write_text(self.path(self.manifest_name), to_json(manifest.model_dump(mode="json")))
        logger.info("[Artifacts] Manifest %s (%d outputs)", target, len(self.output_files))
        return target
