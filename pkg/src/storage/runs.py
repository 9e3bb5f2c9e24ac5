"""Run directory layout: resolved config, checkpoints and the manifest of produced files"""
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from src.common.config import ExperimentConfig
from src.common.errors import RestoredDepthError
from src.common.logging import get_logger

logger = get_logger(__name__)

STAGE_CHECKPOINTS = {
    "pretrain": "checkpoints/pretrain.ckpt",
    "diffusion": "checkpoints/diffusion.ckpt",
    "avlfe": "checkpoints/avlfe.ckpt",
}
STAGE_DEPENDENCIES = {"diffusion": "pretrain", "avlfe": "diffusion"}


class MissingCheckpointError(RestoredDepthError):
    """Raised when a stage needs the checkpoint of a stage that has not run"""

    def __init__(self, stage: str, path: Path):
        super().__init__(f"missing '{stage}' checkpoint at {path}; run that stage first")
        self.stage = stage
        self.path = path


class RunRepository:
    """Repository for the files of one run directory"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: List[Dict[str, str]] = []

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def path(self, relative: str) -> Path:
        """Absolute path for a file inside the run, creating its parent directory"""
        target = self.root / relative
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def child(self, name: str) -> "RunRepository":
        return RunRepository(self.root / name)

    def save_config(self, config: ExperimentConfig) -> Path:
        """Persist the resolved config next to the outputs"""
        text = json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True)
        self.config_path.write_text(text + "\n", encoding="utf-8")
        return self.config_path

    def checkpoint_path(self, stage: str) -> Path:
        if stage not in STAGE_CHECKPOINTS:
            raise ValueError(f"unknown stage '{stage}'")
        return self.path(STAGE_CHECKPOINTS[stage])

    def require_checkpoint(self, stage: str) -> Path:
        path = self.checkpoint_path(stage)
        if not path.exists():
            raise MissingCheckpointError(stage, path)
        return path

    def latest_checkpoint(self) -> Path:
        """Most advanced stage checkpoint present (avlfe, then diffusion, then pretrain)"""
        for stage in ("avlfe", "diffusion", "pretrain"):
            path = self.root / STAGE_CHECKPOINTS[stage]
            if path.exists():
                return path
        raise MissingCheckpointError("pretrain", self.root / STAGE_CHECKPOINTS["pretrain"])

    def record(self, path: Union[str, Path], kind: str) -> None:
        """Add a produced file to the manifest"""
        relative = Path(path).resolve().relative_to(self.root.resolve()).as_posix()
        entry = {"path": relative, "kind": kind}
        if entry not in self.files:
            self.files.append(entry)

    def write_manifest(self, command: str, result: Optional[Dict[str, Any]] = None) -> Path:
        """
        Write manifest.json listing produced files, merged with any earlier manifest

        Args:
            command: Subcommand that produced the files
            result: Job status dict to store alongside the file list
        """
        manifest = self.load_manifest()
        known = {(f["path"], f["kind"]) for f in manifest.get("files", [])}
        files = manifest.get("files", []) + [
            f for f in self.files if (f["path"], f["kind"]) not in known
        ]
        manifest["files"] = sorted(files, key=lambda f: f["path"])
        manifest.setdefault("runs", []).append(
            {"command": command, "status": (result or {}).get("status", "success")}
        )
        self.manifest_path.write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        logger.info(f"Wrote manifest with {len(manifest['files'])} files to {self.manifest_path}")
        return self.manifest_path

    def load_manifest(self) -> Dict[str, Any]:
        if not self.manifest_path.exists():
            return {}
        return json.loads(self.manifest_path.read_text(encoding="utf-8"))
