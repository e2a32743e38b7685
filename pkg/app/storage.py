import contextlib
import hashlib
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Union

import pandas as pd
from pydantic import BaseModel

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def sha256_bytes(data: bytes) -> str:
    return f"sha256:{hashlib.sha256(data).hexdigest()}"


class Storage:
    """File access for every input and output of the pipeline.

    Reads are recorded with the digest of the exact bytes read so that a run
    manifest can list them; writes go to a temporary file in the target
    directory and are renamed into place.
    """

    def __init__(self):
        self._read_log: Dict[str, str] = {}

    def reset(self) -> None:
        self._read_log = {}

    @property
    def read_digests(self) -> Dict[str, str]:
        return dict(self._read_log)

    def read_bytes(self, path: PathLike) -> bytes:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"input file not found: {path}")
        data = path.read_bytes()
        self._read_log[str(path)] = sha256_bytes(data)
        logger.debug(f"Read {len(data)} bytes from {path}")
        return data

    def read_text(self, path: PathLike) -> str:
        return self.read_bytes(path).decode("utf-8")

    def read_frame(self, path: PathLike, **kwargs: Any) -> pd.DataFrame:
        return pd.read_csv(io.StringIO(self.read_text(path)), **kwargs)

    def read_json(self, path: PathLike) -> Any:
        text = self.read_text(path)
        return json.loads(text)

    @contextlib.contextmanager
    def atomic_write(self, path: PathLike, mode: str = "w"):
        """Context manager yielding a handle whose content replaces ``path`` on success"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            if "b" in mode:
                handle = os.fdopen(fd, mode)
            else:
                handle = os.fdopen(fd, mode, encoding="utf-8", newline="")
            with handle:
                yield handle
            os.replace(tmp, path)
        except BaseException:
            with contextlib.suppress(FileNotFoundError):
                os.unlink(tmp)
            raise
        logger.debug(f"Wrote {path}")

    def write_json(self, path: PathLike, payload: Union[BaseModel, Dict[str, Any], List[Any]]) -> Path:
        if isinstance(payload, BaseModel):
            payload = payload.model_dump(mode="json")
        with self.atomic_write(path) as fh:
            fh.write(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False))
            fh.write("\n")
        return Path(path)

    def write_frame(self, path: PathLike, frame: pd.DataFrame) -> Path:
        with self.atomic_write(path) as fh:
            frame.to_csv(fh, index=False, lineterminator="\n", float_format="%.17g")
        return Path(path)


# Global storage instance
store = Storage()
