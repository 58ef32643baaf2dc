"""
Storage service for dpnb.

This module handles persistent storage of preprocessed datasets, run
directories, per-cell result caches, result tables and exported similarity
matrices. Text artifacts are written asynchronously with aiofiles.
"""

import json
import logging
from dataclasses import asdict
from io import StringIO
from pathlib import Path
from typing import Any, Dict, List, Optional

import aiofiles
import numpy as np
import pandas as pd

from ..config import RunConfig
from .core import RatingDataset, SimilarityMatrix
from .errors import DatasetError
from .evaluation import EvalReport, EvalRow


logger = logging.getLogger(__name__)

RATINGS_FILE = "ratings.csv"
MANIFEST_FILE = "dataset.json"
FLOAT_FORMAT = "%.10g"


class DatasetManifest:
    """Sidecar describing a cached, preprocessed dataset."""

    def __init__(
        self,
        n_users: int,
        n_items: int,
        r_min: float,
        r_max: float,
        seed: int,
        min_ratings: int,
        tau: Optional[int],
        user_ids: Optional[List[int]] = None,
        item_ids: Optional[List[int]] = None,
        fingerprint: Optional[str] = None,
    ):
        self.n_users = n_users
        self.n_items = n_items
        self.r_min = r_min
        self.r_max = r_max
        self.seed = seed
        self.min_ratings = min_ratings
        self.tau = tau
        self.user_ids = user_ids
        self.item_ids = item_ids
        self.fingerprint = fingerprint

    @classmethod
    def for_dataset(cls, data: RatingDataset, seed: int, min_ratings: int) -> "DatasetManifest":
        return cls(
            n_users=data.n_users,
            n_items=data.n_items,
            r_min=data.rating_scale[0],
            r_max=data.rating_scale[1],
            seed=seed,
            min_ratings=min_ratings,
            tau=data.max_ratings_per_user,
            user_ids=None if data.user_ids is None else [int(u) for u in data.user_ids],
            item_ids=None if data.item_ids is None else [int(i) for i in data.item_ids],
            fingerprint=data.fingerprint(),
        )

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "N": self.n_users,
            "M": self.n_items,
            "r_min": self.r_min,
            "r_max": self.r_max,
            "seed": self.seed,
            "min_ratings": self.min_ratings,
            "tau": self.tau,
            "user_ids": self.user_ids,
            "item_ids": self.item_ids,
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetManifest":
        """Create from dictionary."""
        return cls(
            n_users=data["N"],
            n_items=data["M"],
            r_min=data["r_min"],
            r_max=data["r_max"],
            seed=data.get("seed", 0),
            min_ratings=data.get("min_ratings", 1),
            tau=data.get("tau"),
            user_ids=data.get("user_ids"),
            item_ids=data.get("item_ids"),
            fingerprint=data.get("fingerprint"),
        )


class StorageService:
    """Service for managing run artifacts on disk."""

    def __init__(self, output_dir: Path):
        """Initialize storage service."""
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def run_dir(self, config: RunConfig, prefix: Optional[str] = None) -> Path:
        """``<model or prefix>-<config hash prefix>`` under the output directory."""
        run_dir = self.output_dir / f"{prefix or config.model.name}-{config.config_hash()[:12]}"
        (run_dir / "cells").mkdir(parents=True, exist_ok=True)
        return run_dir

    async def write_text(self, path: Path, text: str) -> Path:
        try:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            async with aiofiles.open(path, "w", encoding="utf-8") as f:
                await f.write(text)
            logger.debug(f"Wrote {path}")
            return path
        except Exception as e:
            logger.error(f"Failed to write {path}: {e}")
            raise

    async def save_json(self, path: Path, payload: Any) -> Path:
        return await self.write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")

    async def load_json(self, path: Path) -> Any:
        async with aiofiles.open(path, "r", encoding="utf-8") as f:
            return json.loads(await f.read())

    async def save_frame(self, path: Path, frame: pd.DataFrame) -> Path:
        buffer = StringIO()
        frame.to_csv(buffer, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        return await self.write_text(path, buffer.getvalue())

    async def save_dataset(
        self, data: RatingDataset, directory: Path, seed: int, min_ratings: int
    ) -> DatasetManifest:
        """Write ``ratings.csv`` (dense indices) and the ``dataset.json`` sidecar."""
        directory = Path(directory)
        manifest = DatasetManifest.for_dataset(data, seed, min_ratings)
        await self.save_frame(directory / RATINGS_FILE, data.to_frame())
        await self.save_json(directory / MANIFEST_FILE, manifest.to_dict())
        logger.info(f"Saved dataset cache with {data.n_ratings} ratings to {directory}")
        return manifest

    async def load_dataset(self, directory: Path) -> RatingDataset:
        """Load a dataset cache written by ``save_dataset``."""
        directory = Path(directory)
        ratings_file = directory / RATINGS_FILE
        manifest_file = directory / MANIFEST_FILE
        for required in (ratings_file, manifest_file):
            if not required.exists():
                raise FileNotFoundError(f"dataset cache file not found: {required}")
        try:
            manifest = DatasetManifest.from_dict(await self.load_json(manifest_file))
            async with aiofiles.open(ratings_file, "r", encoding="utf-8") as f:
                frame = pd.read_csv(StringIO(await f.read()))
        except (KeyError, ValueError) as e:
            raise DatasetError(f"corrupt dataset cache in {directory}: {e}") from e

        missing = {"user", "item", "rating"} - set(frame.columns)
        if missing:
            raise DatasetError(f"{ratings_file} is missing columns {sorted(missing)}")
        data = RatingDataset(
            frame["user"].to_numpy(),
            frame["item"].to_numpy(),
            frame["rating"].to_numpy(dtype=np.float64),
            n_users=manifest.n_users,
            n_items=manifest.n_items,
            rating_scale=(manifest.r_min, manifest.r_max),
            max_ratings_per_user=manifest.tau,
            user_ids=manifest.user_ids,
            item_ids=manifest.item_ids,
        )
        if manifest.fingerprint and data.fingerprint() != manifest.fingerprint:
            logger.warning(f"Dataset cache {directory} does not match its recorded fingerprint")
        logger.info(f"Loaded dataset cache from {directory}: {data}")
        return data

    async def save_cell(self, run_dir: Path, key: str, rows: List[EvalRow]) -> Path:
        return await self.save_json(Path(run_dir) / "cells" / f"{key}.json", [asdict(r) for r in rows])

    async def load_cell(self, run_dir: Path, key: str) -> Optional[List[EvalRow]]:
        """Cached rows of a finished cell, or None if absent or unreadable."""
        cell_file = Path(run_dir) / "cells" / f"{key}.json"
        if not cell_file.exists():
            return None
        try:
            return [EvalRow(**row) for row in await self.load_json(cell_file)]
        except Exception as e:
            logger.warning(f"Ignoring unreadable cell cache {cell_file}: {e}")
            return None

    async def save_report(
        self, report: EvalReport, run_dir: Path, tau: Optional[int] = None, record_timing: bool = True
    ) -> Dict[str, Path]:
        """Write row-level results, aggregates and the per-rating budget table."""
        run_dir = Path(run_dir)
        paths = {
            "results": await self.save_frame(run_dir / "results.csv", report.to_frame(record_timing)),
            "aggregates": await self.save_frame(run_dir / "aggregates.csv", report.aggregates()),
        }
        rating_level = report.rating_level(tau)
        if not rating_level.empty:
            paths["rating_level"] = await self.save_frame(run_dir / "rating_level.csv", rating_level)
        logger.info(f"Saved {len(report.rows)} result rows to {run_dir}")
        return paths

    async def export_similarity(
        self,
        S: SimilarityMatrix,
        path: Path,
        top_n: Optional[int] = None,
        symmetrize: bool = False,
    ) -> Path:
        """Write ``S`` as CSV triples, or as the binary layout for a ``.bin`` path."""
        path = Path(path)
        if symmetrize:
            S = S.symmetrized()
        if path.suffix == ".bin":
            if top_n is not None:
                S = S.truncated(top_n)
            path.parent.mkdir(parents=True, exist_ok=True)
            async with aiofiles.open(path, "wb") as f:
                await f.write(S.to_bytes())
        else:
            await self.save_frame(path, S.to_triples(top_n))
        logger.info(f"Exported {S} to {path}")
        return path

    async def load_similarity(self, path: Path, n_items: Optional[int] = None) -> SimilarityMatrix:
        """Read an exported similarity matrix back in."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"similarity file not found: {path}")
        if path.suffix == ".bin":
            async with aiofiles.open(path, "rb") as f:
                return SimilarityMatrix.from_bytes(await f.read())
        async with aiofiles.open(path, "r", encoding="utf-8") as f:
            frame = pd.read_csv(StringIO(await f.read()))
        if n_items is None:
            n_items = int(max(frame["item_i"].max(), frame["item_j"].max()) + 1) if len(frame) else 0
        return SimilarityMatrix.from_triples(frame, n_items)

