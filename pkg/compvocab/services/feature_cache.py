"""Content-addressed FeatureSet cache: .npz files indexed in the feature_cache table."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import threading
from pathlib import Path

import numpy as np
from sqlalchemy import select

from compvocab.config import settings
from compvocab.db.models import FeatureCacheEntry
from compvocab.db.session import session_scope
from compvocab.services.features import FeatureSet, GaborBankConfig, extract_features, to_grayscale
from compvocab.utils.analytics import log_event
from compvocab.utils.io import atomic_write

logger = logging.getLogger(__name__)


def cache_key(image: np.ndarray, bank: GaborBankConfig, min_energy: float) -> str:
    arr = np.ascontiguousarray(to_grayscale(image), dtype="<f8")
    h = hashlib.sha256()
    h.update(json.dumps(list(arr.shape)).encode())
    h.update(arr.tobytes())
    config = {**dataclasses.asdict(bank), "min_energy": min_energy}
    h.update(json.dumps(config, sort_keys=True).encode())
    return h.hexdigest()


class FeatureCache:
    """get_or_compute returns cached features when image and config are unchanged."""

    def __init__(
        self,
        cache_dir: str | Path | None = None,
        database_url: str | None = None,
        bank: GaborBankConfig | None = None,
        min_energy: float | None = None,
    ) -> None:
        self.cache_dir = Path(cache_dir or settings.cache_dir)
        self.database_url = database_url or settings.database_url
        self.bank = bank or GaborBankConfig.from_settings()
        self.min_energy = settings.features.min_energy if min_energy is None else min_energy
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.cache_dir / key[:2] / f"{key}.npz"

    def get(self, key: str) -> FeatureSet | None:
        with session_scope(self.database_url) as session:
            entry = session.get(FeatureCacheEntry, key)
            path = Path(entry.path) if entry else None
        if path is None or not path.exists():
            return None
        with np.load(path) as data:
            return FeatureSet(
                data["locations"], data["energies"],
                int(data["width"]), int(data["height"]), int(data["scale_index"]),
            )

    def put(self, key: str, features: FeatureSet, source: str | None = None) -> Path:
        path = self._path(key)
        with atomic_write(path, "wb") as fh:
            np.savez(
                fh,
                locations=features.locations, energies=features.energies,
                width=features.width, height=features.height, scale_index=features.scale_index,
            )
        with session_scope(self.database_url) as session:
            session.merge(FeatureCacheEntry(
                key=key, path=str(path), width=features.width, height=features.height,
                num_features=len(features), source=source,
            ))
        return path

    def get_or_compute(self, image: np.ndarray, source: str | None = None, scale_index: int = 0) -> FeatureSet:
        key = cache_key(image, self.bank, self.min_energy)
        cached = self.get(key)
        if cached is not None:
            with self._lock:
                self.hits += 1
            logger.debug("Feature cache hit: %s", source or key[:12])
            return dataclasses.replace(cached, scale_index=scale_index)
        with self._lock:
            self.misses += 1
        features = extract_features(image, self.bank, self.min_energy, scale_index)
        self.put(key, features, source)
        return features

    def __call__(self, image: np.ndarray) -> FeatureSet:
        return self.get_or_compute(image)

    def record_stats(self, command: str) -> None:
        with session_scope(self.database_url) as session:
            log_event(session, "feature_cache", {"command": command, "hits": self.hits, "misses": self.misses})
        logger.info("Feature cache: %d hits, %d misses", self.hits, self.misses)

    def count(self) -> int:
        with session_scope(self.database_url) as session:
            return len(session.scalars(select(FeatureCacheEntry.key)).all())
