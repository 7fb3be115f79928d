import datetime as dt
from typing import Optional

from sqlalchemy import JSON, DateTime, Integer, String, func
from sqlalchemy.orm import Mapped, mapped_column

from compvocab.db.base import Base


# ── Feature cache index ───────────────────────────────────────────────────────

class FeatureCacheEntry(Base):
    """One extracted FeatureSet stored as an .npz file under the cache dir."""
    __tablename__ = "feature_cache"

    key: Mapped[str] = mapped_column(String(64), primary_key=True)  # sha256 hex
    path: Mapped[str] = mapped_column(String(512))
    width: Mapped[int] = mapped_column(Integer)
    height: Mapped[int] = mapped_column(Integer)
    num_features: Mapped[int] = mapped_column(Integer)
    source: Mapped[Optional[str]] = mapped_column(String(512), nullable=True)
    created_at: Mapped[dt.datetime] = mapped_column(
        DateTime(timezone=True), server_default=func.now()
    )


# ── Pipeline events ───────────────────────────────────────────────────────────

class Event(Base):
    __tablename__ = "events"

    id: Mapped[int] = mapped_column(primary_key=True)
    event_type: Mapped[str] = mapped_column(String(50), index=True)
    metadata_json: Mapped[Optional[dict]] = mapped_column(JSON, nullable=True)
    created_at: Mapped[dt.datetime] = mapped_column(
        DateTime(timezone=True), server_default=func.now()
    )
