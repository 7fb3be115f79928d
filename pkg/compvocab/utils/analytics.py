"""Pipeline events persisted to the events table."""

from __future__ import annotations

import logging
from typing import Any

from sqlalchemy.orm import Session

from compvocab.db.models import Event

logger = logging.getLogger(__name__)


def log_event(
    session: Session,
    event_type: str,
    metadata: dict[str, Any] | None = None,
) -> int:
    """Add an event and flush it; the caller's session_scope commits."""
    event = Event(event_type=event_type, metadata_json=metadata or None)
    session.add(event)
    session.flush()
    logger.debug("Event %d logged: %s %s", event.id, event_type, metadata)
    return event.id
