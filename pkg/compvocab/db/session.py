from __future__ import annotations

from collections.abc import Iterator
from contextlib import contextmanager
from functools import lru_cache
from pathlib import Path

from sqlalchemy import Engine, create_engine
from sqlalchemy.engine import make_url
from sqlalchemy.orm import Session, sessionmaker

from compvocab.config import settings
from compvocab.db.base import Base


@lru_cache(maxsize=None)
def get_engine(database_url: str | None = None) -> Engine:
    url = make_url(database_url or settings.database_url)
    if url.get_backend_name() == "sqlite" and url.database not in (None, "", ":memory:"):
        Path(url.database).parent.mkdir(parents=True, exist_ok=True)
    engine = create_engine(url, echo=False)
    Base.metadata.create_all(engine)
    return engine


def get_sessionmaker(database_url: str | None = None) -> sessionmaker[Session]:
    # engines are cached per resolved url, so a changed setting gets its own
    return sessionmaker(get_engine(database_url or settings.database_url), expire_on_commit=False)


@contextmanager
def session_scope(database_url: str | None = None) -> Iterator[Session]:
    session = get_sessionmaker(database_url)()
    try:
        yield session
        session.commit()
    except Exception:
        session.rollback()
        raise
    finally:
        session.close()
