from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker
import os

from app.core.config import default_run_root


def database_url(run_root: str = None) -> str:
    # Puxa a URL do ambiente; sem ela, um SQLite dentro da raiz de execuções
    url = os.getenv("STMT_DATABASE_URL")
    if url:
        return url
    root = os.path.abspath(run_root or default_run_root())
    os.makedirs(root, exist_ok=True)
    return f"sqlite:///{os.path.join(root, 'registry.db')}"


Base = declarative_base()

_engines = {}


def get_engine(url: str = None):
    url = url or database_url()
    if url not in _engines:
        connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
        _engines[url] = create_engine(url, connect_args=connect_args)
        Base.metadata.create_all(bind=_engines[url])
    return _engines[url]


def SessionLocal(url: str = None):
    return sessionmaker(autocommit=False, autoflush=False, bind=get_engine(url))()


# Dependency para os subcomandos e o worker
def get_db(url: str = None):
    db = SessionLocal(url)
    try:
        yield db
    finally:
        db.close()
