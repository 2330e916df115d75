import os
from functools import lru_cache

from dotenv import load_dotenv
from pydantic import BaseModel

load_dotenv()


class Settings(BaseModel):
    output_root: str = "runs"
    tracing_enabled: bool = False


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    # Environment defaults; CLI flags and --config files override per run
    return Settings(
        output_root=os.getenv("PCG_OUTPUT_ROOT", "runs"),
        tracing_enabled=bool(os.getenv("LANGFUSE_PUBLIC_KEY")),
    )
