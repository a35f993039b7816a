import os
from dotenv import load_dotenv

load_dotenv()

CSD_OUTPUT_ROOT: str = os.getenv("CSD_OUTPUT_ROOT", "./runs")
CSD_CONFIG_DIR: str = os.getenv("CSD_CONFIG_DIR", "./configs")
CSD_THREADS: int = int(os.getenv("CSD_THREADS", "1"))
CSD_DEBUG: bool = os.getenv("CSD_DEBUG", "false").lower() == "true"

# Progress bars are noise in CI logs
CSD_PROGRESS: bool = os.getenv("CSD_PROGRESS", "true").lower() == "true"
