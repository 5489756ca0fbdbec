import os
from dotenv import load_dotenv

load_dotenv()

# Get the base directory of the project
basedir = os.path.abspath(os.path.dirname(__file__))


class Config:
    OUTPUT_DIR = os.getenv("SIF_OUTPUT_DIR", os.path.join(basedir, "runs"))
    LOG_LEVEL = os.getenv("SIF_LOG_LEVEL", "INFO")
    THREADS = int(os.getenv("SIF_THREADS", "1"))
    TORCH_THREADS = int(os.getenv("SIF_TORCH_THREADS", "0"))
    # Largest model train_target accepts
    PARAM_CAP = int(os.getenv("SIF_PARAM_CAP", "100000"))
    # Largest model for which a dense Hessian may be built
    ORACLE_CAP = int(os.getenv("SIF_ORACLE_CAP", "2000"))
    PROGRESS_EVERY = int(os.getenv("SIF_PROGRESS_EVERY", "100"))
