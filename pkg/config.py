import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    # External text generation (profiles / ground-truth distillation)
    TEXTGEN_URL = os.getenv("EXPLAINREC_TEXTGEN_URL", "http://127.0.0.1:8080")
    TEXTGEN_TOKEN_ENV = os.getenv("EXPLAINREC_TEXTGEN_TOKEN_ENV", "EXPLAINREC_TEXTGEN_TOKEN")
    TEXTGEN_MODEL = os.getenv("EXPLAINREC_TEXTGEN_MODEL", "gpt-3.5-turbo")
    TEXTGEN_TIMEOUT = float(os.getenv("EXPLAINREC_TEXTGEN_TIMEOUT", 30))

    # Runs
    OUTPUT_DIR = os.getenv("EXPLAINREC_OUTPUT_DIR", "./runs")
    LOG_LEVEL = os.getenv("EXPLAINREC_LOG_LEVEL", "INFO")

    @classmethod
    def textgen_token(cls):
        return os.getenv(cls.TEXTGEN_TOKEN_ENV)
