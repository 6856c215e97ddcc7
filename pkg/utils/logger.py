import logging
import os
import sys

from dotenv import load_dotenv

load_dotenv()

# Configure logger
logging.basicConfig(
    level=os.getenv("UPREC_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s - [%(levelname)s] - %(message)s",
    handlers=[
        logging.StreamHandler(sys.stderr)
    ]
)

logger = logging.getLogger("uprec")
