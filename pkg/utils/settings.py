import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

DEFAULT_THREADS = int(os.getenv("UPREC_THREADS", "1"))
SHOW_PROGRESS = os.getenv("UPREC_PROGRESS", "1") != "0"

# Special token indices shared by every item vocabulary
PAD, MASK, CLS, SEP = 0, 1, 2, 3
NUM_SPECIAL_TOKENS = 4

# Reviews dated before 2019-01-01 are dropped from YELP by default
YELP_CUTOFF = 1546300800
