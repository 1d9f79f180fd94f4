import logging
import sys

from dccrn_kws.settings import settings

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
)
logger = logging.getLogger(__name__)

from dccrn_kws.cli import dispatch  # noqa: E402

if __name__ == "__main__":
    sys.exit(dispatch(sys.argv[1:]))
