import logging

from handlers.config_reader import ConfigReader


conf = ConfigReader().read_config()

_level_name = str(conf.get("logger.level", "info")).upper()
_log_file = conf.get("logger.file", "cbt_run.log")

# Configure logging
logging.basicConfig(
    level=getattr(logging, _level_name, logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.FileHandler(_log_file),
        logging.StreamHandler()
    ]
)
logger = logging.getLogger("cbt")
