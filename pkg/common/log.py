import logging

FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(level="INFO"):
    logging.basicConfig(format=FORMAT, level=getattr(logging, str(level).upper(), logging.INFO))
