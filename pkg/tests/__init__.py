import os

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")
CONF_DIR = os.path.join(DATA_DIR, "conf")
MATRICES_DIR = os.path.join(DATA_DIR, "matrices")
