import copy
import os
import yaml
import logging


SECTIONS = ["backend", "drift", "circuit", "regressor", "train", "study"]


def default_config():
    return {
        "LOG_LEVEL": "INFO",
        "THREADS": 1,
        "RECORD_TIMING": False,
        "BACKEND": {
            "median_1q": 2e-4,
            "sigma_1q": 0.6,
            "median_2q": 1e-2,
            "sigma_2q": 0.5,
            "spatial_smoothing": 0.5,
        },
        "DRIFT": {
            "scale_nodes": 1e-4,
            "scale_edges": 1e-2,
        },
        "CIRCUIT": {
            "depth_cap": 64,
            # cx_budget upper bound = budget_factor * |E|
            "budget_factor": 2,
        },
        "REGRESSOR": {
            "hidden": 64,
            "rounds": 1,
            "block_depth": 2,
            "dropout": 0.1,
            "huber_delta_node": 1e-4,
            "huber_delta_edge": 1e-3,
            "edge_head_input": "h0",
        },
        "TRAIN": {
            "max_epochs": 100,
            "patience": 5,
            "val_fraction": 0.2,
            "lr": 1e-3,
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-8,
            "calibrate_node": True,
            "drift_enabled": False,
            "drift_every": 3,
            "retranspile_on_drift": False,
            "reference_epochs": {"node": 22, "edge": 33},
        },
        "STUDY": {
            "backends": 5,
            "qubits": 27,
            "topology": "heavyhex-like",
            "pools": 20,
            "circuits": 100,
            "seeds": [0, 1, 2],
            "pool_counts": [1, 5, 20],
            "backend_counts": [1, 4],
            "top_k": 10,
        },
    }


def load_config(config_path=None):
    # If no path provided, check Env Var, then default to "config.yaml"
    if config_path is None:
        config_path = os.getenv("CONFIG_PATH", "config.yaml")

    # 1. Defaults
    conf = default_config()

    # 2. Load from YAML
    if os.path.exists(config_path):
        try:
            with open(config_path, "r") as f:
                file_conf = yaml.safe_load(f) or {}
                for k in ["log_level", "threads", "record_timing"]:
                    if k in file_conf:
                        conf[k.upper()] = file_conf[k]

                for section in SECTIONS:
                    if section in file_conf and isinstance(file_conf[section], dict):
                        conf[section.upper()].update(copy.deepcopy(file_conf[section]))
            logger.info(f"Loaded configuration from {config_path}")
        except Exception as e:
            logger.warning(f"Failed to load config file at {config_path}: {e}")
    else:
        logger.debug(f"No config file found at {config_path}, using defaults/env vars.")

    # 3. Load Env Vars (Overrides everything)
    conf["LOG_LEVEL"] = os.getenv("LOG_LEVEL", conf["LOG_LEVEL"]).upper()
    conf["THREADS"] = int(os.getenv("THREADS", conf["THREADS"]))

    # YAML gives a bool, the environment gives a string
    timing_val = os.getenv("RECORD_TIMING", conf["RECORD_TIMING"])
    conf["RECORD_TIMING"] = str(timing_val).lower() == "true"

    return conf


logging.basicConfig(
    level=getattr(logging, os.getenv("LOG_LEVEL", "INFO").upper(), logging.INFO),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger("qforensics")

CONFIG = load_config()
logger.setLevel(getattr(logging, CONFIG["LOG_LEVEL"], logging.INFO))
