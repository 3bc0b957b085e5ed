import json
import os
import socket
import subprocess
import time
import urllib.error
import urllib.request
from pathlib import Path

import pytest

import uigr


def tiny_config(work_dir):
    return {
        "corpus": {
            "n_categories": 4,
            "n_attribute_types": 3,
            "n_values_per_type": 3,
            "n_garments": 60,
            "n_outfits": 15,
            "d_feat": 8,
        },
        "model": {"d_feat": 8, "d_model": 8, "classifier_hidden": 8},
        "train": {"epochs": 3, "warmup_epochs": 1, "decay_epochs": [2], "batch_size": 8},
        "service": {"gallery_split": "all", "threads": 2},
        "paths": {"work_dir": str(work_dir)},
    }


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    work = tmp_path_factory.mktemp("uigr")
    cfg = tiny_config(work)
    uigr.gen_corpus(cfg)
    uigr.build_dataset(cfg)
    log = uigr.train(cfg)
    return cfg, log


@pytest.fixture(scope="session")
def schema():
    return json.loads(Path(os.environ["UIGR_SCHEMA"]).read_text())


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture(scope="session")
def server(trained, tmp_path_factory):
    cfg, _ = trained
    path = tmp_path_factory.mktemp("cfg") / "run.json"
    path.write_text(json.dumps(cfg))
    port = free_port()
    proc = subprocess.Popen(
        [os.environ["UIGR_CLI"], "-c", str(path), "--set", f"service.port={port}", "serve"],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.PIPE,
    )
    base = f"http://127.0.0.1:{port}"
    deadline = time.time() + 30
    while True:
        try:
            urllib.request.urlopen(base + "/api/health", timeout=1).read()
            break
        except (urllib.error.URLError, ConnectionError):
            if proc.poll() is not None or time.time() > deadline:
                proc.kill()
                raise RuntimeError("server did not start: " + proc.stderr.read().decode())
            time.sleep(0.1)
    yield base
    proc.terminate()
    proc.wait(timeout=10)
