import os

import numpy as np
import pytest

from graphtopics.graph_data import load_content_cites


def cora_paths():
    """Locate cora.content / cora.cites under $GRAPHTOPICS_DATA or ./data."""
    roots = []
    if os.environ.get("GRAPHTOPICS_DATA"):
        roots.append(os.environ["GRAPHTOPICS_DATA"])
    roots += ["data", os.path.join(os.path.dirname(__file__), "..", "data")]
    for root in roots:
        content = os.path.join(root, "cora", "cora.content")
        cites = os.path.join(root, "cora", "cora.cites")
        if os.path.exists(content) and os.path.exists(cites):
            return content, cites
    return None


def require_cora():
    paths = cora_paths()
    if paths is None:
        pytest.skip(
            "Cora files not found: place cora.content and cora.cites under "
            "$GRAPHTOPICS_DATA/cora or ./data/cora (download is the user's "
            "responsibility; see README)"
        )
    return paths


@pytest.fixture(scope="session")
def cora_dataset():
    content, cites = require_cora()
    x, labels, graph, _ = load_content_cites(content, cites)
    return x, labels, graph
