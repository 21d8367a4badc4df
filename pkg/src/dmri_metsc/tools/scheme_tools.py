"""Acquisition scheme MCP tools."""

import json
from collections import Counter

from dmri_metsc.data_io import load_scheme
from dmri_metsc.errors import MetscError


async def handle_describe_scheme(arguments: dict) -> str:
    """Handle describe_scheme tool call."""
    bval_path = arguments.get("bval_path")
    bvec_path = arguments.get("bvec_path")

    if not bval_path:
        raise ValueError("bval_path is required")

    if not bvec_path:
        raise ValueError("bvec_path is required")

    try:
        scheme = load_scheme(bval_path, bvec_path)
        shell_idx = scheme.shell_index()
        counts = Counter(int(k) for k in shell_idx)

        response = {
            "success": True,
            "data": {
                "n_measurements": scheme.n_measurements,
                "n_b0": int(scheme.b0_mask.sum()),
                "shells": [
                    {"bvalue": b, "directions": counts.get(k, 0)} for k, b in enumerate(scheme.shells())
                ],
                "bvalues": sorted(set(float(b) for b in scheme.bvalues)),
                "hash": scheme.scheme_hash(),
            },
        }

        return json.dumps(response, indent=2)

    except (MetscError, ValueError, OSError) as e:
        response = {
            "success": False,
            "error": type(e).__name__,
            "message": str(e),
        }
        return json.dumps(response, indent=2)
